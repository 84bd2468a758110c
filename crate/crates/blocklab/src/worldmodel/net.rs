//! Network building blocks expressed as tape operations.

use super::params::BoundParams;
use super::ModelConfig;
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::scenegen::Frame;

const LEAKY_SLOPE: f64 = 0.01;

fn lrelu<F: Scalar>(tape: &mut Tape<F>, x: Var) -> Var {
    tape.leaky_relu(x, F::from_f64(LEAKY_SLOPE))
}

/// Pre-activation residual block: x + conv3(lrelu(conv3(lrelu(x)))).
fn residual<F: Scalar>(tape: &mut Tape<F>, pv: &BoundParams, prefix: &str, x: Var) -> Var {
    let a = lrelu(tape, x);
    let c0 = tape.conv2d(pv.var(&format!("{prefix}.c0.w")), a, pv.var(&format!("{prefix}.c0.b")), 1, 1);
    let a1 = lrelu(tape, c0);
    let c1 = tape.conv2d(pv.var(&format!("{prefix}.c1.w")), a1, pv.var(&format!("{prefix}.c1.b")), 1, 1);
    tape.add(x, c1)
}

/// Encoder: frame [3,H,W] -> embedding [4 * channels].
pub fn encoder<F: Scalar>(tape: &mut Tape<F>, pv: &BoundParams, cfg: &ModelConfig, frame: Var) -> Var {
    let mut x = tape.conv2d(pv.var("enc.in.w"), frame, pv.var("enc.in.b"), 2, 2);
    x = lrelu(tape, x);
    x = residual(tape, pv, "enc.s0.r0", x);
    x = residual(tape, pv, "enc.s0.r1", x);
    for i in 1..cfg.n_stages() {
        if i % 2 == 1 {
            x = tape.conv2d(pv.var(&format!("enc.s{i}.proj.w")), x, pv.var(&format!("enc.s{i}.proj.b")), 1, 0);
        }
        x = tape.avg_pool2(x);
        x = residual(tape, pv, &format!("enc.s{i}.r0"), x);
        x = residual(tape, pv, &format!("enc.s{i}.r1"), x);
    }
    tape.reshape(x, &[cfg.embed_dim()])
}

/// Decoder: (h, s) -> frame mean [3,H,W].
pub fn decoder<F: Scalar>(tape: &mut Tape<F>, pv: &BoundParams, cfg: &ModelConfig, h: Var, s: Var) -> Var {
    let hs = tape.concat2(h, s);
    let fc = tape.linear(pv.var("dec.fc.w"), hs, pv.var("dec.fc.b"));
    let fc = lrelu(tape, fc);
    let mut x = tape.reshape(fc, &[cfg.channels, 2, 2]);
    for j in 0..cfg.n_stages() {
        x = residual(tape, pv, &format!("dec.s{j}.r0"), x);
        x = residual(tape, pv, &format!("dec.s{j}.r1"), x);
        if j % 2 == 1 {
            x = tape.conv2d(pv.var(&format!("dec.s{j}.proj.w")), x, pv.var(&format!("dec.s{j}.proj.b")), 1, 0);
        }
        x = tape.upsample2(x);
    }
    let x = lrelu(tape, x);
    tape.conv2d(pv.var("dec.out.w"), x, pv.var("dec.out.b"), 1, 2)
}

/// Gated recurrent update; returns (h_t, update gate, reset gate).
pub fn gru_step<F: Scalar>(
    tape: &mut Tape<F>,
    pv: &BoundParams,
    h_prev: Var,
    s_prev: Var,
) -> (Var, Var, Var) {
    let proj = tape.linear(pv.var("gru.in.w"), s_prev, pv.var("gru.in.b"));
    let x = lrelu(tape, proj);

    let z_pre = tape.affine2(pv.var("gru.z.wx"), x, pv.var("gru.z.wh"), h_prev, pv.var("gru.z.b"));
    let z = tape.sigmoid(z_pre);
    let r_pre = tape.affine2(pv.var("gru.r.wx"), x, pv.var("gru.r.wh"), h_prev, pv.var("gru.r.b"));
    let r = tape.sigmoid(r_pre);

    let nh = tape.linear(pv.var("gru.n.wh"), h_prev, pv.var("gru.n.bh"));
    let gated = tape.mul(r, nh);
    let nx = tape.linear(pv.var("gru.n.wx"), x, pv.var("gru.n.bx"));
    let n_pre = tape.add(nx, gated);
    let n = tape.tanh(n_pre);

    // h_t = z .* h_prev + (1 - z) .* n
    let h = tape.lerp(z, h_prev, n);
    (h, z, r)
}

/// Belief head `prefix` in {"prior", "post"}: input -> (mean, stddev) with
/// stddev = softplus(raw) + floor.
pub fn belief_head<F: Scalar>(
    tape: &mut Tape<F>,
    pv: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    input: Var,
) -> (Var, Var) {
    let h1 = tape.linear(pv.var(&format!("{prefix}.h1.w")), input, pv.var(&format!("{prefix}.h1.b")));
    let h1 = lrelu(tape, h1);
    let out = tape.linear(pv.var(&format!("{prefix}.out.w")), h1, pv.var(&format!("{prefix}.out.b")));
    let mean = tape.slice(out, 0, cfg.d_s);
    let raw = tape.slice(out, cfg.d_s, cfg.d_s);
    let std = tape.softplus_floor(raw, F::from_f64(cfg.min_stddev));
    (mean, std)
}

/// Frame (H,W,C interleaved) to a [3,H,W] tensor.
pub fn frame_to_chw<F: Scalar>(frame: &Frame) -> Tensor<F> {
    let (h, w) = (frame.height, frame.width);
    let mut data = vec![F::zero(); 3 * h * w];
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                data[c * h * w + i * w + j] = F::from_f64(frame.data[(i * w + j) * 3 + c] as f64);
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// [3,H,W] tensor (reconstruction mean) to a clamped frame.
pub fn tensor_to_frame<F: Scalar>(t: &Tensor<F>) -> Frame {
    let shape = t.shape();
    assert_eq!(shape.len(), 3);
    let (h, w) = (shape[1], shape[2]);
    let mut frame = Frame::filled(h, w, [0.0; 3]);
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                let v = t.data()[c * h * w + i * w + j].to_f64() as f32;
                frame.data[(i * w + j) * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    frame
}
