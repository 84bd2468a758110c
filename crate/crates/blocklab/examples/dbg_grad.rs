use blocklab::rng;
use blocklab::scenegen::Frame;
use blocklab::worldmodel::*;

fn random_frame(seed: u64, hw: usize) -> Frame {
    let mut stream = rng::stream(seed, &[77]);
    let mut f = Frame::filled(hw, hw, [0.0; 3]);
    for v in f.data.iter_mut() {
        *v = rng::uniform(&mut stream, 0.0, 1.0) as f32;
    }
    f
}

fn main() {
    let cfg = ModelConfig { d_s: 2, d_h: 4, img_hw: 4, channels: 3, head_hidden: 4, min_stddev: 1e-3, param_seed: 21 };
    let mut params: Parameters<f64> = Parameters::init(&cfg);
    let mut jitter = rng::stream(4141, &[2]);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng::uniform(&mut jitter, -0.05, 0.05);
        }
    }
    let frames = vec![random_frame(31, 4), random_frame(32, 4), random_frame(33, 4)];
    let seed = 17;
    let (_, grads) = elbo_grads(&cfg, &params, &frames, seed).unwrap();
    let names: Vec<String> = params.names().cloned().collect();
    let gscale = grads.values().flat_map(|t| t.data().iter()).fold(0.0f64, |m, &x| m.max(x.abs()));
    println!("grad scale {gscale:.4}");
    for name in &names {
        let n = params.get(name).len();
        let mut worst = 0.0f64;
        let mut worst_pair = (0.0, 0.0);
        for idx in 0..n {
            let eps = 1e-5;
            let mut p = params.clone();
            p.get_mut(name).data_mut()[idx] += eps;
            let hi = elbo_loss(&cfg, &p, &frames, seed).unwrap().loss;
            p.get_mut(name).data_mut()[idx] -= 2.0 * eps;
            let lo = elbo_loss(&cfg, &p, &frames, seed).unwrap().loss;
            let fd = (hi - lo) / (2.0 * eps);
            let an = grads[name].data()[idx];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3 * gscale);
            if rel > worst { worst = rel; worst_pair = (an, fd); }
        }
        if worst > 5e-4 {
            println!("{name:24} worst rel {worst:.3e}  an {:.6} fd {:.6}", worst_pair.0, worst_pair.1);
        }
    }
}
