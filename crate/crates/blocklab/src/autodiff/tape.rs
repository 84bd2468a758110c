//! The recording tape and its operations.

use super::{sigmoid, softplus, Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    LeakyRelu(usize, F),
    Sigmoid(usize),
    Tanh(usize),
    /// softplus(x) + floor
    SoftplusFloor(usize, F),
    /// W[out,in] * x[in] + b[out]
    Linear { w: usize, x: usize, b: usize },
    /// Wx[out,in1] * x[in1] + Wh[out,in2] * h[in2] + b[out]
    Affine2 { wx: usize, x: usize, wh: usize, h: usize, b: usize },
    /// gate .* a + (1 - gate) .* b
    Lerp { gate: usize, a: usize, b: usize },
    Conv2d { w: usize, x: usize, b: usize, stride: usize, pad: usize },
    AvgPool2(usize),
    Upsample2(usize),
    Reshape(usize),
    Concat2(usize, usize),
    Slice { x: usize, start: usize },
    /// mean + std .* noise (reparameterized draw; noise is constant)
    Sample { mean: usize, std: usize, noise: Tensor<F> },
    /// 0.5 * sum((mean - target)^2) + 0.5 * N * ln(2*pi), a scalar
    GaussNll { mean: usize, target: Tensor<F> },
    /// Diagonal-Gaussian KL(q || p), a scalar
    KlDiag { mq: usize, sq: usize, mp: usize, sp: usize },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records a forward pass; `backward` fills per-node gradients.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    /// Gradient of the loss w.r.t. `var`; zeros if the var was never touched.
    pub fn take(&mut self, var: Var, shape: &[usize]) -> Tensor<F> {
        self.grads[var.0].take().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(1024) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Inserts a leaf. Parameters want `needs_grad = true`; inputs and noise
    /// do not.
    pub fn leaf(&mut self, value: Tensor<F>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_vec(va.shape(), data);
        let needs = self.ng(a.0) || self.ng(b.0);
        self.push(t, Op::Add(a.0, b.0), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::from_vec(va.shape(), data);
        let needs = self.ng(a.0) || self.ng(b.0);
        self.push(t, Op::Sub(a.0, b.0), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_vec(va.shape(), data);
        let needs = self.ng(a.0) || self.ng(b.0);
        self.push(t, Op::Mul(a.0, b.0), needs)
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let va = &self.nodes[a.0].value;
        let t = va.map(|x| x * k);
        let needs = self.ng(a.0);
        self.push(t, Op::Scale(a.0, k), needs)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        let va = &self.nodes[a.0].value;
        let t = va.map(|x| if x > F::zero() { x } else { x * slope });
        let needs = self.ng(a.0);
        self.push(t, Op::LeakyRelu(a.0, slope), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(sigmoid);
        let needs = self.ng(a.0);
        self.push(t, Op::Sigmoid(a.0), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| x.tanh());
        let needs = self.ng(a.0);
        self.push(t, Op::Tanh(a.0), needs)
    }

    pub fn softplus_floor(&mut self, a: Var, floor: F) -> Var {
        let t = self.nodes[a.0].value.map(|x| softplus(x) + floor);
        let needs = self.ng(a.0);
        self.push(t, Op::SoftplusFloor(a.0, floor), needs)
    }

    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Var {
        let (vw, vx, vb) = (&self.nodes[w.0].value, &self.nodes[x.0].value, &self.nodes[b.0].value);
        assert_eq!(vw.shape().len(), 2, "linear weight must be 2-D");
        let (out, inp) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(vx.len(), inp, "linear input length mismatch");
        assert_eq!(vb.len(), out, "linear bias length mismatch");
        let mut y = vb.data().to_vec();
        matvec_acc(vw.data(), vx.data(), &mut y, out, inp);
        let needs = self.ng(w.0) || self.ng(x.0) || self.ng(b.0);
        self.push(Tensor::from_vec(&[out], y), Op::Linear { w: w.0, x: x.0, b: b.0 }, needs)
    }

    pub fn affine2(&mut self, wx: Var, x: Var, wh: Var, h: Var, b: Var) -> Var {
        let vwx = &self.nodes[wx.0].value;
        let vx = &self.nodes[x.0].value;
        let vwh = &self.nodes[wh.0].value;
        let vh = &self.nodes[h.0].value;
        let vb = &self.nodes[b.0].value;
        let out = vwx.shape()[0];
        assert_eq!(vwh.shape()[0], out);
        assert_eq!(vwx.shape()[1], vx.len());
        assert_eq!(vwh.shape()[1], vh.len());
        assert_eq!(vb.len(), out);
        let mut y = vb.data().to_vec();
        matvec_acc(vwx.data(), vx.data(), &mut y, out, vx.len());
        matvec_acc(vwh.data(), vh.data(), &mut y, out, vh.len());
        let needs = [wx.0, x.0, wh.0, h.0, b.0].iter().any(|&i| self.ng(i));
        self.push(
            Tensor::from_vec(&[out], y),
            Op::Affine2 { wx: wx.0, x: x.0, wh: wh.0, h: h.0, b: b.0 },
            needs,
        )
    }

    pub fn lerp(&mut self, gate: Var, a: Var, b: Var) -> Var {
        let vg = &self.nodes[gate.0].value;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(vg.shape(), va.shape());
        assert_eq!(vg.shape(), vb.shape());
        let one = F::one();
        let data = vg
            .data()
            .iter()
            .zip(va.data().iter().zip(vb.data()))
            .map(|(&g, (&x, &y))| g * x + (one - g) * y)
            .collect();
        let needs = [gate.0, a.0, b.0].iter().any(|&i| self.ng(i));
        self.push(Tensor::from_vec(vg.shape(), data), Op::Lerp { gate: gate.0, a: a.0, b: b.0 }, needs)
    }

    /// 2-D convolution of x [Cin,H,W] with w [Cout,Cin,kh,kw] and bias [Cout].
    pub fn conv2d(&mut self, w: Var, x: Var, b: Var, stride: usize, pad: usize) -> Var {
        let vw = &self.nodes[w.0].value;
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[b.0].value;
        let y = conv2d_forward(vw, vx, vb, stride, pad);
        let needs = [w.0, x.0, b.0].iter().any(|&i| self.ng(i));
        self.push(y, Op::Conv2d { w: w.0, x: x.0, b: b.0, stride, pad }, needs)
    }

    /// 2x2 average pooling of x [C,H,W]; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let (c, h, w) = dims3(vx);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let quarter = F::from_f64(0.25);
        let mut out = Tensor::zeros(&[c, ho, wo]);
        {
            let xd = vx.data();
            let od = out.data_mut();
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let base = ci * h * w + 2 * i * w + 2 * j;
                        let s = xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1];
                        od[ci * ho * wo + i * wo + j] = s * quarter;
                    }
                }
            }
        }
        let needs = self.ng(x.0);
        self.push(out, Op::AvgPool2(x.0), needs)
    }

    /// 2x nearest-neighbor upsampling of x [C,H,W].
    pub fn upsample2(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let (c, h, w) = dims3(vx);
        let (ho, wo) = (h * 2, w * 2);
        let mut out = Tensor::zeros(&[c, ho, wo]);
        {
            let xd = vx.data();
            let od = out.data_mut();
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = xd[ci * h * w + i * w + j];
                        let base = ci * ho * wo + 2 * i * wo + 2 * j;
                        od[base] = v;
                        od[base + 1] = v;
                        od[base + wo] = v;
                        od[base + wo + 1] = v;
                    }
                }
            }
        }
        let needs = self.ng(x.0);
        self.push(out, Op::Upsample2(x.0), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.nodes[x.0].value.reshaped(shape);
        let needs = self.ng(x.0);
        self.push(t, Op::Reshape(x.0), needs)
    }

    /// Contiguous slice of a 1-D vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        assert!(start + len <= vx.len(), "slice out of range");
        let data = vx.data()[start..start + len].to_vec();
        let needs = self.ng(x.0);
        self.push(Tensor::from_vec(&[len], data), Op::Slice { x: x.0, start }, needs)
    }

    /// Concatenation of two 1-D vectors.
    pub fn concat2(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let n = data.len();
        let needs = self.ng(a.0) || self.ng(b.0);
        self.push(Tensor::from_vec(&[n], data), Op::Concat2(a.0, b.0), needs)
    }

    /// Reparameterized Gaussian draw: mean + std .* noise.
    pub fn sample(&mut self, mean: Var, std: Var, noise: Tensor<F>) -> Var {
        let vm = &self.nodes[mean.0].value;
        let vs = &self.nodes[std.0].value;
        assert_eq!(vm.shape(), vs.shape());
        assert_eq!(vm.len(), noise.len());
        let data = vm
            .data()
            .iter()
            .zip(vs.data().iter().zip(noise.data()))
            .map(|(&m, (&s, &e))| m + s * e)
            .collect();
        let t = Tensor::from_vec(vm.shape(), data);
        let needs = self.ng(mean.0) || self.ng(std.0);
        self.push(t, Op::Sample { mean: mean.0, std: std.0, noise }, needs)
    }

    /// Negative log-likelihood of `target` under a unit-variance Gaussian
    /// centered on `mean`, summed over all elements, constants included.
    pub fn gauss_nll(&mut self, mean: Var, target: Tensor<F>) -> Var {
        let vm = &self.nodes[mean.0].value;
        assert_eq!(vm.len(), target.len(), "gauss_nll target length mismatch");
        let half = F::from_f64(0.5);
        let sq: F = vm
            .data()
            .iter()
            .zip(target.data())
            .map(|(&m, &t)| {
                let d = m - t;
                d * d
            })
            .sum();
        let ln_2pi = F::from_f64(std::f64::consts::TAU.ln());
        let n = F::from_f64(vm.len() as f64);
        let value = half * sq + half * n * ln_2pi;
        let needs = self.ng(mean.0);
        self.push(Tensor::scalar(value), Op::GaussNll { mean: mean.0, target }, needs)
    }

    /// KL(q || p) for diagonal Gaussians, summed over dimensions (nats).
    ///
    /// The value uses an algebraically nonnegative regrouping so tiny
    /// negatives cannot appear from cancellation; gradients use the standard
    /// closed form.
    pub fn kl_diag(&mut self, mq: Var, sq: Var, mp: Var, sp: Var) -> Var {
        let vmq = &self.nodes[mq.0].value;
        let vsq = &self.nodes[sq.0].value;
        let vmp = &self.nodes[mp.0].value;
        let vsp = &self.nodes[sp.0].value;
        assert_eq!(vmq.shape(), vsq.shape());
        assert_eq!(vmq.shape(), vmp.shape());
        assert_eq!(vmq.shape(), vsp.shape());
        let value = kl_diag_value(vmq.data(), vsq.data(), vmp.data(), vsp.data());
        let needs = [mq.0, sq.0, mp.0, sp.0].iter().any(|&i| self.ng(i));
        self.push(Tensor::scalar(value), Op::KlDiag { mq: mq.0, sq: sq.0, mp: mp.0, sp: sp.0 }, needs)
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            // Only leaf gradients are read back; free interior buffers early.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Grads { grads }
    }

    fn accumulate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let one = F::one();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_into(grads, *a, |ga| add_assign(ga, g.data()));
                self.acc_into(grads, *b, |gb| add_assign(gb, g.data()));
            }
            Op::Sub(a, b) => {
                self.acc_into(grads, *a, |ga| add_assign(ga, g.data()));
                self.acc_into(grads, *b, |gb| sub_assign(gb, g.data()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.acc_into(grads, *a, |ga| mul_add_assign(ga, g.data(), vb));
                self.acc_into(grads, *b, |gb| mul_add_assign(gb, g.data(), va));
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.acc_into(grads, *a, |ga| {
                    for (o, &gi) in ga.iter_mut().zip(g.data()) {
                        *o = *o + gi * k;
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let (va, slope) = (self.nodes[*a].value.data(), *slope);
                self.acc_into(grads, *a, |ga| {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g.data()).zip(va) {
                        *o = *o + gi * if x > F::zero() { one } else { slope };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let vy = self.nodes[i].value.data();
                self.acc_into(grads, *a, |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g.data()).zip(vy) {
                        *o = *o + gi * y * (one - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let vy = self.nodes[i].value.data();
                self.acc_into(grads, *a, |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g.data()).zip(vy) {
                        *o = *o + gi * (one - y * y);
                    }
                });
            }
            Op::SoftplusFloor(a, _) => {
                let vx = self.nodes[*a].value.data();
                self.acc_into(grads, *a, |ga| {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g.data()).zip(vx) {
                        *o = *o + gi * sigmoid(x);
                    }
                });
            }
            Op::Linear { w, x, b } => {
                let vw = &self.nodes[*w].value;
                let vx = &self.nodes[*x].value;
                let (out, inp) = (vw.shape()[0], vw.shape()[1]);
                self.acc_into(grads, *w, |gw| outer_add_assign(gw, g.data(), vx.data(), out, inp));
                self.acc_into(grads, *x, |gx| matvec_t_acc(vw.data(), g.data(), gx, out, inp));
                self.acc_into(grads, *b, |gb| add_assign(gb, g.data()));
            }
            Op::Affine2 { wx, x, wh, h, b } => {
                let vwx = &self.nodes[*wx].value;
                let vx = &self.nodes[*x].value;
                let vwh = &self.nodes[*wh].value;
                let vh = &self.nodes[*h].value;
                let out = vwx.shape()[0];
                self.acc_into(grads, *wx, |gw| outer_add_assign(gw, g.data(), vx.data(), out, vx.len()));
                self.acc_into(grads, *x, |gx| matvec_t_acc(vwx.data(), g.data(), gx, out, vx.len()));
                self.acc_into(grads, *wh, |gw| outer_add_assign(gw, g.data(), vh.data(), out, vh.len()));
                self.acc_into(grads, *h, |gh| matvec_t_acc(vwh.data(), g.data(), gh, out, vh.len()));
                self.acc_into(grads, *b, |gb| add_assign(gb, g.data()));
            }
            Op::Lerp { gate, a, b } => {
                let vg = self.nodes[*gate].value.data();
                let va = self.nodes[*a].value.data();
                let vb = self.nodes[*b].value.data();
                self.acc_into(grads, *gate, |gg| {
                    for (k, o) in gg.iter_mut().enumerate() {
                        *o = *o + g.data()[k] * (va[k] - vb[k]);
                    }
                });
                self.acc_into(grads, *a, |ga| mul_add_assign(ga, g.data(), vg));
                self.acc_into(grads, *b, |gb| {
                    for (k, o) in gb.iter_mut().enumerate() {
                        *o = *o + g.data()[k] * (one - vg[k]);
                    }
                });
            }
            Op::Conv2d { w, x, b, stride, pad } => {
                let vw = &self.nodes[*w].value;
                let vx = &self.nodes[*x].value;
                let (stride, pad) = (*stride, *pad);
                let ws = vw.shape();
                let (cout, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (c, h, wd) = dims3(vx);
                let ho = conv_out_dim(h, kh, stride, pad);
                let wo = conv_out_dim(wd, kw, stride, pad);
                let n = ho * wo;
                let k = cin * kh * kw;

                self.acc_into(grads, *b, |gb| {
                    for co in 0..cout {
                        let mut acc = F::zero();
                        for &v in &g.data()[co * n..(co + 1) * n] {
                            acc = acc + v;
                        }
                        gb[co] = gb[co] + acc;
                    }
                });
                if self.nodes[*w].needs_grad {
                    // dW[cout,k] += gY[cout,n] * cols[k,n]^T
                    let (cols, _, _) = im2col(vx, kh, kw, stride, pad);
                    self.acc_into(grads, *w, |gw| {
                        F::gemm(
                            cout, n, k,
                            F::one(),
                            g.data(), n as isize, 1,
                            &cols, 1, n as isize,
                            F::one(),
                            gw, k as isize, 1,
                        );
                    });
                }
                if self.nodes[*x].needs_grad {
                    // dcols[k,n] = W^T[k,cout] * gY[cout,n]
                    let mut dcols = vec![F::zero(); k * n];
                    F::gemm(
                        k, cout, n,
                        F::one(),
                        vw.data(), 1, k as isize,
                        g.data(), n as isize, 1,
                        F::zero(),
                        &mut dcols, n as isize, 1,
                    );
                    self.acc_into(grads, *x, |gx| {
                        col2im_add(&dcols, gx, c, h, wd, kh, kw, stride, pad);
                    });
                }
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = dims3(&self.nodes[*x].value);
                let quarter = F::from_f64(0.25);
                let (ho, wo) = (h / 2, w / 2);
                self.acc_into(grads, *x, |gx| {
                    for ci in 0..c {
                        for ii in 0..ho {
                            for jj in 0..wo {
                                let gi = g.data()[ci * ho * wo + ii * wo + jj] * quarter;
                                let base = ci * h * w + 2 * ii * w + 2 * jj;
                                gx[base] = gx[base] + gi;
                                gx[base + 1] = gx[base + 1] + gi;
                                gx[base + w] = gx[base + w] + gi;
                                gx[base + w + 1] = gx[base + w + 1] + gi;
                            }
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let (c, h, w) = dims3(&self.nodes[*x].value);
                let (ho, wo) = (h * 2, w * 2);
                self.acc_into(grads, *x, |gx| {
                    for ci in 0..c {
                        for ii in 0..h {
                            for jj in 0..w {
                                let base = ci * ho * wo + 2 * ii * wo + 2 * jj;
                                let s = g.data()[base] + g.data()[base + 1] + g.data()[base + wo] + g.data()[base + wo + 1];
                                let xi = ci * h * w + ii * w + jj;
                                gx[xi] = gx[xi] + s;
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc_into(grads, *x, |gx| add_assign(gx, g.data()));
            }
            Op::Concat2(a, b) => {
                let na = self.nodes[*a].value.len();
                self.acc_into(grads, *a, |ga| add_assign(ga, &g.data()[..na]));
                self.acc_into(grads, *b, |gb| add_assign(gb, &g.data()[na..]));
            }
            Op::Slice { x, start } => {
                let (start, len) = (*start, g.len());
                self.acc_into(grads, *x, |gx| add_assign(&mut gx[start..start + len], g.data()));
            }
            Op::Sample { mean, std, noise } => {
                self.acc_into(grads, *mean, |gm| add_assign(gm, g.data()));
                self.acc_into(grads, *std, |gs| mul_add_assign(gs, g.data(), noise.data()));
            }
            Op::GaussNll { mean, target } => {
                let vm = self.nodes[*mean].value.data();
                let gs = g.item();
                self.acc_into(grads, *mean, |gm| {
                    for (k, o) in gm.iter_mut().enumerate() {
                        *o = *o + gs * (vm[k] - target.data()[k]);
                    }
                });
            }
            Op::KlDiag { mq, sq, mp, sp } => {
                let vmq = self.nodes[*mq].value.data();
                let vsq = self.nodes[*sq].value.data();
                let vmp = self.nodes[*mp].value.data();
                let vsp = self.nodes[*sp].value.data();
                let gs = g.item();
                self.acc_into(grads, *mq, |gm| {
                    for (k, o) in gm.iter_mut().enumerate() {
                        *o = *o + gs * (vmq[k] - vmp[k]) / (vsp[k] * vsp[k]);
                    }
                });
                self.acc_into(grads, *mp, |gm| {
                    for (k, o) in gm.iter_mut().enumerate() {
                        *o = *o - gs * (vmq[k] - vmp[k]) / (vsp[k] * vsp[k]);
                    }
                });
                self.acc_into(grads, *sq, |gsq| {
                    for (k, o) in gsq.iter_mut().enumerate() {
                        *o = *o + gs * (vsq[k] / (vsp[k] * vsp[k]) - one / vsq[k]);
                    }
                });
                self.acc_into(grads, *sp, |gsp| {
                    for (k, o) in gsp.iter_mut().enumerate() {
                        let dm = vmq[k] - vmp[k];
                        let var_term = (vsq[k] * vsq[k] + dm * dm) / (vsp[k] * vsp[k] * vsp[k]);
                        *o = *o + gs * (one / vsp[k] - var_term);
                    }
                });
            }
        }
    }

    fn acc_into(&self, grads: &mut [Option<Tensor<F>>], idx: usize, f: impl FnOnce(&mut [F])) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        let slot = grad_slot(grads, idx, self.nodes[idx].value.shape());
        f(slot);
    }
}

fn grad_slot<'a, F: Scalar>(grads: &'a mut [Option<Tensor<F>>], idx: usize, shape: &[usize]) -> &'a mut [F] {
    grads[idx].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn dims3<F: Scalar>(t: &Tensor<F>) -> (usize, usize, usize) {
    assert_eq!(t.shape().len(), 3, "expected [C,H,W] tensor, got {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

fn add_assign<F: Scalar>(out: &mut [F], g: &[F]) {
    for (o, &gi) in out.iter_mut().zip(g) {
        *o = *o + gi;
    }
}

fn sub_assign<F: Scalar>(out: &mut [F], g: &[F]) {
    for (o, &gi) in out.iter_mut().zip(g) {
        *o = *o - gi;
    }
}

fn mul_add_assign<F: Scalar>(out: &mut [F], g: &[F], v: &[F]) {
    for ((o, &gi), &vi) in out.iter_mut().zip(g).zip(v) {
        *o = *o + gi * vi;
    }
}

/// y += W x with W row-major [out, in].
fn matvec_acc<F: Scalar>(w: &[F], x: &[F], y: &mut [F], out: usize, inp: usize) {
    for o in 0..out {
        let row = &w[o * inp..(o + 1) * inp];
        let mut acc = F::zero();
        for (wi, xi) in row.iter().zip(x) {
            acc = acc + *wi * *xi;
        }
        y[o] = y[o] + acc;
    }
}

/// x_grad += W^T g with W row-major [out, in].
fn matvec_t_acc<F: Scalar>(w: &[F], g: &[F], x_grad: &mut [F], out: usize, inp: usize) {
    for o in 0..out {
        let row = &w[o * inp..(o + 1) * inp];
        let gi = g[o];
        for (xg, wi) in x_grad.iter_mut().zip(row) {
            *xg = *xg + *wi * gi;
        }
    }
}

/// w_grad += g (outer) x, row-major [out, in].
fn outer_add_assign<F: Scalar>(w_grad: &mut [F], g: &[F], x: &[F], out: usize, inp: usize) {
    for o in 0..out {
        let gi = g[o];
        let row = &mut w_grad[o * inp..(o + 1) * inp];
        for (wg, &xi) in row.iter_mut().zip(x) {
            *wg = *wg + gi * xi;
        }
    }
}

fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn im2col<F: Scalar>(x: &Tensor<F>, kh: usize, kw: usize, stride: usize, pad: usize) -> (Vec<F>, usize, usize) {
    let (c, h, w) = dims3(x);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let n = ho * wo;
    let k = c * kh * kw;
    let mut cols = vec![F::zero(); k * n];
    let xd = x.data();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for i in 0..ho {
                    let ysrc = (i * stride + ki) as isize - pad as isize;
                    if ysrc < 0 || ysrc >= h as isize {
                        continue;
                    }
                    let src_row = ci * h * w + ysrc as usize * w;
                    for (j, d) in dst[i * wo..(i + 1) * wo].iter_mut().enumerate() {
                        let xsrc = (j * stride + kj) as isize - pad as isize;
                        if xsrc >= 0 && xsrc < w as isize {
                            *d = xd[src_row + xsrc as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, k, n)
}

fn col2im_add<F: Scalar>(
    dcols: &[F],
    x_grad: &mut [F],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let n = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &dcols[row * n..(row + 1) * n];
                for i in 0..ho {
                    let ysrc = (i * stride + ki) as isize - pad as isize;
                    if ysrc < 0 || ysrc >= h as isize {
                        continue;
                    }
                    let dst_row = ci * h * w + ysrc as usize * w;
                    for j in 0..wo {
                        let xsrc = (j * stride + kj) as isize - pad as isize;
                        if xsrc >= 0 && xsrc < w as isize {
                            let di = dst_row + xsrc as usize;
                            x_grad[di] = x_grad[di] + src[i * wo + j];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<F: Scalar>(w: &Tensor<F>, x: &Tensor<F>, b: &Tensor<F>, stride: usize, pad: usize) -> Tensor<F> {
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [Cout,Cin,kh,kw]");
    let (cout, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (c, h, wd) = dims3(x);
    assert_eq!(c, cin, "conv input channel mismatch");
    assert_eq!(b.len(), cout);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wd, kw, stride, pad);
    let (cols, k, n) = im2col(x, kh, kw, stride, pad);
    let mut y = Tensor::zeros(&[cout, ho, wo]);
    F::gemm(
        cout, k, n,
        F::one(),
        w.data(), k as isize, 1,
        &cols, n as isize, 1,
        F::zero(),
        y.data_mut(), n as isize, 1,
    );
    let yd = y.data_mut();
    for co in 0..cout {
        let bias = b.data()[co];
        for v in &mut yd[co * n..(co + 1) * n] {
            *v = *v + bias;
        }
    }
    y
}

/// Diagonal-Gaussian KL value in a cancellation-safe form: each dimension
/// contributes 0.5*m^2 + 0.5*(d^2 + 2*(d - ln(1+d))) with m = (mq-mp)/sp and
/// d = sq/sp - 1, clamped at zero; both pieces are analytically nonnegative.
pub fn kl_diag_value<F: Scalar>(mq: &[F], sq: &[F], mp: &[F], sp: &[F]) -> F {
    let half = F::from_f64(0.5);
    let two = F::from_f64(2.0);
    let mut acc = F::zero();
    for i in 0..mq.len() {
        let m = (mq[i] - mp[i]) / sp[i];
        let d = sq[i] / sp[i] - F::one();
        let term = half * m * m + half * (d * d + two * (d - d.ln_1p()));
        acc = acc + term.max(F::zero());
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite difference on an arbitrary closure.
    fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, at: &[f64], eps: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(at.len());
        let mut p = at.to_vec();
        for i in 0..at.len() {
            let orig = p[i];
            p[i] = orig + eps;
            let hi = f(&p);
            p[i] = orig - eps;
            let lo = f(&p);
            p[i] = orig;
            g.push((hi - lo) / (2.0 * eps));
        }
        g
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = a.iter().chain(b).fold(0.0f64, |m, &x| m.max(x.abs())).max(1e-12);
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3 * scale))
            .fold(0.0, f64::max)
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let w_shape = [2usize, 3, 3, 3];
        let x_shape = [3usize, 6, 6];
        let nw: usize = w_shape.iter().product();
        let nx: usize = x_shape.iter().product();
        let mut rng = crate::rng::stream(7, &[1]);
        let mut theta = vec![0.0f64; nw + nx + 2];
        crate::rng::fill_standard_normal(&mut rng, &mut theta);

        // Builds the graph and returns (loss var, param vars).
        let build = |p: &[f64], tape: &mut Tape<f64>| -> (Var, [Var; 3]) {
            let w = tape.leaf(Tensor::from_vec(&w_shape, p[..nw].to_vec()), true);
            let x = tape.leaf(Tensor::from_vec(&x_shape, p[nw..nw + nx].to_vec()), true);
            let b = tape.leaf(Tensor::from_vec(&[2], p[nw + nx..].to_vec()), true);
            let y = tape.conv2d(w, x, b, 2, 1);
            let act = tape.leaky_relu(y, 0.01);
            let n = tape.value(act).len();
            let loss = tape.gauss_nll(act, Tensor::zeros(&[n]));
            (loss, [w, x, b])
        };
        let f = |p: &[f64]| -> f64 {
            let mut tape: Tape<f64> = Tape::new();
            let (loss, _) = build(p, &mut tape);
            tape.value(loss).item()
        };

        let mut tape: Tape<f64> = Tape::new();
        let (loss, [w, x, b]) = build(&theta, &mut tape);
        let mut grads = tape.backward(loss);
        let mut analytic = Vec::new();
        analytic.extend_from_slice(grads.take(w, &w_shape).data());
        analytic.extend_from_slice(grads.take(x, &x_shape).data());
        analytic.extend_from_slice(grads.take(b, &[2]).data());

        let numeric = finite_diff(f, &theta, 1e-5);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "conv gradient mismatch: {err}");
    }

    #[test]
    fn pooling_upsample_and_gates_match_finite_differences() {
        let x_shape = [2usize, 4, 4];
        let nx: usize = x_shape.iter().product();
        let mut rng = crate::rng::stream(8, &[2]);
        let mut theta = vec![0.0f64; nx];
        crate::rng::fill_standard_normal(&mut rng, &mut theta);

        let f = |p: &[f64]| -> f64 {
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.leaf(Tensor::from_vec(&x_shape, p.to_vec()), true);
            let pooled = tape.avg_pool2(x);
            let up = tape.upsample2(pooled);
            let s = tape.sigmoid(up);
            let t = tape.tanh(x);
            let prod = tape.mul(s, t);
            let target = Tensor::zeros(&x_shape);
            let loss = tape.gauss_nll(prod, target);
            tape.value(loss).item()
        };

        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&x_shape, theta.clone()), true);
        let pooled = tape.avg_pool2(x);
        let up = tape.upsample2(pooled);
        let s = tape.sigmoid(up);
        let t = tape.tanh(x);
        let prod = tape.mul(s, t);
        let target = Tensor::zeros(&x_shape);
        let loss = tape.gauss_nll(prod, target);
        let mut grads = tape.backward(loss);
        let analytic = grads.take(x, &x_shape).into_data();

        let numeric = finite_diff(f, &theta, 1e-5);
        assert!(max_rel_err(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn kl_sample_linear_match_finite_differences() {
        // mean/std heads feeding a reparameterized sample and a KL term.
        let d = 5usize;
        let noise: Vec<f64> = {
            let mut rng = crate::rng::stream(3, &[3]);
            let mut n = vec![0.0; d];
            crate::rng::fill_standard_normal(&mut rng, &mut n);
            n
        };
        let n_theta = 4 * d;
        let mut rng = crate::rng::stream(4, &[4]);
        let mut theta = vec![0.0f64; n_theta];
        crate::rng::fill_standard_normal(&mut rng, &mut theta);

        let build = |p: &[f64], tape: &mut Tape<f64>| -> Var {
            let mq = tape.leaf(Tensor::from_vec(&[d], p[..d].to_vec()), true);
            let rq = tape.leaf(Tensor::from_vec(&[d], p[d..2 * d].to_vec()), true);
            let mp = tape.leaf(Tensor::from_vec(&[d], p[2 * d..3 * d].to_vec()), true);
            let rp = tape.leaf(Tensor::from_vec(&[d], p[3 * d..].to_vec()), true);
            let sq = tape.softplus_floor(rq, 1e-3);
            let sp = tape.softplus_floor(rp, 1e-3);
            let kl = tape.kl_diag(mq, sq, mp, sp);
            let s = tape.sample(mq, sq, Tensor::from_vec(&[d], noise.clone()));
            let target = Tensor::zeros(&[d]);
            let nll = tape.gauss_nll(s, target);
            tape.add(kl, nll)
        };

        let f = |p: &[f64]| -> f64 {
            let mut tape: Tape<f64> = Tape::new();
            let loss = build(p, &mut tape);
            tape.value(loss).item()
        };

        let mut tape: Tape<f64> = Tape::new();
        let loss = build(&theta, &mut tape);
        let grads = tape.backward(loss);
        let mut analytic = Vec::new();
        for i in 0..4 {
            let mut grads_i = Tensor::zeros(&[d]);
            if let Some(t) = &grads.grads[i] {
                grads_i = t.clone();
            }
            analytic.extend_from_slice(grads_i.data());
        }
        let numeric = finite_diff(f, &theta, 1e-5);
        assert!(max_rel_err(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn kl_properties() {
        let mq = [0.3, -0.7, 1.1];
        let sq = [0.5, 1.2, 0.9];
        // KL(q, q) is exactly zero.
        assert_eq!(kl_diag_value(&mq, &sq, &mq, &sq), 0.0);
        // Nonnegative on random belief pairs.
        let mut rng = crate::rng::stream(11, &[5]);
        for _ in 0..10_000 {
            let mut v = [0.0f64; 4];
            crate::rng::fill_standard_normal(&mut rng, &mut v);
            let kl = kl_diag_value(&[v[0]], &[v[1].abs() + 1e-3], &[v[2]], &[v[3].abs() + 1e-3]);
            assert!(kl >= 0.0 && kl.is_finite());
        }
    }

    #[test]
    fn sample_is_identity_at_zero_noise() {
        let mut tape: Tape<f64> = Tape::new();
        let mean = tape.leaf(Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]), false);
        let std = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]), false);
        let s = tape.sample(mean, std, Tensor::zeros(&[3]));
        assert_eq!(tape.value(s).data(), &[0.1, 0.2, 0.3]);
    }
}
