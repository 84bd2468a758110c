//! RSSM sequence operations: filtering, the evidence lower bound, and
//! open-loop rollout, plus small single-step entry points used by probes and
//! diagnostics.

use super::net::{belief_head, decoder, encoder, frame_to_chw, gru_step, tensor_to_frame};
use super::params::{BoundParams, Parameters};
use super::ModelConfig;
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::scenegen::Frame;
use std::collections::BTreeMap;

/// Diagonal Gaussian belief over the stochastic latent.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

/// One filtering step: deterministic state, beliefs, sampled latent and the
/// decoded reconstruction. The posterior is present iff an observation was
/// supplied at this step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub h: Vec<f64>,
    pub prior: GaussianBelief,
    pub posterior: Option<GaussianBelief>,
    pub s: Vec<f64>,
    pub reconstruction: Frame,
}

/// Closed-form KL(q || p) for diagonal Gaussians, in nats. Computed in a
/// cancellation-safe regrouping, so the result is nonnegative and KL(q, q)
/// is exactly zero.
pub fn kl_divergence(q: &GaussianBelief, p: &GaussianBelief) -> f64 {
    assert_eq!(q.mean.len(), p.mean.len(), "belief width mismatch");
    crate::autodiff::kl_diag_value(&q.mean, &q.stddev, &p.mean, &p.stddev)
}

/// Reparameterized draw: mean + stddev .* noise.
pub fn sample_latent(belief: &GaussianBelief, noise: &[f64]) -> Vec<f64> {
    assert_eq!(noise.len(), belief.mean.len());
    belief
        .mean
        .iter()
        .zip(belief.stddev.iter().zip(noise))
        .map(|(&m, (&s, &e))| m + s * e)
        .collect()
}

fn vec_leaf<F: Scalar>(tape: &mut Tape<F>, v: &[f64]) -> Var {
    let data: Vec<F> = v.iter().map(|&x| F::from_f64(x)).collect();
    let n = data.len();
    tape.leaf(Tensor::from_vec(&[n], data), false)
}

fn to_f64_vec<F: Scalar>(t: &Tensor<F>) -> Vec<f64> {
    t.data().iter().map(|&x| x.to_f64()).collect()
}

/// Embedding of one frame. Errors if the frame does not match the configured
/// resolution.
pub fn encode_frame(cfg: &ModelConfig, params: &Parameters<f64>, frame: &Frame) -> Result<Vec<f64>> {
    cfg.validate()?;
    if frame.height != cfg.img_hw || frame.width != cfg.img_hw {
        return Err(Error::Config(format!(
            "frame {}x{} does not match configured {}x{}",
            frame.height, frame.width, cfg.img_hw, cfg.img_hw
        )));
    }
    let mut tape: Tape<f64> = Tape::new();
    let pv = BoundParams::bind(&mut tape, params, false);
    let x = tape.leaf(frame_to_chw(frame), false);
    let e = encoder(&mut tape, &pv, cfg, x);
    Ok(to_f64_vec(tape.value(e)))
}

/// Reconstruction mean decoded from a latent pair, clamped to a valid frame.
pub fn decode_latent(cfg: &ModelConfig, params: &Parameters<f64>, h: &[f64], s: &[f64]) -> Frame {
    let mut tape: Tape<f64> = Tape::new();
    let pv = BoundParams::bind(&mut tape, params, false);
    let hv = vec_leaf(&mut tape, h);
    let sv = vec_leaf(&mut tape, s);
    let d = decoder(&mut tape, &pv, cfg, hv, sv);
    tensor_to_frame(tape.value(d))
}

/// One deterministic recurrent update h_t = f(h_prev, s_prev).
pub fn deterministic_step(cfg: &ModelConfig, params: &Parameters<f64>, h_prev: &[f64], s_prev: &[f64]) -> Vec<f64> {
    let _ = cfg;
    let mut tape: Tape<f64> = Tape::new();
    let pv = BoundParams::bind(&mut tape, params, false);
    let hv = vec_leaf(&mut tape, h_prev);
    let sv = vec_leaf(&mut tape, s_prev);
    let (h, _, _) = gru_step(&mut tape, &pv, hv, sv);
    to_f64_vec(tape.value(h))
}

/// Update and reset gate activations for one step (diagnostics).
pub fn gru_gates(cfg: &ModelConfig, params: &Parameters<f64>, h_prev: &[f64], s_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let _ = cfg;
    let mut tape: Tape<f64> = Tape::new();
    let pv = BoundParams::bind(&mut tape, params, false);
    let hv = vec_leaf(&mut tape, h_prev);
    let sv = vec_leaf(&mut tape, s_prev);
    let (_, z, r) = gru_step(&mut tape, &pv, hv, sv);
    (to_f64_vec(tape.value(z)), to_f64_vec(tape.value(r)))
}

/// Prior belief p(s_t | h_t).
pub fn prior_belief(cfg: &ModelConfig, params: &Parameters<f64>, h: &[f64]) -> GaussianBelief {
    let mut tape: Tape<f64> = Tape::new();
    let pv = BoundParams::bind(&mut tape, params, false);
    let hv = vec_leaf(&mut tape, h);
    let (m, s) = belief_head(&mut tape, &pv, cfg, "prior", hv);
    GaussianBelief { mean: to_f64_vec(tape.value(m)), stddev: to_f64_vec(tape.value(s)) }
}

/// Posterior belief q(s_t | h_t, embed_t).
pub fn posterior_belief(cfg: &ModelConfig, params: &Parameters<f64>, h: &[f64], embed: &[f64]) -> GaussianBelief {
    let mut tape: Tape<f64> = Tape::new();
    let pv = BoundParams::bind(&mut tape, params, false);
    let hv = vec_leaf(&mut tape, h);
    let ev = vec_leaf(&mut tape, embed);
    let input = tape.concat2(hv, ev);
    let (m, s) = belief_head(&mut tape, &pv, cfg, "post", input);
    GaussianBelief { mean: to_f64_vec(tape.value(m)), stddev: to_f64_vec(tape.value(s)) }
}

/// Standard-normal noise tensors for T steps of width d.
fn noise_path<F: Scalar>(seed: u64, steps: usize, d: usize) -> Vec<Tensor<F>> {
    let mut stream = rng::stream(seed, &[tag::PROBE_NOISE]);
    (0..steps)
        .map(|_| {
            let mut buf = vec![0.0f64; d];
            rng::fill_standard_normal(&mut stream, &mut buf);
            Tensor::from_vec(&[d], buf.into_iter().map(F::from_f64).collect())
        })
        .collect()
}

/// Per-step graph state shared by filtering, the ELBO and rollout.
struct SequenceState<'a, F: Scalar> {
    tape: Tape<F>,
    pv: BoundParams,
    cfg: &'a ModelConfig,
    h: Var,
    s: Var,
}

impl<'a, F: Scalar> SequenceState<'a, F> {
    fn new(cfg: &'a ModelConfig, params: &Parameters<F>, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let pv = BoundParams::bind(&mut tape, params, trainable);
        // Documented initial state: zero vectors for both components.
        let h = tape.leaf(Tensor::zeros(&[cfg.d_h]), false);
        let s = tape.leaf(Tensor::zeros(&[cfg.d_s]), false);
        Self { tape, pv, cfg, h, s }
    }

    /// Advances h, forms the prior, and if a frame is given forms the
    /// posterior from its embedding; samples the latent from the last belief.
    /// Returns (prior, posterior, sample).
    fn step(&mut self, frame_chw: Option<Tensor<F>>, noise: Tensor<F>) -> ((Var, Var), Option<(Var, Var)>, Var) {
        let (h, _, _) = gru_step(&mut self.tape, &self.pv, self.h, self.s);
        self.h = h;
        let prior = belief_head(&mut self.tape, &self.pv, self.cfg, "prior", h);
        let posterior = frame_chw.map(|chw| {
            let x = self.tape.leaf(chw, false);
            let e = encoder(&mut self.tape, &self.pv, self.cfg, x);
            let input = self.tape.concat2(h, e);
            belief_head(&mut self.tape, &self.pv, self.cfg, "post", input)
        });
        let (mean, std) = posterior.unwrap_or(prior);
        let s = self.tape.sample(mean, std, noise);
        self.s = s;
        let posterior = posterior.map(|p| p);
        ((prior.0, prior.1), posterior, s)
    }

    fn decode(&mut self) -> Var {
        decoder(&mut self.tape, &self.pv, self.cfg, self.h, self.s)
    }
}

fn belief_of<F: Scalar>(tape: &Tape<F>, (m, s): (Var, Var)) -> GaussianBelief {
    GaussianBelief { mean: to_f64_vec(tape.value(m)), stddev: to_f64_vec(tape.value(s)) }
}

fn check_frames(cfg: &ModelConfig, frames: &[Frame]) -> Result<()> {
    for f in frames {
        if f.height != cfg.img_hw || f.width != cfg.img_hw {
            return Err(Error::Config(format!(
                "frame {}x{} does not match configured {}x{}",
                f.height, f.width, cfg.img_hw, cfg.img_hw
            )));
        }
    }
    Ok(())
}

/// Filters a whole sequence: h_t from the recurrence, prior from h_t,
/// posterior from (h_t, o_t), latent sampled from the posterior, frame
/// decoded. Deterministic given the noise seed.
pub fn filter_sequence(
    cfg: &ModelConfig,
    params: &Parameters<f32>,
    frames: &[Frame],
    noise_seed: u64,
) -> Result<Vec<StepOutput>> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::Argument("filter_sequence needs at least one frame".into()));
    }
    check_frames(cfg, frames)?;
    let mut state: SequenceState<f32> = SequenceState::new(cfg, params, false);
    let noise = noise_path::<f32>(noise_seed, frames.len(), cfg.d_s);
    let mut out = Vec::with_capacity(frames.len());
    for (frame, n) in frames.iter().zip(noise) {
        let (prior, posterior, s) = state.step(Some(frame_to_chw(frame)), n);
        let recon = state.decode();
        out.push(StepOutput {
            h: to_f64_vec(state.tape.value(state.h)),
            prior: belief_of(&state.tape, prior),
            posterior: posterior.map(|p| belief_of(&state.tape, p)),
            s: to_f64_vec(state.tape.value(s)),
            reconstruction: tensor_to_frame(state.tape.value(recon)),
        });
    }
    Ok(out)
}

/// ELBO evaluation: loss plus its per-frame decomposition.
#[derive(Debug, Clone)]
pub struct ElboOutput<F> {
    /// Sum over frames of reconstruction NLL + KL (nats).
    pub loss: F,
    /// Per-frame -ln p(o_t | h_t, s_t), constants included.
    pub recon: Vec<F>,
    /// Per-frame KL(posterior || prior).
    pub kl: Vec<F>,
}

impl<F: Scalar> ElboOutput<F> {
    /// Loss with the constant part of the Gaussian likelihood removed:
    /// sum of squared-error halves plus KL. This is the monitored training
    /// metric; it differs from `loss` by T * (pixels/2) * ln(2*pi).
    pub fn data_loss(&self, pixels_per_frame: usize) -> f64 {
        let c = 0.5 * pixels_per_frame as f64 * std::f64::consts::TAU.ln();
        self.loss.to_f64() - c * self.recon.len() as f64
    }
}

fn elbo_graph<'a, F: Scalar>(
    cfg: &'a ModelConfig,
    params: &Parameters<F>,
    frames: &[Frame],
    noise_seed: u64,
    trainable: bool,
) -> Result<(SequenceState<'a, F>, Var, ElboOutput<F>)> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::Argument("elbo needs at least one frame".into()));
    }
    check_frames(cfg, frames)?;
    let mut state = SequenceState::new(cfg, params, trainable);
    let noise = noise_path::<F>(noise_seed, frames.len(), cfg.d_s);
    let mut recon_terms = Vec::with_capacity(frames.len());
    let mut kl_terms = Vec::with_capacity(frames.len());
    let mut total: Option<Var> = None;
    for (t, (frame, n)) in frames.iter().zip(noise).enumerate() {
        let chw = frame_to_chw::<F>(frame);
        let target = chw.clone();
        let (prior, posterior, _s) = state.step(Some(chw), n);
        let posterior = posterior.expect("posterior present when frame supplied");
        let kl = state.tape.kl_diag(posterior.0, posterior.1, prior.0, prior.1);
        let mean = state.decode();
        let target_flat = Tensor::from_vec(&[target.len()], target.into_data());
        let nll = state.tape.gauss_nll(mean, target_flat);

        let recon_v = state.tape.value(nll).item();
        let kl_v = state.tape.value(kl).item();
        if !recon_v.is_finite() || !kl_v.is_finite() {
            return Err(Error::Numerical(format!("non-finite ELBO term at frame {t}")));
        }
        recon_terms.push(recon_v);
        kl_terms.push(kl_v);

        let step_loss = state.tape.add(nll, kl);
        total = Some(match total {
            None => step_loss,
            Some(acc) => state.tape.add(acc, step_loss),
        });
    }
    let total = total.expect("at least one frame");
    let loss = state.tape.value(total).item();
    Ok((state, total, ElboOutput { loss, recon: recon_terms, kl: kl_terms }))
}

/// ELBO loss of one sequence under a single reparameterized sample per step.
pub fn elbo_loss<F: Scalar>(
    cfg: &ModelConfig,
    params: &Parameters<F>,
    frames: &[Frame],
    noise_seed: u64,
) -> Result<ElboOutput<F>> {
    let (_state, _var, out) = elbo_graph(cfg, params, frames, noise_seed, false)?;
    Ok(out)
}

/// ELBO loss plus parameter gradients.
pub fn elbo_grads<F: Scalar>(
    cfg: &ModelConfig,
    params: &Parameters<F>,
    frames: &[Frame],
    noise_seed: u64,
) -> Result<(ElboOutput<F>, BTreeMap<String, Tensor<F>>)> {
    let (state, total, out) = elbo_graph(cfg, params, frames, noise_seed, true)?;
    let mut grads = state.tape.backward(total);
    let grad_map = state.pv.grads(&state.tape, &mut grads);
    Ok((out, grad_map))
}

/// Open-loop rollout: filter `context` frames through the posterior, then
/// sample `horizon` steps from the prior alone and decode each.
pub fn open_loop_rollout(
    cfg: &ModelConfig,
    params: &Parameters<f32>,
    context: &[Frame],
    horizon: usize,
    noise_seed: u64,
) -> Result<Vec<Frame>> {
    cfg.validate()?;
    if context.is_empty() {
        return Err(Error::Argument("rollout needs at least one context frame".into()));
    }
    check_frames(cfg, context)?;
    let mut state: SequenceState<f32> = SequenceState::new(cfg, params, false);
    let noise = noise_path::<f32>(noise_seed, context.len() + horizon, cfg.d_s);
    for (frame, n) in context.iter().zip(&noise) {
        state.step(Some(frame_to_chw(frame)), n.clone());
    }
    let mut out = Vec::with_capacity(horizon);
    for n in noise.iter().skip(context.len()) {
        state.step(None, n.clone());
        let recon = state.decode();
        out.push(tensor_to_frame(state.tape.value(recon)));
    }
    Ok(out)
}
