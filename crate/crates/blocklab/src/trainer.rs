//! Stochastic-gradient training: Adam updates on the sequence ELBO, a staged
//! learning-rate schedule, per-epoch checkpoints with bit-exact resume, and a
//! finite-difference gradient audit.
//!
//! Metrics note: the `train_loss`/`val_loss` columns record the ELBO loss
//! with the additive Gaussian normalization constant removed (squared-error
//! halves plus KL). The constant shifts the objective by T * (P/2) * ln(2*pi)
//! per sequence and carries no optimization signal; gradients are identical
//! either way.

use crate::autodiff::{Scalar, Tensor};
use crate::dataset::{Corpus, SplitSpec};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::scenegen::Frame;
use crate::worldmodel::{
    elbo_grads, elbo_loss, read_params, write_params, ElboOutput, ModelConfig, Parameters,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// Adam moment hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub hyper: AdamHyper,
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &Parameters<F>, hyper: AdamHyper) -> Self {
        let m = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        let v = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Self { step: 0, hyper, m, v }
    }
}

/// Training-loop configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Learning rate divided by `lr_decay_factor` every this many epochs.
    pub lr_decay_every: u32,
    pub lr_decay_factor: f64,
    pub shuffle_seed: u64,
    pub noise_seed: u64,
    /// Global-norm gradient clip.
    pub grad_clip: f64,
    #[serde(default)]
    pub adam: AdamHyper,
    /// Evaluate per-sequence gradients across the batch in parallel. The
    /// reduction order is fixed, so results are byte-identical to the
    /// sequential mode.
    #[serde(default)]
    pub parallel_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            base_lr: 1e-3,
            lr_decay_every: 50,
            lr_decay_factor: 10.0,
            shuffle_seed: 0,
            noise_seed: 0,
            grad_clip: 100.0,
            adam: AdamHyper::default(),
            parallel_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, train_set: usize) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 || self.batch_size > train_set {
            return Err(Error::Config(format!(
                "batch size {} must be in 1..={train_set}",
                self.batch_size
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if self.lr_decay_every < 1 || !(self.lr_decay_factor >= 1.0) {
            return Err(Error::Config("decay interval must be >= 1 and factor >= 1".into()));
        }
        Ok(())
    }
}

/// Staged schedule: base / factor^floor(epoch / interval).
pub fn lr_schedule(epoch: u32, config: &TrainConfig) -> f64 {
    config.base_lr / config.lr_decay_factor.powi((epoch / config.lr_decay_every) as i32)
}

/// One Adam update. Errors (naming the parameter block) on non-finite
/// gradients; the step counter increments only on success.
pub fn adam_step<F: Scalar>(
    params: &mut Parameters<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Numerical(format!("non-finite gradient in block {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let (b1, b2) = (F::from_f64(h.beta1), F::from_f64(h.beta2));
    let one = F::one();
    let bias1 = F::from_f64(1.0 - h.beta1.powi(t));
    let bias2 = F::from_f64(1.0 - h.beta2.powi(t));
    let eps = F::from_f64(h.eps);
    let lr = F::from_f64(lr);

    for (name, g) in grads {
        let m = state.m.get_mut(name).expect("moment block");
        let v = state.v.get_mut(name).expect("moment block");
        let p = params.get_mut(name);
        let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = b1 * md[i] + (one - b1) * gi;
            vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
            let m_hat = md[i] / bias1;
            let v_hat = vd[i] / bias2;
            pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<F: Scalar>(grads: &mut BTreeMap<String, Tensor<F>>, max_norm: f64) -> f64 {
    let total: f64 = grads.values().map(|t| t.sq_norm().to_f64()).sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = F::from_f64(max_norm / norm);
        for t in grads.values_mut() {
            for x in t.data_mut() {
                *x = *x * k;
            }
        }
    }
    norm
}

/// Full training snapshot: parameters, optimizer state and running metrics.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: u32,
    pub model: ModelConfig,
    pub params: Parameters<f32>,
    pub opt: Option<AdamState<f32>>,
    pub train_loss: f64,
    pub val_loss: f64,
}

const CKPT_MAGIC: &[u8; 8] = b"BLKCKPT1";
const CKPT_VERSION: u32 = 1;

impl Checkpoint {
    /// Binary layout: magic | version u32 | epoch u32 | config json (u32 len
    /// + bytes) | params | opt flag u8 [step u64, beta1/beta2/eps f64, m
    /// blobs, v blobs] | train_loss f64 | val_loss f64. All little-endian;
    /// f32 payloads are raw bits, so round-trips are exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = tmp_sibling(path);
        let result = (|| -> Result<()> {
            let mut out = BufWriter::new(File::create(&tmp)?);
            out.write_all(CKPT_MAGIC)?;
            out.write_all(&CKPT_VERSION.to_le_bytes())?;
            out.write_all(&self.epoch.to_le_bytes())?;
            let cfg = serde_json::to_vec(&self.model)?;
            out.write_all(&(cfg.len() as u32).to_le_bytes())?;
            out.write_all(&cfg)?;
            write_params(&mut out, &self.params)?;
            match &self.opt {
                None => out.write_all(&[0u8])?,
                Some(state) => {
                    out.write_all(&[1u8])?;
                    out.write_all(&state.step.to_le_bytes())?;
                    out.write_all(&state.hyper.beta1.to_le_bytes())?;
                    out.write_all(&state.hyper.beta2.to_le_bytes())?;
                    out.write_all(&state.hyper.eps.to_le_bytes())?;
                    write_params(&mut out, &Parameters::from_map(state.m.clone()))?;
                    write_params(&mut out, &Parameters::from_map(state.v.clone()))?;
                }
            }
            out.write_all(&self.train_loss.to_le_bytes())?;
            out.write_all(&self.val_loss.to_le_bytes())?;
            out.flush()?;
            Ok(())
        })();
        match result {
            Ok(()) => {
                std::fs::rename(&tmp, path)?;
                Ok(())
            }
            Err(e) => {
                let _ = std::fs::remove_file(&tmp);
                Err(e)
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != CKPT_VERSION {
            return Err(Error::Format("unsupported checkpoint version".into()));
        }
        input.read_exact(&mut u32buf)?;
        let epoch = u32::from_le_bytes(u32buf);
        input.read_exact(&mut u32buf)?;
        let cfg_len = u32::from_le_bytes(u32buf) as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        input.read_exact(&mut cfg_bytes)?;
        let model: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
        let params = read_params(&mut input)?;
        let mut flag = [0u8; 1];
        input.read_exact(&mut flag)?;
        let opt = if flag[0] == 1 {
            let mut u64buf = [0u8; 8];
            input.read_exact(&mut u64buf)?;
            let step = u64::from_le_bytes(u64buf);
            let mut f64buf = [0u8; 8];
            input.read_exact(&mut f64buf)?;
            let beta1 = f64::from_le_bytes(f64buf);
            input.read_exact(&mut f64buf)?;
            let beta2 = f64::from_le_bytes(f64buf);
            input.read_exact(&mut f64buf)?;
            let eps = f64::from_le_bytes(f64buf);
            let m = read_params(&mut input)?;
            let v = read_params(&mut input)?;
            Some(AdamState {
                step,
                hyper: AdamHyper { beta1, beta2, eps },
                m: m.into_map(),
                v: v.into_map(),
            })
        } else {
            None
        };
        let mut f64buf = [0u8; 8];
        input.read_exact(&mut f64buf)?;
        let train_loss = f64::from_le_bytes(f64buf);
        input.read_exact(&mut f64buf)?;
        let val_loss = f64::from_le_bytes(f64buf);
        Ok(Self { epoch, model, params, opt, train_loss, val_loss })
    }
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_else(|| "ckpt".into());
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn checkpoint_path(dir: &Path, epoch: u32) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs_run: u32,
    pub first_val_loss: f64,
    pub final_val_loss: f64,
    pub checkpoints: Vec<PathBuf>,
}

fn sequence_frames(corpus: &Corpus, index: u64) -> Result<Vec<Frame>> {
    let rec = corpus.record(index)?;
    let header = corpus.header();
    Ok((0..header.frames_per_sequence as usize).map(|t| rec.frame(header, t)).collect())
}

fn mean_grads(
    acc: &mut BTreeMap<String, Tensor<f32>>,
    per_seq: Vec<BTreeMap<String, Tensor<f32>>>,
    scale: f32,
) {
    for grads in per_seq {
        for (name, g) in grads {
            let slot = acc.get_mut(&name).expect("grad block");
            for (o, &x) in slot.data_mut().iter_mut().zip(g.data()) {
                *o += x;
            }
        }
    }
    for t in acc.values_mut() {
        for x in t.data_mut() {
            *x *= scale;
        }
    }
}

/// Runs (or resumes) training: per epoch, shuffle, iterate full batches,
/// update with Adam under the staged schedule, then record the validation
/// loss and persist a checkpoint. Deterministic given the seeds; resuming
/// from the epoch-k checkpoint reproduces an uninterrupted run bit-exactly.
pub fn train(
    corpus: &Corpus,
    split: &SplitSpec,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainSummary> {
    model_cfg.validate()?;
    train_cfg.validate(split.train.len())?;
    if corpus.header().height as usize != model_cfg.img_hw {
        return Err(Error::Config(format!(
            "corpus {}x{} does not match model {}x{}",
            corpus.header().height,
            corpus.header().width,
            model_cfg.img_hw,
            model_cfg.img_hw
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let (mut params, mut opt, start_epoch) = match resume {
        Some(ckpt) => {
            if ckpt.model != *model_cfg {
                return Err(Error::Config("resume checkpoint model config mismatch".into()));
            }
            let opt = ckpt.opt.ok_or_else(|| Error::Format("resume checkpoint lacks optimizer state".into()))?;
            (ckpt.params, opt, ckpt.epoch + 1)
        }
        None => {
            let params = Parameters::<f32>::init(model_cfg);
            let opt = AdamState::new(&params, train_cfg.adam);
            (params, opt, 0)
        }
    };

    let pixels = model_cfg.img_hw * model_cfg.img_hw * 3;
    let metrics_path = out_dir.join("metrics.csv");
    prepare_metrics(&metrics_path, start_epoch)?;

    let mut checkpoints = Vec::new();
    let mut first_val = f64::NAN;
    let mut final_val = f64::NAN;

    for epoch in start_epoch..train_cfg.epochs {
        let lr = lr_schedule(epoch, train_cfg);

        // Shuffle train indices for this epoch.
        let mut order = split.train.clone();
        let mut shuffle_rng = rng::stream(train_cfg.shuffle_seed, &[tag::SHUFFLE, epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss_sum = 0.0f64;
        let mut epoch_batches = 0usize;
        // Last partial batch dropped for shape uniformity.
        for batch in order.chunks_exact(train_cfg.batch_size) {
            let eval = |&idx: &u64| -> Result<(ElboOutput<f32>, BTreeMap<String, Tensor<f32>>)> {
                let frames = sequence_frames(corpus, idx)?;
                let noise = rng::derive(train_cfg.noise_seed, &[tag::TRAIN_NOISE, epoch as u64, idx]);
                elbo_grads(model_cfg, &params, &frames, noise)
            };
            let results: Vec<Result<_>> = if train_cfg.parallel_batch {
                batch.par_iter().map(eval).collect()
            } else {
                batch.iter().map(eval).collect()
            };

            let mut acc: BTreeMap<String, Tensor<f32>> =
                params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
            let mut per_seq = Vec::with_capacity(batch.len());
            let mut batch_loss = 0.0f64;
            for r in results {
                let (out, grads) = r?;
                batch_loss += out.data_loss(pixels);
                per_seq.push(grads);
            }
            mean_grads(&mut acc, per_seq, 1.0 / batch.len() as f32);
            clip_global_norm(&mut acc, train_cfg.grad_clip);
            adam_step(&mut params, &acc, &mut opt, lr)?;
            epoch_loss_sum += batch_loss / batch.len() as f64;
            epoch_batches += 1;
        }
        let train_loss = epoch_loss_sum / epoch_batches.max(1) as f64;

        let val_loss = validation_loss(corpus, split, model_cfg, train_cfg, &params)?;
        if epoch == 0 {
            first_val = val_loss;
        }
        final_val = val_loss;

        let ckpt = Checkpoint {
            epoch,
            model: *model_cfg,
            params: params.clone(),
            opt: Some(opt.clone()),
            train_loss,
            val_loss,
        };
        let path = checkpoint_path(out_dir, epoch);
        ckpt.save(&path)?;
        checkpoints.push(path);
        append_metrics(&metrics_path, epoch, train_loss, val_loss, lr)?;
    }

    Ok(TrainSummary {
        epochs_run: train_cfg.epochs - start_epoch,
        first_val_loss: first_val,
        final_val_loss: final_val,
        checkpoints,
    })
}

/// Mean validation loss under a fixed per-sequence noise seed (identical
/// every epoch, for low-variance comparisons).
pub fn validation_loss(
    corpus: &Corpus,
    split: &SplitSpec,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    params: &Parameters<f32>,
) -> Result<f64> {
    let pixels = model_cfg.img_hw * model_cfg.img_hw * 3;
    let eval = |&idx: &u64| -> Result<f64> {
        let frames = sequence_frames(corpus, idx)?;
        let noise = rng::derive(train_cfg.noise_seed, &[tag::VAL_NOISE, idx]);
        Ok(elbo_loss(model_cfg, params, &frames, noise)?.data_loss(pixels))
    };
    let losses: Vec<Result<f64>> = if train_cfg.parallel_batch {
        split.validation.par_iter().map(eval).collect()
    } else {
        split.validation.iter().map(eval).collect()
    };
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / split.validation.len().max(1) as f64)
}

fn prepare_metrics(path: &Path, start_epoch: u32) -> Result<()> {
    if start_epoch == 0 || !path.exists() {
        let mut f = File::create(path)?;
        writeln!(f, "epoch,train_loss,val_loss,lr")?;
        return Ok(());
    }
    // Resume: keep rows strictly below the resume epoch so the file matches
    // an uninterrupted run byte-for-byte after the new rows are appended.
    let content = std::fs::read_to_string(path)?;
    let mut kept = String::new();
    for (i, line) in content.lines().enumerate() {
        if i == 0 {
            kept.push_str(line);
            kept.push('\n');
            continue;
        }
        if let Some(epoch_str) = line.split(',').next() {
            if let Ok(e) = epoch_str.parse::<u32>() {
                if e < start_epoch {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    std::fs::write(path, kept)?;
    Ok(())
}

fn append_metrics(path: &Path, epoch: u32, train_loss: f64, val_loss: f64, lr: f64) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().append(true).open(path)?;
    writeln!(f, "{epoch},{train_loss},{val_loss},{lr}")?;
    Ok(())
}

/// Report of the gradient audit.
#[derive(Debug, Clone)]
pub struct AuditReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter blocks whose analytic gradient was identically zero on the
    /// audit batch (should be empty).
    pub dead_blocks: Vec<String>,
}

/// Central-difference audit of the analytic ELBO gradient on a tiny model.
///
/// Runs in f64 at a jittered parameter point (zero-initialized biases would
/// otherwise place pre-activations exactly on the leaky-relu kink, where a
/// central difference straddles two subgradients). Samples at least
/// `min_coords` coordinates spread over every parameter block.
pub fn finite_difference_audit(
    model_cfg: &ModelConfig,
    batch: &[Vec<Frame>],
    eps: f64,
    min_coords: usize,
    seed: u64,
) -> Result<AuditReport> {
    model_cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Argument("audit needs at least one sequence".into()));
    }
    let mut params: Parameters<f64> = Parameters::init(model_cfg);
    let mut jitter = rng::stream(seed, &[tag::AUDIT, 0]);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng::uniform(&mut jitter, -0.05, 0.05);
        }
    }

    let loss_of = |p: &Parameters<f64>| -> Result<f64> {
        let mut total = 0.0;
        for (i, frames) in batch.iter().enumerate() {
            let noise = rng::derive(seed, &[tag::AUDIT, 1, i as u64]);
            total += elbo_loss(model_cfg, p, frames, noise)?.loss;
        }
        Ok(total)
    };

    // Analytic gradient summed over the batch.
    let mut analytic: BTreeMap<String, Tensor<f64>> =
        params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
    for (i, frames) in batch.iter().enumerate() {
        let noise = rng::derive(seed, &[tag::AUDIT, 1, i as u64]);
        let (_, grads) = elbo_grads(model_cfg, &params, frames, noise)?;
        for (name, g) in grads {
            let slot = analytic.get_mut(&name).expect("block");
            for (o, &x) in slot.data_mut().iter_mut().zip(g.data()) {
                *o += x;
            }
        }
    }
    let grad_scale = analytic
        .values()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, &x| m.max(x.abs()));
    let dead_blocks: Vec<String> = analytic
        .iter()
        .filter(|(_, t)| t.data().iter().all(|&x| x == 0.0))
        .map(|(k, _)| k.clone())
        .collect();

    let names: Vec<String> = params.names().cloned().collect();
    let per_block = min_coords.div_ceil(names.len()).max(1);
    let mut pick = rng::stream(seed, &[tag::AUDIT, 2]);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for name in &names {
        let n = params.get(name).len();
        let k = per_block.min(n);
        for _ in 0..k {
            let idx = rand::Rng::gen_range(&mut pick, 0..n as u64) as usize;
            let orig = params.get(name).data()[idx];
            params.get_mut(name).data_mut()[idx] = orig + eps;
            let hi = loss_of(&params)?;
            params.get_mut(name).data_mut()[idx] = orig - eps;
            let lo = loss_of(&params)?;
            params.get_mut(name).data_mut()[idx] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            let an = analytic[name].data()[idx];
            let denom = an.abs().max(fd.abs()).max(1e-3 * grad_scale);
            max_rel = max_rel.max((an - fd).abs() / denom);
            checked += 1;
        }
    }
    Ok(AuditReport { max_rel_err: max_rel, checked, dead_blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn lr_schedule_matches_staged_decay() {
        let cfg = base_cfg();
        assert_eq!(lr_schedule(0, &cfg), 0.001);
        assert_eq!(lr_schedule(49, &cfg), 0.001);
        assert_eq!(lr_schedule(50, &cfg), 0.0001);
        assert!((lr_schedule(199, &cfg) - 1e-6).abs() < 1e-18);
        // Piecewise constant, nonincreasing.
        let mut last = f64::INFINITY;
        for e in 0..200 {
            let lr = lr_schedule(e, &cfg);
            assert!(lr <= last);
            last = lr;
        }
    }

    fn tiny_params() -> (ModelConfig, Parameters<f64>) {
        let cfg = ModelConfig {
            d_s: 2,
            d_h: 3,
            img_hw: 4,
            channels: 2,
            head_hidden: 3,
            min_stddev: 1e-3,
            param_seed: 2,
        };
        let p = Parameters::init(&cfg);
        (cfg, p)
    }

    #[test]
    fn adam_zero_gradient_leaves_params_and_decays_moments() {
        // From a fresh state, zero gradients move nothing.
        let (_, mut params) = tiny_params();
        let before = params.clone();
        let mut state = AdamState::new(&params, AdamHyper::default());
        let zeros: BTreeMap<String, Tensor<f64>> =
            params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        adam_step(&mut params, &zeros, &mut state, 0.01).unwrap();
        assert_eq!(params, before);

        // Once moments carry history, zero gradients decay them by beta each
        // step (and the momentum tail keeps nudging parameters).
        let g = 0.5f64;
        let grads: BTreeMap<String, Tensor<f64>> = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::from_vec(t.shape(), vec![g; t.len()])))
            .collect();
        adam_step(&mut params, &grads, &mut state, 0.01).unwrap();
        let m_after_g = state.m["gru.z.b"].data()[0];
        let v_after_g = state.v["gru.z.b"].data()[0];
        adam_step(&mut params, &zeros, &mut state, 0.01).unwrap();
        adam_step(&mut params, &zeros, &mut state, 0.01).unwrap();
        let m_decayed = state.m["gru.z.b"].data()[0];
        let v_decayed = state.v["gru.z.b"].data()[0];
        assert!((m_decayed - m_after_g * 0.9 * 0.9).abs() < 1e-15);
        assert!((v_decayed - v_after_g * 0.999 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn adam_single_step_closed_form() {
        let (_, mut params) = tiny_params();
        let mut state = AdamState::new(&params, AdamHyper::default());
        let g0 = 0.37f64;
        let grads: BTreeMap<String, Tensor<f64>> = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::from_vec(t.shape(), vec![g0; t.len()])))
            .collect();
        let before = params.clone();
        let lr = 0.005;
        adam_step(&mut params, &grads, &mut state, lr).unwrap();
        // After bias correction: m_hat = g, v_hat = g^2, so the update is
        // -lr * g / (|g| + eps).
        let expect = -lr * g0 / (g0.abs() + 1e-8);
        for (name, t) in params.iter() {
            for (i, &v) in t.data().iter().enumerate() {
                let delta = v - before.get(name).data()[i];
                assert!((delta - expect).abs() < 1e-12, "{name}[{i}]: {delta} vs {expect}");
            }
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_constant_gradient_displacement_approaches_rate() {
        // Iterate the update rule numerically on a single coordinate.
        let hyper = AdamHyper::default();
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 0.0f64);
        let g = 0.3f64;
        let lr = 0.01;
        let mut last_delta = 0.0;
        for t in 1..=5000 {
            m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
            v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g;
            let m_hat = m / (1.0 - hyper.beta1.powi(t));
            let v_hat = v / (1.0 - hyper.beta2.powi(t));
            let delta = -lr * m_hat / (v_hat.sqrt() + hyper.eps);
            theta += delta;
            last_delta = delta;
        }
        assert!((last_delta.abs() - lr).abs() < 1e-4 * lr, "step size {last_delta}");
        assert!(theta < 0.0);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let (_, mut params) = tiny_params();
        let mut state = AdamState::new(&params, AdamHyper::default());
        let mut grads: BTreeMap<String, Tensor<f64>> =
            params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        grads.get_mut("gru.z.b").unwrap().data_mut()[0] = f64::NAN;
        let err = adam_step(&mut params, &grads, &mut state, 0.01).unwrap_err();
        assert!(err.to_string().contains("gru.z.b"), "{err}");
        assert_eq!(state.step, 0);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
        grads.insert("a".into(), Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let norm = clip_global_norm(&mut grads, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(grads["a"].data(), &[3.0, 4.0]);
        let _ = clip_global_norm(&mut grads, 1.0);
        let clipped = grads["a"].data();
        let new_norm = (clipped[0] * clipped[0] + clipped[1] * clipped[1]).sqrt();
        assert!((new_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn audit_passes_on_tiny_model() {
        let cfg = ModelConfig {
            d_s: 2,
            d_h: 4,
            img_hw: 4,
            channels: 3,
            head_hidden: 4,
            min_stddev: 1e-3,
            param_seed: 21,
        };
        let mut stream = rng::stream(51, &[3]);
        let mut frames = Vec::new();
        for _ in 0..3 {
            let mut f = Frame::filled(4, 4, [0.0; 3]);
            for v in f.data.iter_mut() {
                *v = rng::uniform(&mut stream, 0.0, 1.0) as f32;
            }
            frames.push(f);
        }
        let report = finite_difference_audit(&cfg, &[frames], 1e-5, 60, 7).unwrap();
        assert!(report.checked >= 60);
        assert!(report.dead_blocks.is_empty(), "dead blocks: {:?}", report.dead_blocks);
        assert!(report.max_rel_err <= 1e-3, "max rel {}", report.max_rel_err);
    }
}
