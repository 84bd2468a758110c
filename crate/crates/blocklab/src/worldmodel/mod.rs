//! Recurrent state-space world model: convolutional encoder/decoder, gated
//! recurrent deterministic path, Gaussian prior/posterior heads, the evidence
//! lower bound and open-loop rollout.

mod model;
mod net;
mod params;

pub use model::{
    decode_latent, deterministic_step, elbo_grads, elbo_loss, encode_frame, filter_sequence,
    gru_gates, kl_divergence, open_loop_rollout, posterior_belief, prior_belief, sample_latent,
    ElboOutput, GaussianBelief, StepOutput,
};
pub use net::{frame_to_chw, tensor_to_frame};
pub use params::{read_params, write_params, BoundParams, Parameters};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Model hyperparameters. The image edge must be a power of two (>= 4); the
/// number of halving stages adapts as log2(edge) - 1 so the innermost feature
/// map is always 2x2, preserving the block design across resolutions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Stochastic latent width.
    pub d_s: usize,
    /// Deterministic recurrent width.
    pub d_h: usize,
    /// Image height and width (square).
    pub img_hw: usize,
    /// Channel width of every convolutional stage.
    pub channels: usize,
    /// Hidden width of the prior/posterior heads.
    pub head_hidden: usize,
    /// Stddev floor added to the softplus parameterization.
    pub min_stddev: f64,
    pub param_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Paper-scale shape: 64x64 frames, s_t width 20, h_t width 200.
        Self {
            d_s: 20,
            d_h: 200,
            img_hw: 64,
            channels: 64,
            head_hidden: 200,
            min_stddev: 1e-3,
            param_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_s < 1 || self.d_h < 1 {
            return Err(Error::Config("latent widths must be >= 1".into()));
        }
        if self.channels < 1 || self.head_hidden < 1 {
            return Err(Error::Config("channel and head widths must be >= 1".into()));
        }
        if !(self.min_stddev > 0.0) {
            return Err(Error::Config("min_stddev must be > 0".into()));
        }
        if self.img_hw < 4 || !self.img_hw.is_power_of_two() {
            return Err(Error::Config(format!(
                "img_hw must be a power of two >= 4, got {}",
                self.img_hw
            )));
        }
        Ok(())
    }

    /// Number of halving stages: log2(img) - 1, so 64 -> 5, 32 -> 4, 16 -> 3.
    pub fn n_stages(&self) -> usize {
        (self.img_hw.trailing_zeros() as usize) - 1
    }

    /// Encoder output width: channels x 2 x 2 flattened.
    pub fn embed_dim(&self) -> usize {
        self.channels * 4
    }

    /// Every parameter: (name, shape, fan_in). fan_in == 0 means zero-init
    /// (biases); weights draw uniform +/- sqrt(1/fan_in).
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let c = self.channels;
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, fan: usize| out.push((name, shape, fan));

        // Encoder: stage 0 is a strided 5x5 conv; later odd stages carry a
        // 1x1 projection before their pooling step; every stage has two
        // residual blocks of two 3x3 convs.
        push("enc.in.w".into(), vec![c, 3, 5, 5], 3 * 25);
        push("enc.in.b".into(), vec![c], 0);
        for i in 0..self.n_stages() {
            if i >= 1 && i % 2 == 1 {
                push(format!("enc.s{i}.proj.w"), vec![c, c, 1, 1], c);
                push(format!("enc.s{i}.proj.b"), vec![c], 0);
            }
            for r in 0..2 {
                for k in 0..2 {
                    push(format!("enc.s{i}.r{r}.c{k}.w"), vec![c, c, 3, 3], c * 9);
                    push(format!("enc.s{i}.r{r}.c{k}.b"), vec![c], 0);
                }
            }
        }

        // Decoder mirror.
        push("dec.fc.w".into(), vec![4 * c, self.d_h + self.d_s], self.d_h + self.d_s);
        push("dec.fc.b".into(), vec![4 * c], 0);
        for j in 0..self.n_stages() {
            for r in 0..2 {
                for k in 0..2 {
                    push(format!("dec.s{j}.r{r}.c{k}.w"), vec![c, c, 3, 3], c * 9);
                    push(format!("dec.s{j}.r{r}.c{k}.b"), vec![c], 0);
                }
            }
            if j % 2 == 1 {
                push(format!("dec.s{j}.proj.w"), vec![c, c, 1, 1], c);
                push(format!("dec.s{j}.proj.b"), vec![c], 0);
            }
        }
        push("dec.out.w".into(), vec![3, c, 5, 5], c * 25);
        push("dec.out.b".into(), vec![3], 0);

        // Recurrent cell: latent projection then a gated update.
        push("gru.in.w".into(), vec![self.d_h, self.d_s], self.d_s);
        push("gru.in.b".into(), vec![self.d_h], 0);
        for gate in ["z", "r"] {
            push(format!("gru.{gate}.wx"), vec![self.d_h, self.d_h], self.d_h);
            push(format!("gru.{gate}.wh"), vec![self.d_h, self.d_h], self.d_h);
            push(format!("gru.{gate}.b"), vec![self.d_h], 0);
        }
        push("gru.n.wx".into(), vec![self.d_h, self.d_h], self.d_h);
        push("gru.n.bx".into(), vec![self.d_h], 0);
        push("gru.n.wh".into(), vec![self.d_h, self.d_h], self.d_h);
        push("gru.n.bh".into(), vec![self.d_h], 0);

        // Belief heads.
        push("prior.h1.w".into(), vec![self.head_hidden, self.d_h], self.d_h);
        push("prior.h1.b".into(), vec![self.head_hidden], 0);
        push("prior.out.w".into(), vec![2 * self.d_s, self.head_hidden], self.head_hidden);
        push("prior.out.b".into(), vec![2 * self.d_s], 0);
        let post_in = self.d_h + self.embed_dim();
        push("post.h1.w".into(), vec![self.head_hidden, post_in], post_in);
        push("post.h1.b".into(), vec![self.head_hidden], 0);
        push("post.out.w".into(), vec![2 * self.d_s, self.head_hidden], self.head_hidden);
        push("post.out.b".into(), vec![2 * self.d_s], 0);

        out
    }
}
