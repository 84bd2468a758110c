//! Violation-of-expectation probes: one expected/violated video pair per
//! physical rule, KL surprise traces per checkpoint, and the summed
//! surprise-difference table over training epochs.

use crate::error::{Error, Result};
use crate::rng;
use crate::scenegen::{
    render_counterfactual, render_sequence, stability_oracle, BlockSpec, RenderConfig, SceneSpec,
    StabilityOutcome, VideoSequence,
};
use crate::trainer::Checkpoint;
use crate::worldmodel::{filter_sequence, kl_divergence};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// The four support rules, ordered by the age at which children acquire them
/// (3, 5, 6.5 and 12.5 months).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhysicalRule {
    ContactOrNoContact,
    TypeOfContact,
    Overlap,
    Shape,
}

impl PhysicalRule {
    pub const ALL: [PhysicalRule; 4] = [
        PhysicalRule::ContactOrNoContact,
        PhysicalRule::TypeOfContact,
        PhysicalRule::Overlap,
        PhysicalRule::Shape,
    ];

    /// Stable identifier used in CSV output and file names.
    pub fn key(&self) -> &'static str {
        match self {
            PhysicalRule::ContactOrNoContact => "contact_or_no_contact",
            PhysicalRule::TypeOfContact => "type_of_contact",
            PhysicalRule::Overlap => "overlap",
            PhysicalRule::Shape => "shape",
        }
    }

    pub fn from_key(key: &str) -> Result<Self> {
        PhysicalRule::ALL
            .into_iter()
            .find(|r| r.key() == key)
            .ok_or_else(|| Error::Argument(format!("unknown rule key {key}")))
    }
}

/// Paired stimuli for one rule. Both members share the scene, resolution,
/// length and first frame; exactly one member is consistent with physics.
#[derive(Debug, Clone)]
pub struct ProbePair {
    pub rule: PhysicalRule,
    pub expected: VideoSequence,
    pub violated: VideoSequence,
    pub scene: SceneSpec,
}

/// Which frames the surprise sums run over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurpriseWindow {
    /// Every frame (the quantitative default).
    AllFrames,
    /// Drop the first k frames, where early-filter uncertainty dominates.
    SkipFirst(usize),
}

impl Default for SurpriseWindow {
    fn default() -> Self {
        SurpriseWindow::AllFrames
    }
}

impl SurpriseWindow {
    pub fn indices(&self, t_len: usize) -> Result<std::ops::Range<usize>> {
        let start = match self {
            SurpriseWindow::AllFrames => 0,
            SurpriseWindow::SkipFirst(k) => *k,
        };
        if start >= t_len {
            return Err(Error::Argument(format!(
                "window skips {start} frames of a {t_len}-frame sequence"
            )));
        }
        Ok(start..t_len)
    }
}

/// Canonical probe scenes plus render settings. Versioned so result tables
/// can name the exact stimulus set that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub version: String,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    pub window: SurpriseWindow,
    /// Scenes keyed by rule; each must be unstable under the oracle so the
    /// expected member shows the fall and the violated member freezes it.
    pub contact_scene: SceneSpec,
    pub type_scene: SceneSpec,
    pub overlap_scene: SceneSpec,
    pub shape_scene: SceneSpec,
}

const LOWER_COLOR: [f32; 3] = [0.16, 0.32, 0.78];
const UPPER_COLOR: [f32; 3] = [0.82, 0.12, 0.10];
const PROBE_CAMERA: f64 = 0.12;

impl ProbeConfig {
    /// Canonical stimulus set at the given resolution.
    pub fn canonical(frame_count: usize, height: usize, width: usize) -> Self {
        let lower = BlockSpec::cube(1.2, LOWER_COLOR, 0.0);
        let upper = BlockSpec::cube(0.75, UPPER_COLOR, 0.0);
        // Combined half-extents along x: 0.6 + 0.375.
        let touch = 0.975;

        // Hovering with a clearly visible gap.
        let contact_scene = SceneSpec {
            lower,
            upper,
            upper_offset: [0.0, 0.0],
            upper_height: 0.5,
            camera_azimuth: PROBE_CAMERA,
            rng_seed: 0,
        };
        // Side contact: footprints touch edge-to-edge, zero contact area.
        let type_scene = SceneSpec {
            lower,
            upper,
            upper_offset: [touch, 0.0],
            upper_height: 0.0,
            camera_azimuth: PROBE_CAMERA,
            rng_seed: 0,
        };
        // 15% of the upper bottom face supported: overlap width
        // 0.15 * 0.75 = 0.1125, so offset = touch - 0.1125.
        let overlap_scene = SceneSpec {
            lower,
            upper,
            upper_offset: [touch - 0.1125, 0.0],
            upper_height: 0.0,
            camera_azimuth: PROBE_CAMERA,
            rng_seed: 0,
        };
        // L-shaped block: corner and y arm on the support (over half the
        // footprint area), long x arm overhanging far enough to pull the
        // center of mass past the edge.
        let shape_scene = SceneSpec {
            lower,
            upper: BlockSpec::l_shape(1.4, 1.1, 0.4, 0.5, UPPER_COLOR, 0.0),
            upper_offset: [0.9, 0.0],
            upper_height: 0.0,
            camera_azimuth: PROBE_CAMERA,
            rng_seed: 0,
        };
        Self {
            version: "probes-v1".into(),
            frame_count,
            height,
            width,
            window: SurpriseWindow::AllFrames,
            contact_scene,
            type_scene,
            overlap_scene,
            shape_scene,
        }
    }

    pub fn scene(&self, rule: PhysicalRule) -> &SceneSpec {
        match rule {
            PhysicalRule::ContactOrNoContact => &self.contact_scene,
            PhysicalRule::TypeOfContact => &self.type_scene,
            PhysicalRule::Overlap => &self.overlap_scene,
            PhysicalRule::Shape => &self.shape_scene,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("probe config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Format(format!("probe config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Derives `n` stimulus variants of a rule's scene by jittering block
    /// colors and the camera azimuth (geometry untouched, so the oracle
    /// outcome is preserved). Variant 0 is the canonical scene.
    pub fn variants(&self, rule: PhysicalRule, n: usize, seed: u64) -> Vec<SceneSpec> {
        let base = self.scene(rule).clone();
        let mut out = vec![base.clone()];
        for k in 1..n {
            let mut stream = rng::stream(seed, &[rule as u64, k as u64]);
            let mut scene = base.clone();
            for c in scene.lower.color.iter_mut() {
                *c = (*c + rng::uniform(&mut stream, -0.12, 0.12) as f32).clamp(0.05, 0.95);
            }
            for c in scene.upper.color.iter_mut() {
                *c = (*c + rng::uniform(&mut stream, -0.12, 0.12) as f32).clamp(0.05, 0.95);
            }
            scene.camera_azimuth += rng::uniform(&mut stream, -0.1, 0.1);
            out.push(scene);
        }
        out
    }
}

/// Renders the expected (oracle outcome) and violated (forced stable) members
/// for one rule. Errors if the pair would be degenerate, i.e. the scene is
/// already stable.
pub fn build_probe_pair(rule: PhysicalRule, config: &ProbeConfig, render: &RenderConfig) -> Result<ProbePair> {
    build_pair_for_scene(rule, config.scene(rule).clone(), config, render)
}

fn build_pair_for_scene(
    rule: PhysicalRule,
    scene: SceneSpec,
    config: &ProbeConfig,
    render: &RenderConfig,
) -> Result<ProbePair> {
    let outcome = stability_oracle(&scene);
    if outcome.is_stable() {
        return Err(Error::Config(format!(
            "{} probe scene is stable under the oracle; expected and violated members would be identical",
            rule.key()
        )));
    }
    let expected = render_sequence(&scene, config.frame_count, config.height, config.width, render)?;
    let violated = render_counterfactual(
        &scene,
        StabilityOutcome::Stable,
        config.frame_count,
        config.height,
        config.width,
        render,
    )?;
    Ok(ProbePair { rule, expected, violated, scene })
}

/// Per-frame KL(posterior || prior) for one sequence under one checkpoint.
#[derive(Debug, Clone)]
pub struct SurpriseTrace {
    pub values: Vec<f64>,
    pub sequence_id: String,
    pub epoch: u32,
}

/// Surprise trace of a video under a checkpoint's parameters.
pub fn surprise(checkpoint: &Checkpoint, video: &VideoSequence, noise_seed: u64) -> Result<SurpriseTrace> {
    let first = video
        .frames
        .first()
        .ok_or_else(|| Error::Argument("surprise needs a non-empty video".into()))?;
    if first.height != checkpoint.model.img_hw || first.width != checkpoint.model.img_hw {
        return Err(Error::Config(format!(
            "video {}x{} does not match checkpoint model {}x{}",
            first.height, first.width, checkpoint.model.img_hw, checkpoint.model.img_hw
        )));
    }
    let steps = filter_sequence(&checkpoint.model, &checkpoint.params, &video.frames, noise_seed)?;
    let values = steps
        .iter()
        .map(|s| kl_divergence(s.posterior.as_ref().expect("posterior present"), &s.prior))
        .collect();
    Ok(SurpriseTrace { values, sequence_id: format!("seed{noise_seed}"), epoch: checkpoint.epoch })
}

/// Summed surprise for both pair members and their difference over a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurpriseRecord {
    pub rule: PhysicalRule,
    pub epoch: u32,
    pub kl_expected: f64,
    pub kl_violated: f64,
    /// violated - expected; positive once the model finds violations more
    /// surprising than physically consistent outcomes.
    pub difference: f64,
}

/// Sums both traces over the window and takes violated - expected.
pub fn surprise_difference(
    checkpoint: &Checkpoint,
    pair: &ProbePair,
    window: SurpriseWindow,
    noise_seed: u64,
) -> Result<SurpriseRecord> {
    let expected = surprise(checkpoint, &pair.expected, noise_seed)?;
    let violated = surprise(checkpoint, &pair.violated, noise_seed)?;
    let range = window.indices(expected.values.len())?;
    let kl_expected: f64 = expected.values[range.clone()].iter().sum();
    let kl_violated: f64 = violated.values[range].iter().sum();
    Ok(SurpriseRecord {
        rule: pair.rule,
        epoch: checkpoint.epoch,
        kl_expected,
        kl_violated,
        difference: kl_violated - kl_expected,
    })
}

/// One record per (rule, epoch): the probe table behind the trajectory
/// regression. Checkpoints evaluate in parallel; output order is
/// (epoch, rule) ascending regardless of thread scheduling.
pub fn probe_all(
    checkpoints: &[Checkpoint],
    pairs: &[ProbePair],
    window: SurpriseWindow,
    noise_seed: u64,
) -> Result<Vec<SurpriseRecord>> {
    let per_ckpt: Vec<Result<Vec<SurpriseRecord>>> = checkpoints
        .par_iter()
        .map(|ckpt| pairs.iter().map(|pair| surprise_difference(ckpt, pair, window, noise_seed)).collect())
        .collect();
    let mut out = Vec::with_capacity(checkpoints.len() * pairs.len());
    for records in per_ckpt {
        out.extend(records?);
    }
    Ok(out)
}

/// Writes the probe table as CSV: `rule,epoch,kl_expected,kl_violated,difference`.
pub fn write_surprise_csv(records: &[SurpriseRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "rule,epoch,kl_expected,kl_violated,difference")?;
    for r in records {
        writeln!(f, "{},{},{},{},{}", r.rule.key(), r.epoch, r.kl_expected, r.kl_violated, r.difference)?;
    }
    Ok(())
}

/// Reads a CSV produced by [`write_surprise_csv`].
pub fn read_surprise_csv(path: &Path) -> Result<Vec<SurpriseRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Format(format!("surprise csv line {i}: expected 5 fields")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("surprise csv line {i}: bad number {s}")))
        };
        out.push(SurpriseRecord {
            rule: PhysicalRule::from_key(parts[0])?,
            epoch: parts[1]
                .parse()
                .map_err(|_| Error::Format(format!("surprise csv line {i}: bad epoch")))?,
            kl_expected: parse(parts[2])?,
            kl_violated: parse(parts[3])?,
            difference: parse(parts[4])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::AdamHyper;
    use crate::worldmodel::{ModelConfig, Parameters};

    fn probe_cfg() -> (ProbeConfig, RenderConfig) {
        (ProbeConfig::canonical(8, 16, 16), RenderConfig::default())
    }

    fn tiny_checkpoint(epoch: u32, seed: u64) -> Checkpoint {
        let model = ModelConfig {
            d_s: 2,
            d_h: 4,
            img_hw: 16,
            channels: 3,
            head_hidden: 4,
            min_stddev: 1e-3,
            param_seed: seed,
        };
        let params = Parameters::init(&model);
        Checkpoint {
            epoch,
            model,
            params,
            opt: Some(crate::trainer::AdamState::new(&Parameters::<f32>::init(&model), AdamHyper::default())),
            train_loss: 0.0,
            val_loss: 0.0,
        }
    }

    #[test]
    fn all_four_pairs_build_and_share_first_frame() {
        let (cfg, render) = probe_cfg();
        for rule in PhysicalRule::ALL {
            let pair = build_probe_pair(rule, &cfg, &render).unwrap();
            assert_eq!(pair.expected.frames[0].data, pair.violated.frames[0].data, "{rule:?}");
            // Violated member is fully static; expected member moves.
            for f in &pair.violated.frames {
                assert_eq!(f.data, pair.violated.frames[0].data, "{rule:?} violated member moved");
            }
            let moved = pair.expected.frames.windows(2).any(|w| w[0].data != w[1].data);
            assert!(moved, "{rule:?} expected member is static");
            // Expected member re-labeled by the oracle stays consistent.
            assert_eq!(pair.expected.label, stability_oracle(&pair.scene), "{rule:?}");
            assert!(!pair.expected.label.is_stable());
        }
    }

    #[test]
    fn degenerate_probe_scene_is_rejected() {
        let (mut cfg, render) = probe_cfg();
        cfg.overlap_scene.upper_offset = [0.0, 0.0]; // fully supported: stable
        let err = build_probe_pair(PhysicalRule::Overlap, &cfg, &render).unwrap_err();
        assert!(err.to_string().contains("stable"), "{err}");
    }

    #[test]
    fn surprise_traces_are_nonnegative_and_deterministic() {
        let (cfg, render) = probe_cfg();
        let pair = build_probe_pair(PhysicalRule::Overlap, &cfg, &render).unwrap();
        let ckpt = tiny_checkpoint(0, 3);
        let a = surprise(&ckpt, &pair.expected, 11).unwrap();
        let b = surprise(&ckpt, &pair.expected, 11).unwrap();
        assert_eq!(a.values, b.values);
        assert!(a.values.iter().all(|&v| v >= 0.0 && v.is_finite()));
        assert_eq!(a.values.len(), 8);
    }

    #[test]
    fn difference_zero_for_identical_members_and_antisymmetric() {
        let (cfg, render) = probe_cfg();
        let pair = build_probe_pair(PhysicalRule::Shape, &cfg, &render).unwrap();
        let ckpt = tiny_checkpoint(0, 4);

        let same = ProbePair {
            rule: pair.rule,
            expected: pair.violated.clone(),
            violated: pair.violated.clone(),
            scene: pair.scene.clone(),
        };
        let rec = surprise_difference(&ckpt, &same, SurpriseWindow::AllFrames, 5).unwrap();
        assert_eq!(rec.difference, 0.0);

        let fwd = surprise_difference(&ckpt, &pair, SurpriseWindow::AllFrames, 5).unwrap();
        let swapped = ProbePair {
            rule: pair.rule,
            expected: pair.violated.clone(),
            violated: pair.expected.clone(),
            scene: pair.scene.clone(),
        };
        let rev = surprise_difference(&ckpt, &swapped, SurpriseWindow::AllFrames, 5).unwrap();
        assert!((fwd.difference + rev.difference).abs() < 1e-12);
    }

    #[test]
    fn empty_window_rejected() {
        let (cfg, render) = probe_cfg();
        let pair = build_probe_pair(PhysicalRule::Overlap, &cfg, &render).unwrap();
        let ckpt = tiny_checkpoint(0, 5);
        assert!(surprise_difference(&ckpt, &pair, SurpriseWindow::SkipFirst(8), 5).is_err());
    }

    #[test]
    fn probe_all_yields_rules_times_epochs_and_roundtrips_csv() {
        let (cfg, render) = probe_cfg();
        let pairs: Vec<ProbePair> = PhysicalRule::ALL
            .into_iter()
            .map(|r| build_probe_pair(r, &cfg, &render).unwrap())
            .collect();
        let ckpts = vec![tiny_checkpoint(0, 6), tiny_checkpoint(1, 7)];
        let records = probe_all(&ckpts, &pairs, SurpriseWindow::AllFrames, 9).unwrap();
        assert_eq!(records.len(), 8);
        let again = probe_all(&ckpts, &pairs, SurpriseWindow::AllFrames, 9).unwrap();
        assert_eq!(records, again);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("surprise.csv");
        write_surprise_csv(&records, &path).unwrap();
        let back = read_surprise_csv(&path).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn variants_preserve_oracle_outcome() {
        let (cfg, _) = probe_cfg();
        for rule in PhysicalRule::ALL {
            for scene in cfg.variants(rule, 4, 99) {
                assert!(!stability_oracle(&scene).is_stable(), "{rule:?} variant became stable");
            }
        }
    }

    #[test]
    fn probe_config_roundtrips_toml() {
        let (cfg, _) = probe_cfg();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probes.toml");
        cfg.save(&path).unwrap();
        let back = ProbeConfig::load(&path).unwrap();
        assert_eq!(cfg.version, back.version);
        assert_eq!(cfg.shape_scene, back.shape_scene);
    }
}
