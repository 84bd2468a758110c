use blocklab::dataset::{generate_corpus, split, Corpus, GenRun};
use blocklab::probes::*;
use blocklab::scenegen::{GenConfig, RenderConfig};
use blocklab::trainer::{train, Checkpoint, TrainConfig};
use blocklab::trajectory::{acquisition_order, fit_all};
use blocklab::worldmodel::ModelConfig;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let channels: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(12);
    let epochs: u32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(40);
    let dir = std::path::PathBuf::from("/root/pilot");
    std::fs::create_dir_all(&dir).unwrap();

    let corpus_path = dir.join("desk.corpus");
    if !corpus_path.exists() {
        let t0 = Instant::now();
        let run = GenRun {
            count: 2000,
            master_seed: 22,
            frames_per_sequence: 20,
            height: 32,
            width: 32,
            gen: GenConfig::default(),
            render: RenderConfig::default(),
        };
        generate_corpus(&run, &corpus_path).unwrap();
        println!("corpus: {:?}", t0.elapsed());
    }
    let corpus = Corpus::open(&corpus_path).unwrap();
    let sp = split(2000, 1900, 100, 77).unwrap();

    let model = ModelConfig {
        d_s: 8, d_h: 64, img_hw: 32, channels, head_hidden: 64, min_stddev: 1e-3,
        param_seed: blocklab::rng::derive(seed, &[100]),
    };
    let tc = TrainConfig {
        epochs,
        batch_size: 16,
        base_lr: 1e-3,
        lr_decay_every: 20,
        lr_decay_factor: 10.0,
        shuffle_seed: blocklab::rng::derive(seed, &[101]),
        noise_seed: blocklab::rng::derive(seed, &[102]),
        grad_clip: 100.0,
        parallel_batch: true,
        ..TrainConfig::default()
    };
    let out = dir.join(format!("run_s{seed}_c{channels}"));
    std::fs::create_dir_all(&out).unwrap();
    let t0 = Instant::now();
    let summary = train(&corpus, &sp, &model, &tc, &out, None).unwrap();
    println!("train {:?}: first val {:.1} final val {:.1}", t0.elapsed(), summary.first_val_loss, summary.final_val_loss);

    // Probe every checkpoint.
    let probe_cfg = ProbeConfig::canonical(20, 32, 32);
    let render = RenderConfig::default();
    let pairs: Vec<ProbePair> = PhysicalRule::ALL.iter().map(|&r| build_probe_pair(r, &probe_cfg, &render).unwrap()).collect();
    let ckpts: Vec<Checkpoint> = summary.checkpoints.iter().map(|p| Checkpoint::load(p).unwrap()).collect();
    let t1 = Instant::now();
    let records = probe_all(&ckpts, &pairs, SurpriseWindow::AllFrames, 900 + seed).unwrap();
    println!("probe: {:?}", t1.elapsed());
    write_surprise_csv(&records, &out.join("surprise.csv")).unwrap();

    let fits = fit_all(&records).unwrap();
    for rule in PhysicalRule::ALL {
        let f = &fits[rule.key()];
        let last = records.iter().filter(|r| r.rule == rule).max_by_key(|r| r.epoch).unwrap();
        println!(
            "{:24} slope {:+.4} se {:.4} p {:.2e} r2 {:.3} | final diff {:+.2} (exp {:.2} viol {:.2})",
            rule.key(), f.slope, f.slope_se, f.p_value, f.r2, last.difference, last.kl_expected, last.kl_violated
        );
    }
    let order = acquisition_order(&fits).unwrap();
    println!("order: {:?}", order.order.iter().map(|r| r.key()).collect::<Vec<_>>());

    // Rollout fidelity (criterion-8 style check).
    let last_ckpt = ckpts.last().unwrap();
    for pair in &pairs {
        let rollout = blocklab::worldmodel::open_loop_rollout(
            &last_ckpt.model, &last_ckpt.params, &pair.violated.frames[..2], 18, 1234,
        ).unwrap();
        let err = |frames: &[blocklab::scenegen::Frame]| -> f64 {
            let mut acc = 0.0;
            let mut n = 0usize;
            for (r, f) in rollout.iter().zip(&frames[2..]) {
                for (a, b) in r.data.iter().zip(&f.data) {
                    acc += ((a - b) * (a - b)) as f64;
                    n += 1;
                }
            }
            acc / n as f64
        };
        let to_exp = err(&pair.expected.frames);
        let to_viol = err(&pair.violated.frames);
        println!("rollout {:24} mse to expected {:.5} vs violated {:.5} -> {}", pair.rule.key(), to_exp, to_viol, if to_exp < to_viol { "EXPECTED (good)" } else { "violated" });
    }
}
