use blocklab::dataset::{generate_corpus, split, Corpus, GenRun};
use blocklab::scenegen::{GenConfig, RenderConfig};
use blocklab::trainer::{train, TrainConfig};
use blocklab::worldmodel::ModelConfig;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let channels: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(16);
    let parallel: bool = args.get(2).map(|s| s == "par").unwrap_or(false);
    let dir = std::env::temp_dir().join("blocklab_bench");
    std::fs::create_dir_all(&dir).unwrap();
    let corpus_path = dir.join("bench.corpus");
    if !corpus_path.exists() {
        let run = GenRun {
            count: 64,
            master_seed: 11,
            frames_per_sequence: 20,
            height: 32,
            width: 32,
            gen: GenConfig::default(),
            render: RenderConfig::default(),
        };
        let t0 = Instant::now();
        generate_corpus(&run, &corpus_path).unwrap();
        println!("corpus gen 64 seqs: {:?}", t0.elapsed());
    }
    let corpus = Corpus::open(&corpus_path).unwrap();
    let sp = split(64, 48, 16, 1).unwrap();
    let model = ModelConfig {
        d_s: 8, d_h: 64, img_hw: 32, channels, head_hidden: 64, min_stddev: 1e-3, param_seed: 3,
    };
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 16,
        base_lr: 1e-3,
        lr_decay_every: 20,
        lr_decay_factor: 10.0,
        shuffle_seed: 1,
        noise_seed: 2,
        grad_clip: 100.0,
        parallel_batch: parallel,
        ..TrainConfig::default()
    };
    let out = dir.join(format!("bench_out_c{channels}"));
    let _ = std::fs::remove_dir_all(&out);
    let t0 = Instant::now();
    let summary = train(&corpus, &sp, &model, &tc, &out, None).unwrap();
    let dt = t0.elapsed();
    // 3 batches of 16 = 48 train seqs + 16 val seqs
    println!("channels={channels} parallel={parallel}: 1 epoch (48 train + 16 val seqs) in {dt:?}");
    println!("  -> per training sequence: {:?}", dt / 64);
    println!("  val {} first {}", summary.final_val_loss, summary.first_val_loss);
    let desk_epoch_secs = dt.as_secs_f64() / 64.0 * (1888.0 + 100.0);
    println!("  -> desk epoch ~{:.0}s, 40 epochs ~{:.1}h, 3 seeds ~{:.1}h", desk_epoch_secs, desk_epoch_secs*40.0/3600.0, desk_epoch_secs*120.0/3600.0);
}
