//! Pretrained versus from-scratch fine-tuning on the synthetic benchmark.
//!
//! `cargo run --release --example desk_benchmark -- [seed] [key=value ...]`

use std::time::Instant;

use bid::data::{build_dataset, GeneratorConfig, LoadedDataset, Split};
use bid::eval::{checkpoint_purity, default_score_thresholds, evaluate_checkpoint, random_code_baseline};
use bid::trainer::{finetune, pretrain, EncoderInit, TrainConfig};

fn main() -> bid::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = TrainConfig::desk();
    cfg.seed = seed;
    let mut gen = GeneratorConfig::default();
    for kv in args {
        let (k, v) = kv.split_once('=').expect("key=value");
        assert!(gen.set(k, v)? || cfg.set(k, v)?, "unknown key {k}");
    }
    let data = LoadedDataset::from_generated(&build_dataset(&gen, seed)?);
    let train = data.split(Split::Train);
    let test = data.split(Split::Test);
    let labeled = data.labeled_train();
    let c = gen.num_classes();
    println!("{} train, {} labeled, {} test", train.len(), labeled.len(), test.len());

    let t0 = Instant::now();
    let pre = pretrain(&train, &cfg)?;
    if let Some(u) = pre.usage.last() {
        println!("usage {}", u.line());
    }
    let checkpoint = pre.checkpoint;
    println!("pretrain {:.1}s", t0.elapsed().as_secs_f64());

    let purity = checkpoint_purity(&checkpoint, &test, c)?;
    let labels: Vec<Vec<usize>> = test.iter().map(|s| s.frame_labels(c)).collect();
    let (rseg, rcls) = random_code_baseline(&labels, cfg.quantizer.k_class, c + 1, 100, seed)?;
    println!(
        "purity segment {:.3} class {:.3} | random segment {:.3} class {:.3}",
        purity.mean_segment_purity(),
        purity.class_purity(),
        rseg,
        rcls
    );

    let t1 = Instant::now();
    let ft = finetune(EncoderInit::Pretrained(&checkpoint), &labeled, c, &cfg)?;
    let sc = finetune(EncoderInit::Scratch, &labeled, c, &cfg)?;
    println!("finetune x2 {:.1}s", t1.elapsed().as_secs_f64());
    let th = default_score_thresholds();
    let rp = evaluate_checkpoint(&ft.checkpoint, &test, c, &th)?;
    let rs = evaluate_checkpoint(&sc.checkpoint, &test, c, &th)?;
    print!("pretrained\n{}", rp.table());
    print!("scratch\n{}", rs.table());
    Ok(())
}
