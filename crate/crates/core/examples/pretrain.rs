//! Unsupervised pre-training on the synthetic benchmark.
//!
//! `cargo run --release --example pretrain -- [epochs] [checkpoint_path]`

use std::path::PathBuf;

use bid::data::{build_dataset, GeneratorConfig, LoadedDataset, Split};
use bid::trainer::{pretrain, EpochLog, TrainConfig};

fn main() -> bid::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let path = PathBuf::from(args.next().unwrap_or_else(|| "pretrain.ckpt".into()));

    let mut cfg = TrainConfig::desk();
    cfg.pretrain.total_epochs = epochs;
    cfg.pretrain.warmup_epochs = cfg.pretrain.warmup_epochs.min(epochs);
    cfg.pretrain.decay_epochs.retain(|&e| e < epochs);

    let data = LoadedDataset::from_generated(&build_dataset(&GeneratorConfig::default(), cfg.seed)?);
    let train = data.split(Split::Train);
    let result = pretrain(&train, &cfg)?;
    println!("{}", EpochLog::HEADER);
    for h in &result.history {
        println!("{}", h.line());
    }
    if let Some(u) = result.usage.last() {
        println!("class-code perplexity {:.2}, {} dead", u.class_perplexity, u.class_dead);
    }
    result.checkpoint.save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}
