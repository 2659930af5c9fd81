//! Ablation table: full method against w/o RVQ, w/o M, w/o U and w/o B.
//! Each row is a full pretrain + fine-tune + eval run.
//!
//! `cargo run --release --example ablation -- [epochs]`

use bid::data::{build_dataset, GeneratorConfig, LoadedDataset, Split};
use bid::eval::{default_score_thresholds, evaluate_checkpoint, TABLE_HEADER};
use bid::trainer::{finetune, pretrain, Ablation, EncoderInit, TrainConfig};

fn main() -> bid::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let mut base = TrainConfig::desk();
    for opt in [&mut base.pretrain, &mut base.finetune] {
        opt.total_epochs = epochs;
        opt.warmup_epochs = opt.warmup_epochs.min(epochs);
        opt.decay_epochs.retain(|&e| e < epochs);
    }
    let gen = GeneratorConfig::default();
    let data = LoadedDataset::from_generated(&build_dataset(&gen, base.seed)?);
    let (train, labeled, test) = (data.split(Split::Train), data.labeled_train(), data.split(Split::Test));

    println!("variant {TABLE_HEADER}");
    for v in Ablation::ALL {
        let mut cfg = base.clone();
        v.apply(&mut cfg);
        let pre = pretrain(&train, &cfg)?;
        let ft = finetune(
            EncoderInit::Pretrained(&pre.checkpoint),
            &labeled,
            gen.num_classes(),
            &cfg,
        )?;
        let r = evaluate_checkpoint(&ft.checkpoint, &test, gen.num_classes(), &default_score_thresholds())?;
        let cells: Vec<String> = r
            .map
            .iter()
            .chain([&r.average])
            .map(|m| format!("{:.2}", 100.0 * m))
            .collect();
        println!("{:<8}{}", v.label(), cells.join(" "));
    }
    Ok(())
}
