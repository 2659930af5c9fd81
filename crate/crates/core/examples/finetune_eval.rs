//! Fine-tunes a classifier on 10% of the train labels and reports detection
//! mAP. Pass a checkpoint written by the `pretrain` example to start from
//! it; without one the encoder starts from scratch.
//!
//! `cargo run --release --example finetune_eval -- [pretrain.ckpt]`

use bid::data::{build_dataset, GeneratorConfig, LoadedDataset, Split};
use bid::eval::{default_score_thresholds, evaluate_checkpoint, matrix_csv};
use bid::trainer::{finetune, Checkpoint, EncoderInit, TrainConfig};

fn main() -> bid::Result<()> {
    let ck = std::env::args()
        .nth(1)
        .map(|p| Checkpoint::load(p.as_ref()))
        .transpose()?;
    let cfg = TrainConfig::desk();
    let gen = GeneratorConfig::default();
    let data = LoadedDataset::from_generated(&build_dataset(&gen, cfg.seed)?);
    let labeled = data.labeled_train();
    let test = data.split(Split::Test);

    let init = match &ck {
        Some(c) => EncoderInit::Pretrained(c),
        None => EncoderInit::Scratch,
    };
    let result = finetune(init, &labeled, gen.num_classes(), &cfg)?;
    let report = evaluate_checkpoint(
        &result.checkpoint,
        &test,
        gen.num_classes(),
        &default_score_thresholds(),
    )?;
    print!("{}", report.table());
    if let Some(m) = &report.confusion {
        print!("confusion (rows = ground truth, last = background)\n{}", matrix_csv(m));
    }
    Ok(())
}
