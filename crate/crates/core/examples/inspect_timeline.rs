//! Pre-action segments of one test sequence next to its ground truth, as
//! CSV and SVG.
//!
//! `cargo run --release --example inspect_timeline -- <checkpoint> [out_dir]`

use std::path::PathBuf;

use bid::cli::{timeline, timeline_csv, timeline_svg};
use bid::data::{build_dataset, GeneratorConfig, LoadedDataset, Split};
use bid::model::segments_from_codes;
use bid::trainer::Checkpoint;

fn main() -> bid::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(ck) = args.next() else {
        eprintln!("usage: inspect_timeline <checkpoint> [out_dir]");
        std::process::exit(1);
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| ".".into()));
    let ck = Checkpoint::load(ck.as_ref())?;
    let gen = GeneratorConfig::default();
    let data = LoadedDataset::from_generated(&build_dataset(&gen, ck.config.seed)?);
    let seq = data.split(Split::Test)[0];

    let background = gen.num_classes();
    let rows = timeline(&ck, seq, background)?;
    if let Some(codes) = rows.iter().map(|r| r.code).collect::<Option<Vec<_>>>() {
        for s in segments_from_codes(&codes) {
            println!("pre-action {:>3}: frames {:>3}..={:>3}", s.label, s.begin, s.end);
        }
    }
    for s in &seq.segments {
        println!("ground truth {}: frames {:>3}..={:>3}", s.label, s.begin, s.end);
    }
    std::fs::write(out.join("timeline.csv"), timeline_csv(&rows)).map_err(|e| bid::Error::io(&out, e))?;
    std::fs::write(out.join("timeline.svg"), timeline_svg(&rows, background)).map_err(|e| bid::Error::io(&out, e))?;
    Ok(())
}
