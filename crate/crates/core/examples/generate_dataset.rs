//! Builds the synthetic benchmark and writes it to disk.
//!
//! `cargo run --release --example generate_dataset -- [out_dir] [seed]`

use std::path::PathBuf;

use bid::data::{build_dataset, read_sequence, GeneratorConfig, Split};

fn main() -> bid::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "bench".into()));
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let cfg = GeneratorConfig::default();
    let data = build_dataset(&cfg, seed)?;
    let manifest = data.write(&out)?;
    println!(
        "{} train ({} labeled) / {} test -> {}",
        data.manifest.count(Split::Train),
        data.manifest.labeled_train_count(),
        data.manifest.count(Split::Test),
        manifest.display()
    );

    // files read back bit-exactly
    let (entry, seq) = data.split(Split::Test)[0];
    let back = read_sequence(&out.join(&entry.path))?;
    assert_eq!(&back, seq);
    for s in &seq.segments {
        println!(
            "  {} frames {}..={} class {}",
            entry.path.display(),
            s.begin,
            s.end,
            s.label
        );
    }
    Ok(())
}
