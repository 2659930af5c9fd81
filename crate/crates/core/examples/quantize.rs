//! Residual quantization of random features with two codebooks, plus EMA
//! refitting and usage statistics.
//!
//! `cargo run --release --example quantize`

use bid::diff::Tensor2D;
use bid::quantizer::{rvq_quantize, usage_stats, Codebook};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> bid::Result<()> {
    let (d, n) = (16, 500);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let features = Tensor2D::<f32>::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));

    let mut class = Codebook::from_samples(64, &features, 0.99, 1)?;
    let residual = Codebook::random(256, d, 0.25, 0.99, 2)?;
    let bundle = rvq_quantize(&features, &class, &residual, 4)?;
    println!("commitment {:.4}", bundle.commitment);
    for (l, e) in bundle.layer_errors(&features).iter().enumerate() {
        println!("  error after layer {l}: {e:.4}");
    }

    let stats = usage_stats(&bundle.class_indices, class.size(), 1.0)?;
    println!(
        "class codes: perplexity {:.2}, {} dead",
        stats.perplexity,
        stats.dead.len()
    );

    // a few EMA steps on fixed assignments pull entries toward their cluster means
    for _ in 0..50 {
        let cols: Vec<Vec<f32>> = (0..n).map(|c| features.column(c)).collect();
        let b = rvq_quantize(&features, &class, &residual, 0)?;
        class.ema_update(b.class_indices.iter().zip(&cols).map(|(&k, f)| (k, f.as_slice())))?;
    }
    let after = rvq_quantize(&features, &class, &residual, 0)?;
    println!("class-only commitment after EMA: {:.4}", after.commitment);
    Ok(())
}
