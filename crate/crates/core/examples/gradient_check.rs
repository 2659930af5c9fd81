//! Finite-difference checks of the differentiable ops, in double precision.
//!
//! `cargo run --release --example gradient_check`

use bid::diff::{grad_check, Reduction, Tensor2D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor2D<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn main() -> bid::Result<()> {
    let eps = 1e-5;
    for dilation in [1, 3, 9] {
        let (x, w, b) = (random(3, 40, 1), random(4, 3 * 3, 2), random(4, 1, 3));
        let r = grad_check(&[x, w, b], 20, eps, |g, v| g.conv1d(v[0], v[1], Some(v[2]), dilation))?;
        println!("conv1d dilation {dilation}: max rel error {:.2e}", r.max_rel_error);
    }
    let (x, w, b) = (random(5, 12, 4), random(3, 5, 5), random(3, 1, 6));
    let r = grad_check(&[x, w, b], 12, eps, |g, v| g.linear(v[0], v[1], Some(v[2])))?;
    println!("linear: {:.2e}", r.max_rel_error);

    let x = random(4, 10, 7);
    let r = grad_check(&[x], 10, eps, |g, v| Ok(g.normalize_frames(v[0])))?;
    println!("normalize_frames: {:.2e}", r.max_rel_error);

    let (p, target) = (random(3, 10, 8), random(3, 10, 9));
    let weights = vec![1.0; 10];
    let r = grad_check(&[p.clone()], 10, eps, |g, v| {
        g.squared_error(v[0], &target, &weights, Reduction::MeanElements)
    })?;
    println!("squared error: {:.2e}", r.max_rel_error);
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let r = grad_check(&[p], 10, eps, |g, v| g.cross_entropy(v[0], &labels, &weights))?;
    println!("cross entropy: {:.2e}", r.max_rel_error);
    Ok(())
}
