//! Balanced soft assignments from raw prototype scores.

use dualmim::pseudo_label::{entropy, sinkhorn_normalize};
use dualmim::rng::stream;
use rand::Rng;

fn main() -> dualmim::Result<()> {
    let (rows, cols) = (64, 16);
    let mut rng = stream(1, &[]);
    // every row prefers prototype 0, the way a collapsing head would
    let scores: Vec<f32> = (0..rows * cols)
        .map(|i| if i % cols == 0 { 1.0 } else { rng.random_range(-0.1..0.1) })
        .collect();
    for iters in [0, 1, 3, 10] {
        let q = sinkhorn_normalize(&scores, rows, cols, iters, 0.05)?;
        let mut marginal = vec![0.0f32; cols];
        for row in q.chunks_exact(cols) {
            marginal.iter_mut().zip(row).for_each(|(m, v)| *m += v / rows as f32);
        }
        println!(
            "iters={iters:<2} mass on prototype 0: {:.3}  marginal entropy: {:.3} (max {:.3})",
            marginal[0],
            entropy(&marginal),
            (cols as f64).ln()
        );
    }
    Ok(())
}
