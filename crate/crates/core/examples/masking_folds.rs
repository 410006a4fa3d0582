//! Random masks and their split into equally sized folds.

use dualmim::masking::{gen_mask, split_folds, MaskingConfig};
use dualmim::rng::stream;

fn main() -> dualmim::Result<()> {
    for (n, ratio, k) in [(196, 0.75, 3), (64, 0.75, 3), (64, 0.75, 1)] {
        let mut rng = stream(7, &[n as u64]);
        let mask = gen_mask(n, ratio, &mut rng)?;
        let folds = split_folds(&mask, k, &mut rng)?;
        println!(
            "N={n} ratio={ratio} K={k}: {} visible, folds of {:?}",
            mask.visible.len(),
            folds.folds.iter().map(Vec::len).collect::<Vec<_>>()
        );
    }
    let bad = MaskingConfig { ratio: 0.75, folds: 5 };
    println!("N=64 ratio=0.75 K=5: {}", bad.validate(64).unwrap_err());
    Ok(())
}
