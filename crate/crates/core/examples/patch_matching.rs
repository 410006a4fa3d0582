//! Nearest teacher patch, by cosine distance, for each student patch.

use dualmim::pseudo_label::nearest_patch_match;
use dualmim::rng::stream;
use rand::Rng;

fn main() -> dualmim::Result<()> {
    let d = 8;
    let mut rng = stream(3, &[]);
    let mut rand_rows = |n: usize| -> Vec<f32> { (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let folds = [rand_rows(4), rand_rows(4), rand_rows(4)];
    // student rows are noisy copies of some teacher rows
    let mut student = Vec::new();
    for (k, r) in [(2, 1), (0, 3), (1, 0)] {
        student.extend(folds[k][r * d..(r + 1) * d].iter().map(|v| v * 2.0 + 0.01));
    }
    let refs: Vec<&[f32]> = folds.iter().map(Vec::as_slice).collect();
    let m = nearest_patch_match(&student, &refs, d)?;
    for (i, ((k, r), dist)) in m.chosen.iter().zip(&m.distance).enumerate() {
        println!("student {i} -> fold {k} row {r} (cosine distance {dist:.5})");
    }
    Ok(())
}
