//! Writes a synthetic ten-class dataset in CIFAR-10 binary layout.
//!
//! cargo run --example synthetic_dataset -- data/synth 10000 2000

use std::path::PathBuf;

use dualmim::data::cifar::{load_split, Split};
use dualmim::data::synth::{write_dataset, CLASS_NAMES};

fn main() -> dualmim::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = PathBuf::from(args.first().map_or("data/synth", String::as_str));
    let train = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let test = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2_000);
    write_dataset(&dir, train, test, 0)?;
    let back = load_split(&dir, Split::Train)?;
    let mut counts = [0usize; 10];
    for r in &back {
        counts[r.label as usize] += 1;
    }
    println!("wrote {train} train / {test} test images to {}", dir.display());
    for (name, n) in CLASS_NAMES.iter().zip(counts) {
        println!("  {name:<16} {n}");
    }
    Ok(())
}
