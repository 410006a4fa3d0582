//! Simple and complex views of one image, written as PPM files.

use std::fs;
use std::io::Write;
use std::path::Path;

use dualmim::data::augment::{complex_augment, simple_augment, AugmentConfig};
use dualmim::data::synth::render;
use dualmim::image::Image;
use dualmim::rng::stream;

fn write_ppm(path: &Path, img: &Image) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)
}

fn main() -> dualmim::Result<()> {
    let out = Path::new("views");
    fs::create_dir_all(out)?;
    let mut cfg = AugmentConfig::default();
    // keep pixels in [0, 1] so the views can be looked at
    cfg.mean = [0.0; 3];
    cfg.std = [1.0; 3];
    let source = render(5, &mut stream(0, &[]));
    write_ppm(&out.join("source.ppm"), &source)?;
    for i in 0..4u64 {
        let s = simple_augment(&source, &cfg, &mut stream(1, &[i]));
        let c = complex_augment(&source, &cfg, &mut stream(2, &[i]));
        write_ppm(&out.join(format!("simple_{i}.ppm")), &s)?;
        write_ppm(&out.join(format!("complex_{i}.ppm")), &c)?;
    }
    println!("wrote 9 images to {}", out.display());
    Ok(())
}
