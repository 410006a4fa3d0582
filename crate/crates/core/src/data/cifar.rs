//! CIFAR-10 binary format: records of one label byte followed by 1024 red,
//! 1024 green and 1024 blue bytes, each plane row-major.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::Image;

pub const SIDE: usize = 32;
pub const PIXELS: usize = SIDE * SIDE * 3;
pub const RECORD: usize = PIXELS + 1;
pub const CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub label: u8,
    /// Channel-planar R, G, B.
    pub pixels: Vec<u8>,
}

impl ImageRecord {
    /// HWC image with values in `[0, 1]`.
    pub fn to_image(&self) -> Image {
        let mut data = Vec::with_capacity(PIXELS);
        for i in 0..SIDE * SIDE {
            for c in 0..3 {
                data.push(self.pixels[c * SIDE * SIDE + i] as f32 / 255.0);
            }
        }
        Image::new(SIDE, SIDE, 3, data)
    }

    /// Inverse of [`ImageRecord::to_image`] with rounding and clamping.
    pub fn from_image(label: u8, image: &Image) -> Self {
        let mut pixels = vec![0u8; PIXELS];
        for y in 0..SIDE {
            for x in 0..SIDE {
                for c in 0..3 {
                    let v = (image.at(y, x, c).clamp(0.0, 1.0) * 255.0).round() as u8;
                    pixels[c * SIDE * SIDE + y * SIDE + x] = v;
                }
            }
        }
        Self { label, pixels }
    }
}

pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<Vec<ImageRecord>> {
    if bytes.len() % RECORD != 0 {
        let whole = bytes.len() / RECORD;
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "truncated record at byte offset {}: expected a multiple of {RECORD} bytes ({} for {} records), found {}",
                whole * RECORD,
                (whole + 1) * RECORD,
                whole + 1,
                bytes.len()
            ),
        });
    }
    bytes
        .chunks_exact(RECORD)
        .enumerate()
        .map(|(i, r)| {
            if r[0] as usize >= CLASSES {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("label {} at byte offset {} is not below {CLASSES}", r[0], i * RECORD),
                });
            }
            Ok(ImageRecord {
                label: r[0],
                pixels: r[1..].to_vec(),
            })
        })
        .collect()
}

pub fn load_cifar10(path: &Path) -> Result<Vec<ImageRecord>> {
    if !path.is_file() {
        return Err(Error::DataMissing(path.to_path_buf()));
    }
    parse_cifar10(&fs::read(path)?, path)
}

pub fn encode_cifar10(records: &[ImageRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * RECORD);
    for r in records {
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

pub fn write_cifar10(path: &Path, records: &[ImageRecord]) -> Result<()> {
    fs::write(path, encode_cifar10(records))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Directory holding the batch files: `root` itself or the
/// `cifar-10-batches-bin` folder the official archive unpacks to.
pub fn batches_dir(root: &Path) -> Result<PathBuf> {
    for dir in [root.join("cifar-10-batches-bin"), root.to_path_buf()] {
        if dir.join(TRAIN_FILES[0]).is_file() || dir.join(TEST_FILE).is_file() {
            return Ok(dir);
        }
    }
    Err(Error::DataMissing(root.to_path_buf()))
}

/// All records of a split, train files in numeric order. Missing train
/// files after the first are skipped so subsets can be used.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<ImageRecord>> {
    let dir = batches_dir(root)?;
    match split {
        Split::Test => load_cifar10(&dir.join(TEST_FILE)),
        Split::Train => {
            let mut all = load_cifar10(&dir.join(TRAIN_FILES[0]))?;
            for f in &TRAIN_FILES[1..] {
                let p = dir.join(f);
                if p.is_file() {
                    all.extend(load_cifar10(&p)?);
                }
            }
            Ok(all)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, seed: u8) -> ImageRecord {
        ImageRecord {
            label,
            pixels: (0..PIXELS).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect(),
        }
    }

    #[test]
    fn roundtrip_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let recs: Vec<_> = (0..4).map(|i| record(i as u8 * 3 % 10, i)).collect();
        write_cifar10(&p, &recs).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len() as usize, 4 * RECORD);
        assert_eq!(load_cifar10(&p).unwrap(), recs);
    }

    #[test]
    fn planar_layout() {
        let mut r = record(1, 0);
        r.pixels.iter_mut().for_each(|v| *v = 0);
        r.pixels[5] = 255; // red of pixel (0, 5)
        r.pixels[1024 + 32] = 51; // green of pixel (1, 0)
        let img = r.to_image();
        assert_eq!(img.at(0, 5, 0), 1.0);
        assert_eq!(img.at(1, 0, 1), 0.2);
        assert_eq!(ImageRecord::from_image(1, &img), r);
    }

    #[test]
    fn truncated_file_names_sizes() {
        let bytes = encode_cifar10(&[record(0, 0), record(1, 1)]);
        let err = parse_cifar10(&bytes[..RECORD + 100], Path::new("x.bin")).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Format { .. }));
        assert!(msg.contains("offset 3073") && msg.contains("6146") && msg.contains("3173"), "{msg}");
    }

    #[test]
    fn bad_label_names_offset() {
        let mut bytes = encode_cifar10(&[record(0, 0), record(1, 1), record(2, 2)]);
        bytes[2 * RECORD] = 10;
        let msg = parse_cifar10(&bytes, Path::new("x.bin")).unwrap_err().to_string();
        assert!(msg.contains("label 10") && msg.contains("offset 6146"), "{msg}");
    }

    #[test]
    fn missing_data_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_split(dir.path(), Split::Train), Err(Error::DataMissing(_))));
        assert_eq!(Error::DataMissing(dir.path().into()).exit_code(), 3);
    }
}
