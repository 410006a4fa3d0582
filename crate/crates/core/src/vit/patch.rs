use crate::error::{Error, Result};
use crate::image::Image;

/// `[N, P*P*C]` matrix of flattened patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub count: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Patches {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Splits an image into non-overlapping `p x p` patches, ordered left to
/// right then top to bottom. Each row holds the patch pixels in
/// (row, column, channel) order.
pub fn patchify(image: &Image, p: usize) -> Result<Patches> {
    if p == 0 || image.height % p != 0 || image.width % p != 0 {
        return Err(Error::config(format!(
            "{}x{} image is not divisible into {p}x{p} patches",
            image.height, image.width
        )));
    }
    let (gh, gw, c) = (image.height / p, image.width / p, image.channels);
    let dim = p * p * c;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                let start = ((py * p + y) * image.width + px * p) * c;
                data.extend_from_slice(&image.data[start..start + p * c]);
            }
        }
    }
    Ok(Patches {
        count: gh * gw,
        dim,
        data,
    })
}

/// Inverse of [`patchify`] for a known output geometry.
pub fn unpatchify(patches: &Patches, height: usize, width: usize, p: usize) -> Result<Image> {
    if p == 0 || height % p != 0 || width % p != 0 || patches.dim % (p * p) != 0 {
        return Err(Error::config(format!(
            "cannot assemble {height}x{width} from {p}x{p} patches"
        )));
    }
    let (gh, gw) = (height / p, width / p);
    let c = patches.dim / (p * p);
    if patches.count != gh * gw {
        return Err(Error::Dimension {
            op: "unpatchify",
            lhs: vec![patches.count, patches.dim],
            rhs: vec![height, width, c],
        });
    }
    let mut img = Image::zeros(height, width, c);
    for py in 0..gh {
        for px in 0..gw {
            let row = patches.row(py * gw + px);
            for y in 0..p {
                let start = ((py * p + y) * width + px * p) * c;
                img.data[start..start + p * c].copy_from_slice(&row[y * p * c..(y + 1) * p * c]);
            }
        }
    }
    Ok(img)
}
