//! Image tensor conventions and lossless persistence helpers.
//!
//! Images travel through the public API as CHW `f32` arrays with values in
//! [0, 1]. Models operate on [-1, 1] internally; the conversion happens at
//! the module boundary and nowhere else.

use crate::error::{Error, Result};
use ndarray::{Array3, Array4, ArrayView3, ArrayView4};
use std::io::{Read, Write};
use std::path::Path;

/// CH x H x W, intensities in [0, 1].
pub type ImageTensor = Array3<f32>;

/// [0,1] -> [-1,1]
pub fn to_model_range(x: &ArrayView3<f32>) -> Array3<f32> {
    x.mapv(|v| 2.0 * v - 1.0)
}

/// [-1,1] -> [0,1], no clamping.
pub fn from_model_range(x: &ArrayView3<f32>) -> Array3<f32> {
    x.mapv(|v| (v + 1.0) * 0.5)
}

/// Stack CHW images into an NCHW batch.
pub fn batch_of(images: &[ImageTensor]) -> Array4<f32> {
    assert!(!images.is_empty());
    let (c, h, w) = images[0].dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(img);
    }
    out
}

pub fn single_batch(image: &ArrayView3<f32>) -> Array4<f32> {
    let (c, h, w) = image.dim();
    image
        .to_owned()
        .into_shape((1, c, h, w))
        .expect("reshape to batch")
}

pub fn from_single_batch(batch: Array4<f32>) -> Array3<f32> {
    let (n, c, h, w) = batch.dim();
    assert_eq!(n, 1);
    batch.into_shape((c, h, w)).expect("reshape from batch")
}

pub fn clamp01(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

pub fn max_abs_diff(a: &ArrayView3<f32>, b: &ArrayView3<f32>) -> f32 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f32, |m, (x, y)| m.max((x - y).abs()))
}

pub fn mean_abs_diff(a: &ArrayView3<f32>, b: &ArrayView3<f32>) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum::<f64>()
        / n
}

/// Quantize to the 1/255 grid. Dataset images are born quantized so that the
/// PNG round trip is bit-exact.
pub fn quantize_u8(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

/// Save a CHW [0,1] image as RGB8 PNG (values clamped and rounded).
pub fn save_png(path: &Path, img: &ArrayView3<f32>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::input(format!("save_png expects 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = |ch: usize| (img[[ch, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(j as u32, i as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    buf.save(path).map_err(|e| Error::Image(e.to_string()))
}

pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = p.0[ch] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Exact f32 tensor persistence: magic, dims, little-endian payload.
pub fn save_raw(path: &Path, img: &ArrayView3<f32>) -> Result<()> {
    let (c, h, w) = img.dim();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"CHW1")?;
    for d in [c, h, w] {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in img.iter() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<ImageTensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != b"CHW1" {
        return Err(Error::input(format!("{}: not a raw tensor file", path.display())));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let mut data = vec![0f32; dims[0] * dims[1] * dims[2]];
    for v in data.iter_mut() {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)?;
        *v = f32::from_le_bytes(b);
    }
    Array3::from_shape_vec((dims[0], dims[1], dims[2]), data)
        .map_err(|e| Error::input(e.to_string()))
}

/// Gaussian NCHW tensor from an RNG (standard normal).
pub fn randn4(shape: (usize, usize, usize, usize), rng: &mut impl rand::Rng) -> Array4<f32> {
    use rand_distr::{Distribution, StandardNormal};
    Array4::from_shape_simple_fn(shape, || {
        let v: f64 = StandardNormal.sample(rng);
        v as f32
    })
}

pub fn randn3(shape: (usize, usize, usize), rng: &mut impl rand::Rng) -> Array3<f32> {
    use rand_distr::{Distribution, StandardNormal};
    Array3::from_shape_simple_fn(shape, || {
        let v: f64 = StandardNormal.sample(rng);
        v as f32
    })
}

/// Batched max |a - b|.
pub fn max_abs_diff4(a: &ArrayView4<f32>, b: &ArrayView4<f32>) -> f32 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f32, |m, (x, y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn png_roundtrip_is_exact_on_quantized_images() {
        let dir = tempdir().unwrap();
        let mut img = Array3::from_shape_fn((3, 8, 8), |(c, i, j)| {
            ((c * 67 + i * 13 + j * 5) % 256) as f32 / 255.0
        });
        quantize_u8(&mut img);
        let p = dir.path().join("x.png");
        save_png(&p, &img.view()).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn raw_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let img = Array3::from_shape_fn((3, 5, 7), |(c, i, j)| {
            (c as f32 * 0.3331 + i as f32 * 0.07 - j as f32 * 0.119).sin()
        });
        let p = dir.path().join("x.bin");
        save_raw(&p, &img.view()).unwrap();
        let back = load_raw(&p).unwrap();
        assert!(img.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
