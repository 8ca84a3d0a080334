//! PNG image IO (`[3, H, W]` tensors in `[0, 1]`) and ATNS tensor files.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::atns;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loads an 8-bit PNG as `[3, H, W]` with values `v / 255`. Non-RGB colour
/// types are converted; other container formats are rejected. When
/// `expect` is given the image must have exactly that `(height, width)`.
pub fn load_image(path: impl AsRef<Path>, expect: Option<(usize, usize)>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    if image::guess_format(&bytes)? != ImageFormat::Png {
        return Err(Error::Format(format!("{} is not a PNG", path.display())));
    }
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if let Some((eh, ew)) = expect {
        if (h, w) != (eh, ew) {
            return Err(Error::Format(format!(
                "{} is {h}x{w}, expected {eh}x{ew}",
                path.display()
            )));
        }
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Quantises `round(v * 255)` clamped to `0..=255`.
pub fn to_rgb8<S: Scalar>(x: &Tensor<S>) -> Result<RgbImage> {
    let (c, h, w) = x.dims3("to_rgb8")?;
    if c != 3 {
        return Err(Error::Format(format!("expected 3 channels, got {c}")));
    }
    let d = x.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |px, py| {
        let i = py as usize * w + px as usize;
        image::Rgb(std::array::from_fn(|ch| {
            (d[ch * h * w + i].f64() * 255.0).round().clamp(0.0, 255.0) as u8
        }))
    }))
}

pub fn save_image<S: Scalar>(x: &Tensor<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    to_rgb8(x)?.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

pub fn load_tensor<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    atns::read(path)
}

pub fn save_tensor<S: Scalar>(x: &Tensor<S>, path: impl AsRef<Path>) -> Result<()> {
    atns::write(path, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn png_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::rand_uniform(vec![3, 5, 7], 0.0, 1.0, &mut rng);
        let p = dir.path().join("sub/x.png");
        save_image(&x, &p).unwrap();
        let back = load_image(&p, Some((5, 7))).unwrap();
        assert!(back.sub(&x).unwrap().max_abs() <= 0.5 / 255.0 + 1e-6);
        assert!(matches!(load_image(&p, Some((7, 5))), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_non_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        std::fs::write(&p, b"ATNS\x01\x01\x00\x00").unwrap();
        assert!(load_image(&p, None).is_err());
    }

    #[test]
    fn tensor_files_are_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::randn(vec![2, 3, 4], &mut rng);
        let p = dir.path().join("x.atns");
        save_tensor(&x, &p).unwrap();
        assert_eq!(load_tensor::<f32>(&p).unwrap(), x);
        std::fs::write(&p, b"NOPE\x01\x01").unwrap();
        assert!(matches!(load_tensor::<f32>(&p), Err(Error::Format(_))));
    }
}
