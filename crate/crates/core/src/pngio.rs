//! PNG encodings for every field type.
//!
//! - Images and albedo fields: 8-bit RGB, value = round(v * 255).
//! - Masks: 8-bit grayscale; loading thresholds at >= 128 -> 1.
//! - Shading fields: 16-bit grayscale, value = round(v * 65535).
//! - Normal fields: 16-bit RGB storing (n + 1) / 2 per channel.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::Error;
use crate::imaging::{AlbedoField, Image, Mask, NormalField, ShadingField};
use crate::Result;

fn file_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::ImageFile {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn encode_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn encode_u16(v: f32) -> u16 {
    (v * 65535.0).round().clamp(0.0, 65535.0) as u16
}

// ---------------------------------------------------------------------------
// 8-bit RGB (Image / AlbedoField)
// ---------------------------------------------------------------------------

fn save_rgb8(data: &Array3<f32>, path: &Path) -> Result<()> {
    let (h, w, _) = data.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                Rgb([
                    encode_u8(data[[y, x, 0]]),
                    encode_u8(data[[y, x, 1]]),
                    encode_u8(data[[y, x, 2]]),
                ]),
            );
        }
    }
    img.save(path).map_err(|e| file_err(path, e.to_string()))
}

fn load_rgb8(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| file_err(path, e.to_string()))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x, y);
            for c in 0..3 {
                out[[y as usize, x as usize, c]] = px[c] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    save_rgb8(image.data(), path.as_ref())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    Image::new(load_rgb8(path.as_ref())?)
}

pub fn save_albedo(albedo: &AlbedoField, path: impl AsRef<Path>) -> Result<()> {
    save_rgb8(albedo.data(), path.as_ref())
}

pub fn load_albedo(path: impl AsRef<Path>) -> Result<AlbedoField> {
    AlbedoField::new(load_rgb8(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// Masks (8-bit grayscale, threshold on load)
// ---------------------------------------------------------------------------

pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = mask.data().dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                Luma([if mask.data()[[y, x]] == 1 { 255 } else { 0 }]),
            );
        }
    }
    img.save(path).map_err(|e| file_err(path, e.to_string()))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| file_err(path, e.to_string()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            out[[y as usize, x as usize]] = if img.get_pixel(x, y)[0] >= 128 { 1 } else { 0 };
        }
    }
    Mask::new(out)
}

// ---------------------------------------------------------------------------
// Shading (16-bit grayscale)
// ---------------------------------------------------------------------------

pub fn save_shading(shading: &ShadingField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = shading.data().dim();
    let mut img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, Luma([encode_u16(shading.data()[[y, x]])]));
        }
    }
    img.save(path).map_err(|e| file_err(path, e.to_string()))
}

pub fn load_shading(path: impl AsRef<Path>) -> Result<ShadingField> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| file_err(path, e.to_string()))?
        .into_luma16();
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            out[[y as usize, x as usize]] = img.get_pixel(x, y)[0] as f32 / 65535.0;
        }
    }
    ShadingField::new(out)
}

// ---------------------------------------------------------------------------
// Normals (16-bit RGB, (n + 1) / 2 per channel)
// ---------------------------------------------------------------------------

pub fn save_normals(normals: &NormalField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, _) = normals.data().dim();
    let mut img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let enc = |c: usize| encode_u16((normals.data()[[y, x, c]] + 1.0) * 0.5);
            img.put_pixel(x as u32, y as u32, Rgb([enc(0), enc(1), enc(2)]));
        }
    }
    img.save(path).map_err(|e| file_err(path, e.to_string()))
}

pub fn load_normals(path: impl AsRef<Path>) -> Result<NormalField> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| file_err(path, e.to_string()))?
        .into_rgb16();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x, y);
            for c in 0..3 {
                out[[y as usize, x as usize, c]] = px[c] as f32 / 65535.0 * 2.0 - 1.0;
            }
        }
    }
    // 16-bit quantization perturbs norms slightly; restore the invariant.
    NormalField::normalized_from_raw(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    #[test]
    fn image_round_trip_is_quantization_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.png");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let img = Image::new(Array3::from_shape_fn((5, 7, 3), |_| {
            rng.random_range(0.0..=1.0)
        }))
        .unwrap();
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            // quantized to 1/255 steps
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        // second round trip is exact: quantization is idempotent
        save_image(&back, &p).unwrap();
        let back2 = load_image(&p).unwrap();
        assert_eq!(back.data(), back2.data());
    }

    #[test]
    fn shading_round_trip_16bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let s = ShadingField::new(ndarray::Array2::from_shape_fn((6, 4), |_| {
            rng.random_range(0.0..=1.0)
        }))
        .unwrap();
        save_shading(&s, &p).unwrap();
        let back = load_shading(&p).unwrap();
        for (a, b) in s.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }

    #[test]
    fn mask_round_trip_and_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Mask::new(ndarray::array![[1u8, 0], [0, 1]]).unwrap();
        save_mask(&m, &p).unwrap();
        assert_eq!(load_mask(&p).unwrap().data(), m.data());

        // gray values threshold at 128
        let img = GrayImage::from_fn(2, 1, |x, _| Luma([if x == 0 { 127 } else { 128 }]));
        let p2 = dir.path().join("gray.png");
        img.save(&p2).unwrap();
        let m2 = load_mask(&p2).unwrap();
        assert_eq!(m2.data()[[0, 0]], 0);
        assert_eq!(m2.data()[[0, 1]], 1);
    }

    #[test]
    fn normals_round_trip_keeps_unit_norm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.png");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let raw = Array3::from_shape_fn((4, 4, 3), |(_, _, c)| {
            if c == 2 {
                rng.random_range(0.1..1.0)
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        let n = NormalField::normalized_from_raw(raw).unwrap();
        save_normals(&n, &p).unwrap();
        let back = load_normals(&p).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    assert!((n.data()[[y, x, c]] - back.data()[[y, x, c]]).abs() < 1e-3);
                }
            }
        }
    }
}
