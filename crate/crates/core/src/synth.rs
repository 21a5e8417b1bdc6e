//! Procedural training corpora.
//!
//! Everything here is a pure function of its spec and seed: Mondrian albedo
//! mosaics, gradient-noise shading fields, wobbly-disc distortion masks, and
//! the composed decomposition / distortion samples written to disk by
//! `gen-data`.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::imaging::{
    cut_and_paste_2d, form_image, AlbedoField, Image, LightSpec, Mask, ShadingField,
};
use crate::pngio;
use crate::Result;

/// Splits independent deterministic seed streams off one base seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(0x94d0_49bb_1331_11eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

/// Spec for a Mondrian albedo mosaic: colored rectangles over a background,
/// with a whole-canvas rotation and scale applied by nearest-neighbor
/// resampling so the field stays piecewise constant.
#[derive(Debug, Clone, PartialEq)]
pub struct MondrianSpec {
    pub n_patches: usize,
    pub height: usize,
    pub width: usize,
    /// Maximum rotation angle in degrees; the draw is uniform in [0, max].
    pub rotation_range: f32,
    /// Uniform scale interval (lo, hi); lo must be positive.
    pub scale_range: (f32, f32),
    pub rng_seed: u64,
}

impl MondrianSpec {
    pub fn new(height: usize, width: usize, rng_seed: u64) -> Self {
        Self {
            n_patches: 10,
            height,
            width,
            rotation_range: 45.0,
            scale_range: (0.8, 1.2),
            rng_seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec("MondrianSpec: empty dimensions".into()));
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.1 >= self.scale_range.0) {
            return Err(Error::InvalidSpec(format!(
                "MondrianSpec: bad scale range {:?}",
                self.scale_range
            )));
        }
        if !(0.0..=360.0).contains(&self.rotation_range) {
            return Err(Error::InvalidSpec(format!(
                "MondrianSpec: bad rotation range {}",
                self.rotation_range
            )));
        }
        Ok(())
    }
}

/// Spec for a gradient-noise shading field remapped to span [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PerlinSpec {
    pub height: usize,
    pub width: usize,
    /// Lattice cells per dimension.
    pub frequency: usize,
    pub rng_seed: u64,
}

impl PerlinSpec {
    pub fn new(height: usize, width: usize, rng_seed: u64) -> Self {
        Self {
            height,
            width,
            frequency: 2,
            rng_seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec("PerlinSpec: empty dimensions".into()));
        }
        if self.frequency < 1 {
            return Err(Error::InvalidSpec("PerlinSpec: frequency must be >= 1".into()));
        }
        Ok(())
    }
}

/// One supervised decomposition example; `image` is exactly albedo x shading.
#[derive(Debug, Clone)]
pub struct DecompositionSample {
    pub image: Image,
    pub albedo: AlbedoField,
    pub shading: ShadingField,
}

/// One discriminator example: a clean shading field, the same field with a
/// localized corruption, and the corrupted region as ground truth.
#[derive(Debug, Clone)]
pub struct DistortionSample {
    pub clean_shading: ShadingField,
    pub distorted_shading: ShadingField,
    pub distortion_mask: Mask,
}

// ---------------------------------------------------------------------------
// Gradient noise
// ---------------------------------------------------------------------------

fn fade(t: f32) -> f32 {
    // quintic smoothstep: 6t^5 - 15t^4 + 10t^3
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Raw 2D gradient noise on a `freq`x`freq` cell lattice, before remapping.
fn gradient_noise(height: usize, width: usize, freq: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = freq + 1;
    let mut grads = vec![(0.0f32, 0.0f32); n * n];
    for g in grads.iter_mut() {
        let a = rng.random_range(0.0..std::f32::consts::TAU);
        *g = (a.cos(), a.sin());
    }
    let gat = |i: usize, j: usize| grads[i * n + j];

    Array2::from_shape_fn((height, width), |(y, x)| {
        let v = (y as f32 + 0.5) / height as f32 * freq as f32;
        let u = (x as f32 + 0.5) / width as f32 * freq as f32;
        let i = (v.floor() as usize).min(freq - 1);
        let j = (u.floor() as usize).min(freq - 1);
        let fv = v - i as f32;
        let fu = u - j as f32;

        let dot = |gi: usize, gj: usize, dy: f32, dx: f32| {
            let (gx, gy) = gat(gi, gj);
            gx * dx + gy * dy
        };
        let n00 = dot(i, j, fv, fu);
        let n01 = dot(i, j + 1, fv, fu - 1.0);
        let n10 = dot(i + 1, j, fv - 1.0, fu);
        let n11 = dot(i + 1, j + 1, fv - 1.0, fu - 1.0);

        let wu = fade(fu);
        let wv = fade(fv);
        let top = n00 + wu * (n01 - n00);
        let bot = n10 + wu * (n11 - n10);
        top + wv * (bot - top)
    })
}

/// Smooth gradient-noise shading field affinely remapped to span exactly
/// [0, 1]; deterministic in the spec seed.
pub fn gen_perlin(spec: &PerlinSpec) -> Result<ShadingField> {
    spec.validate()?;
    let mut field = gradient_noise(spec.height, spec.width, spec.frequency, spec.rng_seed);
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in field.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 {
        field.fill(0.5);
    } else {
        let inv = 1.0 / (hi - lo);
        field.mapv_inplace(|v| ((v - lo) * inv).clamp(0.0, 1.0));
    }
    Ok(ShadingField::new(field)?)
}

// ---------------------------------------------------------------------------
// Mondrian mosaics
// ---------------------------------------------------------------------------

/// Background plus `n_patches` colored rectangles, then a whole-canvas
/// rotation/scale with nearest-neighbor sampling. Patch colors are drawn in
/// [0.1, 0.95] so albedo never goes fully black (black albedo makes shading
/// unidentifiable).
pub fn gen_mondrian(spec: &MondrianSpec) -> Result<AlbedoField> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let (h, w) = (spec.height, spec.width);

    let mut color = || {
        [
            rng.random_range(0.1..0.95f32),
            rng.random_range(0.1..0.95f32),
            rng.random_range(0.1..0.95f32),
        ]
    };
    let bg = color();
    let mut canvas = Array3::zeros((h, w, 3));
    for c in 0..3 {
        canvas.slice_mut(ndarray::s![.., .., c]).fill(bg[c]);
    }

    for _ in 0..spec.n_patches {
        let col = [
            rng.random_range(0.1..0.95f32),
            rng.random_range(0.1..0.95f32),
            rng.random_range(0.1..0.95f32),
        ];
        let ph = ((rng.random_range(0.08..0.45f32) * h as f32) as usize).max(1);
        let pw = ((rng.random_range(0.08..0.45f32) * w as f32) as usize).max(1);
        let cy = rng.random_range(0..h);
        let cx = rng.random_range(0..w);
        let y0 = cy.saturating_sub(ph / 2);
        let x0 = cx.saturating_sub(pw / 2);
        let y1 = (y0 + ph).min(h);
        let x1 = (x0 + pw).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..3 {
                    canvas[[y, x, c]] = col[c];
                }
            }
        }
    }

    let angle = rng.random_range(0.0..=spec.rotation_range).to_radians();
    let scale = rng.random_range(spec.scale_range.0..=spec.scale_range.1);
    let (sin, cos) = angle.sin_cos();
    let cyf = h as f32 * 0.5;
    let cxf = w as f32 * 0.5;

    let out = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        // inverse map: un-scale then un-rotate about the center, clamped NN
        let dy = (y as f32 + 0.5 - cyf) / scale;
        let dx = (x as f32 + 0.5 - cxf) / scale;
        let sy = cos * dy + sin * dx + cyf;
        let sx = -sin * dy + cos * dx + cxf;
        let iy = (sy.floor() as i64).clamp(0, h as i64 - 1) as usize;
        let ix = (sx.floor() as i64).clamp(0, w as i64 - 1) as usize;
        canvas[[iy, ix, c]]
    });
    Ok(AlbedoField::new(out)?)
}

/// Combines a Mondrian albedo and a gradient-noise shading into one
/// supervised sample with `image = albedo (*) shading` exactly.
pub fn make_decomposition_sample(
    mspec: &MondrianSpec,
    pspec: &PerlinSpec,
) -> Result<DecompositionSample> {
    if (mspec.height, mspec.width) != (pspec.height, pspec.width) {
        return Err(Error::ShapeMismatch {
            ctx: "make_decomposition_sample specs",
            a: vec![mspec.height, mspec.width],
            b: vec![pspec.height, pspec.width],
        });
    }
    let albedo = gen_mondrian(mspec)?;
    let shading = gen_perlin(pspec)?;
    let image = form_image(&albedo, &shading)?;
    Ok(DecompositionSample {
        image,
        albedo,
        shading,
    })
}

// ---------------------------------------------------------------------------
// Wobbly-disc masks and shading distortions
// ---------------------------------------------------------------------------

/// Periodic 1D gradient noise over [0, cells), used to wobble the disc radius.
fn periodic_noise_1d(t: f32, grads: &[f32]) -> f32 {
    let cells = grads.len();
    let i = (t.floor() as usize) % cells;
    let j = (i + 1) % cells;
    let f = t - t.floor();
    let a = grads[i] * f;
    let b = grads[j] * (f - 1.0);
    a + fade(f) * (b - a)
}

/// A filled disc whose radius is modulated per angle by gradient noise,
/// centered uniformly at random; the construction rejection-samples its
/// parameters until the area lands between 2% and 40% of the frame.
pub fn perlin_circle_mask(height: usize, width: usize, rng_seed: u64) -> Result<Mask> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidSpec(
            "perlin_circle_mask: dimensions must be >= 8".into(),
        ));
    }
    let min_dim = height.min(width) as f32;
    let frame = (height * width) as f32;
    for attempt in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, attempt));
        let cy = rng.random_range(0.0..height as f32);
        let cx = rng.random_range(0.0..width as f32);
        let r0 = rng.random_range(0.10..0.35f32) * min_dim;
        let cells = 8;
        let grads: Vec<f32> = (0..cells).map(|_| rng.random_range(-1.0..1.0f32)).collect();

        let mut data = Array2::zeros((height, width));
        let mut area = 0usize;
        for y in 0..height {
            for x in 0..width {
                let dy = y as f32 + 0.5 - cy;
                let dx = x as f32 + 0.5 - cx;
                let dist = (dy * dy + dx * dx).sqrt();
                let phi = dy.atan2(dx) + std::f32::consts::PI; // [0, 2pi]
                let t = phi / std::f32::consts::TAU * cells as f32;
                let r = r0 * (1.0 + 0.35 * periodic_noise_1d(t, &grads));
                if dist <= r {
                    data[[y, x]] = 1u8;
                    area += 1;
                }
            }
        }
        let frac = area as f32 / frame;
        if (0.02..=0.40).contains(&frac) {
            return Ok(Mask::new(data)?);
        }
    }
    // Deterministic fallback: centered plain disc covering 10% of the frame.
    let r = (0.10 * frame / std::f32::consts::PI).sqrt();
    let cy = height as f32 * 0.5;
    let cx = width as f32 * 0.5;
    let data = Array2::from_shape_fn((height, width), |(y, x)| {
        let dy = y as f32 + 0.5 - cy;
        let dx = x as f32 + 0.5 - cx;
        u8::from((dy * dy + dx * dx).sqrt() <= r)
    });
    Ok(Mask::new(data)?)
}

/// Replaces the region under a wobbly-disc mask with fresh gradient noise;
/// everything outside the mask is untouched. Returns the mask as ground
/// truth localization.
pub fn distort_shading(clean: &ShadingField, rng_seed: u64) -> Result<DistortionSample> {
    let (h, w) = clean.data().dim();
    let mask = perlin_circle_mask(h, w, derive_seed(rng_seed, 0xD157))?;
    let fresh = gen_perlin(&PerlinSpec {
        height: h,
        width: w,
        frequency: 3,
        rng_seed: derive_seed(rng_seed, 0xF8E5),
    })?;
    let distorted = cut_and_paste_2d(fresh.data(), clean.data(), &mask)?;
    Ok(DistortionSample {
        clean_shading: clean.clone(),
        distorted_shading: ShadingField::new(distorted)?,
        distortion_mask: mask,
    })
}

// ---------------------------------------------------------------------------
// Dataset writers (gen-data)
// ---------------------------------------------------------------------------

/// Emits `count` decomposition samples under
/// `dir/{images,albedo,shading}/NNNNNN.png`.
pub fn write_decomposition_dataset(
    dir: impl AsRef<Path>,
    count: usize,
    height: usize,
    width: usize,
    n_patches: usize,
    perlin_freq: usize,
    base_seed: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "albedo", "shading"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for i in 0..count {
        let mspec = MondrianSpec {
            n_patches,
            ..MondrianSpec::new(height, width, derive_seed(base_seed, 2 * i as u64))
        };
        let pspec = PerlinSpec {
            frequency: perlin_freq,
            ..PerlinSpec::new(height, width, derive_seed(base_seed, 2 * i as u64 + 1))
        };
        let sample = make_decomposition_sample(&mspec, &pspec)?;
        let name = format!("{i:06}.png");
        pngio::save_image(&sample.image, dir.join("images").join(&name))?;
        pngio::save_albedo(&sample.albedo, dir.join("albedo").join(&name))?;
        pngio::save_shading(&sample.shading, dir.join("shading").join(&name))?;
    }
    Ok(())
}

/// Emits `count` distortion samples under
/// `dir/{clean,distorted,masks,normals}/NNNNNN.png`.
///
/// Clean shading comes from analytic scenes rendered under random lights, so
/// each sample's normals agree with its clean shading exactly.
pub fn write_distortion_dataset(
    dir: impl AsRef<Path>,
    count: usize,
    height: usize,
    width: usize,
    base_seed: u64,
) -> Result<()> {
    use crate::normals::{synth_scene, SceneKind};

    let dir = dir.as_ref();
    for sub in ["clean", "distorted", "masks", "normals"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for i in 0..count {
        let seed = derive_seed(base_seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = match rng.random_range(0..5u32) {
            0 => SceneKind::Plane,
            1 | 2 => SceneKind::Sphere,
            _ => SceneKind::TwoSpheres,
        };
        let dir_vec = [
            rng.random_range(-0.8..0.8f32),
            rng.random_range(-0.8..0.8f32),
            rng.random_range(0.35..1.0f32),
        ];
        let light = LightSpec::from_unnormalized(dir_vec, rng.random_range(0.6..1.0f32))?;
        let scene = synth_scene(kind, height, width, &light)?;
        let sample = distort_shading(&scene.shading, derive_seed(seed, 0x5EED))?;

        let name = format!("{i:06}.png");
        pngio::save_shading(&sample.clean_shading, dir.join("clean").join(&name))?;
        pngio::save_shading(&sample.distorted_shading, dir.join("distorted").join(&name))?;
        pngio::save_mask(&sample.distortion_mask, dir.join("masks").join(&name))?;
        pngio::save_normals(&scene.normals, dir.join("normals").join(&name))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perlin_spans_unit_interval() {
        let s = gen_perlin(&PerlinSpec::new(64, 64, 42)).unwrap();
        let lo = s.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = s.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn perlin_deterministic() {
        let a = gen_perlin(&PerlinSpec::new(32, 48, 7)).unwrap();
        let b = gen_perlin(&PerlinSpec::new(32, 48, 7)).unwrap();
        assert_eq!(a.data(), b.data());
        let c = gen_perlin(&PerlinSpec::new(32, 48, 8)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn perlin_is_slowly_varying() {
        // frequency 2 at 64x64: mean absolute adjacent-pixel difference
        // stays under 0.05
        for seed in 0..5 {
            let s = gen_perlin(&PerlinSpec::new(64, 64, seed)).unwrap();
            let d = s.data();
            let mut total = 0.0f64;
            let mut count = 0usize;
            for y in 0..64 {
                for x in 0..63 {
                    total += (d[[y, x + 1]] - d[[y, x]]).abs() as f64;
                    count += 1;
                }
            }
            for y in 0..63 {
                for x in 0..64 {
                    total += (d[[y + 1, x]] - d[[y, x]]).abs() as f64;
                    count += 1;
                }
            }
            let mean = total / count as f64;
            assert!(mean < 0.05, "seed {seed}: mean adjacent diff {mean}");
        }
    }

    fn distinct_colors(a: &AlbedoField) -> usize {
        let mut set = std::collections::HashSet::new();
        let d = a.data();
        let (h, w, _) = d.dim();
        for y in 0..h {
            for x in 0..w {
                set.insert((
                    d[[y, x, 0]].to_bits(),
                    d[[y, x, 1]].to_bits(),
                    d[[y, x, 2]].to_bits(),
                ));
            }
        }
        set.len()
    }

    #[test]
    fn mondrian_color_count_bounded() {
        for seed in 0..8 {
            let spec = MondrianSpec::new(64, 64, seed);
            let a = gen_mondrian(&spec).unwrap();
            let n = distinct_colors(&a);
            assert!(n <= 11, "seed {seed}: {n} distinct colors for 10 patches");
            assert!(n >= 2, "seed {seed}: degenerate mosaic");
        }
    }

    #[test]
    fn mondrian_zero_patches_is_uniform() {
        let spec = MondrianSpec {
            n_patches: 0,
            ..MondrianSpec::new(16, 16, 3)
        };
        let a = gen_mondrian(&spec).unwrap();
        assert_eq!(distinct_colors(&a), 1);
    }

    #[test]
    fn mondrian_deterministic() {
        let spec = MondrianSpec::new(32, 32, 99);
        assert_eq!(
            gen_mondrian(&spec).unwrap().data(),
            gen_mondrian(&spec).unwrap().data()
        );
    }

    #[test]
    fn decomposition_sample_reconstructs_exactly() {
        let m = MondrianSpec::new(32, 32, 5);
        let p = PerlinSpec::new(32, 32, 6);
        let s = make_decomposition_sample(&m, &p).unwrap();
        let formed = form_image(&s.albedo, &s.shading).unwrap();
        assert_eq!(s.image.data(), formed.data());
        // shading <= 1 means image <= albedo elementwise
        for (i, a) in s.image.data().iter().zip(s.albedo.data().iter()) {
            assert!(i <= a);
        }
    }

    #[test]
    fn decomposition_sample_rejects_shape_mismatch() {
        let m = MondrianSpec::new(32, 32, 5);
        let p = PerlinSpec::new(16, 32, 6);
        assert!(make_decomposition_sample(&m, &p).is_err());
    }

    #[test]
    fn circle_mask_binary_and_area_bounds() {
        for seed in 0..100 {
            let m = perlin_circle_mask(64, 64, seed).unwrap();
            let frac = m.area() as f32 / (64.0 * 64.0);
            assert!(
                (0.02..=0.40).contains(&frac),
                "seed {seed}: area fraction {frac}"
            );
        }
    }

    #[test]
    fn circle_mask_deterministic() {
        let a = perlin_circle_mask(32, 32, 12).unwrap();
        let b = perlin_circle_mask(32, 32, 12).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn distortion_untouched_outside_mask() {
        let clean = gen_perlin(&PerlinSpec::new(48, 48, 21)).unwrap();
        let s = distort_shading(&clean, 77).unwrap();
        let (h, w) = clean.data().dim();
        for y in 0..h {
            for x in 0..w {
                if s.distortion_mask.data()[[y, x]] == 0 {
                    assert_eq!(s.distorted_shading.data()[[y, x]], clean.data()[[y, x]]);
                }
            }
        }
        for &v in s.distorted_shading.data().iter() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn distortion_changes_constant_field() {
        let clean =
            ShadingField::new(Array2::from_elem((32, 32), 0.5)).unwrap();
        for seed in 0..100 {
            let s = distort_shading(&clean, seed).unwrap();
            let changed = s
                .distorted_shading
                .data()
                .iter()
                .zip(clean.data().iter())
                .any(|(a, b)| a != b);
            assert!(changed, "seed {seed}: distortion left field unchanged");
        }
    }
}
