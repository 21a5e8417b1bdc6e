//! Surface-normal supply: a pluggable estimator interface, an analytic
//! backend over synthetic geometry, and the mask-composited normal field the
//! discriminator consumes.
//!
//! Every backend's raw output passes through contract re-normalization: unit
//! length per pixel, camera-facing convention (z >= 0), degenerate vectors
//! mapped to (0, 0, 1).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::imaging::{
    cut_and_paste_3d, form_image, lambertian_shading, AlbedoField, Image, LightSpec, Mask,
    NormalField, ShadingField,
};
use crate::nn::{load_checkpoint, save_checkpoint, Conv2d, LeakyRelu, Tensor};
use crate::Result;

/// Albedo used by [`synth_scene`] when none is supplied.
pub const DEFAULT_SCENE_ALBEDO: [f32; 3] = [0.72, 0.52, 0.38];

/// Analytic test geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Sphere,
    Plane,
    TwoSpheres,
}

impl SceneKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SceneKind::Sphere => "sphere",
            SceneKind::Plane => "plane",
            SceneKind::TwoSpheres => "two_spheres",
        }
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(SceneKind::Sphere),
            "plane" => Ok(SceneKind::Plane),
            "two_spheres" => Ok(SceneKind::TwoSpheres),
            other => Err(Error::InvalidSpec(format!("unknown scene kind '{other}'"))),
        }
    }
}

/// A mutually consistent analytic triple: the shading equals the Lambertian
/// render of the normals, and the image is a constant albedo times that
/// shading.
#[derive(Debug, Clone)]
pub struct SceneRender {
    pub image: Image,
    pub normals: NormalField,
    pub shading: ShadingField,
}

fn spheres_of(kind: SceneKind, height: usize, width: usize) -> Vec<(f32, f32, f32)> {
    let min_dim = height.min(width) as f32;
    match kind {
        SceneKind::Plane => vec![],
        SceneKind::Sphere => vec![(height as f32 * 0.5, width as f32 * 0.5, 0.35 * min_dim)],
        SceneKind::TwoSpheres => vec![
            (height as f32 * 0.5, width as f32 * 0.30, 0.20 * min_dim),
            (height as f32 * 0.5, width as f32 * 0.70, 0.20 * min_dim),
        ],
    }
}

fn analytic_normals(kind: SceneKind, height: usize, width: usize) -> Array3<f32> {
    let spheres = spheres_of(kind, height, width);
    let mut out = Array3::zeros((height, width, 3));
    for y in 0..height {
        for x in 0..width {
            let py = y as f32 + 0.5;
            let px = x as f32 + 0.5;
            let mut n = [0.0f32, 0.0, 1.0];
            for &(cy, cx, r) in &spheres {
                let dy = py - cy;
                let dx = px - cx;
                let d2 = dy * dy + dx * dx;
                if d2 <= r * r {
                    let nz = (1.0 - d2 / (r * r)).max(0.0).sqrt();
                    n = [dx / r, dy / r, nz];
                    break;
                }
            }
            // tangent pixels can have |n| slightly off after f32 division
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            out[[y, x, 0]] = n[0] / norm;
            out[[y, x, 1]] = n[1] / norm;
            out[[y, x, 2]] = n[2] / norm;
        }
    }
    out
}

/// Footprint of the scene's objects (sphere silhouettes); empty for a plane.
pub fn scene_footprint(kind: SceneKind, height: usize, width: usize) -> Mask {
    let spheres = spheres_of(kind, height, width);
    let mut data = ndarray::Array2::zeros((height, width));
    for y in 0..height {
        for x in 0..width {
            let py = y as f32 + 0.5;
            let px = x as f32 + 0.5;
            for &(cy, cx, r) in &spheres {
                let dy = py - cy;
                let dx = px - cx;
                if dy * dy + dx * dx <= r * r {
                    data[[y, x]] = 1u8;
                    break;
                }
            }
        }
    }
    Mask::new(data).expect("binary by construction")
}

/// Renders analytic geometry under one light with a chosen constant albedo.
pub fn synth_scene_with_albedo(
    kind: SceneKind,
    height: usize,
    width: usize,
    light: &LightSpec,
    albedo_rgb: [f32; 3],
) -> Result<SceneRender> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidSpec("synth_scene: empty dimensions".into()));
    }
    let normals = NormalField::new(analytic_normals(kind, height, width))?;
    let shading = lambertian_shading(&normals, light)?;
    let albedo = AlbedoField::filled(height, width, albedo_rgb)?;
    let image = form_image(&albedo, &shading)?;
    Ok(SceneRender {
        image,
        normals,
        shading,
    })
}

/// Renders analytic geometry with the default constant albedo.
pub fn synth_scene(
    kind: SceneKind,
    height: usize,
    width: usize,
    light: &LightSpec,
) -> Result<SceneRender> {
    synth_scene_with_albedo(kind, height, width, light, DEFAULT_SCENE_ALBEDO)
}

/// Composites source-object normals over target-scene normals under a mask;
/// selection keeps every pixel exactly unit length.
pub fn composite_normals(
    n_source: &NormalField,
    n_target: &NormalField,
    mask: &Mask,
) -> Result<NormalField> {
    cut_and_paste_3d(n_source.data(), n_target.data(), mask)
        .map(NormalField::from_array_unchecked)
}

// ---------------------------------------------------------------------------
// Estimator backends
// ---------------------------------------------------------------------------

/// A normal-estimation backend. Implementations return raw vectors; the
/// provided [`NormalEstimator::estimate`] applies contract re-normalization.
pub trait NormalEstimator {
    fn backend_name(&self) -> &str;

    fn estimate_raw(&self, image: &Image) -> Result<Array3<f32>>;

    fn estimate(&self, image: &Image) -> Result<NormalField> {
        let raw = self.estimate_raw(image)?;
        if raw.dim() != (image.height(), image.width(), 3) {
            return Err(Error::Estimator {
                backend: self.backend_name().to_string(),
                msg: format!(
                    "backend returned shape {:?} for {}x{} input",
                    raw.shape(),
                    image.height(),
                    image.width()
                ),
            });
        }
        NormalField::normalized_from_raw(raw)
    }
}

/// Runs a backend on one image.
pub fn estimate_normals(estimator: &dyn NormalEstimator, image: &Image) -> Result<NormalField> {
    estimator.estimate(image)
}

/// Analytic backend: returns the exact normals of a named synthetic geometry
/// at the input image's dimensions.
pub struct AnalyticEstimator {
    pub kind: SceneKind,
}

impl NormalEstimator for AnalyticEstimator {
    fn backend_name(&self) -> &str {
        "synthetic"
    }

    fn estimate_raw(&self, image: &Image) -> Result<Array3<f32>> {
        Ok(analytic_normals(self.kind, image.height(), image.width()))
    }
}

/// Pretrained backend: a small convolutional net loaded from a checkpoint,
/// mapping an RGB image to raw normal vectors. The net is consumed as-is and
/// never trained here.
pub struct PretrainedEstimator {
    path: PathBuf,
    convs: std::cell::RefCell<Vec<Conv2d>>,
}

const NORMAL_NET_KIND: &str = "normal_estimator";

impl PretrainedEstimator {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut ckpt = load_checkpoint(&path).map_err(|e| Error::Estimator {
            backend: "pretrained".to_string(),
            msg: e.to_string(),
        })?;
        let kind = ckpt.meta_str("kind", &path)?.to_string();
        if kind != NORMAL_NET_KIND {
            return Err(Error::Checkpoint {
                path,
                msg: format!("expected kind {NORMAL_NET_KIND}, found {kind}"),
            });
        }
        let widths_raw = ckpt.meta_str("widths", &path)?.to_string();
        let widths = crate::nn::UnetArch::widths_from_csv(&widths_raw).ok_or_else(|| {
            Error::Checkpoint {
                path: path.clone(),
                msg: format!("bad widths metadata: {widths_raw}"),
            }
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut convs = Vec::new();
        for i in 0..widths.len() - 1 {
            let mut conv = Conv2d::new(
                &format!("c{i}"),
                widths[i],
                widths[i + 1],
                3,
                1,
                1,
                &mut rng,
            );
            let (wshape, wdata) = ckpt.take_tensor(&format!("c{i}.w"), &path)?;
            if wshape != conv.weight.shape {
                return Err(Error::Checkpoint {
                    path,
                    msg: format!("tensor c{i}.w shape {wshape:?} vs {:?}", conv.weight.shape),
                });
            }
            conv.weight.data = wdata;
            let (_, bdata) = ckpt.take_tensor(&format!("c{i}.b"), &path)?;
            conv.bias.data = bdata;
            conv.train_params = false;
            convs.push(conv);
        }
        Ok(Self {
            path,
            convs: std::cell::RefCell::new(convs),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes a randomly initialized estimator checkpoint; used by tests and
    /// smoke validation, standing in for an externally supplied model.
    pub fn save_random(path: impl AsRef<Path>, widths: &[usize], seed: u64) -> Result<()> {
        assert!(widths.len() >= 2 && widths[0] == 3 && *widths.last().unwrap() == 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for i in 0..widths.len() - 1 {
            let conv = Conv2d::new(&format!("c{i}"), widths[i], widths[i + 1], 3, 1, 1, &mut rng);
            tensors.push((format!("c{i}.w"), conv.weight.shape.clone(), conv.weight.data));
            tensors.push((format!("c{i}.b"), conv.bias.shape.clone(), conv.bias.data));
        }
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("kind".to_string(), NORMAL_NET_KIND.to_string());
        meta.insert(
            "widths".to_string(),
            widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        meta.insert("seed".to_string(), seed.to_string());
        save_checkpoint(path, &tensors, &meta)
    }
}

impl NormalEstimator for PretrainedEstimator {
    fn backend_name(&self) -> &str {
        "pretrained"
    }

    fn estimate_raw(&self, image: &Image) -> Result<Array3<f32>> {
        let (h, w) = (image.height(), image.width());
        let mut x = Tensor::zeros(1, 3, h, w);
        for y in 0..h {
            for xx in 0..w {
                for c in 0..3 {
                    x.data[(c * h + y) * w + xx] = image.data()[[y, xx, c]];
                }
            }
        }
        let mut convs = self.convs.borrow_mut();
        let last = convs.len() - 1;
        let mut act = LeakyRelu::new(0.1);
        for (i, conv) in convs.iter_mut().enumerate() {
            x = conv.forward(&x, false);
            if i != last {
                x = act.forward(&x, false);
            }
        }
        let mut out = Array3::zeros((h, w, 3));
        for y in 0..h {
            for xx in 0..w {
                for c in 0..3 {
                    // bias z upward so raw outputs rarely degenerate to zero
                    let v = x.data[(c * h + y) * w + xx];
                    out[[y, xx, c]] = if c == 2 { v + 1.0 } else { v };
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overhead() -> LightSpec {
        LightSpec::new([0.0, 0.0, 1.0], 1.0).unwrap()
    }

    #[test]
    fn scene_triple_is_self_consistent() {
        for kind in [SceneKind::Sphere, SceneKind::Plane, SceneKind::TwoSpheres] {
            let light = LightSpec::from_unnormalized([0.3, -0.2, 0.9], 0.8).unwrap();
            let scene = synth_scene(kind, 33, 41, &light).unwrap();
            let expected = lambertian_shading(&scene.normals, &light).unwrap();
            assert_eq!(scene.shading.data(), expected.data());
        }
    }

    #[test]
    fn sphere_center_pixel_faces_camera() {
        // odd dimensions put a pixel center exactly at the sphere apex
        let scene = synth_scene(SceneKind::Sphere, 65, 65, &overhead()).unwrap();
        let n = scene.normals.data();
        assert_eq!(n[[32, 32, 0]], 0.0);
        assert_eq!(n[[32, 32, 1]], 0.0);
        assert_eq!(n[[32, 32, 2]], 1.0);
    }

    #[test]
    fn plane_is_fronto_parallel_and_constant() {
        let scene = synth_scene(SceneKind::Plane, 16, 16, &overhead()).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(scene.normals.data()[[y, x, 2]], 1.0);
            }
        }
        let first = scene.shading.data()[[0, 0]];
        assert!(scene.shading.data().iter().all(|&v| v == first));
    }

    #[test]
    fn sphere_silhouette_normals_become_tangent() {
        let scene = synth_scene(SceneKind::Sphere, 65, 65, &overhead()).unwrap();
        let footprint = scene_footprint(SceneKind::Sphere, 65, 65);
        let mut min_z = f32::INFINITY;
        for y in 0..65 {
            for x in 0..65 {
                if footprint.data()[[y, x]] == 1 {
                    min_z = min_z.min(scene.normals.data()[[y, x, 2]]);
                }
            }
        }
        assert!(min_z < 0.2, "rim z {min_z} should approach tangency");
    }

    #[test]
    fn composite_normals_selects_and_keeps_norm() {
        let light = overhead();
        let a = synth_scene(SceneKind::Sphere, 17, 17, &light).unwrap().normals;
        let b = synth_scene(SceneKind::Plane, 17, 17, &light).unwrap().normals;
        let all = Mask::ones(17, 17);
        let none = Mask::zeros(17, 17);
        assert_eq!(
            composite_normals(&a, &b, &all).unwrap().data(),
            a.data()
        );
        assert_eq!(
            composite_normals(&a, &b, &none).unwrap().data(),
            b.data()
        );

        let footprint = scene_footprint(SceneKind::Sphere, 17, 17);
        let mixed = composite_normals(&a, &b, &footprint).unwrap();
        for y in 0..17 {
            for x in 0..17 {
                let n = [
                    mixed.data()[[y, x, 0]],
                    mixed.data()[[y, x, 1]],
                    mixed.data()[[y, x, 2]],
                ];
                let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                assert!((norm - 1.0).abs() <= crate::imaging::NORMAL_NORM_TOL);
            }
        }
        // composite of a field with itself is that field for any mask
        assert_eq!(
            composite_normals(&a, &a, &footprint).unwrap().data(),
            a.data()
        );
    }

    #[test]
    fn analytic_estimator_matches_scene() {
        let scene = synth_scene(SceneKind::TwoSpheres, 24, 32, &overhead()).unwrap();
        let est = AnalyticEstimator {
            kind: SceneKind::TwoSpheres,
        };
        let got = estimate_normals(&est, &scene.image).unwrap();
        for (a, b) in got.data().iter().zip(scene.normals.data().iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn pretrained_backend_contract() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("normals.ckpt");
        PretrainedEstimator::save_random(&p, &[3, 8, 8, 3], 11).unwrap();
        let est = PretrainedEstimator::load(&p).unwrap();
        let scene = synth_scene(SceneKind::Sphere, 16, 16, &overhead()).unwrap();
        let n = est.estimate(&scene.image).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let v = [
                    n.data()[[y, x, 0]],
                    n.data()[[y, x, 1]],
                    n.data()[[y, x, 2]],
                ];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                assert!((norm - 1.0).abs() <= 1e-4);
                assert!(v[2] >= 0.0);
            }
        }
        // determinism
        let n2 = est.estimate(&scene.image).unwrap();
        assert_eq!(n.data(), n2.data());
    }

    #[test]
    fn missing_checkpoint_is_an_estimator_error() {
        match PretrainedEstimator::load("/nonexistent/n.ckpt") {
            Err(Error::Estimator { .. }) => {}
            Err(other) => panic!("wrong error kind: {other}"),
            Ok(_) => panic!("load of missing checkpoint succeeded"),
        }
    }
}
