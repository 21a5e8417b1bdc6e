//! The albedo/shading separation network: a skip-connected encoder-decoder
//! mapping a 3-channel image to 3 albedo channels plus 1 shading channel,
//! trained purely on synthetic Mondrian-times-gradient-noise samples.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::field_bridge::{chw_from_hwc, hw_from_plane, hwc_from_chw, plane_from_hw};
use crate::imaging::{AlbedoField, Image, ShadingField};
use crate::nn::{
    load_checkpoint, save_checkpoint, Adam, Conv2d, Param, Sigmoid, Tensor, UNetCore, UnetArch,
};
use crate::pngio;
use crate::Result;

/// Shared training knobs for the offline-trained models.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub dataset_dir: PathBuf,
    pub seed: u64,
    pub validation_fraction: f32,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

const CKPT_KIND: &str = "decomposition";

/// The trained decomposition model plus its architecture descriptor.
pub struct DecompositionModel {
    core: UNetCore,
    head: Conv2d,
    out: Sigmoid,
    pub arch: UnetArch,
    pub meta: BTreeMap<String, String>,
}

impl DecompositionModel {
    /// Fresh model with seeded initialization. `widths[0]` is the stem width.
    pub fn new(widths: Vec<usize>, seed: u64) -> Self {
        let arch = UnetArch::new(3, widths);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let core = UNetCore::new("dec", arch.clone(), &mut rng);
        let head = Conv2d::new("dec.head", arch.stem_width(), 4, 1, 1, 0, &mut rng);
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), CKPT_KIND.to_string());
        meta.insert("seed".to_string(), seed.to_string());
        meta.insert("widths".to_string(), arch.widths_csv());
        Self {
            core,
            head,
            out: Sigmoid::new(),
            arch,
            meta,
        }
    }

    pub fn depth(&self) -> usize {
        self.arch.depth()
    }

    /// Raw network pass over an NCHW batch; output `[n, 4, h, w]` in (0, 1).
    pub fn forward(&mut self, x: &Tensor, with_grad: bool) -> Tensor {
        let (full, _) = self.core.forward(x, with_grad);
        let y = self.head.forward(&full, with_grad);
        self.out.forward(&y, with_grad)
    }

    pub fn backward(&mut self, g_out: &Tensor) -> Tensor {
        let g = self.out.backward(g_out);
        let g = self.head.backward(&g);
        self.core.backward(&g, None)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.core.visit_params(f);
        self.head.visit_params(f);
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.core.set_frozen(frozen);
        self.head.train_params = !frozen;
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors = Vec::new();
        self.visit_params(&mut |p| {
            tensors.push((p.name.clone(), p.shape.clone(), p.data.clone()));
        });
        save_checkpoint(path, &tensors, &self.meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut ckpt = load_checkpoint(path)?;
        let kind = ckpt.meta_str("kind", path)?;
        if kind != CKPT_KIND {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("expected kind {CKPT_KIND}, found {kind}"),
            });
        }
        let widths_raw = ckpt.meta_str("widths", path)?.to_string();
        let widths = UnetArch::widths_from_csv(&widths_raw).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("bad widths metadata: {widths_raw}"),
        })?;
        let seed: u64 = ckpt.meta_parse("seed", path).unwrap_or(0);
        let mut model = Self::new(widths, seed);
        model.meta = ckpt.meta.clone();
        let mut err = None;
        model.visit_params(&mut |p| {
            if err.is_some() {
                return;
            }
            match ckpt.take_tensor(&p.name, path) {
                Ok((shape, data)) => {
                    if shape != p.shape {
                        err = Some(Error::Checkpoint {
                            path: path.to_path_buf(),
                            msg: format!("tensor {}: shape {shape:?} vs {:?}", p.name, p.shape),
                        });
                    } else {
                        p.data = data;
                    }
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        Ok(model)
    }

    /// Splits an image into albedo and shading fields. Inputs whose
    /// dimensions are not divisible by `2^depth` are replicate-padded for the
    /// pass and cropped back.
    pub fn decompose(&mut self, image: &Image) -> Result<(AlbedoField, ShadingField)> {
        let (h, w) = (image.height(), image.width());
        let div = 1usize << self.depth();
        let ph = h.div_ceil(div) * div;
        let pw = w.div_ceil(div) * div;

        let mut x = Tensor::zeros(1, 3, ph, pw);
        let src = image.data();
        for c in 0..3 {
            for y in 0..ph {
                let sy = y.min(h - 1);
                for xx in 0..pw {
                    let sx = xx.min(w - 1);
                    x.data[(c * ph + y) * pw + xx] = src[[sy, sx, c]];
                }
            }
        }
        let y = self.forward(&x, false);

        let mut albedo = ndarray::Array3::zeros((h, w, 3));
        let mut shading = ndarray::Array2::zeros((h, w));
        for yy in 0..h {
            for xx in 0..w {
                for c in 0..3 {
                    albedo[[yy, xx, c]] = y.data[(c * ph + yy) * pw + xx];
                }
                shading[[yy, xx]] = y.data[(3 * ph + yy) * pw + xx];
            }
        }
        Ok((AlbedoField::new(albedo)?, ShadingField::new(shading)?))
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// One in-memory training sample in CHW layout.
#[derive(Debug, Clone)]
pub struct DecompSample {
    pub image: Vec<f32>,   // 3*h*w
    pub albedo: Vec<f32>,  // 3*h*w
    pub shading: Vec<f32>, // h*w
    pub h: usize,
    pub w: usize,
}

/// Loads a `{images,albedo,shading}` layout produced by `gen-data`.
pub fn load_decomposition_dataset(dir: impl AsRef<Path>) -> Result<Vec<DecompSample>> {
    let dir = dir.as_ref();
    let images_dir = dir.join("images");
    if !images_dir.is_dir() {
        return Err(Error::Dataset {
            path: dir.to_path_buf(),
            msg: "missing images/ subdirectory".into(),
        });
    }
    let mut names: Vec<String> = fs::read_dir(&images_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset {
            path: dir.to_path_buf(),
            msg: "no samples found".into(),
        });
    }
    let mut out = Vec::with_capacity(names.len());
    let mut dims: Option<(usize, usize)> = None;
    for name in &names {
        let image = pngio::load_image(images_dir.join(name))?;
        let albedo = pngio::load_albedo(dir.join("albedo").join(name))?;
        let shading = pngio::load_shading(dir.join("shading").join(name))?;
        let (h, w) = (image.height(), image.width());
        if albedo.data().dim() != (h, w, 3) || shading.data().dim() != (h, w) {
            return Err(Error::Dataset {
                path: dir.join(name),
                msg: "sample fields disagree on dimensions".into(),
            });
        }
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::Dataset {
                    path: dir.join(name),
                    msg: format!("sample is {h}x{w}, dataset is {}x{}", d.0, d.1),
                });
            }
            _ => {}
        }
        out.push(DecompSample {
            image: chw_from_hwc(image.data()),
            albedo: chw_from_hwc(albedo.data()),
            shading: plane_from_hw(shading.data()),
            h,
            w,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Per-epoch training and validation losses.
#[derive(Debug, Clone, Default)]
pub struct LossHistory {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
}

/// Batched loss: albedo MSE + shading MSE + reconstruction MSE (equal
/// weights), each term a mean over its own elements. Returns the total and
/// writes d(loss)/d(output) into `grad` when given.
fn decomposition_loss(pred: &Tensor, batch: &[&DecompSample], grad: Option<&mut Tensor>) -> f64 {
    let n = pred.n;
    let plane = pred.plane();
    debug_assert_eq!(pred.c, 4);
    let n3 = (n * 3 * plane) as f64;
    let n1 = (n * plane) as f64;

    let mut l_alb = 0.0f64;
    let mut l_sh = 0.0f64;
    let mut l_rec = 0.0f64;
    let mut g = grad;

    for (bi, s) in batch.iter().enumerate() {
        let p = pred.sample(bi);
        let (a_hat, s_hat) = p.split_at(3 * plane);
        for i in 0..3 * plane {
            let da = (a_hat[i] - s.albedo[i]) as f64;
            l_alb += da * da;
            let sh = s_hat[i % plane];
            let drec = (a_hat[i] * sh - s.image[i]) as f64;
            l_rec += drec * drec;
        }
        for i in 0..plane {
            let ds = (s_hat[i] - s.shading[i]) as f64;
            l_sh += ds * ds;
        }
        if let Some(gt) = g.as_deref_mut() {
            let gs = gt.sample_mut(bi);
            for i in 0..3 * plane {
                let sh = s_hat[i % plane];
                let rec = a_hat[i] * sh - s.image[i];
                gs[i] = (2.0 * (a_hat[i] - s.albedo[i]) as f64 / n3
                    + 2.0 * rec as f64 * sh as f64 / n3) as f32;
                gs[3 * plane + i % plane] += (2.0 * rec as f64 * a_hat[i] as f64 / n3) as f32;
            }
            for i in 0..plane {
                gs[3 * plane + i] += (2.0 * (s_hat[i] - s.shading[i]) as f64 / n1) as f32;
            }
        }
    }
    l_alb / n3 + l_sh / n1 + l_rec / n3
}

fn batch_tensor(batch: &[&DecompSample]) -> Tensor {
    let (h, w) = (batch[0].h, batch[0].w);
    let mut x = Tensor::zeros(batch.len(), 3, h, w);
    for (i, s) in batch.iter().enumerate() {
        x.sample_mut(i).copy_from_slice(&s.image);
    }
    x
}

/// Result of a training run.
pub struct TrainedDecomposition {
    pub model: DecompositionModel,
    pub history: LossHistory,
    pub held_out_reconstruction_mse: f64,
}

fn fmt_history(h: &[f64]) -> String {
    h.iter()
        .map(|v| format!("{v:.6e}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Default backbone widths: 4 downsampling levels, stem width 8. Wider stems
/// improve the fit but scale cost quadratically; this setting holds the
/// reconstruction target at desk scale on CPU.
pub fn default_widths() -> Vec<usize> {
    vec![8, 16, 32, 64, 64]
}

/// Trains on a decomposition-layout dataset; `widths` sets the backbone.
pub fn train_decomposition(
    config: &TrainConfig,
    widths: Vec<usize>,
) -> Result<TrainedDecomposition> {
    config.validate()?;
    let samples = load_decomposition_dataset(&config.dataset_dir)?;
    let mut model = DecompositionModel::new(widths, config.seed);
    let div = 1usize << model.depth();
    if samples[0].h % div != 0 || samples[0].w % div != 0 {
        return Err(Error::Training(format!(
            "dataset {}x{} not divisible by {div}",
            samples[0].h, samples[0].w
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val =
        ((samples.len() as f32 * config.validation_fraction) as usize).clamp(1, samples.len() - 1);
    let (val_idx, train_rest) = order.split_at(n_val);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_rest.to_vec();

    let mut adam = Adam::new(config.learning_rate);
    let mut history = LossHistory::default();

    for _epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in train_idx.chunks(config.batch_size) {
            let batch: Vec<&DecompSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let x = batch_tensor(&batch);
            model.zero_grads();
            let pred = model.forward(&x, true);
            let mut g = Tensor::zeros(pred.n, pred.c, pred.h, pred.w);
            let loss = decomposition_loss(&pred, &batch, Some(&mut g));
            model.backward(&g);
            let step = adam.begin_step();
            model.visit_params(&mut |p| step.update(p));
            epoch_loss += loss;
            batches += 1;
        }
        history.train.push(epoch_loss / batches.max(1) as f64);

        let mut val_loss = 0.0f64;
        let mut val_batches = 0usize;
        for chunk in val_idx.chunks(config.batch_size) {
            let batch: Vec<&DecompSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let x = batch_tensor(&batch);
            let pred = model.forward(&x, false);
            val_loss += decomposition_loss(&pred, &batch, None);
            val_batches += 1;
        }
        history.val.push(val_loss / val_batches.max(1) as f64);
    }

    let val_samples: Vec<&DecompSample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let held_out_reconstruction_mse = reconstruction_mse(&mut model, &val_samples);

    model.meta.insert("epochs".into(), config.epochs.to_string());
    model
        .meta
        .insert("batch_size".into(), config.batch_size.to_string());
    model
        .meta
        .insert("learning_rate".into(), config.learning_rate.to_string());
    model.meta.insert(
        "validation_fraction".into(),
        config.validation_fraction.to_string(),
    );
    model
        .meta
        .insert("train_loss_history".into(), fmt_history(&history.train));
    model
        .meta
        .insert("val_loss_history".into(), fmt_history(&history.val));
    model.meta.insert(
        "held_out_reconstruction_mse".into(),
        format!("{held_out_reconstruction_mse:.6e}"),
    );

    Ok(TrainedDecomposition {
        model,
        history,
        held_out_reconstruction_mse,
    })
}

/// Mean squared error of the reconstruction `albedo_hat * shading_hat`
/// against the input image over a sample set.
pub fn reconstruction_mse(model: &mut DecompositionModel, samples: &[&DecompSample]) -> f64 {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in samples.chunks(8) {
        let x = batch_tensor(chunk);
        let pred = model.forward(&x, false);
        let plane = pred.plane();
        for (bi, s) in chunk.iter().enumerate() {
            let p = pred.sample(bi);
            let (a_hat, s_hat) = p.split_at(3 * plane);
            for i in 0..3 * plane {
                let d = (a_hat[i] * s_hat[i % plane] - s.image[i]) as f64;
                total += d * d;
            }
            count += 3 * plane;
        }
    }
    total / count.max(1) as f64
}

/// MSE between two flat buffers of equal length.
pub fn field_mse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut total = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = (x - y) as f64;
        total += d * d;
    }
    total / a.len() as f64
}

/// Converts a decompose() result back into CHW buffers for metric code.
pub fn decomposed_to_chw(albedo: &AlbedoField, shading: &ShadingField) -> (Vec<f32>, Vec<f32>) {
    (chw_from_hwc(albedo.data()), plane_from_hw(shading.data()))
}

/// Rebuilds field types from CHW buffers (test support).
pub fn fields_from_chw(
    albedo: &[f32],
    shading: &[f32],
    h: usize,
    w: usize,
) -> Result<(AlbedoField, ShadingField)> {
    Ok((
        AlbedoField::new(hwc_from_chw(albedo, h, w, 3))?,
        ShadingField::new(hw_from_plane(shading, h, w))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn tiny_dataset(dir: &Path, count: usize) {
        synth::write_decomposition_dataset(dir, count, 16, 16, 5, 2, 77).unwrap();
    }

    fn tiny_config(dir: &Path, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: 2e-3,
            dataset_dir: dir.to_path_buf(),
            seed: 5,
            validation_fraction: 0.2,
        }
    }

    #[test]
    fn dataset_loader_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 6);
        let samples = load_decomposition_dataset(dir.path()).unwrap();
        assert_eq!(samples.len(), 6);
        assert_eq!((samples[0].h, samples[0].w), (16, 16));
        // reconstruction holds to quantization error after the PNG round trip
        for s in &samples {
            for i in 0..s.image.len() {
                let rec = s.albedo[i] * s.shading[i % (s.h * s.w)];
                assert!((rec - s.image[i]).abs() < 0.02);
            }
        }
    }

    #[test]
    fn dataset_loader_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_decomposition_dataset(dir.path()),
            Err(Error::Dataset { .. })
        ));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 24);
        let config = tiny_config(dir.path(), 6);
        let widths = vec![4, 8, 8];

        let a = train_decomposition(&config, widths.clone()).unwrap();
        assert!(
            a.history.val.last().unwrap() <= a.history.val.first().unwrap(),
            "validation loss should not increase: {:?}",
            a.history.val
        );

        let b = train_decomposition(&config, widths).unwrap();
        let la = *a.history.train.last().unwrap();
        let lb = *b.history.train.last().unwrap();
        assert!(
            (la - lb).abs() < 1e-6,
            "two identically seeded runs diverged: {la} vs {lb}"
        );
    }

    #[test]
    fn decompose_shapes_and_ranges() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 8);
        let trained = train_decomposition(&tiny_config(dir.path(), 2), vec![4, 8]).unwrap();
        let mut model = trained.model;

        // non-divisible size goes through pad-and-crop
        let img = Image::filled(9, 13, [0.4, 0.5, 0.6]).unwrap();
        let (alb, sh) = model.decompose(&img).unwrap();
        assert_eq!(alb.data().dim(), (9, 13, 3));
        assert_eq!(sh.data().dim(), (9, 13));
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 8);
        let trained = train_decomposition(&tiny_config(dir.path(), 2), vec![4, 8]).unwrap();
        let mut model = trained.model;
        let p = dir.path().join("dec.ckpt");
        model.save(&p).unwrap();

        let mut loaded = DecompositionModel::load(&p).unwrap();
        let img = Image::filled(16, 16, [0.3, 0.7, 0.2]).unwrap();
        let (a1, s1) = model.decompose(&img).unwrap();
        let (a2, s2) = loaded.decompose(&img).unwrap();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(s1.data(), s2.data());
        assert!(loaded.meta.contains_key("val_loss_history"));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let plane = 4 * 4;
        let sample = DecompSample {
            image: (0..3 * plane).map(|i| (i % 7) as f32 * 0.1).collect(),
            albedo: (0..3 * plane).map(|i| (i % 5) as f32 * 0.2).collect(),
            shading: (0..plane).map(|i| (i % 3) as f32 * 0.3).collect(),
            h: 4,
            w: 4,
        };
        let batch = vec![&sample];
        let pred = Tensor::from_vec(
            1,
            4,
            4,
            4,
            (0..4 * plane).map(|i| 0.2 + (i % 11) as f32 * 0.05).collect(),
        );
        let mut g = Tensor::zeros(1, 4, 4, 4);
        decomposition_loss(&pred, &batch, Some(&mut g));

        let h = 1e-3f32;
        for &idx in &[0usize, 10, 20, 47, 50, 60] {
            let mut pp = pred.clone();
            pp.data[idx] += h;
            let mut pm = pred.clone();
            pm.data[idx] -= h;
            let fd = ((decomposition_loss(&pp, &batch, None)
                - decomposition_loss(&pm, &batch, None))
                / (2.0 * h as f64)) as f32;
            assert!(
                (fd - g.data[idx]).abs() < 1e-3 * (1.0 + fd.abs()),
                "loss grad mismatch at {idx}: fd {fd} vs {}",
                g.data[idx]
            );
        }
    }
}
