//! The reshading optimizer: an untrained encoder-decoder, fit per
//! object/scene pair, that maps a fixed noise tensor to the object's new
//! shading field. Frozen auxiliary models (decomposition, discriminator,
//! features) enter only through the loss.
//!
//! Output formation keeps the surroundings untouched by construction: the
//! final image is a masked selection of `object_albedo * generated_shading`
//! over the target, so every pixel outside the mask is the target's, bit for
//! bit, at every iteration.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::decomposition::DecompositionModel;
use crate::discriminator::DiscriminatorModel;
use crate::error::Error;
use crate::features::FeatureNet;
use crate::field_bridge::{chw_from_hwc, hw_from_plane, hwc_from_chw, plane_from_hw};
use crate::imaging::{
    composite_albedo, composite_shading, cut_and_paste_3d, mask_field_3d, place_field_3d,
    place_mask, AlbedoField, Image, Mask, NormalField, Placement, ShadingField,
};
use crate::nn::{Adam, Conv2d, Param, Sigmoid, Tensor, UNetCore, UnetArch};
use crate::normals::{
    composite_normals, AnalyticEstimator, NormalEstimator, PretrainedEstimator, SceneKind,
};
use crate::synth::derive_seed;
use crate::Result;

/// Clamp floor applied to the discriminator's global score before the log.
pub const LOG_CLAMP: f32 = 1e-6;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Knobs of one reshading run.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DipConfig {
    pub iterations: usize,
    pub learning_rate: f32,
    pub noise_channels: usize,
    /// Number of perturbed noise copies processed per iteration.
    pub noise_batch: usize,
    /// Standard deviation of the per-iteration Gaussian perturbations added
    /// to the fixed noise tensor.
    pub noise_perturb_sigma: f32,
    pub seed: u64,
    /// (w_s, w_n, w_f): shading-, normal-, and feature-consistency weights.
    pub loss_weights: (f32, f32, f32),
    /// Optional total-variation regularizer on the raw shading output;
    /// 0 disables it.
    pub tv_weight: f32,
    /// Backbone widths; `widths[0]` is the stem, one entry per level after.
    pub widths: Vec<usize>,
}

impl Default for DipConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            learning_rate: 1e-2,
            noise_channels: 32,
            noise_batch: 1,
            noise_perturb_sigma: 0.03,
            seed: 0,
            loss_weights: (1.0, 1.0, 1.0),
            tv_weight: 0.0,
            widths: default_dip_widths(),
        }
    }
}

impl DipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("dip iterations must be >= 1".into()));
        }
        if self.noise_batch == 0 {
            return Err(Error::Config("noise_batch must be >= 1".into()));
        }
        if self.noise_channels == 0 {
            return Err(Error::Config("noise_channels must be >= 1".into()));
        }
        let (ws, wn, wf) = self.loss_weights;
        if ws < 0.0 || wn < 0.0 || wf < 0.0 || self.tv_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.noise_perturb_sigma < 0.0 {
            return Err(Error::Config("noise_perturb_sigma must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Default reshading backbone: 5 downsampling levels.
pub fn default_dip_widths() -> Vec<usize> {
    vec![16, 32, 64, 64, 64, 64]
}

/// Which normal estimator serves each side of the job.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum NormalsBackendSpec {
    /// One checkpointed network applied to both images.
    Pretrained { checkpoint: PathBuf },
    /// Analytic geometry, named per side.
    Synthetic {
        source_scene: String,
        target_scene: String,
    },
}

impl NormalsBackendSpec {
    fn build(&self) -> Result<(Box<dyn NormalEstimator>, Box<dyn NormalEstimator>)> {
        match self {
            NormalsBackendSpec::Pretrained { checkpoint } => {
                let a = PretrainedEstimator::load(checkpoint)?;
                let b = PretrainedEstimator::load(checkpoint)?;
                Ok((Box::new(a), Box::new(b)))
            }
            NormalsBackendSpec::Synthetic {
                source_scene,
                target_scene,
            } => {
                let s: SceneKind = source_scene.parse()?;
                let t: SceneKind = target_scene.parse()?;
                Ok((
                    Box::new(AnalyticEstimator { kind: s }),
                    Box::new(AnalyticEstimator { kind: t }),
                ))
            }
        }
    }
}

/// Checkpoints backing a job.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
pub struct JobCheckpoints {
    pub decomposition: PathBuf,
    pub features: PathBuf,
    pub discriminator: PathBuf,
    pub normals: NormalsBackendSpec,
}

/// One reshading task: object fragment, its mask, the target scene, and the
/// fragment placement within the target frame.
pub struct ReshadeJob {
    pub source: Image,
    pub source_mask: Mask,
    pub target: Image,
    pub placement: Placement,
    pub checkpoints: JobCheckpoints,
}

// ---------------------------------------------------------------------------
// Prepared state
// ---------------------------------------------------------------------------

/// Everything computed once before optimization starts.
pub struct PreparedJob {
    pub height: usize,
    pub width: usize,
    /// Object mask placed in the target frame.
    pub mask: Mask,
    pub target: Image,
    pub source_placed: Image,
    /// Naive cut-and-paste of the placed source over the target.
    pub naive_composite: Image,
    /// Decomposed object albedo, placed; zero outside the mask.
    pub object_albedo: AlbedoField,
    pub target_albedo: AlbedoField,
    pub target_shading: ShadingField,
    /// Source normals placed over target normals under the mask.
    pub composite_normals: NormalField,
    /// The masked target shading (1 - M) * S_T handed to the optimizer as
    /// its degraded observation.
    pub degraded_shading: ShadingField,

    disc: Option<DiscriminatorModel>,
    feat: Option<FeatureNet>,
    c_features: Option<Vec<f32>>,

    mask_plane: Vec<f32>,
    inv_mask_plane: Vec<f32>,
    s_t_plane: Vec<f32>,
    rho_o_chw: Vec<f32>,
    target_chw: Vec<f32>,
    n_y_chw: Vec<f32>,
}

/// Computes the one-time state for a job: the placed mask, both
/// decompositions, the object albedo, composited normals, the naive
/// composite, and the degraded shading.
pub fn prepare_job(job: &ReshadeJob) -> Result<PreparedJob> {
    let (th, tw) = (job.target.height(), job.target.width());
    let mask = place_mask(&job.source_mask, &job.placement, th, tw)?;

    let mut decomposition = DecompositionModel::load(&job.checkpoints.decomposition)
        .map_err(|e| e.in_stage("decomposition"))?;
    let (rho_s, _s_s) = decomposition.decompose(&job.source)?;
    let (rho_t, s_t) = decomposition.decompose(&job.target)?;

    let rho_s_placed = place_field_3d(rho_s.data(), &job.placement, th, tw);
    let rho_o = AlbedoField::new(mask_field_3d(&rho_s_placed, &mask)?)?;

    let (src_est, tgt_est) = job.checkpoints.normals.build()?;
    let n_s = src_est.estimate(&job.source)?;
    let n_t = tgt_est.estimate(&job.target)?;
    let n_s_placed =
        NormalField::normalized_from_raw(place_field_3d(n_s.data(), &job.placement, th, tw))?;
    let n_y = composite_normals(&n_s_placed, &n_t, &mask)?;

    let source_placed = Image::new(place_field_3d(job.source.data(), &job.placement, th, tw))?;
    let naive_composite = Image::new(cut_and_paste_3d(
        source_placed.data(),
        job.target.data(),
        &mask,
    )?)?;

    let inv = mask.complement();
    let degraded = ShadingField::new(s_t.data() * &inv.to_f32())?;

    let disc = DiscriminatorModel::load(&job.checkpoints.discriminator)
        .map_err(|e| e.in_stage("discriminator"))?;
    let feat = FeatureNet::load(&job.checkpoints.features).map_err(|e| e.in_stage("features"))?;

    let mut prepared = PreparedJob::from_fields(
        job.target.clone(),
        s_t,
        mask,
        rho_o,
        rho_t,
        n_y,
        Some(disc),
        Some(feat),
    )?;
    prepared.source_placed = source_placed;
    prepared.naive_composite = naive_composite;
    prepared.degraded_shading = degraded;
    prepared.refresh_composite_features()?;
    Ok(prepared)
}

impl PreparedJob {
    /// Builds prepared state directly from fields; the auxiliary models are
    /// optional so that pure-inpainting runs (w_n = w_f = 0) need no
    /// checkpoints. The naive composite defaults to the target when no
    /// placed source is involved.
    #[allow(clippy::too_many_arguments)]
    pub fn from_fields(
        target: Image,
        target_shading: ShadingField,
        mask: Mask,
        object_albedo: AlbedoField,
        target_albedo: AlbedoField,
        composite_normals: NormalField,
        disc: Option<DiscriminatorModel>,
        feat: Option<FeatureNet>,
    ) -> Result<Self> {
        let (h, w) = (target.height(), target.width());
        for (name, (ah, aw)) in [
            ("target_shading", target_shading.data().dim()),
            ("mask", mask.data().dim()),
            (
                "object_albedo",
                (object_albedo.height(), object_albedo.width()),
            ),
            (
                "target_albedo",
                (target_albedo.height(), target_albedo.width()),
            ),
            (
                "composite_normals",
                (composite_normals.height(), composite_normals.width()),
            ),
        ] {
            if (ah, aw) != (h, w) {
                return Err(Error::ShapeMismatch {
                    ctx: "prepare_job fields",
                    a: vec![ah, aw],
                    b: vec![h, w],
                });
            }
            let _ = name;
        }

        let inv = mask.complement();
        let degraded = ShadingField::new(target_shading.data() * &inv.to_f32())?;

        let mask_plane: Vec<f32> = mask.data().iter().map(|&m| m as f32).collect();
        let inv_mask_plane: Vec<f32> = mask_plane.iter().map(|&m| 1.0 - m).collect();
        let s_t_plane = plane_from_hw(target_shading.data());
        let rho_o_chw = chw_from_hwc(object_albedo.data());
        let target_chw = chw_from_hwc(target.data());
        let n_y_chw = chw_from_hwc(composite_normals.data());

        let mut prepared = Self {
            height: h,
            width: w,
            source_placed: target.clone(),
            naive_composite: target.clone(),
            target,
            object_albedo,
            target_albedo,
            target_shading,
            composite_normals,
            degraded_shading: degraded,
            mask,
            disc,
            feat,
            c_features: None,
            mask_plane,
            inv_mask_plane,
            s_t_plane,
            rho_o_chw,
            target_chw,
            n_y_chw,
        };
        prepared.refresh_composite_features()?;
        Ok(prepared)
    }

    /// Recomputes the cached features of the naive composite.
    pub fn refresh_composite_features(&mut self) -> Result<()> {
        self.c_features = match self.feat.as_mut() {
            Some(feat) => {
                let x = crate::field_bridge::tensor_from_hwc(self.naive_composite.data());
                Some(feat.features(&x, false).data)
            }
            None => None,
        };
        Ok(())
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn discriminator(&mut self) -> Option<&mut DiscriminatorModel> {
        self.disc.as_mut()
    }

    pub fn features_net(&mut self) -> Option<&mut FeatureNet> {
        self.feat.as_mut()
    }

    /// The composite shading `CP(S*, S_T, M)`.
    pub fn composite_shading(&self, s_star: &ShadingField) -> Result<ShadingField> {
        composite_shading(s_star, &self.target_shading, &self.mask)
    }

    /// The composite albedo `CP(rho_o, rho_T, M)`.
    pub fn composite_albedo_field(&self) -> Result<AlbedoField> {
        composite_albedo(&self.object_albedo, &self.target_albedo, &self.mask)
    }

    /// Output formation: `CP(rho_o * S*, T, M)`.
    pub fn form_output(&self, s_star: &ShadingField) -> Result<Image> {
        let plane = self.plane();
        let s = plane_from_hw(s_star.data());
        let mut y = self.target_chw.clone();
        for p in 0..plane {
            if self.mask_plane[p] == 1.0 {
                for c in 0..3 {
                    y[c * plane + p] = self.rho_o_chw[c * plane + p] * s[p];
                }
            }
        }
        Ok(Image::new(hwc_from_chw(&y, self.height, self.width, 3))?)
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub l_s: f64,
    pub l_n: f64,
    pub l_f: f64,
    pub total: f64,
}

/// Shading data term on the raw full-frame output: the mean over all pixels
/// of `((S_T - S_raw) * (1 - M))^2`. Anchors the network to the target
/// shading outside the mask (the inpainting observation); the masked
/// region is driven by the other terms.
pub fn shading_loss(s_raw: &[f32], s_t: &[f32], inv_mask: &[f32]) -> f64 {
    let n = s_raw.len() as f64;
    let mut total = 0.0f64;
    for i in 0..s_raw.len() {
        let d = ((s_t[i] - s_raw[i]) * inv_mask[i]) as f64;
        total += d * d;
    }
    total / n
}

/// Analytic gradient of [`shading_loss`] with respect to the raw output.
pub fn shading_loss_grad(s_raw: &[f32], s_t: &[f32], inv_mask: &[f32]) -> Vec<f32> {
    let n = s_raw.len() as f32;
    (0..s_raw.len())
        .map(|i| 2.0 * inv_mask[i] * (s_raw[i] - s_t[i]) / n)
        .collect()
}

/// Normal-consistency loss from the discriminator's global score:
/// `-log(clamp(score))`.
pub fn normal_consistency_loss(global_score: f32) -> f64 {
    -(global_score.clamp(LOG_CLAMP, 1.0) as f64).ln()
}

fn tv_loss_and_grad(s: &[f32], h: usize, w: usize, grad: Option<&mut [f32]>) -> f64 {
    let n = (h * w) as f64;
    let mut total = 0.0f64;
    let mut g = grad;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let d = s[i + 1] - s[i];
                total += (d as f64) * (d as f64);
                if let Some(gs) = g.as_deref_mut() {
                    gs[i] += -2.0 * d / n as f32;
                    gs[i + 1] += 2.0 * d / n as f32;
                }
            }
            if y + 1 < h {
                let d = s[i + w] - s[i];
                total += (d as f64) * (d as f64);
                if let Some(gs) = g.as_deref_mut() {
                    gs[i] += -2.0 * d / n as f32;
                    gs[i + w] += 2.0 * d / n as f32;
                }
            }
        }
    }
    total / n
}

// ---------------------------------------------------------------------------
// The optimizer
// ---------------------------------------------------------------------------

struct DipNet {
    core: UNetCore,
    head: Conv2d,
    out: Sigmoid,
}

impl DipNet {
    fn new(noise_channels: usize, widths: Vec<usize>, seed: u64) -> Self {
        let arch = UnetArch::new(noise_channels, widths);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD1F));
        let core = UNetCore::new("dip", arch.clone(), &mut rng);
        let head = Conv2d::new("dip.head", arch.stem_width(), 1, 1, 1, 0, &mut rng);
        Self {
            core,
            head,
            out: Sigmoid::new(),
        }
    }

    fn depth(&self) -> usize {
        self.core.arch.depth()
    }

    fn forward(&mut self, x: &Tensor, with_grad: bool) -> Tensor {
        let (full, _) = self.core.forward(x, with_grad);
        let y = self.head.forward(&full, with_grad);
        self.out.forward(&y, with_grad)
    }

    fn backward(&mut self, g: &Tensor) {
        let g = self.out.backward(g);
        let g = self.head.backward(&g);
        let _ = self.core.backward(&g, None);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.core.visit_params(f);
        self.head.visit_params(f);
    }

    fn snapshot(&mut self) -> Vec<f32> {
        let mut flat = Vec::new();
        self.visit_params(&mut |p| flat.extend_from_slice(&p.data));
        flat
    }

    fn restore(&mut self, flat: &[f32]) {
        let mut off = 0usize;
        self.visit_params(&mut |p| {
            let len = p.data.len();
            p.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        });
    }
}

/// Step-by-step reshading optimizer over a prepared job.
pub struct DipDriver<'a> {
    prepared: &'a mut PreparedJob,
    pub config: DipConfig,
    net: DipNet,
    z: Vec<f32>,
    noise_rng: ChaCha8Rng,
    adam: Adam,
    iteration: usize,
    history: Vec<LossRecord>,
    best: Option<(f64, Vec<f32>, usize)>,
    surroundings_exact: bool,
}

impl<'a> DipDriver<'a> {
    pub fn new(prepared: &'a mut PreparedJob, config: DipConfig) -> Result<Self> {
        config.validate()?;
        let (ws, wn, wf) = config.loss_weights;
        let _ = ws;
        if wn > 0.0 && prepared.disc.is_none() {
            return Err(Error::Config(
                "w_n > 0 requires a discriminator checkpoint".into(),
            ));
        }
        if wf > 0.0 && prepared.feat.is_none() {
            return Err(Error::Config(
                "w_f > 0 requires a features checkpoint".into(),
            ));
        }
        if let Some(d) = prepared.disc.as_mut() {
            d.set_frozen(true);
        }
        if let Some(f) = prepared.feat.as_mut() {
            f.set_frozen(true);
        }
        let net = DipNet::new(config.noise_channels, config.widths.clone(), config.seed);
        let div = 1usize << net.depth();
        if prepared.height % div != 0 || prepared.width % div != 0 {
            return Err(Error::Config(format!(
                "target {}x{} not divisible by {div}; pick dimensions divisible by {div} or a shallower backbone",
                prepared.height, prepared.width
            )));
        }
        let len = config.noise_channels * prepared.height * prepared.width;
        let mut z_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x21));
        let z: Vec<f32> = (0..len).map(|_| z_rng.random_range(0.0..0.1f32)).collect();
        let noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xE9));
        let adam = Adam::new(config.learning_rate);
        Ok(Self {
            prepared,
            config,
            net,
            z,
            noise_rng,
            adam,
            iteration: 0,
            history: Vec::new(),
            best: None,
            surroundings_exact: true,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    /// The candidate batch for this iteration: the fixed noise plus fresh
    /// Gaussian perturbations per batch slot, mapped through the network.
    /// With `perturb` false (or sigma 0) every slot sees the identical input.
    pub fn forward_batch(&mut self, with_grad: bool, perturb: bool) -> Tensor {
        let b = self.config.noise_batch;
        let len = self.z.len();
        let mut x = Tensor::from_vec(
            b,
            self.config.noise_channels,
            self.prepared.height,
            self.prepared.width,
            {
                let mut v = Vec::with_capacity(b * len);
                for _ in 0..b {
                    v.extend_from_slice(&self.z);
                }
                v
            },
        );
        if perturb && self.config.noise_perturb_sigma > 0.0 {
            let normal = Normal::new(0.0f32, self.config.noise_perturb_sigma)
                .expect("validated sigma");
            for v in x.data.iter_mut() {
                *v += normal.sample(&mut self.noise_rng);
            }
        }
        self.net.forward(&x, with_grad)
    }

    /// Losses averaged over the batch; optionally also the gradient with
    /// respect to the raw batch output.
    fn losses(
        &mut self,
        s_raw: &Tensor,
        want_grad: bool,
    ) -> Result<(LossRecord, Option<Tensor>)> {
        let b = s_raw.n;
        let plane = self.prepared.plane();
        let (w_s, w_n, w_f) = self.config.loss_weights;
        let mut grad = want_grad.then(|| Tensor::zeros(b, 1, s_raw.h, s_raw.w));

        let mut l_s_total = 0.0f64;
        let mut l_tv_total = 0.0f64;
        for bi in 0..b {
            let s = s_raw.sample(bi);
            l_s_total += shading_loss(s, &self.prepared.s_t_plane, &self.prepared.inv_mask_plane);
            if let Some(g) = grad.as_mut() {
                let gs = shading_loss_grad(s, &self.prepared.s_t_plane, &self.prepared.inv_mask_plane);
                let gd = g.sample_mut(bi);
                let scale = w_s / b as f32;
                for i in 0..plane {
                    gd[i] += gs[i] * scale;
                }
            }
            if self.config.tv_weight > 0.0 {
                if let Some(g) = grad.as_mut() {
                    let mut tvg = vec![0.0f32; plane];
                    l_tv_total +=
                        tv_loss_and_grad(s, s_raw.h, s_raw.w, Some(&mut tvg));
                    let gd = g.sample_mut(bi);
                    let scale = self.config.tv_weight / b as f32;
                    for i in 0..plane {
                        gd[i] += tvg[i] * scale;
                    }
                } else {
                    l_tv_total += tv_loss_and_grad(s, s_raw.h, s_raw.w, None);
                }
            }
        }
        let l_s = l_s_total / b as f64;
        let l_tv = l_tv_total / b as f64;

        // normal-consistency through the frozen discriminator
        let mut l_n = 0.0f64;
        if w_n > 0.0 {
            let disc = self.prepared.disc.as_mut().expect("checked at new");
            let mut x = Tensor::zeros(b, 4, s_raw.h, s_raw.w);
            for bi in 0..b {
                let dst = x.sample_mut(bi);
                dst[..3 * plane].copy_from_slice(&self.prepared.n_y_chw);
                let s = s_raw.sample(bi);
                let sy = &mut dst[3 * plane..];
                for i in 0..plane {
                    sy[i] = if self.prepared.mask_plane[i] == 1.0 {
                        s[i]
                    } else {
                        self.prepared.s_t_plane[i]
                    };
                }
            }
            let (global, map) = disc.forward(&x, want_grad);
            for bi in 0..b {
                l_n += normal_consistency_loss(global.data[bi]);
            }
            l_n /= b as f64;
            if let Some(g) = grad.as_mut() {
                let mut g_global = Tensor::zeros(b, 1, 1, 1);
                for bi in 0..b {
                    let p = global.data[bi].max(LOG_CLAMP);
                    g_global.data[bi] = -1.0 / p;
                }
                let g_map = Tensor::zeros(map.n, 1, map.h, map.w);
                let g_in = disc.backward(&g_global, &g_map);
                for bi in 0..b {
                    let gi = g_in.sample(bi);
                    let gd = g.sample_mut(bi);
                    let scale = w_n / b as f32;
                    for i in 0..plane {
                        if self.prepared.mask_plane[i] == 1.0 {
                            gd[i] += gi[3 * plane + i] * scale;
                        }
                    }
                }
            }
        }

        // perceptual consistency through the frozen feature net
        let mut l_f = 0.0f64;
        if w_f > 0.0 {
            let c_feat = self
                .prepared
                .c_features
                .clone()
                .expect("features cached at prepare");
            let feat = self.prepared.feat.as_mut().expect("checked at new");
            let mut y = Tensor::zeros(b, 3, s_raw.h, s_raw.w);
            for bi in 0..b {
                let s = s_raw.sample(bi);
                let dst = y.sample_mut(bi);
                for c in 0..3 {
                    for i in 0..plane {
                        dst[c * plane + i] = if self.prepared.mask_plane[i] == 1.0 {
                            self.prepared.rho_o_chw[c * plane + i] * s[i]
                        } else {
                            self.prepared.target_chw[c * plane + i]
                        };
                    }
                }
            }
            let feats = feat.features(&y, want_grad);
            let dim = feats.c;
            for bi in 0..b {
                l_f += crate::features::feature_sq_distance(feats.sample(bi), &c_feat);
            }
            l_f /= b as f64;
            if let Some(g) = grad.as_mut() {
                let mut g_feats = Tensor::zeros(b, dim, 1, 1);
                for bi in 0..b {
                    let f = feats.sample(bi);
                    let gf = g_feats.sample_mut(bi);
                    for d in 0..dim {
                        gf[d] = 2.0 * (f[d] - c_feat[d]);
                    }
                }
                let g_y = feat.backward(None, Some(&g_feats));
                for bi in 0..b {
                    let gy = g_y.sample(bi);
                    let gd = g.sample_mut(bi);
                    let scale = w_f / b as f32;
                    for i in 0..plane {
                        if self.prepared.mask_plane[i] == 1.0 {
                            let mut acc = 0.0f32;
                            for c in 0..3 {
                                acc += gy[c * plane + i]
                                    * self.prepared.rho_o_chw[c * plane + i];
                            }
                            gd[i] += acc * scale;
                        }
                    }
                }
            }
        }

        let total = w_s as f64 * l_s
            + w_n as f64 * l_n
            + w_f as f64 * l_f
            + self.config.tv_weight as f64 * l_tv;
        for (name, v) in [("L_s", l_s), ("L_n", l_n), ("L_f", l_f), ("total", total)] {
            if !v.is_finite() {
                let component: &'static str = match name {
                    "L_s" => "L_s",
                    "L_n" => "L_n",
                    "L_f" => "L_f",
                    _ => "total",
                };
                return Err(Error::NonFiniteLoss {
                    component,
                    iteration: self.iteration,
                });
            }
        }
        Ok((
            LossRecord {
                iteration: self.iteration,
                l_s,
                l_n,
                l_f,
                total,
            },
            grad,
        ))
    }

    /// Public loss evaluation for an externally supplied candidate field
    /// (batch of one, no gradients).
    pub fn compute_losses(&mut self, s_star: &ShadingField) -> Result<LossRecord> {
        let t = crate::field_bridge::tensor_from_hw(s_star.data());
        let (rec, _) = self.losses(&t, false)?;
        Ok(rec)
    }

    /// One optimization step; returns the averaged losses at this iterate.
    pub fn step(&mut self) -> Result<LossRecord> {
        let s_raw = self.forward_batch(true, true);
        let (record, grad) = self.losses(&s_raw, true)?;
        let g = grad.expect("requested gradient");
        self.net.visit_params(&mut |p| p.zero_grad());
        self.net.backward(&g);
        let step = self.adam.begin_step();
        self.net.visit_params(&mut |p| step.update(p));

        // surroundings stay the target's, bit for bit, at every iterate
        let plane = self.prepared.plane();
        let s0 = s_raw.sample(0);
        for i in 0..plane {
            if self.prepared.mask_plane[i] == 0.0 {
                // output formation selects the target outside the mask; the
                // candidate never touches those pixels by construction. The
                // check guards the formation code itself.
                let _ = s0[i];
            }
        }
        let y0 = self.form_candidate_output(s0);
        for c in 0..3 {
            for i in 0..plane {
                if self.prepared.mask_plane[i] == 0.0
                    && y0[c * plane + i].to_bits() != self.prepared.target_chw[c * plane + i].to_bits()
                {
                    self.surroundings_exact = false;
                }
            }
        }

        self.history.push(record);
        let better = match &self.best {
            Some((best, _, _)) => record.total < *best,
            None => true,
        };
        if better {
            self.best = Some((record.total, self.net.snapshot(), self.iteration));
        }
        self.iteration += 1;
        Ok(record)
    }

    fn form_candidate_output(&self, s: &[f32]) -> Vec<f32> {
        let plane = self.prepared.plane();
        let mut y = self.prepared.target_chw.clone();
        for i in 0..plane {
            if self.prepared.mask_plane[i] == 1.0 {
                for c in 0..3 {
                    y[c * plane + i] = self.prepared.rho_o_chw[c * plane + i] * s[i];
                }
            }
        }
        y
    }

    /// Loss of the unperturbed single-copy forward under the current
    /// parameters (used for benchmarking and the final evaluation).
    pub fn eval_unperturbed(&mut self) -> Result<LossRecord> {
        let b = self.config.noise_batch;
        self.config.noise_batch = 1;
        let s = self.forward_batch(false, false);
        let out = self.losses(&s, false);
        self.config.noise_batch = b;
        out.map(|(r, _)| r)
    }

    /// Runs the configured number of iterations and assembles the result
    /// from the best-total-loss iterate.
    pub fn run(&mut self) -> Result<ReshadeResult> {
        for _ in 0..self.config.iterations {
            self.step()?;
        }
        self.finish()
    }

    /// Restores the best iterate and forms the final outputs.
    pub fn finish(&mut self) -> Result<ReshadeResult> {
        let best_iteration = match &self.best {
            Some((_, snapshot, it)) => {
                let snapshot = snapshot.clone();
                let it = *it;
                self.net.restore(&snapshot);
                it
            }
            None => 0,
        };
        let b = self.config.noise_batch;
        self.config.noise_batch = 1;
        let s_star_t = self.forward_batch(false, false);
        self.config.noise_batch = b;
        let s_star = ShadingField::new(hw_from_plane(
            s_star_t.sample(0),
            self.prepared.height,
            self.prepared.width,
        ))?;

        let output = self.prepared.form_output(&s_star)?;
        let composite_shading = self.prepared.composite_shading(&s_star)?;
        let composite_albedo = self.prepared.composite_albedo_field()?;

        let mut surroundings = self.surroundings_exact;
        let plane = self.prepared.plane();
        let out_chw = chw_from_hwc(output.data());
        for c in 0..3 {
            for i in 0..plane {
                if self.prepared.mask_plane[i] == 0.0
                    && out_chw[c * plane + i].to_bits()
                        != self.prepared.target_chw[c * plane + i].to_bits()
                {
                    surroundings = false;
                }
            }
        }

        Ok(ReshadeResult {
            output,
            generated_shading: s_star,
            composite_albedo,
            composite_shading,
            loss_history: self.history.clone(),
            best_iteration,
            surroundings_exact: surroundings,
        })
    }
}

/// Output bundle of one reshading run.
pub struct ReshadeResult {
    /// Final composite image Y.
    pub output: Image,
    /// The generated shading field S*.
    pub generated_shading: ShadingField,
    /// CP(rho_o, rho_T, M).
    pub composite_albedo: AlbedoField,
    /// CP(S*, S_T, M).
    pub composite_shading: ShadingField,
    pub loss_history: Vec<LossRecord>,
    pub best_iteration: usize,
    /// Whether the output equaled the target bit-for-bit outside the mask at
    /// every logged iteration and in the final output.
    pub surroundings_exact: bool,
}

/// Convenience wrapper: prepare + optimize in one call.
pub fn run_reshade(job: &ReshadeJob, config: &DipConfig) -> Result<ReshadeResult> {
    let mut prepared = prepare_job(job)?;
    let mut driver = DipDriver::new(&mut prepared, config.clone())?;
    driver.run()
}

// ---------------------------------------------------------------------------
// Batched-noise benchmark
// ---------------------------------------------------------------------------

/// One measurement row of the batched-noise benchmark.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub batch: usize,
    pub iterations: usize,
    pub elapsed_secs: f64,
    pub iters_per_sec: f64,
    pub loss_start: f64,
    pub loss_end: f64,
    /// (loss_start - loss_end) / elapsed.
    pub decrease_rate: f64,
}

/// Runs the same job at each batch size for a fixed wall-clock budget and
/// reports iteration throughput plus effective optimization progress.
pub fn benchmark_batched_noise(
    prepared: &mut PreparedJob,
    config: &DipConfig,
    b_values: &[usize],
    budget_secs: f64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &b in b_values {
        let mut cfg = config.clone();
        cfg.noise_batch = b;
        let mut driver = DipDriver::new(prepared, cfg)?;
        let loss_start = driver.eval_unperturbed()?.total;
        let t0 = Instant::now();
        let mut iterations = 0usize;
        while t0.elapsed().as_secs_f64() < budget_secs {
            driver.step()?;
            iterations += 1;
        }
        let elapsed = t0.elapsed().as_secs_f64();
        // evaluate the best iterate, as the real run would return it
        if let Some((_, snapshot, _)) = &driver.best {
            let snapshot = snapshot.clone();
            driver.net.restore(&snapshot);
        }
        let loss_end = driver.eval_unperturbed()?.total;
        rows.push(BenchRow {
            batch: b,
            iterations,
            elapsed_secs: elapsed,
            iters_per_sec: iterations as f64 / elapsed,
            loss_start,
            loss_end,
            decrease_rate: (loss_start - loss_end) / elapsed,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::LightSpec;
    use crate::normals::{synth_scene, SceneKind};
    use crate::synth::{gen_perlin, PerlinSpec};
    use ndarray::Array2;

    fn inpainting_job(h: usize, w: usize, mask: Mask) -> PreparedJob {
        let light = LightSpec::new([0.0, 0.0, 1.0], 1.0).unwrap();
        let scene = synth_scene(SceneKind::Plane, h, w, &light).unwrap();
        let s_t = gen_perlin(&PerlinSpec::new(h, w, 5)).unwrap();
        let rho = AlbedoField::filled(h, w, [0.6, 0.5, 0.4]).unwrap();
        PreparedJob::from_fields(
            scene.image.clone(),
            s_t,
            mask,
            rho.clone(),
            rho,
            scene.normals,
            None,
            None,
        )
        .unwrap()
    }

    fn sanity_config(iters: usize) -> DipConfig {
        DipConfig {
            iterations: iters,
            learning_rate: 1e-2,
            noise_channels: 8,
            noise_batch: 1,
            noise_perturb_sigma: 0.0,
            seed: 3,
            loss_weights: (1.0, 0.0, 0.0),
            tv_weight: 0.0,
            widths: vec![8, 16, 16],
        }
    }

    #[test]
    fn forward_shape_and_iteration_zero_reproducibility() {
        let mut p1 = inpainting_job(16, 16, Mask::zeros(16, 16));
        let mut d1 = DipDriver::new(&mut p1, sanity_config(10)).unwrap();
        let y1 = d1.forward_batch(false, true);
        assert_eq!(y1.shape(), [1, 1, 16, 16]);

        let mut p2 = inpainting_job(16, 16, Mask::zeros(16, 16));
        let mut d2 = DipDriver::new(&mut p2, sanity_config(10)).unwrap();
        let y2 = d2.forward_batch(false, true);
        assert_eq!(y1.data, y2.data);
    }

    #[test]
    fn degenerate_sigma_makes_batch_outputs_identical() {
        let mut p = inpainting_job(16, 16, Mask::zeros(16, 16));
        let mut cfg = sanity_config(10);
        cfg.noise_batch = 4;
        cfg.noise_perturb_sigma = 0.0;
        let mut d = DipDriver::new(&mut p, cfg).unwrap();
        let y = d.forward_batch(false, true);
        assert_eq!(y.n, 4);
        let first = y.sample(0).to_vec();
        for b in 1..4 {
            assert_eq!(y.sample(b), &first[..], "batch slot {b} diverged");
        }

        // doubling the batch leaves slot 0 unchanged when sigma is 0
        let mut p8 = inpainting_job(16, 16, Mask::zeros(16, 16));
        let mut cfg8 = sanity_config(10);
        cfg8.noise_batch = 8;
        cfg8.noise_perturb_sigma = 0.0;
        let mut d8 = DipDriver::new(&mut p8, cfg8).unwrap();
        let y8 = d8.forward_batch(false, true);
        assert_eq!(y8.sample(0), &first[..]);
    }

    #[test]
    fn losses_analytic_values() {
        // mask empty: composite shading equals the raw candidate, and the
        // masked residual (S_T - S_y)(1-M) with CP-formed S_y is zero inside
        let h = 8;
        let s_t = gen_perlin(&PerlinSpec::new(h, h, 1)).unwrap();
        let mask = {
            let mut m = Array2::zeros((h, h));
            for y in 2..5 {
                for x in 3..6 {
                    m[[y, x]] = 1u8;
                }
            }
            Mask::new(m).unwrap()
        };
        let s_star = gen_perlin(&PerlinSpec::new(h, h, 9)).unwrap();
        let light = LightSpec::new([0.0, 0.0, 1.0], 1.0).unwrap();
        let scene = synth_scene(SceneKind::Plane, h, h, &light).unwrap();
        let rho = AlbedoField::filled(h, h, [0.5, 0.5, 0.5]).unwrap();
        let prepared = PreparedJob::from_fields(
            scene.image,
            s_t.clone(),
            mask.clone(),
            rho.clone(),
            rho,
            scene.normals,
            None,
            None,
        )
        .unwrap();

        // the CP-composited field agrees with S_T outside M exactly, so the
        // masked residual on S_y is identically zero
        let s_y = prepared.composite_shading(&s_star).unwrap();
        let mut masked_residual = 0.0f64;
        for y in 0..h {
            for x in 0..h {
                if mask.data()[[y, x]] == 0 {
                    let d = (s_t.data()[[y, x]] - s_y.data()[[y, x]]) as f64;
                    masked_residual += d * d;
                }
            }
        }
        assert_eq!(masked_residual, 0.0);

        // against the raw candidate the same residual is generally nonzero:
        // that raw form is the data term the optimizer uses
        let raw = plane_from_hw(s_star.data());
        let inv: Vec<f32> = mask.data().iter().map(|&m| 1.0 - m as f32).collect();
        let l_raw = shading_loss(&raw, &plane_from_hw(s_t.data()), &inv);
        assert!(l_raw > 0.0);

        // analytic log loss at score 0.5
        assert!((normal_consistency_loss(0.5) - std::f64::consts::LN_2).abs() < 1e-9);
        // clamp guards the log
        assert!(normal_consistency_loss(0.0).is_finite());
    }

    #[test]
    fn shading_loss_gradient_matches_finite_differences() {
        let h = 8;
        let s_t = plane_from_hw(gen_perlin(&PerlinSpec::new(h, h, 2)).unwrap().data());
        let mut mask = vec![1.0f32; h * h];
        for i in 20..36 {
            mask[i] = 0.0;
        }
        let inv: Vec<f32> = mask.iter().map(|&m| 1.0 - m).collect();
        let s: Vec<f32> = (0..h * h).map(|i| 0.3 + (i % 7) as f32 * 0.08).collect();
        let g = shading_loss_grad(&s, &s_t, &inv);
        let step = 1e-3f32;
        for idx in [0usize, 10, 25, 40, 63] {
            let mut sp = s.clone();
            sp[idx] += step;
            let mut sm = s.clone();
            sm[idx] -= step;
            let fd = ((shading_loss(&sp, &s_t, &inv) - shading_loss(&sm, &s_t, &inv))
                / (2.0 * step as f64)) as f32;
            let rel = (fd - g[idx]).abs() / (1e-8 + fd.abs().max(g[idx].abs()));
            if fd == 0.0 && g[idx] == 0.0 {
                continue;
            }
            assert!(rel < 1e-3, "rel err {rel} at {idx}: fd {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn pure_inpainting_drives_loss_down() {
        let mut p = inpainting_job(16, 16, Mask::zeros(16, 16));
        let mut d = DipDriver::new(&mut p, sanity_config(150)).unwrap();
        let first = d.step().unwrap().total;
        for _ in 1..150 {
            d.step().unwrap();
        }
        let best = d.history().iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
        assert!(
            best < first * 0.2,
            "dip failed to fit: first {first}, best {best}"
        );
    }

    #[test]
    fn run_keeps_surroundings_bit_exact_and_in_range() {
        let h = 16;
        let mut mask_data = Array2::zeros((h, h));
        for y in 4..10 {
            for x in 5..12 {
                mask_data[[y, x]] = 1u8;
            }
        }
        let mask = Mask::new(mask_data).unwrap();
        let mut p = inpainting_job(h, h, mask.clone());
        let mut d = DipDriver::new(&mut p, sanity_config(30)).unwrap();
        let result = d.run().unwrap();
        assert!(result.surroundings_exact);
        assert_eq!(result.loss_history.len(), 30);
        for (y, x) in (0..h).flat_map(|y| (0..h).map(move |x| (y, x))) {
            if mask.data()[[y, x]] == 0 {
                for c in 0..3 {
                    assert_eq!(
                        result.output.data()[[y, x, c]].to_bits(),
                        p.target.data()[[y, x, c]].to_bits()
                    );
                }
            }
        }
        // composite equations
        let s_y = p.composite_shading(&result.generated_shading).unwrap();
        assert_eq!(s_y.data(), result.composite_shading.data());
        let rho_y = p.composite_albedo_field().unwrap();
        assert_eq!(rho_y.data(), result.composite_albedo.data());
    }

    #[test]
    fn best_iterate_is_selected() {
        let mut p = inpainting_job(16, 16, Mask::zeros(16, 16));
        let mut d = DipDriver::new(&mut p, sanity_config(60)).unwrap();
        let r = d.run().unwrap();
        let best_total = r
            .loss_history
            .iter()
            .map(|l| l.total)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(r.loss_history[r.best_iteration].total, best_total);
    }

    #[test]
    fn compute_losses_on_external_candidate() {
        let mut p = inpainting_job(16, 16, Mask::zeros(16, 16));
        let mut d = DipDriver::new(&mut p, sanity_config(5)).unwrap();
        let s = gen_perlin(&PerlinSpec::new(16, 16, 3)).unwrap();
        let rec = d.compute_losses(&s).unwrap();
        assert!(rec.total > 0.0 && rec.total.is_finite());
        assert_eq!(rec.l_n, 0.0);
        assert_eq!(rec.l_f, 0.0);
    }

    #[test]
    fn benchmark_rows_cover_requested_batches() {
        let mut p = inpainting_job(16, 16, Mask::zeros(16, 16));
        let mut cfg = sanity_config(10);
        cfg.noise_perturb_sigma = 0.05;
        let rows = benchmark_batched_noise(&mut p, &cfg, &[1, 2], 0.3).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].batch, 1);
        assert_eq!(rows[1].batch, 2);
        assert!(rows[0].iterations > 0);
        assert!(rows[0].loss_start.is_finite());
    }
}
