//! Orchestration: one configuration file for every stage, artifact
//! validation, dataset/checkpoint path management, run manifests, reports,
//! and the fully synthetic end-to-end demo.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::decomposition::{self, DecompositionModel, TrainConfig};
use crate::dip::{
    benchmark_batched_noise, prepare_job, BenchRow, DipConfig, DipDriver, JobCheckpoints,
    LossRecord, NormalsBackendSpec, ReshadeJob, ReshadeResult,
};
use crate::discriminator::{self, DiscOptions, DiscriminatorModel};
use crate::error::Error;
use crate::features::{self, FeatureNet, FeatureOptions};
use crate::imaging::{Image, LightSpec, Mask, Placement};

use crate::normals::{scene_footprint, synth_scene_with_albedo, PretrainedEstimator, SceneKind};
use crate::pngio;
use crate::synth::{self, derive_seed};
use crate::Result;

/// Environment variable overriding the checkpoint/dataset cache location.
pub const CACHE_DIR_ENV: &str = "RESHADE_CACHE_DIR";

// ---------------------------------------------------------------------------
// Configuration schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    /// Global seed; every stage seed derives from it unless set explicitly.
    pub seed: u64,
    /// Cache root for checkpoints and generated datasets.
    pub cache_dir: Option<PathBuf>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            seed: 7,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub decomposition_ckpt: Option<PathBuf>,
    pub discriminator_ckpt: Option<PathBuf>,
    pub features_ckpt: Option<PathBuf>,
    /// Checkpoint of the pretrained normals backend, when used.
    pub normals_ckpt: Option<PathBuf>,
    pub decomposition_data: Option<PathBuf>,
    pub distortion_data: Option<PathBuf>,
    pub features_data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageTrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: Option<u64>,
    pub validation_fraction: f32,
    pub widths: Option<Vec<usize>>,
}

impl Default for StageTrainSection {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: None,
            validation_fraction: 0.1,
            widths: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub height: usize,
    pub width: usize,
    pub decomposition_count: usize,
    pub n_patches: usize,
    pub perlin_freq: usize,
    pub distortion_count: usize,
    pub feature_classes: usize,
    pub feature_scenes: usize,
    pub feature_lightings: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            decomposition_count: 2400,
            n_patches: 10,
            perlin_freq: 2,
            distortion_count: 600,
            feature_classes: 6,
            feature_scenes: 8,
            feature_lightings: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSection {
    #[serde(flatten)]
    pub train: StageTrainSection,
    pub zero_normals: bool,
    pub cutmix_prob: f32,
}

impl Default for DiscriminatorSection {
    fn default() -> Self {
        Self {
            train: StageTrainSection {
                learning_rate: 1e-3,
                validation_fraction: 0.15,
                ..StageTrainSection::default()
            },
            zero_normals: false,
            cutmix_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesSection {
    #[serde(flatten)]
    pub train: StageTrainSection,
    pub lambda_c: f32,
    pub pretrain_epochs: usize,
    pub groups_per_batch: usize,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        Self {
            train: StageTrainSection {
                epochs: 25,
                batch_size: 4,
                learning_rate: 1e-3,
                validation_fraction: 0.25,
                ..StageTrainSection::default()
            },
            lambda_c: 1.0,
            pretrain_epochs: 30,
            groups_per_batch: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSection {
    pub height: usize,
    pub width: usize,
    pub dx: i32,
    pub dy: i32,
    pub scale: f32,
    pub source_light_direction: [f32; 3],
    pub source_light_intensity: f32,
    pub target_light_direction: [f32; 3],
    pub target_light_intensity: f32,
    pub source_albedo: [f32; 3],
    pub target_albedo: [f32; 3],
}

impl Default for DemoSection {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            dx: 4,
            dy: 2,
            scale: 1.0,
            source_light_direction: [0.0, 0.0, 1.0],
            source_light_intensity: 1.0,
            target_light_direction: [0.55, -0.35, 0.75],
            target_light_intensity: 0.75,
            source_albedo: [0.78, 0.42, 0.32],
            target_albedo: [0.52, 0.56, 0.66],
        }
    }
}

/// The whole pipeline configuration; every subcommand shares this schema and
/// unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub pipeline: PipelineSection,
    pub paths: PathsSection,
    pub data: DataSection,
    pub decomposition: StageTrainSection,
    pub discriminator: DiscriminatorSection,
    pub features: FeaturesSection,
    pub dip: DipConfig,
    pub demo: DemoSection,
}

impl PipelineConfig {
    pub fn from_toml_str(raw: &str) -> Result<Self> {
        toml::from_str(raw).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Config(format!("{}: {e}", path.as_ref().display()))
        })?;
        Self::from_toml_str(&raw)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// All paths and seeds resolved against the cache directory and environment.
#[derive(Debug, Clone)]
pub struct ResolvedPipeline {
    pub config: PipelineConfig,
    pub cache_dir: PathBuf,
    pub decomposition_ckpt: PathBuf,
    pub discriminator_ckpt: PathBuf,
    pub features_ckpt: PathBuf,
    pub normals_ckpt: Option<PathBuf>,
    pub decomposition_data: PathBuf,
    pub distortion_data: PathBuf,
    pub features_data: PathBuf,
    pub seed: u64,
}

pub fn resolve(config: &PipelineConfig) -> ResolvedPipeline {
    let cache_dir = std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .or_else(|| config.pipeline.cache_dir.clone())
        .unwrap_or_else(|| PathBuf::from(".reshade-cache"));
    let p = &config.paths;
    ResolvedPipeline {
        decomposition_ckpt: p
            .decomposition_ckpt
            .clone()
            .unwrap_or_else(|| cache_dir.join("checkpoints/decomposition.ckpt")),
        discriminator_ckpt: p
            .discriminator_ckpt
            .clone()
            .unwrap_or_else(|| cache_dir.join("checkpoints/discriminator.ckpt")),
        features_ckpt: p
            .features_ckpt
            .clone()
            .unwrap_or_else(|| cache_dir.join("checkpoints/features.ckpt")),
        normals_ckpt: p.normals_ckpt.clone(),
        decomposition_data: p
            .decomposition_data
            .clone()
            .unwrap_or_else(|| cache_dir.join("data/decomposition")),
        distortion_data: p
            .distortion_data
            .clone()
            .unwrap_or_else(|| cache_dir.join("data/distortion")),
        features_data: p
            .features_data
            .clone()
            .unwrap_or_else(|| cache_dir.join("data/features")),
        seed: config.pipeline.seed,
        cache_dir,
        config: config.clone(),
    }
}

impl ResolvedPipeline {
    pub fn stage_seed(&self, tag: u64) -> u64 {
        derive_seed(self.seed, tag)
    }

    pub fn decomposition_train_config(&self) -> TrainConfig {
        let s = &self.config.decomposition;
        TrainConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            dataset_dir: self.decomposition_data.clone(),
            seed: s.seed.unwrap_or_else(|| self.stage_seed(1)),
            validation_fraction: s.validation_fraction,
        }
    }

    pub fn discriminator_train_config(&self) -> TrainConfig {
        let s = &self.config.discriminator.train;
        TrainConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            dataset_dir: self.distortion_data.clone(),
            seed: s.seed.unwrap_or_else(|| self.stage_seed(2)),
            validation_fraction: s.validation_fraction,
        }
    }

    pub fn features_train_config(&self) -> TrainConfig {
        let s = &self.config.features.train;
        TrainConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            dataset_dir: self.features_data.clone(),
            seed: s.seed.unwrap_or_else(|| self.stage_seed(3)),
            validation_fraction: s.validation_fraction,
        }
    }

    pub fn dip_config(&self) -> DipConfig {
        let mut c = self.config.dip.clone();
        if c.seed == 0 {
            c.seed = self.stage_seed(4);
        }
        c
    }

    pub fn job_checkpoints(&self, normals: NormalsBackendSpec) -> JobCheckpoints {
        JobCheckpoints {
            decomposition: self.decomposition_ckpt.clone(),
            features: self.features_ckpt.clone(),
            discriminator: self.discriminator_ckpt.clone(),
            normals,
        }
    }
}

// ---------------------------------------------------------------------------
// Artifact validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckStatus {
    Ok,
    Missing,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct ArtifactCheck {
    pub name: String,
    pub detail: String,
    pub status: CheckStatus,
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub checks: Vec<ArtifactCheck>,
}

impl ValidationReport {
    pub fn all_ok(&self) -> bool {
        self.checks.iter().all(|c| c.status == CheckStatus::Ok)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = match &c.status {
                CheckStatus::Ok => "OK".to_string(),
                CheckStatus::Missing => "MISSING".to_string(),
                CheckStatus::Failed(msg) => format!("FAILED ({msg})"),
            };
            let _ = writeln!(out, "{:<28} {:<52} {}", c.name, c.detail, status);
        }
        out
    }
}

fn check_decomposition(path: &Path) -> CheckStatus {
    if !path.exists() {
        return CheckStatus::Missing;
    }
    match DecompositionModel::load(path) {
        Ok(mut m) => {
            let img = match Image::filled(16, 16, [0.5, 0.5, 0.5]) {
                Ok(i) => i,
                Err(e) => return CheckStatus::Failed(e.to_string()),
            };
            match m.decompose(&img) {
                Ok((a, s)) => {
                    if a.data().dim() != (16, 16, 3) || s.data().dim() != (16, 16) {
                        CheckStatus::Failed("smoke inference shape mismatch".into())
                    } else {
                        CheckStatus::Ok
                    }
                }
                Err(e) => CheckStatus::Failed(e.to_string()),
            }
        }
        Err(e) => CheckStatus::Failed(e.to_string()),
    }
}

fn check_discriminator(path: &Path) -> CheckStatus {
    if !path.exists() {
        return CheckStatus::Missing;
    }
    match DiscriminatorModel::load(path) {
        Ok(mut m) => {
            let light = LightSpec::new([0.0, 0.0, 1.0], 1.0).expect("valid");
            let div = 1usize << m.depth();
            let side = div.max(16);
            let scene = match synth_scene_with_albedo(
                SceneKind::Sphere,
                side,
                side,
                &light,
                [0.5, 0.5, 0.5],
            ) {
                Ok(s) => s,
                Err(e) => return CheckStatus::Failed(e.to_string()),
            };
            match discriminator::score(&mut m, &scene.normals, &scene.shading) {
                Ok((g, map)) => {
                    if !(0.0..=1.0).contains(&g) || map.dim() != (side, side) {
                        CheckStatus::Failed("smoke inference out of range".into())
                    } else {
                        CheckStatus::Ok
                    }
                }
                Err(e) => CheckStatus::Failed(e.to_string()),
            }
        }
        Err(e) => CheckStatus::Failed(e.to_string()),
    }
}

fn check_features(path: &Path) -> CheckStatus {
    if !path.exists() {
        return CheckStatus::Missing;
    }
    match FeatureNet::load(path) {
        Ok(mut m) => {
            let img = match Image::filled(20, 20, [0.4, 0.4, 0.4]) {
                Ok(i) => i,
                Err(e) => return CheckStatus::Failed(e.to_string()),
            };
            let f = features::extract_features(&mut m, &img);
            if f.len() != m.feature_dim() || f.iter().any(|v| !v.is_finite()) {
                CheckStatus::Failed("smoke inference bad features".into())
            } else {
                CheckStatus::Ok
            }
        }
        Err(e) => CheckStatus::Failed(e.to_string()),
    }
}

fn check_normals_backend(ckpt: &Option<PathBuf>) -> (String, CheckStatus) {
    match ckpt {
        None => (
            "pretrained backend, no checkpoint configured".to_string(),
            CheckStatus::Missing,
        ),
        Some(path) => {
            if !path.exists() {
                return (path.display().to_string(), CheckStatus::Missing);
            }
            match PretrainedEstimator::load(path) {
                Ok(est) => {
                    let img = match Image::filled(8, 8, [0.5, 0.5, 0.5]) {
                        Ok(i) => i,
                        Err(e) => return (path.display().to_string(), CheckStatus::Failed(e.to_string())),
                    };
                    match crate::normals::estimate_normals(&est, &img) {
                        Ok(_) => (path.display().to_string(), CheckStatus::Ok),
                        Err(e) => (path.display().to_string(), CheckStatus::Failed(e.to_string())),
                    }
                }
                Err(e) => (path.display().to_string(), CheckStatus::Failed(e.to_string())),
            }
        }
    }
}

fn check_dataset_layout(root: &Path, subdirs: &[&str]) -> CheckStatus {
    if !root.exists() {
        return CheckStatus::Missing;
    }
    for sub in subdirs {
        let d = root.join(sub);
        if !d.is_dir() {
            return CheckStatus::Failed(format!("missing {sub}/ subdirectory"));
        }
        let any_png = fs::read_dir(&d)
            .ok()
            .map(|mut it| {
                it.any(|e| {
                    e.ok()
                        .map(|e| e.path().extension().is_some_and(|x| x == "png"))
                        .unwrap_or(false)
                })
            })
            .unwrap_or(false);
        if !any_png {
            return CheckStatus::Failed(format!("{sub}/ holds no samples"));
        }
    }
    CheckStatus::Ok
}

/// Loads every configured checkpoint, smoke-tests each, and verifies dataset
/// layouts that exist on disk. Never aborts on the first failure.
pub fn validate_artifacts(resolved: &ResolvedPipeline) -> ValidationReport {
    let mut report = ValidationReport::default();
    report.checks.push(ArtifactCheck {
        name: "checkpoint/decomposition".into(),
        detail: resolved.decomposition_ckpt.display().to_string(),
        status: check_decomposition(&resolved.decomposition_ckpt),
    });
    report.checks.push(ArtifactCheck {
        name: "checkpoint/discriminator".into(),
        detail: resolved.discriminator_ckpt.display().to_string(),
        status: check_discriminator(&resolved.discriminator_ckpt),
    });
    report.checks.push(ArtifactCheck {
        name: "checkpoint/features".into(),
        detail: resolved.features_ckpt.display().to_string(),
        status: check_features(&resolved.features_ckpt),
    });
    let (detail, status) = check_normals_backend(&resolved.normals_ckpt);
    report.checks.push(ArtifactCheck {
        name: "checkpoint/normals".into(),
        detail,
        status,
    });

    for (name, root, subdirs) in [
        (
            "dataset/decomposition",
            &resolved.decomposition_data,
            vec!["images", "albedo", "shading"],
        ),
        (
            "dataset/distortion",
            &resolved.distortion_data,
            vec!["clean", "distorted", "masks", "normals"],
        ),
    ] {
        // a dataset directory that exists must conform; absence is fine
        // because gen-data recreates them
        if root.exists() {
            report.checks.push(ArtifactCheck {
                name: name.into(),
                detail: root.display().to_string(),
                status: check_dataset_layout(root, &subdirs),
            });
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Stage runners
// ---------------------------------------------------------------------------

/// Generates any missing dataset and trains any missing checkpoint, in
/// dependency order. Returns the list of stages that ran.
pub fn train_missing_stages(resolved: &ResolvedPipeline) -> Result<Vec<String>> {
    let mut ran = Vec::new();
    let data = &resolved.config.data;

    if !resolved.decomposition_ckpt.exists() {
        if !resolved.decomposition_data.join("images").is_dir() {
            synth::write_decomposition_dataset(
                &resolved.decomposition_data,
                data.decomposition_count,
                data.height,
                data.width,
                data.n_patches,
                data.perlin_freq,
                resolved.stage_seed(11),
            )
            .map_err(|e| e.in_stage("gen-data decomposition"))?;
            ran.push("gen-data decomposition".to_string());
        }
        let cfg = resolved.decomposition_train_config();
        let widths = resolved
            .config
            .decomposition
            .widths
            .clone()
            .unwrap_or_else(decomposition::default_widths);
        let mut trained = decomposition::train_decomposition(&cfg, widths)
            .map_err(|e| e.in_stage("train-decomposition"))?;
        trained.model.save(&resolved.decomposition_ckpt)?;
        ran.push("train-decomposition".to_string());
    }

    if !resolved.discriminator_ckpt.exists() {
        if !resolved.distortion_data.join("clean").is_dir() {
            synth::write_distortion_dataset(
                &resolved.distortion_data,
                data.distortion_count,
                data.height,
                data.width,
                resolved.stage_seed(12),
            )
            .map_err(|e| e.in_stage("gen-data distortion"))?;
            ran.push("gen-data distortion".to_string());
        }
        let cfg = resolved.discriminator_train_config();
        let widths = resolved
            .config
            .discriminator
            .train
            .widths
            .clone()
            .unwrap_or_else(discriminator::default_widths);
        let options = DiscOptions {
            zero_normals: resolved.config.discriminator.zero_normals,
            cutmix_prob: resolved.config.discriminator.cutmix_prob,
        };
        let mut trained = discriminator::train_discriminator(&cfg, widths, &options)
            .map_err(|e| e.in_stage("train-discriminator"))?;
        trained.model.save(&resolved.discriminator_ckpt)?;
        ran.push("train-discriminator".to_string());
    }

    if !resolved.features_ckpt.exists() {
        if !resolved.features_data.is_dir() {
            features::write_multilight_corpus(
                &resolved.features_data,
                data.feature_classes,
                data.feature_scenes,
                data.feature_lightings,
                data.height,
                data.width,
                resolved.stage_seed(13),
            )
            .map_err(|e| e.in_stage("gen-data features"))?;
            ran.push("gen-data features".to_string());
        }
        let cfg = resolved.features_train_config();
        let options = FeatureOptions {
            lambda_c: resolved.config.features.lambda_c,
            pretrain_epochs: resolved.config.features.pretrain_epochs,
            groups_per_batch: resolved.config.features.groups_per_batch,
        };
        let widths = resolved
            .config
            .features
            .train
            .widths
            .clone()
            .unwrap_or_else(features::default_widths);
        let mut trained = features::finetune_features(&cfg, &options, widths)
            .map_err(|e| e.in_stage("finetune-features"))?;
        trained.model.save(&resolved.features_ckpt)?;
        ran.push("finetune-features".to_string());
    }

    Ok(ran)
}

/// Builds the bundled synthetic demo job: a sphere rendered under the source
/// light, inserted into a plane scene rendered under a different light, with
/// analytic normal backends on both sides.
pub fn build_demo_job(resolved: &ResolvedPipeline) -> Result<ReshadeJob> {
    let d = &resolved.config.demo;
    let src_light =
        LightSpec::from_unnormalized(d.source_light_direction, d.source_light_intensity)?;
    let tgt_light =
        LightSpec::from_unnormalized(d.target_light_direction, d.target_light_intensity)?;
    let source = synth_scene_with_albedo(
        SceneKind::Sphere,
        d.height,
        d.width,
        &src_light,
        d.source_albedo,
    )?;
    let target = synth_scene_with_albedo(
        SceneKind::Plane,
        d.height,
        d.width,
        &tgt_light,
        d.target_albedo,
    )?;
    let mask = scene_footprint(SceneKind::Sphere, d.height, d.width);
    Ok(ReshadeJob {
        source: source.image,
        source_mask: mask,
        target: target.image,
        placement: Placement::new(d.dx, d.dy, d.scale)?,
        checkpoints: resolved.job_checkpoints(NormalsBackendSpec::Synthetic {
            source_scene: "sphere".into(),
            target_scene: "plane".into(),
        }),
    })
}

// ---------------------------------------------------------------------------
// Run outputs: files, manifest, report
// ---------------------------------------------------------------------------

fn fnv64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn file_fingerprint(path: &Path) -> String {
    match fs::read(path) {
        Ok(b) => format!("len={},fnv64={:016x}", b.len(), fnv64(&b)),
        Err(_) => "unreadable".to_string(),
    }
}

/// Writes `iteration,L_s,L_n,L_f,total` rows.
pub fn write_losses_csv(history: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("iteration,L_s,L_n,L_f,total\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{:.9e},{:.9e},{:.9e},{:.9e}",
            r.iteration, r.l_s, r.l_n, r.l_f, r.total
        );
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

/// Renders loss curves onto a white canvas: total in black, the components
/// in lighter grays, linearly rescaled to the canvas.
pub fn plot_loss_curves(history: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = (240usize, 480usize);
    let mut canvas = ndarray::Array3::from_elem((h, w, 3), 1.0f32);
    if history.len() >= 2 {
        let series: [(Box<dyn Fn(&LossRecord) -> f64>, f32); 4] = [
            (Box::new(|r: &LossRecord| r.l_s), 0.75),
            (Box::new(|r: &LossRecord| r.l_n), 0.55),
            (Box::new(|r: &LossRecord| r.l_f), 0.35),
            (Box::new(|r: &LossRecord| r.total), 0.0),
        ];
        let lo = history
            .iter()
            .flat_map(|r| [r.l_s, r.l_n, r.l_f, r.total])
            .fold(f64::INFINITY, f64::min);
        let hi = history
            .iter()
            .flat_map(|r| [r.l_s, r.l_n, r.l_f, r.total])
            .fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        for (extract, shade) in series {
            let mut prev: Option<(usize, usize)> = None;
            for (i, r) in history.iter().enumerate() {
                let x = i * (w - 1) / (history.len() - 1);
                let t = ((extract(r) - lo) / span).clamp(0.0, 1.0);
                let y = h - 1 - ((t * (h - 1) as f64) as usize).min(h - 1);
                if let Some((px, py)) = prev {
                    // crude line: walk the longer axis
                    let steps = px.abs_diff(x).max(py.abs_diff(y)).max(1);
                    for s in 0..=steps {
                        let ix = px as f64 + (x as f64 - px as f64) * s as f64 / steps as f64;
                        let iy = py as f64 + (y as f64 - py as f64) * s as f64 / steps as f64;
                        let (ix, iy) = (ix.round() as usize, iy.round() as usize);
                        for c in 0..3 {
                            canvas[[iy.min(h - 1), ix.min(w - 1), c]] = shade;
                        }
                    }
                }
                prev = Some((x, y));
            }
        }
    }
    pngio::save_image(&Image::new(canvas)?, path)
}

/// Invariant checks recorded in the run report.
#[derive(Debug, Clone)]
pub struct RunChecks {
    pub surroundings_exact: bool,
    pub determinism_bit_exact: Option<bool>,
    pub albedo_invariance_mse: Option<f64>,
    pub output_in_range: bool,
}

/// Everything a finished run hands back for reporting.
pub struct RunArtifacts {
    pub result: ReshadeResult,
    pub out_dir: PathBuf,
    pub checks: RunChecks,
}

/// Writes all standard outputs for a finished reshade run and the manifest
/// that reproduces it.
pub fn write_run_outputs(
    job: &ReshadeJob,
    prepared_naive: &Image,
    result: &ReshadeResult,
    config_echo: &str,
    checkpoints: &JobCheckpoints,
    config_seed: u64,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    pngio::save_image(&job.source, out_dir.join("source.png"))?;
    pngio::save_mask(&job.source_mask, out_dir.join("mask.png"))?;
    pngio::save_image(&job.target, out_dir.join("target.png"))?;
    pngio::save_image(prepared_naive, out_dir.join("C.png"))?;
    pngio::save_image(&result.output, out_dir.join("Y.png"))?;
    pngio::save_shading(&result.generated_shading, out_dir.join("S_star.png"))?;
    pngio::save_albedo(&result.composite_albedo, out_dir.join("albedo_y.png"))?;
    pngio::save_shading(&result.composite_shading, out_dir.join("shading_y.png"))?;
    write_losses_csv(&result.loss_history, out_dir.join("losses.csv"))?;
    plot_loss_curves(&result.loss_history, out_dir.join("loss_curves.png"))?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "# reshade run manifest");
    let _ = writeln!(manifest, "seed = {config_seed}");
    let _ = writeln!(manifest, "best_iteration = {}", result.best_iteration);
    let _ = writeln!(
        manifest,
        "placement = dx={},dy={},scale={}",
        job.placement.dx, job.placement.dy, job.placement.scale
    );
    let _ = writeln!(
        manifest,
        "checkpoint.decomposition = {} ({})",
        checkpoints.decomposition.display(),
        file_fingerprint(&checkpoints.decomposition)
    );
    let _ = writeln!(
        manifest,
        "checkpoint.discriminator = {} ({})",
        checkpoints.discriminator.display(),
        file_fingerprint(&checkpoints.discriminator)
    );
    let _ = writeln!(
        manifest,
        "checkpoint.features = {} ({})",
        checkpoints.features.display(),
        file_fingerprint(&checkpoints.features)
    );
    let _ = writeln!(manifest, "normals = {:?}", checkpoints.normals);
    let _ = writeln!(manifest, "\n# full configuration echo\n{config_echo}");
    fs::write(out_dir.join("run_manifest.txt"), manifest)?;
    Ok(())
}

/// Renders the markdown run report with the embedded images and check table.
pub fn write_report(
    out_dir: &Path,
    checks: &RunChecks,
    result: &ReshadeResult,
    bench: Option<&[BenchRow]>,
) -> Result<()> {
    let mut md = String::new();
    let _ = writeln!(md, "# Reshade run report\n");
    let _ = writeln!(md, "## Inputs\n");
    let _ = writeln!(md, "| source | mask | target |");
    let _ = writeln!(md, "| --- | --- | --- |");
    let _ = writeln!(
        md,
        "| ![source](source.png) | ![mask](mask.png) | ![target](target.png) |\n"
    );
    let _ = writeln!(md, "## Results\n");
    let _ = writeln!(md, "| naive paste C | reshaded Y | generated shading |");
    let _ = writeln!(md, "| --- | --- | --- |");
    let _ = writeln!(
        md,
        "| ![C](C.png) | ![Y](Y.png) | ![S*](S_star.png) |\n"
    );
    let _ = writeln!(md, "## Loss curves\n");
    let _ = writeln!(md, "![losses](loss_curves.png)\n");
    let _ = writeln!(md, "Best iteration: {}\n", result.best_iteration);
    if let Some(last) = result.loss_history.last() {
        let _ = writeln!(
            md,
            "Final losses: L_s = {:.3e}, L_n = {:.3e}, L_f = {:.3e}, total = {:.3e}\n",
            last.l_s, last.l_n, last.l_f, last.total
        );
    }
    let _ = writeln!(md, "## Invariant checks\n");
    let _ = writeln!(md, "| check | result |");
    let _ = writeln!(md, "| --- | --- |");
    let _ = writeln!(
        md,
        "| surroundings untouched (bit-exact, every iteration) | {} |",
        if checks.surroundings_exact { "pass" } else { "FAIL" }
    );
    if let Some(det) = checks.determinism_bit_exact {
        let _ = writeln!(
            md,
            "| re-run reproduces Y bit-exactly | {} |",
            if det { "pass" } else { "FAIL" }
        );
    }
    if let Some(mse) = checks.albedo_invariance_mse {
        let _ = writeln!(md, "| albedo invariance MSE inside mask | {mse:.5} |");
    }
    let _ = writeln!(
        md,
        "| output within [0, 1] | {} |",
        if checks.output_in_range { "pass" } else { "FAIL" }
    );
    if let Some(rows) = bench {
        let _ = writeln!(md, "\n## Batched-noise benchmark\n");
        let _ = writeln!(
            md,
            "| batch | iterations | iters/sec | loss start | loss end | decrease rate |"
        );
        let _ = writeln!(md, "| --- | --- | --- | --- | --- | --- |");
        for r in rows {
            let _ = writeln!(
                md,
                "| {} | {} | {:.2} | {:.4e} | {:.4e} | {:.4e} |",
                r.batch, r.iterations, r.iters_per_sec, r.loss_start, r.loss_end, r.decrease_rate
            );
        }
    }
    fs::write(out_dir.join("report.md"), md)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// End-to-end
// ---------------------------------------------------------------------------

/// Runs one reshade job to completion and writes all outputs.
pub fn run_job_to_dir(
    job: &ReshadeJob,
    dip: &DipConfig,
    config_echo: &str,
    out_dir: &Path,
) -> Result<ReshadeResult> {
    let mut prepared = prepare_job(job)?;
    let naive = prepared.naive_composite.clone();
    let mut driver = DipDriver::new(&mut prepared, dip.clone())?;
    let result = driver.run()?;
    write_run_outputs(
        job,
        &naive,
        &result,
        config_echo,
        &job.checkpoints,
        dip.seed,
        out_dir,
    )?;
    Ok(result)
}

/// The full demo: train whatever is missing, reshade the bundled synthetic
/// job, re-run it to verify bit-exact determinism, check albedo invariance,
/// and write the report.
pub fn run_end_to_end(
    resolved: &ResolvedPipeline,
    out_dir: &Path,
    train_missing: bool,
) -> Result<RunArtifacts> {
    if train_missing {
        train_missing_stages(resolved)?;
    } else {
        let report = validate_artifacts(resolved);
        let missing: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| {
                c.name.starts_with("checkpoint/")
                    && c.name != "checkpoint/normals"
                    && c.status != CheckStatus::Ok
            })
            .map(|c| c.name.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "missing or broken artifacts: {}; run with train_missing",
                missing.join(", ")
            )));
        }
    }

    let job = build_demo_job(resolved)?;
    let dip = resolved.dip_config();
    let config_echo = resolved.config.to_toml_string();

    let result = run_job_to_dir(&job, &dip, &config_echo, out_dir)?;

    // determinism: run the identical job again and compare emitted bytes
    let rerun_dir = out_dir.join("determinism_rerun");
    let _rerun = run_job_to_dir(&job, &dip, &config_echo, &rerun_dir)?;
    let y1 = fs::read(out_dir.join("Y.png"))?;
    let y2 = fs::read(rerun_dir.join("Y.png"))?;
    let determinism = y1 == y2;

    // albedo invariance through the decomposition oracle
    let mut decomposition = DecompositionModel::load(&resolved.decomposition_ckpt)?;
    let prepared = prepare_job(&job)?;
    let (alb_y, _s) = decomposition.decompose(&result.output)?;
    let mut mse = 0.0f64;
    let mut count = 0usize;
    for y in 0..prepared.height {
        for x in 0..prepared.width {
            if prepared.mask.data()[[y, x]] == 1 {
                for c in 0..3 {
                    let d = (alb_y.data()[[y, x, c]]
                        - prepared.object_albedo.data()[[y, x, c]]) as f64;
                    mse += d * d;
                    count += 1;
                }
            }
        }
    }
    let albedo_mse = mse / count.max(1) as f64;

    let output_in_range = result
        .output
        .data()
        .iter()
        .all(|&v| (0.0..=1.0).contains(&v));

    let checks = RunChecks {
        surroundings_exact: result.surroundings_exact,
        determinism_bit_exact: Some(determinism),
        albedo_invariance_mse: Some(albedo_mse),
        output_in_range,
    };
    write_report(out_dir, &checks, &result, None)?;

    Ok(RunArtifacts {
        result,
        out_dir: out_dir.to_path_buf(),
        checks,
    })
}

/// Benchmark entry point used by the CLI: measures the batched-noise rows on
/// a self-contained inpainting job derived from the config.
pub fn run_benchmark(
    resolved: &ResolvedPipeline,
    b_values: &[usize],
    budget_secs: f64,
) -> Result<Vec<BenchRow>> {
    let d = &resolved.config.demo;
    let light = LightSpec::new([0.0, 0.0, 1.0], 1.0)?;
    let scene = synth_scene_with_albedo(
        SceneKind::Plane,
        d.height,
        d.width,
        &light,
        [0.6, 0.6, 0.6],
    )?;
    let s_t = crate::synth::gen_perlin(&crate::synth::PerlinSpec::new(
        d.height,
        d.width,
        resolved.stage_seed(21),
    ))?;
    let rho = crate::imaging::AlbedoField::filled(d.height, d.width, [0.6, 0.6, 0.6])?;
    let mut prepared = crate::dip::PreparedJob::from_fields(
        scene.image,
        s_t,
        Mask::zeros(d.height, d.width),
        rho.clone(),
        rho,
        scene.normals,
        None,
        None,
    )?;
    let mut cfg = resolved.dip_config();
    cfg.loss_weights = (1.0, 0.0, 0.0);
    benchmark_batched_noise(&mut prepared, &cfg, b_values, budget_secs)
}

/// Renders the benchmark rows as a CSV string.
pub fn bench_rows_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("batch,iterations,elapsed_secs,iters_per_sec,loss_start,loss_end,decrease_rate\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.3},{:.3},{:.6e},{:.6e},{:.6e}",
            r.batch, r.iterations, r.elapsed_secs, r.iters_per_sec, r.loss_start, r.loss_end, r.decrease_rate
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let s = cfg.to_toml_string();
        let back = PipelineConfig::from_toml_str(&s).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let raw = "[pipeline]\nseed = 3\ntypo_key = 1\n";
        assert!(matches!(
            PipelineConfig::from_toml_str(raw),
            Err(Error::Config(_))
        ));
        let raw2 = "[nonexistent_section]\nx = 1\n";
        assert!(PipelineConfig::from_toml_str(raw2).is_err());
    }

    #[test]
    fn empty_config_lists_all_four_checkpoints_missing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.pipeline.cache_dir = Some(dir.path().join("cache"));
        let resolved = resolve(&cfg);
        let report = validate_artifacts(&resolved);
        let missing: Vec<_> = report
            .checks
            .iter()
            .filter(|c| c.status == CheckStatus::Missing)
            .map(|c| c.name.clone())
            .collect();
        assert_eq!(
            missing,
            vec![
                "checkpoint/decomposition",
                "checkpoint/discriminator",
                "checkpoint/features",
                "checkpoint/normals"
            ]
        );
    }

    #[test]
    fn corrupted_checkpoint_is_flagged_and_others_still_checked() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.pipeline.cache_dir = Some(dir.path().to_path_buf());
        let resolved = resolve(&cfg);

        // a valid features checkpoint, a truncated decomposition one
        let mut feat = FeatureNet::new(vec![3, 4, 4], 2, 9);
        feat.save(&resolved.features_ckpt).unwrap();
        let mut dec = DecompositionModel::new(vec![4, 8], 3);
        dec.save(&resolved.decomposition_ckpt).unwrap();
        let bytes = fs::read(&resolved.decomposition_ckpt).unwrap();
        fs::write(&resolved.decomposition_ckpt, &bytes[..bytes.len() / 2]).unwrap();

        let report = validate_artifacts(&resolved);
        let by_name: std::collections::BTreeMap<_, _> = report
            .checks
            .iter()
            .map(|c| (c.name.clone(), c.status.clone()))
            .collect();
        assert!(matches!(
            by_name["checkpoint/decomposition"],
            CheckStatus::Failed(_)
        ));
        assert_eq!(by_name["checkpoint/features"], CheckStatus::Ok);
        assert_eq!(by_name["checkpoint/discriminator"], CheckStatus::Missing);
    }

    #[test]
    fn cache_dir_env_override() {
        let cfg = PipelineConfig::default();
        std::env::set_var(CACHE_DIR_ENV, "/tmp/reshade-env-test");
        let resolved = resolve(&cfg);
        std::env::remove_var(CACHE_DIR_ENV);
        assert_eq!(resolved.cache_dir, PathBuf::from("/tmp/reshade-env-test"));
        assert!(resolved
            .decomposition_ckpt
            .starts_with("/tmp/reshade-env-test"));
    }

    #[test]
    fn losses_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("losses.csv");
        let history = vec![LossRecord {
            iteration: 0,
            l_s: 0.5,
            l_n: 0.25,
            l_f: 0.125,
            total: 0.875,
        }];
        write_losses_csv(&history, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("iteration,L_s,L_n,L_f,total\n"));
        assert!(text.lines().nth(1).unwrap().starts_with("0,"));
    }
}
