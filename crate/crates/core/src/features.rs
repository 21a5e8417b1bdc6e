//! The illumination-robust feature extractor behind the perceptual
//! consistency loss: a small convolutional classifier whose pooled last
//! feature map is fine-tuned so that renderings of one scene under different
//! lights land close together in feature space, while classification stays
//! intact (multi-task loss).
//!
//! A synthetic multi-light corpus generator is included so the whole suite
//! runs with zero external data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decomposition::TrainConfig;
use crate::error::Error;
use crate::field_bridge::tensor_from_hwc;
use crate::imaging::{form_image, lambertian_shading, AlbedoField, Image, LightSpec};
use crate::nn::{
    load_checkpoint, save_checkpoint, Adam, BilinearResize, ConvBlock, GlobalAvgPool, Linear,
    Param, Tensor,
};
use crate::normals::{synth_scene, SceneKind};
use crate::pngio;
use crate::synth::{derive_seed, gen_mondrian, MondrianSpec};
use crate::Result;

const CKPT_KIND: &str = "features";

/// Native input resolution; [`FeatureNet::features`] resizes to this first.
pub const NATIVE_SIZE: usize = 64;

/// A classifier whose pooled final convolutional map doubles as the feature
/// embedding. Layout: stride-2 conv blocks (5,3,3,3 kernels), global average
/// pool, linear class head.
pub struct FeatureNet {
    resize: BilinearResize,
    blocks: Vec<ConvBlock>,
    gap: GlobalAvgPool,
    head: Linear,
    pub widths: Vec<usize>,
    pub n_classes: usize,
    pub meta: BTreeMap<String, String>,
}

impl FeatureNet {
    pub fn new(widths: Vec<usize>, n_classes: usize, seed: u64) -> Self {
        assert!(widths.len() >= 2 && widths[0] == 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        for i in 0..widths.len() - 1 {
            let k = if i == 0 { 5 } else { 3 };
            blocks.push(ConvBlock::new(
                &format!("feat.b{i}"),
                widths[i],
                widths[i + 1],
                k,
                2,
                &mut rng,
            ));
        }
        let feat_dim = *widths.last().unwrap();
        let head = Linear::new("feat.head", feat_dim, n_classes, &mut rng);
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), CKPT_KIND.to_string());
        meta.insert("seed".to_string(), seed.to_string());
        meta.insert(
            "widths".to_string(),
            widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        meta.insert("n_classes".to_string(), n_classes.to_string());
        Self {
            resize: BilinearResize::new(NATIVE_SIZE, NATIVE_SIZE),
            blocks,
            gap: GlobalAvgPool::new(),
            head,
            widths,
            n_classes,
            meta,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Features for an NCHW batch of any spatial size: resize to native,
    /// conv stack, global average pool. Output `[n, feature_dim, 1, 1]`.
    pub fn features(&mut self, x: &Tensor, with_grad: bool) -> Tensor {
        let mut cur = self.resize.forward(x, with_grad);
        for b in self.blocks.iter_mut() {
            cur = b.forward(&cur, with_grad);
        }
        self.gap.forward(&cur, with_grad)
    }

    /// Class logits from pooled features.
    pub fn logits(&mut self, features: &Tensor, with_grad: bool) -> Tensor {
        self.head.forward(features, with_grad)
    }

    /// Backward through the head and/or directly into the feature embedding;
    /// returns the gradient at the network input (through the resize).
    pub fn backward(&mut self, g_logits: Option<&Tensor>, g_features: Option<&Tensor>) -> Tensor {
        let mut g_feat = match g_logits {
            Some(gl) => self.head.backward(gl),
            None => {
                let gf = g_features.expect("backward needs at least one gradient");
                Tensor::zeros(gf.n, gf.c, 1, 1)
            }
        };
        if let Some(gf) = g_features {
            if g_logits.is_some() {
                for (a, b) in g_feat.data.iter_mut().zip(gf.data.iter()) {
                    *a += b;
                }
            } else {
                g_feat = gf.clone();
            }
        }
        let mut g = self.gap.backward(&g_feat);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        self.resize.backward(&g)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in self.blocks.iter_mut() {
            b.visit_params(f);
        }
        self.head.visit_params(f);
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for b in self.blocks.iter_mut() {
            b.set_frozen(frozen);
        }
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
        let widths: Vec<usize> = widths_raw
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("bad widths metadata: {widths_raw}"),
            })?;
        let n_classes: usize = ckpt.meta_parse("n_classes", path)?;
        let seed: u64 = ckpt.meta_parse("seed", path).unwrap_or(0);
        let mut model = Self::new(widths, n_classes, seed);
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
}

/// Default widths for the feature stack: 3 -> 16 -> 32 -> 64 -> 64.
pub fn default_widths() -> Vec<usize> {
    vec![3, 16, 32, 64, 64]
}

/// Deterministic feature vector for a single image.
pub fn extract_features(net: &mut FeatureNet, image: &Image) -> Vec<f32> {
    let x = tensor_from_hwc(image.data());
    net.features(&x, false).data
}

/// Squared L2 distance between two feature vectors.
pub fn feature_sq_distance(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

/// Images of one scene under several lights, plus the scene's class label.
#[derive(Debug, Clone)]
pub struct IlluminationGroup {
    pub scene_id: String,
    pub class_label: usize,
    pub images: Vec<PathBuf>,
}

impl IlluminationGroup {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.images.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "group {} has {} image(s); needs at least 2",
                self.scene_id,
                self.images.len()
            )));
        }
        if self.class_label >= n_classes {
            return Err(Error::InvalidSpec(format!(
                "group {} label {} outside vocabulary of {n_classes}",
                self.scene_id, self.class_label
            )));
        }
        Ok(())
    }
}

/// Loads a `root/<class>/<scene>/<lighting>.png` tree. Classes and scenes are
/// ordered by name; class labels are the sorted class-directory indices.
pub fn load_illumination_tree(root: impl AsRef<Path>) -> Result<(Vec<String>, Vec<IlluminationGroup>)> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Dataset {
            path: root.to_path_buf(),
            msg: "corpus root is not a directory".into(),
        });
    }
    let mut class_names: Vec<String> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    class_names.sort();
    if class_names.is_empty() {
        return Err(Error::Dataset {
            path: root.to_path_buf(),
            msg: "no class directories".into(),
        });
    }
    let mut groups = Vec::new();
    for (label, class) in class_names.iter().enumerate() {
        let class_dir = root.join(class);
        let mut scenes: Vec<String> = fs::read_dir(&class_dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        scenes.sort();
        for scene in scenes {
            let scene_dir = class_dir.join(&scene);
            let mut images: Vec<PathBuf> = fs::read_dir(&scene_dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            images.sort();
            groups.push(IlluminationGroup {
                scene_id: format!("{class}/{scene}"),
                class_label: label,
                images,
            });
        }
    }
    for g in &groups {
        g.validate(class_names.len())?;
    }
    Ok((class_names, groups))
}

/// Writes the synthetic fallback corpus: per class a base Mondrian albedo;
/// per scene a small color/translation jitter of it; per lighting a render of
/// that albedo on sphere geometry under a random Lambertian light.
pub fn write_multilight_corpus(
    root: impl AsRef<Path>,
    n_classes: usize,
    scenes_per_class: usize,
    lightings_per_scene: usize,
    height: usize,
    width: usize,
    base_seed: u64,
) -> Result<()> {
    let root = root.as_ref();
    let sphere = synth_scene(
        SceneKind::Sphere,
        height,
        width,
        &LightSpec::new([0.0, 0.0, 1.0], 1.0)?,
    )?
    .normals;
    for class in 0..n_classes {
        let class_seed = derive_seed(base_seed, class as u64);
        let base = gen_mondrian(&MondrianSpec {
            n_patches: 8,
            rotation_range: 0.0,
            scale_range: (1.0, 1.0),
            ..MondrianSpec::new(height, width, class_seed)
        })?;
        for scene in 0..scenes_per_class {
            let scene_seed = derive_seed(class_seed, 1000 + scene as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
            let shift = [
                rng.random_range(-0.05..0.05f32),
                rng.random_range(-0.05..0.05f32),
                rng.random_range(-0.05..0.05f32),
            ];
            let dy = rng.random_range(0..height);
            let dx = rng.random_range(0..width);
            let jittered = ndarray::Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
                let sy = (y + dy) % height;
                let sx = (x + dx) % width;
                (base.data()[[sy, sx, c]] + shift[c]).clamp(0.0, 1.0)
            });
            let albedo = AlbedoField::new(jittered)?;
            let scene_dir = root
                .join(format!("class_{class:02}"))
                .join(format!("scene_{scene:02}"));
            fs::create_dir_all(&scene_dir)?;
            for k in 0..lightings_per_scene {
                let d = [
                    rng.random_range(-0.7..0.7f32),
                    rng.random_range(-0.7..0.7f32),
                    rng.random_range(0.45..1.0f32),
                ];
                let light = LightSpec::from_unnormalized(d, rng.random_range(0.65..1.0f32))?;
                let shading = lambertian_shading(&sphere, &light)?;
                let image = form_image(&albedo, &shading)?;
                pngio::save_image(&image, scene_dir.join(format!("light_{k:02}.png")))?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

fn load_group_images(group: &IlluminationGroup) -> Result<Vec<Image>> {
    group.images.iter().map(pngio::load_image).collect()
}

fn batch_from_images(images: &[&Image]) -> Tensor {
    let (h, w) = (images[0].height(), images[0].width());
    let mut x = Tensor::zeros(images.len(), 3, h, w);
    for (i, img) in images.iter().enumerate() {
        x.sample_mut(i)
            .copy_from_slice(&crate::field_bridge::chw_from_hwc(img.data()));
    }
    x
}

/// Softmax cross-entropy over `[n, classes, 1, 1]` logits; gradient written
/// in place when requested. Returns (mean loss, correct count).
fn cross_entropy(logits: &Tensor, labels: &[usize], grad: Option<&mut Tensor>) -> (f64, usize) {
    let n = logits.n;
    let c = logits.c;
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    let mut g = grad;
    for i in 0..n {
        let row = logits.sample(i);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        loss += -(probs[labels[i]].max(1e-12)).ln();
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if argmax == labels[i] {
            correct += 1;
        }
        if let Some(gt) = g.as_deref_mut() {
            let gs = gt.sample_mut(i);
            for j in 0..c {
                let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                gs[j] = ((probs[j] - onehot) / n as f64) as f32;
            }
        }
    }
    (loss / n as f64, correct)
}

/// Mean pairwise squared feature distance within each listed group (features
/// indexed into `feats` by the group's member positions), plus the feature
/// gradients when requested. The mean runs over pairs, then over groups.
fn consistency_loss(
    feats: &Tensor,
    group_members: &[Vec<usize>],
    grad: Option<&mut Tensor>,
) -> f64 {
    let dim = feats.c;
    let mut total = 0.0f64;
    let mut g = grad;
    let n_groups = group_members.iter().filter(|m| m.len() >= 2).count();
    if n_groups == 0 {
        return 0.0;
    }
    for members in group_members {
        let k = members.len();
        if k < 2 {
            continue;
        }
        let pairs = (k * (k - 1) / 2) as f64;
        for a in 0..k {
            for b in a + 1..k {
                let fa = feats.sample(members[a]);
                let fb = feats.sample(members[b]);
                total += feature_sq_distance(fa, fb) / pairs / n_groups as f64;
            }
        }
        if let Some(gt) = g.as_deref_mut() {
            for a in 0..k {
                // d/d f_a of sum_{pairs} |f_a - f_b|^2 = 2 sum_{b != a} (f_a - f_b)
                let mut gv = vec![0.0f32; dim];
                for b in 0..k {
                    if a == b {
                        continue;
                    }
                    let fa = feats.sample(members[a]);
                    let fb = feats.sample(members[b]);
                    for d in 0..dim {
                        gv[d] += 2.0 * (fa[d] - fb[d]);
                    }
                }
                let gs = gt.sample_mut(members[a]);
                for d in 0..dim {
                    gs[d] += gv[d] / pairs as f32 / n_groups as f32;
                }
            }
        }
    }
    total
}

/// Extra options for feature training.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureOptions {
    /// Weight of the within-group consistency term.
    pub lambda_c: f32,
    /// Classification-only epochs building the pretrained baseline.
    pub pretrain_epochs: usize,
    /// Groups per fine-tuning step.
    pub groups_per_batch: usize,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            pretrain_epochs: 30,
            groups_per_batch: 4,
        }
    }
}

/// Split of the corpus into training and held-out groups (whole scenes).
pub struct GroupSplit {
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

/// Deterministic whole-group split.
pub fn split_groups(n_groups: usize, validation_fraction: f32, seed: u64) -> GroupSplit {
    let mut order: Vec<usize> = (0..n_groups).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x9009));
    order.shuffle(&mut rng);
    let n_val = ((n_groups as f32 * validation_fraction) as usize).clamp(1, n_groups - 1);
    GroupSplit {
        held_out: order[..n_val].to_vec(),
        train: order[n_val..].to_vec(),
    }
}

/// In-memory corpus: decoded images per group.
pub struct LoadedCorpus {
    pub class_names: Vec<String>,
    pub groups: Vec<IlluminationGroup>,
    pub images: Vec<Vec<Image>>,
}

pub fn load_corpus(root: impl AsRef<Path>) -> Result<LoadedCorpus> {
    let (class_names, groups) = load_illumination_tree(root)?;
    let mut images = Vec::with_capacity(groups.len());
    for g in &groups {
        images.push(load_group_images(g)?);
    }
    Ok(LoadedCorpus {
        class_names,
        groups,
        images,
    })
}

struct EpochStats {
    ce: f64,
    consistency: f64,
}

fn run_epoch(
    net: &mut FeatureNet,
    corpus: &LoadedCorpus,
    group_idx: &[usize],
    adam: &mut Adam,
    lambda_c: f32,
    groups_per_batch: usize,
    rng: &mut ChaCha8Rng,
) -> EpochStats {
    let mut order = group_idx.to_vec();
    order.shuffle(rng);
    let mut ce_total = 0.0f64;
    let mut cons_total = 0.0f64;
    let mut steps = 0usize;
    for chunk in order.chunks(groups_per_batch) {
        let mut imgs: Vec<&Image> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for &gi in chunk {
            let start = imgs.len();
            for img in &corpus.images[gi] {
                imgs.push(img);
                labels.push(corpus.groups[gi].class_label);
            }
            members.push((start..imgs.len()).collect());
        }
        let x = batch_from_images(&imgs);
        net.zero_grads();
        let feats = net.features(&x, true);
        let logits = net.logits(&feats, true);
        let mut g_logits = Tensor::zeros(logits.n, logits.c, 1, 1);
        let (ce, _) = cross_entropy(&logits, &labels, Some(&mut g_logits));
        let mut cons = 0.0f64;
        if lambda_c > 0.0 {
            let mut g_feat = Tensor::zeros(feats.n, feats.c, 1, 1);
            cons = consistency_loss(&feats, &members, Some(&mut g_feat));
            for v in g_feat.data.iter_mut() {
                *v *= lambda_c;
            }
            net.backward(Some(&g_logits), Some(&g_feat));
        } else {
            net.backward(Some(&g_logits), None);
        }
        let step = adam.begin_step();
        net.visit_params(&mut |p| step.update(p));
        ce_total += ce;
        cons_total += cons;
        steps += 1;
    }
    EpochStats {
        ce: ce_total / steps.max(1) as f64,
        consistency: cons_total / steps.max(1) as f64,
    }
}

/// Mean within-group feature distance over the listed groups.
pub fn mean_group_distance(net: &mut FeatureNet, corpus: &LoadedCorpus, idx: &[usize]) -> f64 {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for &gi in idx {
        let feats: Vec<Vec<f32>> = corpus.images[gi]
            .iter()
            .map(|img| extract_features(net, img))
            .collect();
        let k = feats.len();
        if k < 2 {
            continue;
        }
        let mut group = 0.0f64;
        let mut pairs = 0usize;
        for a in 0..k {
            for b in a + 1..k {
                group += feature_sq_distance(&feats[a], &feats[b]);
                pairs += 1;
            }
        }
        total += group / pairs as f64;
        count += 1;
    }
    total / count.max(1) as f64
}

/// Classification accuracy over the listed groups.
pub fn classification_accuracy(net: &mut FeatureNet, corpus: &LoadedCorpus, idx: &[usize]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for &gi in idx {
        for img in &corpus.images[gi] {
            let x = tensor_from_hwc(img.data());
            let f = net.features(&x, false);
            let logits = net.logits(&f, false);
            let (_, c) = cross_entropy(&logits, &[corpus.groups[gi].class_label], None);
            correct += c;
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}

pub struct TrainedFeatures {
    pub model: FeatureNet,
    pub pretrain_ce_history: Vec<f64>,
    pub finetune_ce_history: Vec<f64>,
    pub finetune_consistency_history: Vec<f64>,
    /// (pretrained, fine-tuned) mean within-group distance on held-out groups.
    pub held_out_distance: (f64, f64),
    /// (pretrained, fine-tuned) held-out classification accuracy.
    pub held_out_accuracy: (f64, f64),
}

/// Builds the pretrained classifier, fine-tunes it with the multi-task loss,
/// and reports held-out metrics against the pretrained baseline.
pub fn finetune_features(
    config: &TrainConfig,
    options: &FeatureOptions,
    widths: Vec<usize>,
) -> Result<TrainedFeatures> {
    config.validate()?;
    let corpus = load_corpus(&config.dataset_dir)?;
    let n_classes = corpus.class_names.len();
    for g in &corpus.groups {
        g.validate(n_classes)?;
    }
    let split = split_groups(corpus.groups.len(), config.validation_fraction, config.seed);

    let mut net = FeatureNet::new(widths, n_classes, config.seed);
    net.meta.insert(
        "class_names".into(),
        corpus.class_names.join(","),
    );
    net.meta
        .insert("lambda_c".into(), options.lambda_c.to_string());

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xFEA7));
    let mut adam = Adam::new(config.learning_rate);

    // pretraining: classification only (the "pretrained" baseline)
    let mut pretrain_ce_history = Vec::new();
    for _ in 0..options.pretrain_epochs {
        let stats = run_epoch(
            &mut net,
            &corpus,
            &split.train,
            &mut adam,
            0.0,
            options.groups_per_batch,
            &mut rng,
        );
        pretrain_ce_history.push(stats.ce);
    }
    let pre_distance = mean_group_distance(&mut net, &corpus, &split.held_out);
    let pre_accuracy = classification_accuracy(&mut net, &corpus, &split.held_out);

    // fine-tuning: classification + consistency
    let mut finetune_ce_history = Vec::new();
    let mut finetune_consistency_history = Vec::new();
    let mut adam_ft = Adam::new(config.learning_rate * 0.5);
    for _ in 0..config.epochs {
        let stats = run_epoch(
            &mut net,
            &corpus,
            &split.train,
            &mut adam_ft,
            options.lambda_c,
            options.groups_per_batch,
            &mut rng,
        );
        finetune_ce_history.push(stats.ce);
        finetune_consistency_history.push(stats.consistency);
    }
    let post_distance = mean_group_distance(&mut net, &corpus, &split.held_out);
    let post_accuracy = classification_accuracy(&mut net, &corpus, &split.held_out);

    let fmt = |h: &[f64]| {
        h.iter()
            .map(|v| format!("{v:.6e}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    net.meta
        .insert("pretrain_ce_history".into(), fmt(&pretrain_ce_history));
    net.meta
        .insert("finetune_ce_history".into(), fmt(&finetune_ce_history));
    net.meta.insert(
        "finetune_consistency_history".into(),
        fmt(&finetune_consistency_history),
    );
    net.meta.insert(
        "held_out_distance_pre_post".into(),
        format!("{pre_distance:.6e},{post_distance:.6e}"),
    );
    net.meta.insert(
        "held_out_accuracy_pre_post".into(),
        format!("{pre_accuracy:.4},{post_accuracy:.4}"),
    );

    Ok(TrainedFeatures {
        model: net,
        pretrain_ce_history,
        finetune_ce_history,
        finetune_consistency_history,
        held_out_distance: (pre_distance, post_distance),
        held_out_accuracy: (pre_accuracy, post_accuracy),
    })
}
