//! Base-model construction: supervised double fine-tuning, contrastive
//! pre-training, target fine-tuning and feature extraction.

use std::fmt;
use std::path::PathBuf;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{AugmentConfig, LabeledImageSet};
use crate::error::{invalid_arg, Error, Result};
use crate::nn::{
    accuracy, nt_xent_loss, train_supervised, EncoderModel, Head, HeadKind, Layer, OptimizerState, Sequential, Stage,
    Tensor, TrainConfig, TrainLog,
};
use crate::{FeatureMatrix, Matrix};

/// Backbone architecture family. The variants differ in depth, width and
/// kernel sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    A,
    B,
    C,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::A, Variant::B, Variant::C];

    pub fn name(self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            _ => Err(invalid_arg!("unknown backbone variant {s:?}")),
        }
    }

    /// `(kernel, out_channels, pool_after)` per conv block.
    fn blocks(self) -> &'static [(usize, usize, bool)] {
        match self {
            Variant::A => &[(5, 8, true), (3, 16, false)],
            Variant::B => &[(5, 8, true), (3, 12, true), (3, 24, false)],
            Variant::C => &[(3, 8, false), (3, 8, true), (3, 16, true), (3, 32, false)],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BackboneSpec {
    pub variant: Variant,
    /// `(channels, height, width)`
    pub input_shape: (usize, usize, usize),
}

impl BackboneSpec {
    pub fn new(variant: Variant, input_shape: (usize, usize, usize)) -> Self {
        Self { variant, input_shape }
    }

    pub fn feature_dim(&self) -> usize {
        self.variant.blocks().last().expect("non-empty").1
    }

    pub fn layer_count(&self) -> usize {
        self.variant.blocks().iter().map(|b| if b.2 { 3 } else { 2 }).sum()
    }

    /// Freshly initialized backbone (no head, empty provenance).
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<EncoderModel> {
        let mut layers = Vec::new();
        let mut ch = self.input_shape.0;
        for &(k, out, pool) in self.variant.blocks() {
            layers.push(crate::nn::conv_layer(ch, out, k, rng)?);
            layers.push(Layer::Relu);
            if pool {
                layers.push(Layer::MaxPool2d);
            }
            ch = out;
        }
        EncoderModel::new(self.input_shape, Sequential::new(layers))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Tl,
    Ssl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Tl => "TL",
            Method::Ssl => "SSL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "TL" | "tl" => Ok(Method::Tl),
            "SSL" | "ssl" => Ok(Method::Ssl),
            _ => Err(invalid_arg!("unknown pre-training method {s:?}")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Checks that a stage history is strictly ordered, starts at the generic
/// stage, and (for TL) passes through the intermediate stage before the
/// target stage.
pub fn check_provenance(method: Method, stages: &[Stage]) -> Result<()> {
    if stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidState(format!("stages out of order: {stages:?}")));
    }
    if !stages.is_empty() && stages[0] != Stage::Generic {
        return Err(Error::InvalidState("provenance must start at the generic stage".into()));
    }
    if method == Method::Tl && stages.contains(&Stage::Target) && !stages.contains(&Stage::Intermediate) {
        return Err(Error::InvalidState("TL target stage requires the intermediate stage".into()));
    }
    Ok(())
}

/// One of the six base models of an ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModelRecord {
    pub spec: BackboneSpec,
    method: Method,
    pub provenance: Vec<Stage>,
    pub weights_path: PathBuf,
    /// sha256 of the weight file after each completed stage.
    pub stage_hashes: Vec<(Stage, String)>,
}

impl BaseModelRecord {
    pub fn new(spec: BackboneSpec, method: Method, weights_path: PathBuf) -> Self {
        Self {
            spec,
            method,
            provenance: Vec::new(),
            weights_path,
            stage_hashes: Vec::new(),
        }
    }

    pub fn method(&self) -> Method {
        self.method
    }

    /// `"A-TL"` style identifier.
    pub fn id(&self) -> String {
        format!("{}-{}", self.spec.variant, self.method)
    }

    pub fn record_stage(&mut self, stage: Stage, hash: String) -> Result<()> {
        let mut next = self.provenance.clone();
        next.push(stage);
        check_provenance(self.method, &next)?;
        self.provenance = next;
        self.stage_hashes.push((stage, hash));
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (c, h, w) = self.spec.input_shape;
        let mut s = format!(
            "id={}\nmethod={}\nvariant={}\ninput={c}x{h}x{w}\nfeature_dim={}\nweights={}\n",
            self.id(),
            self.method,
            self.spec.variant,
            self.spec.feature_dim(),
            self.weights_path.display()
        );
        for (stage, hash) in &self.stage_hashes {
            s.push_str(&format!("stage.{}={hash}\n", stage.name()));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut method = None;
        let mut variant = None;
        let mut input = None;
        let mut weights = None;
        let mut stages = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid_arg!("malformed record line {line:?}"))?;
            match k {
                "id" | "feature_dim" => {}
                "method" => method = Some(Method::parse(v)?),
                "variant" => variant = Some(Variant::parse(v)?),
                "input" => {
                    let dims: Vec<usize> = v
                        .split('x')
                        .map(|d| d.parse().map_err(|_| invalid_arg!("bad input shape {v:?}")))
                        .collect::<Result<_>>()?;
                    if dims.len() != 3 {
                        return Err(invalid_arg!("bad input shape {v:?}"));
                    }
                    input = Some((dims[0], dims[1], dims[2]));
                }
                "weights" => weights = Some(PathBuf::from(v)),
                _ => match k.strip_prefix("stage.") {
                    Some(stage) => stages.push((Stage::parse(stage)?, v.to_string())),
                    None => return Err(invalid_arg!("unknown record key {k:?}")),
                },
            }
        }
        let missing = |what: &str| invalid_arg!("record is missing {what}");
        let spec = BackboneSpec::new(variant.ok_or_else(|| missing("variant"))?, input.ok_or_else(|| missing("input"))?);
        let mut rec = Self::new(
            spec,
            method.ok_or_else(|| missing("method"))?,
            weights.ok_or_else(|| missing("weights"))?,
        );
        for (stage, hash) in stages {
            rec.record_stage(stage, hash)?;
        }
        Ok(rec)
    }
}

/// Optimizer and loop settings for one supervised stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub train: TrainConfig,
    pub learning_rate: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            learning_rate: 0.001,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub log: TrainLog,
    /// Accuracy of the trained model (with its head) on the training set.
    pub train_accuracy: f64,
    /// Number of frozen parameters verified bit-identical after training.
    pub frozen_params_checked: usize,
    /// Fresh initializations drawn after a collapsed attempt.
    pub restarts: usize,
}

/// GlobalAvgPool → Flatten → Dense(D_f→D_f/2) → ReLU → Dense(→D_f/4) → ReLU →
/// Dense(→n) → Dropout(0.3) → Softmax.
pub fn tl_head<R: Rng + ?Sized>(d_f: usize, n_classes: usize, rng: &mut R) -> Head {
    let (h1, h2) = ((d_f / 2).max(1), (d_f / 4).max(1));
    Head {
        kind: HeadKind::Classification,
        layers: Sequential::new(vec![
            Layer::GlobalAvgPool,
            Layer::Flatten,
            crate::nn::dense_layer(d_f, h1, rng),
            Layer::Relu,
            crate::nn::dense_layer(h1, h2, rng),
            Layer::Relu,
            crate::nn::dense_layer(h2, n_classes, rng),
            Layer::Dropout(0.3),
            Layer::Softmax,
        ]),
    }
}

/// GlobalMaxPool → Flatten → Dense(D_f→D_f/2) → ReLU → Dense(→latent).
pub fn projection_head<R: Rng + ?Sized>(d_f: usize, latent: usize, rng: &mut R) -> Head {
    let h1 = (d_f / 2).max(1);
    Head {
        kind: HeadKind::Projection,
        layers: Sequential::new(vec![
            Layer::GlobalMaxPool,
            Layer::Flatten,
            crate::nn::dense_layer(d_f, h1, rng),
            Layer::Relu,
            crate::nn::dense_layer(h1, latent, rng),
        ]),
    }
}

/// The projection layout with a class output: GlobalMaxPool → Flatten →
/// Dense(D_f→D_f/2) → ReLU → Dense(→n) → Softmax.
pub fn ssl_classification_head<R: Rng + ?Sized>(d_f: usize, n_classes: usize, rng: &mut R) -> Head {
    let h1 = (d_f / 2).max(1);
    Head {
        kind: HeadKind::Classification,
        layers: Sequential::new(vec![
            Layer::GlobalMaxPool,
            Layer::Flatten,
            crate::nn::dense_layer(d_f, h1, rng),
            Layer::Relu,
            crate::nn::dense_layer(h1, n_classes, rng),
            Layer::Softmax,
        ]),
    }
}

fn check_classes(set: &LabeledImageSet) -> Result<()> {
    if set.n_classes() < 2 {
        return Err(Error::InvalidDataset("need at least two classes".into()));
    }
    Ok(())
}

/// Attempts per supervised stage before a collapsed result is kept.
pub const MAX_ATTEMPTS: usize = 3;

/// Whether training ended no better than a uniform guess: final loss within
/// half a percent of `ln(n_classes)`.
pub fn collapsed(log: &TrainLog, n_classes: usize) -> bool {
    let chance = (n_classes as f64).ln();
    log.epoch_loss.last().is_some_and(|&l| l >= 0.995 * chance)
}

/// Trains the current head and verifies frozen layers were untouched.
fn train_and_verify(model: &mut EncoderModel, set: &LabeledImageSet, cfg: &StageConfig) -> Result<StageReport> {
    let frozen = model.frozen_parameters();
    let mut opt = OptimizerState::new(cfg.learning_rate);
    let log = train_supervised(model, set, &cfg.train, &mut opt)?;
    verify_frozen(model, &frozen)?;
    Ok(StageReport {
        log,
        train_accuracy: accuracy(model, set)?,
        frozen_params_checked: frozen.len(),
        restarts: 0,
    })
}

/// Builds a model with `init` and trains it; a collapsed run (dead ReLU
/// units in the narrow head layers can do this) is redrawn from the same
/// generator, at most [`MAX_ATTEMPTS`] times in all.
fn train_restarting(
    mut init: impl FnMut(&mut ChaCha8Rng) -> Result<EncoderModel>,
    set: &LabeledImageSet,
    cfg: &StageConfig,
    rng: &mut ChaCha8Rng,
    what: &str,
) -> Result<(EncoderModel, StageReport)> {
    let mut attempt = 0;
    loop {
        let mut model = init(rng)?;
        let mut report = train_and_verify(&mut model, set, cfg)?;
        report.restarts = attempt;
        attempt += 1;
        if !collapsed(&report.log, set.n_classes()) || attempt == MAX_ATTEMPTS || cfg.train.epochs == 0 {
            if collapsed(&report.log, set.n_classes()) && cfg.train.epochs > 0 {
                warn!("{what}: training collapsed on all {MAX_ATTEMPTS} attempts");
            }
            return Ok((model, report));
        }
        warn!("{what}: training collapsed to chance level, reinitializing (attempt {})", attempt + 1);
    }
}

fn verify_frozen(model: &EncoderModel, before: &[f64]) -> Result<()> {
    let after = model.frozen_parameters();
    let same = before.len() == after.len() && before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err(Error::InvalidState("frozen parameters changed during training".into()));
    }
    Ok(())
}

/// Supervised training of a fresh backbone on the generic source set. The
/// temporary head is discarded.
pub fn pretrain_generic(
    spec: &BackboneSpec,
    generic: &LabeledImageSet,
    cfg: &StageConfig,
) -> Result<(EncoderModel, StageReport)> {
    check_classes(generic)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x67656e);
    let init = |rng: &mut ChaCha8Rng| {
        let mut m = spec.build(rng)?;
        m.set_head(tl_head(m.feature_dim(), generic.n_classes(), rng))?;
        Ok(m)
    };
    let what = format!("generic {}", spec.variant);
    let (mut model, report) = train_restarting(init, generic, cfg, &mut rng, &what)?;
    model.remove_head();
    model.provenance = vec![Stage::Generic];
    info!(
        "generic {}: train accuracy {:.4}",
        spec.variant, report.train_accuracy
    );
    Ok((model, report))
}

/// Retrains a generic-stage backbone on the intermediate source set with the
/// first conv block frozen and a fresh classification head.
pub fn finetune_intermediate_tl(
    mut model: EncoderModel,
    d_in: &LabeledImageSet,
    cfg: &StageConfig,
) -> Result<(EncoderModel, StageReport)> {
    if model.provenance != [Stage::Generic] {
        return Err(Error::InvalidState(format!(
            "intermediate fine-tuning needs a generic-stage model, got {:?}",
            model.provenance
        )));
    }
    check_classes(d_in)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x696e74);
    model.set_all_trainable(true);
    let first = model.conv_blocks()[0].clone();
    model.freeze_range(first);
    let init = |rng: &mut ChaCha8Rng| {
        let mut m = model.clone();
        m.set_head(tl_head(m.feature_dim(), d_in.n_classes(), rng))?;
        Ok(m)
    };
    let (mut model, report) = train_restarting(init, d_in, cfg, &mut rng, "intermediate TL")?;
    model.provenance.push(Stage::Intermediate);
    Ok((model, report))
}

/// Target fine-tuning for the TL path: every conv block except the last is
/// frozen and the head is replaced.
pub fn finetune_target_tl(
    mut model: EncoderModel,
    train: &LabeledImageSet,
    cfg: &StageConfig,
) -> Result<(EncoderModel, StageReport)> {
    if model.provenance != [Stage::Generic, Stage::Intermediate] {
        return Err(Error::InvalidState(format!(
            "TL target fine-tuning needs an intermediate-stage model, got {:?}",
            model.provenance
        )));
    }
    check_classes(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x746172);
    model.set_all_trainable(true);
    let last = model.last_conv_index();
    model.freeze_range(0..last);
    let init = |rng: &mut ChaCha8Rng| {
        let mut m = model.clone();
        m.set_head(tl_head(m.feature_dim(), train.n_classes(), rng))?;
        Ok(m)
    };
    let (mut model, report) = train_restarting(init, train, cfg, &mut rng, "target TL")?;
    model.provenance.push(Stage::Target);
    Ok((model, report))
}

/// Contrastive pre-training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Images per batch; each contributes two views.
    pub batch_pairs: usize,
    pub augment: AugmentConfig,
    pub latent_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epoch at which the learning rate is halved once.
    pub lr_halve_epoch: Option<usize>,
    /// Freeze every conv block but the last during pre-training.
    pub freeze_backbone: bool,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            batch_pairs: 32,
            augment: AugmentConfig::default(),
            latent_dim: 128,
            epochs: 50,
            learning_rate: 0.001,
            lr_halve_epoch: Some(40),
            freeze_backbone: false,
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(invalid_arg!("temperature must be positive"));
        }
        if self.batch_pairs < 2 {
            return Err(invalid_arg!("batch_pairs must be at least 2"));
        }
        if self.latent_dim == 0 {
            return Err(invalid_arg!("latent dimension must be positive"));
        }
        self.augment.validate()
    }
}

/// Two augmented views per image, interleaved so rows `2k`, `2k+1` pair up.
pub fn paired_views<R: Rng + ?Sized>(
    set: &LabeledImageSet,
    idx: &[usize],
    augment: &AugmentConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let mut views = Vec::with_capacity(2 * idx.len());
    for &i in idx {
        views.push(augment.augment(&set.images[i], rng));
        views.push(augment.augment(&set.images[i], rng));
    }
    Tensor::from_images(&views)
}

/// NT-Xent pre-training of a generic-stage backbone on unlabelled
/// intermediate images. Returns the model with its projection head attached
/// and the per-epoch loss log.
pub fn pretrain_ssl(
    mut model: EncoderModel,
    images: &LabeledImageSet,
    cfg: &ContrastiveConfig,
) -> Result<(EncoderModel, StageReport)> {
    cfg.validate()?;
    if model.provenance != [Stage::Generic] {
        return Err(Error::InvalidState(format!(
            "contrastive pre-training needs a generic-stage model, got {:?}",
            model.provenance
        )));
    }
    if images.len() < 2 {
        return Err(Error::InvalidDataset("need at least two images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x73736c);
    model.set_all_trainable(true);
    if cfg.freeze_backbone {
        let last = model.last_conv_index();
        model.freeze_range(0..last);
    }
    model.set_head(projection_head(model.feature_dim(), cfg.latent_dim, &mut rng))?;
    let frozen = model.frozen_parameters();
    let prefix = model.frozen_prefix_len();
    let n_backbone = model.backbone.len();
    let mut batch = cfg.batch_pairs;
    if batch > images.len() {
        warn!("batch_pairs {batch} exceeds {} images; clamping", images.len());
        batch = images.len();
    }
    let mut opt = OptimizerState::new(cfg.learning_rate);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        if Some(epoch) == cfg.lr_halve_epoch {
            opt.learning_rate *= 0.5;
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in order.chunks(batch).filter(|c| c.len() >= 2) {
            let x = paired_views(images, idx, &cfg.augment, &mut rng)?;
            let pre = model.backbone.infer_range(&x, 0..prefix)?;
            let (map, bcache) = model.backbone.forward_range(&pre, prefix..n_backbone, true, &mut rng)?;
            let head = model.head.as_ref().expect("projection head");
            let (z, hcache) = head.layers.forward(&map, true, &mut rng)?;
            let (loss, grad) = nt_xent_loss(&z.to_matrix(), cfg.temperature)?;
            total += loss * idx.len() as f64;
            count += idx.len();
            let (hgrads, gmap) = head
                .layers
                .backward_range(&hcache, 0..head.layers.len(), Tensor::from_matrix(&grad), true);
            let (bgrads, _) = model.backbone.backward_range(
                &bcache,
                prefix..n_backbone,
                gmap.expect("input gradient requested"),
                false,
            );
            crate::nn::apply_update(&mut model, &mut opt, prefix, &bgrads, &hgrads);
        }
        log.epoch_loss.push(total / count.max(1) as f64);
        log.learning_rate.push(opt.learning_rate);
    }
    verify_frozen(&model, &frozen)?;
    model.provenance.push(Stage::Intermediate);
    Ok((
        model,
        StageReport {
            log,
            train_accuracy: f64::NAN,
            frozen_params_checked: frozen.len(),
            restarts: 0,
        },
    ))
}

/// SSL target fine-tuning: the projection head is replaced by a
/// classification head and only the head is trained.
pub fn finetune_target_ssl(
    mut model: EncoderModel,
    train: &LabeledImageSet,
    cfg: &StageConfig,
) -> Result<(EncoderModel, StageReport)> {
    if model.provenance != [Stage::Generic, Stage::Intermediate]
        || model.head.as_ref().map(|h| h.kind) != Some(HeadKind::Projection)
    {
        return Err(Error::InvalidState(
            "SSL target fine-tuning needs a contrastively pre-trained model with its projection head".into(),
        ));
    }
    check_classes(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x667473);
    model.remove_head();
    model.set_all_trainable(false);
    let init = |rng: &mut ChaCha8Rng| {
        let mut m = model.clone();
        m.set_head(ssl_classification_head(m.feature_dim(), train.n_classes(), rng))?;
        Ok(m)
    };
    let (mut model, report) = train_restarting(init, train, cfg, &mut rng, "target SSL")?;
    model.provenance.push(Stage::Target);
    Ok((model, report))
}

/// Where features are read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Tap {
    /// Pooled backbone output, `D_f` wide.
    #[default]
    Backbone,
    /// Input of the head's final dense layer.
    Penultimate,
}

impl Tap {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(Tap::Backbone),
            "penultimate" => Ok(Tap::Penultimate),
            _ => Err(invalid_arg!("unknown feature tap {s:?}")),
        }
    }
}

/// Inference-mode features for every image of `set`; labels and ids are
/// carried through.
pub fn extract_features(model: &EncoderModel, set: &LabeledImageSet, tap: Tap) -> Result<FeatureMatrix> {
    if model.provenance.is_empty() {
        return Err(Error::InvalidState("feature extraction from an untrained model".into()));
    }
    extract_features_unchecked(model, set, tap)
}

/// [`extract_features`] without the training-state check, for random-init
/// baselines.
pub fn extract_features_unchecked(model: &EncoderModel, set: &LabeledImageSet, tap: Tap) -> Result<FeatureMatrix> {
    if set.is_empty() {
        return Err(Error::InvalidDataset("empty image set".into()));
    }
    let mut rows = Vec::with_capacity(set.len());
    for chunk in set.images.chunks(64) {
        let x = Tensor::from_images(chunk)?;
        let f = match tap {
            Tap::Backbone => model.pooled_features(&x)?,
            Tap::Penultimate => model.penultimate_features(&x)?,
        };
        rows.extend((0..f.n).map(|n| f.sample(n).to_vec()));
    }
    FeatureMatrix::new(Matrix::from_rows(&rows)?, Some(set.labels.clone()), set.ids.clone())
}
