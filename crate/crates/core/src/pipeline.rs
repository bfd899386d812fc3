//! Run configuration, on-disk layout, manifest bookkeeping and the stage
//! commands behind the `etsef` binary.
//!
//! Every stage writes below `<out>/<task>/<stage>/` and records the sha256
//! of each produced file, plus a fingerprint of the configuration it ran
//! with, in `<out>/<task>/manifest.txt`. Rerunning a stage whose
//! fingerprint is unchanged only re-verifies its files. Stages run their
//! missing prerequisites first.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::classifiers::{ClassifierKind, ClassifierParams, Predictor};
use crate::codec;
use crate::data::{
    augment_balance, gray_to_3ch, load_image_dir, make_synthetic_task_with, save_image_dir, stratified_split,
    AugmentConfig, LabeledImageSet, SplitSpec, SynthStyle, SyntheticKind,
};
use crate::ensemble::{
    ablate_features, train_ensemble_features, EnsembleConfig, EnsembleModel, MetricReport,
};
use crate::error::{Error, Result};
use crate::explain::{
    bar_chart_svg, confusion_svg, default_background, embedding_svg, grad_cam, saliency_overlay, shap_exact,
    shap_sampled, tsne_embed, TsneConfig, SHAP_EXACT_MAX_FEATURES,
};
use crate::fusion::{FusionMethod, IcaOptions};
use crate::nn::{accuracy, predict_labels, EncoderModel, Stage, TrainConfig};
use crate::pretrain::{
    extract_features, extract_features_unchecked, finetune_intermediate_tl, finetune_target_ssl, finetune_target_tl,
    pretrain_generic, pretrain_ssl, ssl_classification_head, tl_head, BackboneSpec, BaseModelRecord,
    ContrastiveConfig, Method, StageConfig, StageReport, Tap, Variant,
};
use crate::FeatureMatrix;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Process exit code for an error: 2 config, 4 integrity, 3 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Integrity(_) => 4,
        _ => 3,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A dataset: a synthetic task or a `<root>/<class>/<image>` directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub kind: SyntheticKind,
    pub shifted: bool,
    pub per_class: usize,
    pub noise: f64,
    pub dir: Option<PathBuf>,
}

impl DataSpec {
    fn synthetic(kind: SyntheticKind, shifted: bool, per_class: usize, noise: f64) -> Self {
        Self {
            kind,
            shifted,
            per_class,
            noise,
            dir: None,
        }
    }

    /// Three-channel images at `size x size`.
    pub fn load(&self, size: usize, seed: u64) -> Result<LabeledImageSet> {
        let set = match &self.dir {
            Some(d) => load_image_dir(d, (size, size))?,
            None => {
                let mut style = SynthStyle::for_kind(self.kind);
                if self.shifted {
                    style = style.shifted();
                }
                make_synthetic_task_with(self.kind, self.per_class, (size, size), self.noise, seed, &style)?
            }
        };
        Ok(match set.image_shape() {
            Some((_, _, 1)) => gray_to_3ch(&set),
            _ => set,
        })
    }

    fn entries(&self, prefix: &str) -> Vec<(String, String)> {
        vec![
            (format!("{prefix}.kind"), self.kind.name().to_string()),
            (format!("{prefix}.shifted"), self.shifted.to_string()),
            (format!("{prefix}.per_class"), self.per_class.to_string()),
            (format!("{prefix}.noise"), self.noise.to_string()),
            (
                format!("{prefix}.dir"),
                self.dir.as_ref().map(|d| d.display().to_string()).unwrap_or_default(),
            ),
        ]
    }

    fn set(&mut self, field: &str, v: &str) -> Result<bool> {
        match field {
            "kind" => self.kind = SyntheticKind::parse(v).map_err(|e| config_err(e.to_string()))?,
            "shifted" => self.shifted = parse_val(v)?,
            "per_class" => self.per_class = parse_val(v)?,
            "noise" => self.noise = parse_val(v)?,
            "dir" => self.dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn parse_val<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err(format!("cannot parse value {v:?}")))
}

fn parse_list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
}

impl StageParams {
    fn stage_config(&self, seed: u64) -> StageConfig {
        StageConfig {
            train: TrainConfig {
                epochs: self.epochs,
                batch_size: self.batch,
                seed,
                plateau: true,
            },
            learning_rate: self.learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslParams {
    pub epochs: usize,
    pub batch_pairs: usize,
    pub temperature: f64,
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub lr_halve_epoch: Option<usize>,
    pub blur_kernel: usize,
    pub blur_probability: f64,
    /// Train only the last conv block during contrastive pre-training.
    pub freeze_backbone: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleParams {
    pub fusion: FusionMethod,
    pub k: Option<usize>,
    /// `None` (written `none`) disables the variance cap on automatic `k`.
    pub variance_retained: Option<f64>,
    pub classifiers: Vec<ClassifierKind>,
    pub weights: Vec<f64>,
    pub tap: Tap,
    pub svm_c: f64,
    pub svm_max_iter: usize,
    pub knn_k: usize,
    pub rf_trees: usize,
    pub rf_max_depth: usize,
    pub gbt_rounds: usize,
    pub gbt_eta: f64,
    pub gbt_max_depth: usize,
    pub ica_max_iter: usize,
    pub ica_tol: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainParams {
    pub instances: Vec<usize>,
    pub perplexity: f64,
    pub tsne_iters: usize,
    pub shap_samples: usize,
    pub background: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodParams {
    /// Task directory whose fine-tuned models are reused; this run's task
    /// when unset.
    pub source: Option<PathBuf>,
    pub data: DataSpec,
    /// Empty means `seed, seed + 1, seed + 2`.
    pub seeds: Vec<u64>,
}

/// Everything a run needs. Parsed from flat `key = value` text with
/// `[section]` headers; unknown sections or keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: String,
    pub seed: u64,
    pub image_size: usize,
    pub train_fraction: f64,
    /// Not part of any fingerprint.
    pub out: PathBuf,
    pub generic: DataSpec,
    pub intermediate: DataSpec,
    pub target: DataSpec,
    pub variants: Vec<Variant>,
    pub pretrain: StageParams,
    pub ssl: SslParams,
    pub finetune: StageParams,
    pub ensemble: EnsembleParams,
    pub explain: ExplainParams,
    pub ood: OodParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: "shapes".into(),
            seed: 42,
            image_size: 32,
            train_fraction: 0.8,
            out: PathBuf::from("etsef-out"),
            generic: DataSpec::synthetic(SyntheticKind::Generic, false, 60, 0.05),
            intermediate: DataSpec::synthetic(SyntheticKind::Shapes3, false, 60, 0.1),
            target: DataSpec::synthetic(SyntheticKind::Shapes3, true, 170, 0.1),
            variants: Variant::ALL.to_vec(),
            pretrain: StageParams {
                epochs: 50,
                batch: 16,
                learning_rate: 0.001,
            },
            ssl: SslParams {
                epochs: 50,
                batch_pairs: 32,
                temperature: 0.5,
                latent_dim: 128,
                learning_rate: 0.001,
                lr_halve_epoch: Some(40),
                blur_kernel: 9,
                blur_probability: 0.5,
                freeze_backbone: false,
            },
            finetune: StageParams {
                epochs: 50,
                batch: 16,
                learning_rate: 0.001,
            },
            ensemble: EnsembleParams {
                fusion: FusionMethod::ConcatIca,
                k: None,
                variance_retained: Some(0.95),
                classifiers: ClassifierKind::ALL.to_vec(),
                weights: vec![1.0; 5],
                tap: Tap::Backbone,
                svm_c: 1.0,
                svm_max_iter: 10_000,
                knn_k: 3,
                rf_trees: 100,
                rf_max_depth: 10,
                gbt_rounds: 50,
                gbt_eta: 0.9,
                gbt_max_depth: 10,
                ica_max_iter: 500,
                ica_tol: 1e-6,
            },
            explain: ExplainParams {
                instances: vec![0],
                perplexity: 30.0,
                tsne_iters: 1000,
                shap_samples: 2048,
                background: 10,
            },
            ood: OodParams {
                source: None,
                data: DataSpec::synthetic(SyntheticKind::Shapes4, false, 40, 0.1),
                seeds: Vec::new(),
            },
        }
    }
}

const SECTIONS: [&str; 8] = ["run", "data", "pretrain", "ssl", "finetune", "ensemble", "explain", "ood"];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| config_err(format!("line {}: {msg}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            let sec = section.as_deref().ok_or_else(|| at("key outside of a section".into()))?;
            cfg.set(sec, k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => at(m),
                other => at(other.to_string()),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, sec: &str, k: &str, v: &str) -> Result<()> {
        let unknown = || config_err(format!("unknown key {k:?} in [{sec}]"));
        match (sec, k) {
            ("run", "task") => {
                if v.is_empty() || v.contains(['/', '\\']) || v.starts_with('.') {
                    return Err(config_err(format!("invalid task name {v:?}")));
                }
                self.task = v.to_string()
            }
            ("run", "seed") => self.seed = parse_val(v)?,
            ("run", "image_size") => self.image_size = parse_val(v)?,
            ("run", "train_fraction") => self.train_fraction = parse_val(v)?,
            ("run", "out") => self.out = PathBuf::from(v),
            ("data", _) => {
                let (which, field) = k.split_once('.').ok_or_else(unknown)?;
                let spec = match which {
                    "generic" => &mut self.generic,
                    "intermediate" => &mut self.intermediate,
                    "target" => &mut self.target,
                    _ => return Err(unknown()),
                };
                if !spec.set(field, v)? {
                    return Err(unknown());
                }
            }
            ("pretrain", "variants") => {
                self.variants = parse_list(v, |s| Variant::parse(s).map_err(|e| config_err(e.to_string())))?
            }
            ("pretrain", "epochs") => self.pretrain.epochs = parse_val(v)?,
            ("pretrain", "batch") => self.pretrain.batch = parse_val(v)?,
            ("pretrain", "learning_rate") => self.pretrain.learning_rate = parse_val(v)?,
            ("ssl", "epochs") => self.ssl.epochs = parse_val(v)?,
            ("ssl", "batch_pairs") => self.ssl.batch_pairs = parse_val(v)?,
            ("ssl", "temperature") => self.ssl.temperature = parse_val(v)?,
            ("ssl", "latent_dim") => self.ssl.latent_dim = parse_val(v)?,
            ("ssl", "learning_rate") => self.ssl.learning_rate = parse_val(v)?,
            ("ssl", "lr_halve_epoch") => {
                self.ssl.lr_halve_epoch = if v == "none" { None } else { Some(parse_val(v)?) }
            }
            ("ssl", "blur_kernel") => self.ssl.blur_kernel = parse_val(v)?,
            ("ssl", "blur_probability") => self.ssl.blur_probability = parse_val(v)?,
            ("ssl", "freeze_backbone") => self.ssl.freeze_backbone = parse_val(v)?,
            ("finetune", "epochs") => self.finetune.epochs = parse_val(v)?,
            ("finetune", "batch") => self.finetune.batch = parse_val(v)?,
            ("finetune", "learning_rate") => self.finetune.learning_rate = parse_val(v)?,
            ("ensemble", "fusion") => {
                self.ensemble.fusion = FusionMethod::parse(v).map_err(|e| config_err(e.to_string()))?
            }
            ("ensemble", "k") => self.ensemble.k = if v == "auto" { None } else { Some(parse_val(v)?) },
            ("ensemble", "variance_retained") => {
                self.ensemble.variance_retained = if v == "none" { None } else { Some(parse_val(v)?) }
            }
            ("ensemble", "classifiers") => {
                self.ensemble.classifiers =
                    parse_list(v, |s| ClassifierKind::parse(s).map_err(|e| config_err(e.to_string())))?
            }
            ("ensemble", "weights") => self.ensemble.weights = parse_list(v, parse_val)?,
            ("ensemble", "tap") => self.ensemble.tap = Tap::parse(v).map_err(|e| config_err(e.to_string()))?,
            ("ensemble", "svm_c") => self.ensemble.svm_c = parse_val(v)?,
            ("ensemble", "svm_max_iter") => self.ensemble.svm_max_iter = parse_val(v)?,
            ("ensemble", "knn_k") => self.ensemble.knn_k = parse_val(v)?,
            ("ensemble", "rf_trees") => self.ensemble.rf_trees = parse_val(v)?,
            ("ensemble", "rf_max_depth") => self.ensemble.rf_max_depth = parse_val(v)?,
            ("ensemble", "gbt_rounds") => self.ensemble.gbt_rounds = parse_val(v)?,
            ("ensemble", "gbt_eta") => self.ensemble.gbt_eta = parse_val(v)?,
            ("ensemble", "gbt_max_depth") => self.ensemble.gbt_max_depth = parse_val(v)?,
            ("ensemble", "ica_max_iter") => self.ensemble.ica_max_iter = parse_val(v)?,
            ("ensemble", "ica_tol") => self.ensemble.ica_tol = parse_val(v)?,
            ("explain", "instances") => self.explain.instances = parse_list(v, parse_val)?,
            ("explain", "perplexity") => self.explain.perplexity = parse_val(v)?,
            ("explain", "tsne_iters") => self.explain.tsne_iters = parse_val(v)?,
            ("explain", "shap_samples") => self.explain.shap_samples = parse_val(v)?,
            ("explain", "background") => self.explain.background = parse_val(v)?,
            ("ood", "source") => self.ood.source = (!v.is_empty()).then(|| PathBuf::from(v)),
            ("ood", "seeds") => self.ood.seeds = parse_list(v, parse_val)?,
            ("ood", _) => {
                let field = k.strip_prefix("data.").ok_or_else(unknown)?;
                if !self.ood.data.set(field, v)? {
                    return Err(unknown());
                }
            }
            _ => return Err(unknown()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(config_err(m.to_string()));
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.variants.is_empty() {
            return bad("at least one variant is required");
        }
        let mut v = self.variants.clone();
        v.sort();
        v.dedup();
        if v.len() != self.variants.len() {
            return bad("variants must be distinct");
        }
        if self.pretrain.batch == 0 || self.finetune.batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.ensemble.classifiers.is_empty() || self.ensemble.weights.len() != self.ensemble.classifiers.len() {
            return bad("ensemble needs one weight per classifier");
        }
        if self.ensemble.weights.iter().any(|&w| !(w > 0.0)) {
            return bad("vote weights must be positive");
        }
        if let Some(r) = self.ensemble.variance_retained {
            if !(r > 0.0 && r <= 1.0) {
                return bad("variance_retained must lie in (0, 1]");
            }
        }
        if self.explain.background == 0 {
            return bad("explain background must be at least 1 row");
        }
        self.contrastive(0).validate().map_err(|e| config_err(e.to_string()))?;
        Ok(())
    }

    /// `(section, key, value)` for every setting, in a fixed order. `out` is
    /// omitted.
    pub fn entries(&self) -> Vec<(&'static str, String, String)> {
        let mut e: Vec<(&'static str, String, String)> = Vec::new();
        let mut push = |s: &'static str, k: &str, v: String| e.push((s, k.to_string(), v));
        push("run", "task", self.task.clone());
        push("run", "seed", self.seed.to_string());
        push("run", "image_size", self.image_size.to_string());
        push("run", "train_fraction", self.train_fraction.to_string());
        for (name, spec) in [("generic", &self.generic), ("intermediate", &self.intermediate), ("target", &self.target)] {
            for (k, v) in spec.entries(name) {
                push("data", &k, v);
            }
        }
        push("pretrain", "variants", join(&self.variants));
        push("pretrain", "epochs", self.pretrain.epochs.to_string());
        push("pretrain", "batch", self.pretrain.batch.to_string());
        push("pretrain", "learning_rate", self.pretrain.learning_rate.to_string());
        let s = &self.ssl;
        push("ssl", "epochs", s.epochs.to_string());
        push("ssl", "batch_pairs", s.batch_pairs.to_string());
        push("ssl", "temperature", s.temperature.to_string());
        push("ssl", "latent_dim", s.latent_dim.to_string());
        push("ssl", "learning_rate", s.learning_rate.to_string());
        push("ssl", "lr_halve_epoch", s.lr_halve_epoch.map_or("none".into(), |e| e.to_string()));
        push("ssl", "blur_kernel", s.blur_kernel.to_string());
        push("ssl", "blur_probability", s.blur_probability.to_string());
        push("ssl", "freeze_backbone", s.freeze_backbone.to_string());
        push("finetune", "epochs", self.finetune.epochs.to_string());
        push("finetune", "batch", self.finetune.batch.to_string());
        push("finetune", "learning_rate", self.finetune.learning_rate.to_string());
        let en = &self.ensemble;
        push("ensemble", "fusion", en.fusion.name().to_string());
        push("ensemble", "k", en.k.map_or("auto".into(), |k| k.to_string()));
        push(
            "ensemble",
            "variance_retained",
            en.variance_retained.map_or("none".into(), |r| r.to_string()),
        );
        push("ensemble", "classifiers", en.classifiers.iter().map(|c| c.name()).collect::<Vec<_>>().join(","));
        push("ensemble", "weights", join(&en.weights));
        push("ensemble", "tap", match en.tap {
            Tap::Backbone => "backbone".into(),
            Tap::Penultimate => "penultimate".into(),
        });
        push("ensemble", "svm_c", en.svm_c.to_string());
        push("ensemble", "svm_max_iter", en.svm_max_iter.to_string());
        push("ensemble", "knn_k", en.knn_k.to_string());
        push("ensemble", "rf_trees", en.rf_trees.to_string());
        push("ensemble", "rf_max_depth", en.rf_max_depth.to_string());
        push("ensemble", "gbt_rounds", en.gbt_rounds.to_string());
        push("ensemble", "gbt_eta", en.gbt_eta.to_string());
        push("ensemble", "gbt_max_depth", en.gbt_max_depth.to_string());
        push("ensemble", "ica_max_iter", en.ica_max_iter.to_string());
        push("ensemble", "ica_tol", en.ica_tol.to_string());
        let ex = &self.explain;
        push("explain", "instances", join(&ex.instances));
        push("explain", "perplexity", ex.perplexity.to_string());
        push("explain", "tsne_iters", ex.tsne_iters.to_string());
        push("explain", "shap_samples", ex.shap_samples.to_string());
        push("explain", "background", ex.background.to_string());
        push(
            "ood",
            "source",
            self.ood.source.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        push("ood", "seeds", join(&self.ood.seeds));
        for (k, v) in self.ood.data.entries("data") {
            push("ood", &k, v);
        }
        e
    }

    /// Canonical text of the given sections (all when empty).
    pub fn to_text(&self, sections: &[&str]) -> String {
        let mut out = String::new();
        let mut current = "";
        for (s, k, v) in self.entries() {
            if !sections.is_empty() && !sections.contains(&s) {
                continue;
            }
            if s != current {
                writeln!(out, "[{s}]").unwrap();
                current = s;
            }
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn task_dir(&self) -> PathBuf {
        self.out.join(&self.task)
    }

    fn contrastive(&self, seed: u64) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.ssl.temperature,
            batch_pairs: self.ssl.batch_pairs,
            augment: AugmentConfig {
                blur_kernel: self.ssl.blur_kernel,
                blur_probability: self.ssl.blur_probability,
                seed,
                ..AugmentConfig::default()
            },
            latent_dim: self.ssl.latent_dim,
            epochs: self.ssl.epochs,
            learning_rate: self.ssl.learning_rate,
            lr_halve_epoch: self.ssl.lr_halve_epoch,
            freeze_backbone: self.ssl.freeze_backbone,
            seed,
        }
    }

    /// Ensemble settings with every seed derived from `seed`.
    pub fn ensemble_config(&self, seed: u64) -> EnsembleConfig {
        let en = &self.ensemble;
        EnsembleConfig {
            method: en.fusion,
            k: en.k,
            variance_retained: en.variance_retained,
            ica: IcaOptions {
                max_iter: en.ica_max_iter,
                tol: en.ica_tol,
                seed,
                ..IcaOptions::default()
            },
            params: ClassifierParams {
                svm_c: en.svm_c,
                svm_max_iter: en.svm_max_iter,
                knn_k: en.knn_k,
                rf_trees: en.rf_trees,
                rf_max_depth: en.rf_max_depth,
                gbt_rounds: en.gbt_rounds,
                gbt_eta: en.gbt_eta,
                gbt_max_depth: en.gbt_max_depth,
                seed,
                ..ClassifierParams::default()
            },
            kinds: en.classifiers.clone(),
            weights: en.weights.clone(),
            tap: en.tap,
        }
    }

    /// Ensemble settings as used by the ensemble, ablate and explain stages.
    pub fn stage_ensemble_config(&self) -> EnsembleConfig {
        self.ensemble_config(derive_seed(self.seed, "ensemble"))
    }

    /// The six base models in ensemble order: TL per variant, then SSL.
    pub fn base_models(&self) -> Vec<(Variant, Method)> {
        [Method::Tl, Method::Ssl]
            .into_iter()
            .flat_map(|m| self.variants.iter().map(move |&v| (v, m)))
            .collect()
    }
}

/// Datasets of a run, all three-channel at the configured size.
pub struct Datasets {
    pub generic: LabeledImageSet,
    pub intermediate: LabeledImageSet,
    pub target_train: LabeledImageSet,
    pub target_test: LabeledImageSet,
}

/// Stream-separated seed for a named purpose.
fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let h = Sha256::digest(format!("{seed}/{purpose}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Splits 80:20 (stratified) and balances the training part by augmentation.
fn split_balanced(set: &LabeledImageSet, fraction: f64, seed: u64) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let (train, test) = stratified_split(
        set,
        &SplitSpec {
            train_fraction: fraction,
            seed,
            stratified: true,
        },
    )?;
    let train = augment_balance(
        &train,
        &AugmentConfig {
            seed: seed ^ 0xba1,
            ..AugmentConfig::default()
        },
    )?;
    Ok((train, test))
}

pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let size = cfg.image_size;
    let target = cfg.target.load(size, derive_seed(cfg.seed, "data.target"))?;
    let (target_train, target_test) = split_balanced(&target, cfg.train_fraction, derive_seed(cfg.seed, "split.target"))?;
    Ok(Datasets {
        generic: cfg.generic.load(size, derive_seed(cfg.seed, "data.generic"))?,
        intermediate: cfg.intermediate.load(size, derive_seed(cfg.seed, "data.intermediate"))?,
        target_train,
        target_test,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageEntry {
    pub fingerprint: String,
    /// Relative path to sha256.
    pub files: BTreeMap<String, String>,
}

/// The per-task record of completed stages.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: String,
    pub stages: BTreeMap<String, StageEntry>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("tool_version={}\n", self.tool_version);
        for (name, st) in &self.stages {
            writeln!(s, "stage.{name}.fingerprint={}", st.fingerprint).unwrap();
            for (f, h) in &st.files {
                writeln!(s, "stage.{name}.file.{f}={h}").unwrap();
            }
        }
        s.push_str("[config]\n");
        s.push_str(&self.config);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (head, config) = text.split_once("[config]\n").unwrap_or((text, ""));
        let mut m = RunManifest {
            config: config.to_string(),
            ..Default::default()
        };
        let bad = |l: &str| Error::Integrity(format!("malformed manifest line {l:?}"));
        for line in head.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            if k == "tool_version" {
                m.tool_version = v.to_string();
                continue;
            }
            let rest = k.strip_prefix("stage.").ok_or_else(|| bad(line))?;
            if let Some(name) = rest.strip_suffix(".fingerprint") {
                m.stages.entry(name.to_string()).or_default().fingerprint = v.to_string();
            } else if let Some((name, file)) = rest.split_once(".file.") {
                m.stages
                    .entry(name.to_string())
                    .or_default()
                    .files
                    .insert(file.to_string(), v.to_string());
            } else {
                return Err(bad(line));
            }
        }
        Ok(m)
    }
}

const MANIFEST: &str = "manifest.txt";
const LOCK: &str = ".lock";

/// Stages invalidated when the keyed stage reruns.
fn dependents(stage: &str) -> &'static [&'static str] {
    match stage {
        "pretrain" => &["finetune", "ensemble", "ablate", "explain.gradcam", "explain.shap", "explain.tsne", "oodtest"],
        "finetune" => &["ensemble", "ablate", "explain.gradcam", "explain.shap", "explain.tsne", "oodtest"],
        "ensemble" => &["ablate", "explain.shap", "explain.tsne"],
        _ => &[],
    }
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// An open task directory holding the advisory lock.
pub struct Workspace {
    pub root: PathBuf,
    pub cfg: RunConfig,
    manifest: RunManifest,
    _lock: LockGuard,
}

impl Workspace {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.task_dir();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let lock = root.join(LOCK);
        fs::OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::InvalidState(format!(
                    "{} exists: another run is using this directory (delete the file if it is stale)",
                    lock.display()
                ))
            } else {
                Error::io(&lock, e)
            }
        })?;
        let guard = LockGuard(lock);
        let mpath = root.join(MANIFEST);
        let mut manifest = if mpath.exists() {
            RunManifest::parse(&fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?)?
        } else {
            RunManifest::default()
        };
        manifest.tool_version = TOOL_VERSION.to_string();
        manifest.config = cfg.to_text(&[]);
        Ok(Self {
            root,
            cfg: cfg.clone(),
            manifest,
            _lock: guard,
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn save_manifest(&self) -> Result<()> {
        let p = self.root.join(MANIFEST);
        fs::write(&p, self.manifest.to_text()).map_err(|e| Error::io(&p, e))
    }

    /// Whether `stage` completed with this fingerprint; its files are
    /// re-hashed and any mismatch is an integrity error.
    pub fn is_done(&self, stage: &str, fingerprint: &str) -> Result<bool> {
        let Some(entry) = self.manifest.stages.get(stage) else {
            return Ok(false);
        };
        if entry.fingerprint != fingerprint {
            return Ok(false);
        }
        self.verify(stage)?;
        Ok(true)
    }

    pub fn verify(&self, stage: &str) -> Result<()> {
        let entry = self
            .manifest
            .stages
            .get(stage)
            .ok_or_else(|| Error::InvalidState(format!("stage {stage} has not run")))?;
        for (rel, want) in &entry.files {
            let p = self.root.join(rel);
            let bytes = fs::read(&p).map_err(|_| Error::Integrity(format!("{}: file missing", p.display())))?;
            if sha256_hex(&bytes) != *want {
                return Err(Error::Integrity(format!("{}: hash mismatch", p.display())));
            }
        }
        Ok(())
    }

    pub fn fingerprint_of(&self, stage: &str) -> Option<&str> {
        self.manifest.stages.get(stage).map(|s| s.fingerprint.as_str())
    }

    fn stage_dir(&self, stage: &str) -> Result<PathBuf> {
        let d = self.root.join(stage.split('.').next().unwrap_or(stage));
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    /// Writes a file below the task root and returns its relative path.
    fn write(&self, rel: &str, bytes: &[u8]) -> Result<String> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(rel.to_string())
    }

    fn begin(&mut self, stage: &str) -> Result<()> {
        self.manifest.stages.remove(stage);
        for d in dependents(stage) {
            self.manifest.stages.remove(*d);
        }
        self.save_manifest()
    }

    fn commit(&mut self, stage: &str, fingerprint: String, files: Vec<String>) -> Result<()> {
        let mut entry = StageEntry {
            fingerprint,
            files: BTreeMap::new(),
        };
        for rel in files {
            let p = self.root.join(&rel);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            entry.files.insert(rel, sha256_hex(&bytes));
        }
        self.manifest.stages.insert(stage.to_string(), entry);
        self.save_manifest()
    }

    fn load_model(&self, rel: &str) -> Result<EncoderModel> {
        codec::load(&self.root.join(rel))
    }
}

fn fingerprint(parts: &[&str]) -> String {
    sha256_hex(parts.join("\n--\n").as_bytes())
}

/// Outcome of a stage command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

fn pretrain_fp(cfg: &RunConfig) -> String {
    fingerprint(&[TOOL_VERSION, &cfg.to_text(&["run", "data", "pretrain", "ssl"])])
}

fn finetune_fp(cfg: &RunConfig) -> String {
    fingerprint(&[&pretrain_fp(cfg), &cfg.to_text(&["finetune"])])
}

fn ensemble_fp(cfg: &RunConfig) -> String {
    fingerprint(&[&finetune_fp(cfg), &cfg.to_text(&["ensemble"])])
}

fn seeded(name: &str, seed: u64, ext: &str) -> String {
    format!("{name}_seed{seed}.{ext}")
}

fn write_log(out: &mut String, stage: &str, id: &str, report: &StageReport) {
    for (e, (loss, lr)) in report.log.epoch_loss.iter().zip(&report.log.learning_rate).enumerate() {
        writeln!(out, "{stage},{id},{},{loss:.9},{lr}", e + 1).unwrap();
    }
}

/// Generic pre-training per variant, then intermediate TL fine-tuning and
/// contrastive pre-training from the same generic backbone.
pub fn cmd_pretrain(ws: &mut Workspace) -> Result<StageStatus> {
    let fp = pretrain_fp(&ws.cfg);
    if ws.is_done("pretrain", &fp)? {
        info!("pretrain: up to date");
        return Ok(StageStatus::Skipped);
    }
    ws.begin("pretrain")?;
    let cfg = ws.cfg.clone();
    let data = load_datasets(&cfg)?;
    let input = (3, cfg.image_size, cfg.image_size);
    let mut files = Vec::new();
    let mut log = String::from("stage,id,epoch,loss,learning_rate\n");
    let mut summary = String::from("stage,id,train_accuracy,final_loss,frozen_params_checked,restarts\n");
    let summarize = |out: &mut String, stage: &str, id: &str, r: &StageReport| {
        writeln!(
            out,
            "{stage},{id},{:.6},{:.9},{},{}",
            r.train_accuracy,
            r.log.epoch_loss.last().copied().unwrap_or(f64::NAN),
            r.frozen_params_checked,
            r.restarts
        )
        .unwrap();
    };
    for &variant in &cfg.variants {
        let spec = BackboneSpec::new(variant, input);
        let seed = derive_seed(cfg.seed, &format!("pretrain.{variant}"));
        info!("pretrain: generic stage for {variant}");
        let (generic, rep) = pretrain_generic(&spec, &data.generic, &cfg.pretrain.stage_config(seed))?;
        write_log(&mut log, "generic", variant.name(), &rep);
        summarize(&mut summary, "generic", variant.name(), &rep);
        let generic_hash = sha256_hex(&codec::to_bytes(&generic));

        info!("pretrain: intermediate TL for {variant}");
        let (tl, rep) = finetune_intermediate_tl(
            generic.clone(),
            &data.intermediate,
            &cfg.pretrain.stage_config(seed ^ 1),
        )?;
        let mut rec = BaseModelRecord::new(spec, Method::Tl, PathBuf::new());
        write_log(&mut log, "intermediate", &rec.id(), &rep);
        summarize(&mut summary, "intermediate", &rec.id(), &rep);
        files.extend(save_stage_model(ws, &mut rec, &tl, "pretrain", generic_hash.clone())?);

        info!("pretrain: contrastive stage for {variant}");
        let (ssl, rep) = pretrain_ssl(generic, &data.intermediate, &cfg.contrastive(seed ^ 2))?;
        let mut rec = BaseModelRecord::new(spec, Method::Ssl, PathBuf::new());
        write_log(&mut log, "contrastive", &rec.id(), &rep);
        summarize(&mut summary, "contrastive", &rec.id(), &rep);
        files.extend(save_stage_model(ws, &mut rec, &ssl, "pretrain", generic_hash)?);
    }
    files.push(ws.write(&format!("pretrain/{}", seeded("train_log", cfg.seed, "csv")), log.as_bytes())?);
    files.push(ws.write(&format!("pretrain/{}", seeded("stages", cfg.seed, "csv")), summary.as_bytes())?);
    ws.commit("pretrain", fp, files)?;
    Ok(StageStatus::Ran)
}

/// Saves weights and the record (with a fresh stage hash) for a model whose
/// provenance just grew. `generic_hash` fills the generic stage of a new
/// record.
fn save_stage_model(
    ws: &Workspace,
    rec: &mut BaseModelRecord,
    model: &EncoderModel,
    stage_dir: &str,
    generic_hash: String,
) -> Result<Vec<String>> {
    let bytes = codec::to_bytes(model);
    let weights = ws.write(&format!("{stage_dir}/{}.weights", rec.id()), &bytes)?;
    if rec.provenance.is_empty() {
        rec.record_stage(Stage::Generic, generic_hash)?;
    }
    let stage = *model.provenance.last().expect("trained model");
    rec.record_stage(stage, sha256_hex(&bytes))?;
    rec.weights_path = PathBuf::from(&weights);
    let record = ws.write(&format!("{stage_dir}/{}.record", rec.id()), rec.to_text().as_bytes())?;
    Ok(vec![weights, record])
}

fn load_record(ws: &Workspace, rel: &str) -> Result<BaseModelRecord> {
    let p = ws.root.join(rel);
    BaseModelRecord::from_text(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
}

fn base_ids(cfg: &RunConfig) -> Vec<String> {
    cfg.base_models()
        .iter()
        .map(|&(v, m)| format!("{v}-{m}"))
        .collect()
}

/// Target fine-tuning of all six base models; logs per-model test accuracy.
pub fn cmd_finetune(ws: &mut Workspace) -> Result<StageStatus> {
    cmd_pretrain(ws)?;
    let fp = finetune_fp(&ws.cfg);
    if ws.is_done("finetune", &fp)? {
        info!("finetune: up to date");
        return Ok(StageStatus::Skipped);
    }
    ws.begin("finetune")?;
    let cfg = ws.cfg.clone();
    let data = load_datasets(&cfg)?;
    let mut files = Vec::new();
    let mut log = String::from("stage,id,epoch,loss,learning_rate\n");
    let mut table = String::from("id,method,variant,train_accuracy,test_accuracy,frozen_params_checked,restarts\n");
    for id in base_ids(&cfg) {
        let mut rec = load_record(ws, &format!("pretrain/{id}.record"))?;
        let model = ws.load_model(&format!("pretrain/{id}.weights"))?;
        let seed = derive_seed(cfg.seed, &format!("finetune.{id}"));
        let sc = cfg.finetune.stage_config(seed);
        info!("finetune: {id}");
        let (model, rep) = match rec.method() {
            Method::Tl => finetune_target_tl(model, &data.target_train, &sc)?,
            Method::Ssl => finetune_target_ssl(model, &data.target_train, &sc)?,
        };
        let test_acc = accuracy(&model, &data.target_test)?;
        write_log(&mut log, "target", &id, &rep);
        writeln!(
            table,
            "{id},{},{},{:.6},{:.6},{},{}",
            rec.method(),
            rec.spec.variant,
            rep.train_accuracy,
            test_acc,
            rep.frozen_params_checked,
            rep.restarts
        )
        .unwrap();
        files.extend(save_stage_model(ws, &mut rec, &model, "finetune", String::new())?);
    }
    files.push(ws.write(&format!("finetune/{}", seeded("train_log", cfg.seed, "csv")), log.as_bytes())?);
    files.push(ws.write(&format!("finetune/{}", seeded("finetune_log", cfg.seed, "csv")), table.as_bytes())?);
    ws.commit("finetune", fp, files)?;
    Ok(StageStatus::Ran)
}

/// Fine-tuned base models in ensemble order, with their records.
pub fn load_finetuned(ws: &Workspace) -> Result<Vec<(BaseModelRecord, EncoderModel)>> {
    ws.verify("finetune")?;
    base_ids(&ws.cfg)
        .iter()
        .map(|id| {
            let rec = load_record(ws, &format!("finetune/{id}.record"))?;
            let model = ws.load_model(&format!("finetune/{id}.weights"))?;
            Ok((rec, model))
        })
        .collect()
}

pub fn features(
    models: &[(BaseModelRecord, EncoderModel)],
    set: &LabeledImageSet,
    tap: Tap,
) -> Result<Vec<FeatureMatrix>> {
    models.iter().map(|(_, m)| extract_features(m, set, tap)).collect()
}

fn report_table(rows: &[(String, &MetricReport)]) -> String {
    let mut s = format!("{}\n", MetricReport::csv_header());
    for (name, r) in rows {
        writeln!(s, "{}", r.csv_row(name)).unwrap();
    }
    s
}

fn subset<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// Extract, fuse, fit the classifiers, evaluate and emit reports.
pub fn cmd_ensemble(ws: &mut Workspace) -> Result<StageStatus> {
    cmd_finetune(ws)?;
    let fp = ensemble_fp(&ws.cfg);
    if ws.is_done("ensemble", &fp)? {
        info!("ensemble: up to date");
        return Ok(StageStatus::Skipped);
    }
    ws.begin("ensemble")?;
    let cfg = ws.cfg.clone();
    let seed = cfg.seed;
    let data = load_datasets(&cfg)?;
    let models = load_finetuned(ws)?;
    let ids: Vec<String> = models.iter().map(|(r, _)| r.id()).collect();
    let ecfg = cfg.stage_ensemble_config();
    let train = features(&models, &data.target_train, ecfg.tap)?;
    let test = features(&models, &data.target_test, ecfg.tap)?;
    info!("ensemble: fitting {} classifiers on fused features", ecfg.kinds.len());
    let model = train_ensemble_features(&train, &ids, &ecfg)?;
    let eval = model.evaluate_parts(&test)?;

    let mut files = Vec::new();
    let bytes = codec::to_bytes(&model);
    files.push(ws.write("ensemble/ensemble.model", &bytes)?);

    let mut rows: Vec<(String, &MetricReport)> = vec![("voted".into(), &eval.report)];
    rows.extend(eval.per_classifier.iter().map(|(k, r)| (k.name().to_string(), r)));
    files.push(ws.write(&format!("ensemble/{}", seeded("report", seed, "csv")), report_table(&rows).as_bytes())?);
    files.push(ws.write(
        &format!("ensemble/{}", seeded("per_class", seed, "csv")),
        eval.report.per_class_csv().as_bytes(),
    )?);
    files.push(ws.write(
        &format!("ensemble/{}", seeded("confusion", seed, "csv")),
        eval.confusion.to_csv().as_bytes(),
    )?);
    files.push(ws.write(
        &format!("ensemble/{}", seeded("confusion", seed, "svg")),
        confusion_svg(&eval.confusion).as_bytes(),
    )?);

    // stage comparison: each base model's own head, the five classifiers on
    // plain concatenation, on the transformed features, and the vote
    let mut stages = String::from("stage,name,accuracy\n");
    let mut base_accs = Vec::new();
    for (rec, m) in &models {
        let acc = accuracy(m, &data.target_test)?;
        base_accs.push(acc);
        writeln!(stages, "base,{},{acc:.6}", rec.id()).unwrap();
    }
    let concat_cfg = EnsembleConfig {
        method: FusionMethod::ConcatOnly,
        ..ecfg.clone()
    };
    let fused = train_ensemble_features(&train, &ids, &concat_cfg)?.evaluate_parts(&test)?;
    writeln!(stages, "fused,mean_classifier,{:.6}", fused.mean_classifier_accuracy()).unwrap();
    writeln!(stages, "selected,mean_classifier,{:.6}", eval.mean_classifier_accuracy()).unwrap();
    writeln!(stages, "voted,ensemble,{:.6}", eval.report.accuracy).unwrap();
    let mean_base = base_accs.iter().sum::<f64>() / base_accs.len() as f64;
    writeln!(stages, "base,mean,{mean_base:.6}").unwrap();
    files.push(ws.write(&format!("ensemble/{}", seeded("stages", seed, "csv")), stages.as_bytes())?);

    // single-method ensembles
    let mut methods = String::from("ensemble,voted_accuracy,mean_classifier_accuracy\n");
    writeln!(
        methods,
        "TL+SSL,{:.6},{:.6}",
        eval.report.accuracy,
        eval.mean_classifier_accuracy()
    )
    .unwrap();
    for method in [Method::Tl, Method::Ssl] {
        let idx: Vec<usize> = (0..models.len()).filter(|&i| models[i].0.method() == method).collect();
        if idx.is_empty() {
            continue;
        }
        let e = train_ensemble_features(&subset(&train, &idx), &subset(&ids, &idx), &ecfg)?
            .evaluate_parts(&subset(&test, &idx))?;
        writeln!(methods, "{method},{:.6},{:.6}", e.report.accuracy, e.mean_classifier_accuracy()).unwrap();
    }
    files.push(ws.write(&format!("ensemble/{}", seeded("methods", seed, "csv")), methods.as_bytes())?);

    let mut summary = format!(
        "task {} seed {seed}\nfusion {} -> {} features\nvoted accuracy {:.4}  macro recall {:.4}  macro precision {:.4}  macro F1 {:.4}\n",
        cfg.task,
        model.method.name(),
        model.transform.output_dim().unwrap_or(0),
        eval.report.accuracy,
        eval.report.macro_recall,
        eval.report.macro_precision,
        eval.report.macro_f1
    );
    for (k, r) in &eval.per_classifier {
        writeln!(summary, "  {:<4} accuracy {:.4}", k.name(), r.accuracy).unwrap();
    }
    writeln!(summary, "mean base-model accuracy {mean_base:.4}").unwrap();
    files.push(ws.write(&format!("ensemble/{}", seeded("summary", seed, "txt")), summary.as_bytes())?);
    info!("ensemble: voted accuracy {:.4}", eval.report.accuracy);
    ws.commit("ensemble", fp, files)?;
    Ok(StageStatus::Ran)
}

pub fn load_ensemble(ws: &Workspace) -> Result<EnsembleModel> {
    ws.verify("ensemble")?;
    codec::load(&ws.root.join("ensemble/ensemble.model"))
}

/// Leave-one-base-model-out table.
pub fn cmd_ablate(ws: &mut Workspace) -> Result<StageStatus> {
    cmd_ensemble(ws)?;
    let fp = fingerprint(&[&ensemble_fp(&ws.cfg), "ablate"]);
    if ws.is_done("ablate", &fp)? {
        info!("ablate: up to date");
        return Ok(StageStatus::Skipped);
    }
    ws.begin("ablate")?;
    let cfg = ws.cfg.clone();
    let data = load_datasets(&cfg)?;
    let models = load_finetuned(ws)?;
    let ids: Vec<String> = models.iter().map(|(r, _)| r.id()).collect();
    let ecfg = cfg.stage_ensemble_config();
    let table = ablate_features(
        &features(&models, &data.target_train, ecfg.tap)?,
        &features(&models, &data.target_test, ecfg.tap)?,
        &ids,
        &ecfg,
    )?;
    let labels: Vec<String> = table.rows.iter().map(|r| format!("-{}", r.excluded.as_deref().unwrap_or(""))).collect();
    let deltas: Vec<f64> = table.rows.iter().map(|r| r.delta_voted).collect();
    let files = vec![
        ws.write(&format!("ablate/{}", seeded("ablation", cfg.seed, "csv")), table.to_csv().as_bytes())?,
        ws.write(
            &format!("ablate/{}", seeded("ablation", cfg.seed, "svg")),
            bar_chart_svg("voted accuracy change when a base model is excluded", &labels, &deltas).as_bytes(),
        )?,
    ];
    ws.commit("ablate", fp, files)?;
    Ok(StageStatus::Ran)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Explainer {
    GradCam,
    Shap,
    Tsne,
}

impl Explainer {
    pub const ALL: [Explainer; 3] = [Explainer::GradCam, Explainer::Shap, Explainer::Tsne];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gradcam" => Ok(Explainer::GradCam),
            "shap" => Ok(Explainer::Shap),
            "tsne" => Ok(Explainer::Tsne),
            _ => Err(config_err(format!("unknown explainer {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Explainer::GradCam => "gradcam",
            Explainer::Shap => "shap",
            Explainer::Tsne => "tsne",
        }
    }
}

/// Grad-CAM per base model, SHAP on the ensemble's classifier stage, or
/// t-SNE of the fused test features.
pub fn cmd_explain(ws: &mut Workspace, what: Explainer) -> Result<StageStatus> {
    match what {
        Explainer::GradCam => cmd_finetune(ws)?,
        _ => cmd_ensemble(ws)?,
    };
    let cfg = ws.cfg.clone();
    let stage = format!("explain.{}", what.name());
    let upstream = match what {
        Explainer::GradCam => finetune_fp(&cfg),
        _ => ensemble_fp(&cfg),
    };
    let fp = fingerprint(&[&upstream, &cfg.to_text(&["explain"]), what.name()]);
    if ws.is_done(&stage, &fp)? {
        info!("{stage}: up to date");
        return Ok(StageStatus::Skipped);
    }
    let data = load_datasets(&cfg)?;
    let n_test = data.target_test.len();
    if let Some(&bad) = cfg.explain.instances.iter().find(|&&i| i >= n_test) {
        return Err(Error::InvalidArgument(format!("instance {bad} out of range for {n_test} test images")));
    }
    ws.begin(&stage)?;
    let models = load_finetuned(ws)?;
    let mut files = Vec::new();
    match what {
        Explainer::GradCam => {
            for &i in &cfg.explain.instances {
                let img = &data.target_test.images[i];
                for (rec, m) in &models {
                    let one = data.target_test.subset(&[i]);
                    let class = predict_labels(m, &one)?[0];
                    let map = grad_cam(m, img, class, &rec.id())?;
                    let ppm = crate::data::encode_pnm(&saliency_overlay(&map, img)?);
                    files.push(ws.write(&format!("explain/gradcam_{}_test{i}.ppm", rec.id()), &ppm)?);
                }
            }
        }
        Explainer::Shap => {
            let ens = load_ensemble(ws)?;
            let tap = cfg.ensemble.tap;
            let train = ens.fuse(&features(&models, &data.target_train, tap)?)?;
            let test = ens.fuse(&features(&models, &data.target_test, tap)?)?;
            let background = default_background(&train.x, cfg.explain.background);
            for &i in &cfg.explain.instances {
                let x = test.x.row(i);
                let e = if x.len() <= SHAP_EXACT_MAX_FEATURES {
                    shap_exact(&ens, x, &background)?
                } else {
                    shap_sampled(&ens, x, &background, cfg.explain.shap_samples, derive_seed(cfg.seed, "shap"))?
                };
                files.push(ws.write(&format!("explain/shap_test{i}.csv"), e.to_csv().as_bytes())?);
                let summary = format!(
                    "instance={i}\nclass={}\npredicted={}\nbase_value={:.9}\noutput={:.9}\nmode={}\n",
                    e.class.unwrap_or(0),
                    ens.predict(&crate::Matrix::from_rows(&[x.to_vec()])?)?[0],
                    e.base_value,
                    e.output,
                    if e.std_err.is_some() { "sampled" } else { "exact" }
                );
                files.push(ws.write(&format!("explain/shap_test{i}.txt"), summary.as_bytes())?);
            }
        }
        Explainer::Tsne => {
            let ens = load_ensemble(ws)?;
            let test = ens.fuse(&features(&models, &data.target_test, cfg.ensemble.tap)?)?;
            let tc = TsneConfig {
                perplexity: cfg.explain.perplexity,
                iters: cfg.explain.tsne_iters,
                seed: derive_seed(cfg.seed, "tsne"),
                ..TsneConfig::default()
            };
            let emb = tsne_embed(&test.x, test.labels.clone(), &tc)?;
            let mut csv = String::from("id,label,x,y\n");
            for (r, id) in test.ids.iter().enumerate() {
                let l = test.labels.as_ref().map_or(0, |l| l[r]);
                writeln!(csv, "{id},{l},{:.9},{:.9}", emb.coords[(r, 0)], emb.coords[(r, 1)]).unwrap();
            }
            writeln!(csv, "# kl={:.9} perplexity={}", emb.kl, emb.perplexity).unwrap();
            files.push(ws.write(&format!("explain/{}", seeded("tsne", cfg.seed, "csv")), csv.as_bytes())?);
            files.push(ws.write(
                &format!("explain/{}", seeded("tsne", cfg.seed, "svg")),
                embedding_svg(&emb, &data.target_test.class_names).as_bytes(),
            )?);
        }
    }
    ws.commit(&stage, fp, files)?;
    Ok(StageStatus::Ran)
}

/// Per-seed OOD results: `(seed, pretrained report, random-init report)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OodOutcome {
    pub rows: Vec<(u64, MetricReport, MetricReport)>,
}

impl OodOutcome {
    pub fn mean_gap(&self) -> f64 {
        let n = self.rows.len().max(1) as f64;
        self.rows.iter().map(|(_, p, r)| p.accuracy - r.accuracy).sum::<f64>() / n
    }
}

/// Resizes a set to a model's input if needed.
fn fit_input(set: &LabeledImageSet, shape: (usize, usize, usize)) -> LabeledImageSet {
    match set.image_shape() {
        Some((h, w, _)) if (h, w) != (shape.1, shape.2) => {
            warn!("resizing OOD images from {h}x{w} to {}x{}", shape.1, shape.2);
            set.resized(shape.1, shape.2)
        }
        _ => set.clone(),
    }
}

/// Frozen fine-tuned extractors (from `ood.source` or this task) against
/// randomly initialized extractors of the same architectures, each feeding an
/// ensemble trained on the new dataset only.
pub fn run_ood(
    models: &[(BaseModelRecord, EncoderModel)],
    cfg: &RunConfig,
    seeds: &[u64],
) -> Result<OodOutcome> {
    let mut rows = Vec::new();
    for &s in seeds {
        let set = cfg.ood.data.load(cfg.image_size, derive_seed(s, "data.ood"))?;
        let (train, test) = split_balanced(&set, cfg.train_fraction, derive_seed(s, "split.ood"))?;
        let ecfg = cfg.ensemble_config(derive_seed(s, "ood.ensemble"));
        let ids: Vec<String> = models.iter().map(|(r, _)| r.id()).collect();
        let mut pre_train = Vec::new();
        let mut pre_test = Vec::new();
        let mut rnd_train = Vec::new();
        let mut rnd_test = Vec::new();
        for (k, (rec, m)) in models.iter().enumerate() {
            let (tr, te) = (fit_input(&train, m.input_shape), fit_input(&test, m.input_shape));
            pre_train.push(extract_features(m, &tr, Tap::Backbone)?);
            pre_test.push(extract_features(m, &te, Tap::Backbone)?);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, &format!("ood.random.{k}")));
            let mut r = rec.spec.build(&mut rng)?;
            let head = match rec.method() {
                Method::Tl => tl_head(r.feature_dim(), set.n_classes(), &mut rng),
                Method::Ssl => ssl_classification_head(r.feature_dim(), set.n_classes(), &mut rng),
            };
            r.set_head(head)?;
            rnd_train.push(extract_features_unchecked(&r, &tr, Tap::Backbone)?);
            rnd_test.push(extract_features_unchecked(&r, &te, Tap::Backbone)?);
        }
        let pre = train_ensemble_features(&pre_train, &ids, &ecfg)?.evaluate_parts(&pre_test)?;
        let rnd = train_ensemble_features(&rnd_train, &ids, &ecfg)?.evaluate_parts(&rnd_test)?;
        info!(
            "oodtest seed {s}: pretrained {:.4} random {:.4}",
            pre.report.accuracy, rnd.report.accuracy
        );
        rows.push((s, pre.report, rnd.report));
    }
    Ok(OodOutcome { rows })
}

fn ood_seeds(cfg: &RunConfig) -> Vec<u64> {
    if cfg.ood.seeds.is_empty() {
        (0..3).map(|i| cfg.seed + i).collect()
    } else {
        cfg.ood.seeds.clone()
    }
}

/// Loads fine-tuned models from another task directory, verifying its
/// manifest hashes.
pub fn load_foreign(task_dir: &Path, ids: &[String]) -> Result<(String, Vec<(BaseModelRecord, EncoderModel)>)> {
    let mpath = task_dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = RunManifest::parse(&text)?;
    let entry = manifest
        .stages
        .get("finetune")
        .ok_or_else(|| Error::InvalidState(format!("{}: no fine-tuned models", task_dir.display())))?;
    for (rel, want) in &entry.files {
        let p = task_dir.join(rel);
        let bytes = fs::read(&p).map_err(|_| Error::Integrity(format!("{}: file missing", p.display())))?;
        if sha256_hex(&bytes) != *want {
            return Err(Error::Integrity(format!("{}: hash mismatch", p.display())));
        }
    }
    let models = ids
        .iter()
        .filter(|id| entry.files.contains_key(&format!("finetune/{id}.weights")))
        .map(|id| {
            let rp = task_dir.join(format!("finetune/{id}.record"));
            let rec = BaseModelRecord::from_text(&fs::read_to_string(&rp).map_err(|e| Error::io(&rp, e))?)?;
            let model = codec::load(&task_dir.join(format!("finetune/{id}.weights")))?;
            Ok((rec, model))
        })
        .collect::<Result<Vec<_>>>()?;
    if models.is_empty() {
        return Err(Error::InvalidState(format!("{}: no usable base models", task_dir.display())));
    }
    Ok((entry.fingerprint.clone(), models))
}

pub fn cmd_oodtest(ws: &mut Workspace) -> Result<StageStatus> {
    let cfg = ws.cfg.clone();
    let all_ids = {
        let mut ids = Vec::new();
        for m in [Method::Tl, Method::Ssl] {
            for v in Variant::ALL {
                ids.push(format!("{v}-{m}"));
            }
        }
        ids
    };
    let (source_fp, models) = match &cfg.ood.source {
        Some(dir) => load_foreign(dir, &all_ids)?,
        None => {
            cmd_finetune(ws)?;
            (finetune_fp(&cfg), load_finetuned(ws)?)
        }
    };
    let fp = fingerprint(&[&source_fp, &cfg.to_text(&["run", "ensemble", "ood"])]);
    if ws.is_done("oodtest", &fp)? {
        info!("oodtest: up to date");
        return Ok(StageStatus::Skipped);
    }
    ws.begin("oodtest")?;
    let seeds = ood_seeds(&cfg);
    let out = run_ood(&models, &cfg, &seeds)?;
    let mut csv = format!("seed,extractor,{}\n", &MetricReport::csv_header()[5..]);
    for (s, p, r) in &out.rows {
        writeln!(csv, "{}", p.csv_row(&format!("{s},pretrained"))).unwrap();
        writeln!(csv, "{}", r.csv_row(&format!("{s},random"))).unwrap();
    }
    let n = out.rows.len() as f64;
    let mean = |f: fn(&(u64, MetricReport, MetricReport)) -> f64| out.rows.iter().map(f).sum::<f64>() / n;
    writeln!(csv, "mean,pretrained,{:.6},,,", mean(|r| r.1.accuracy)).unwrap();
    writeln!(csv, "mean,random,{:.6},,,", mean(|r| r.2.accuracy)).unwrap();
    let files = vec![ws.write(&format!("oodtest/{}", seeded("ood", cfg.seed, "csv")), csv.as_bytes())?];
    ws.commit("oodtest", fp, files)?;
    Ok(StageStatus::Ran)
}

/// Writes the run's datasets as image directories.
pub fn cmd_synth(ws: &mut Workspace) -> Result<StageStatus> {
    let cfg = ws.cfg.clone();
    let fp = fingerprint(&[TOOL_VERSION, &cfg.to_text(&["run", "data", "ood"])]);
    if ws.is_done("synth", &fp)? {
        info!("synth: up to date");
        return Ok(StageStatus::Skipped);
    }
    ws.begin("synth")?;
    let data = load_datasets(&cfg)?;
    let ood = cfg.ood.data.load(cfg.image_size, derive_seed(cfg.seed, "data.ood"))?;
    let dir = ws.stage_dir("synth")?;
    let mut files = Vec::new();
    for (name, set) in [
        ("generic", &data.generic),
        ("intermediate", &data.intermediate),
        ("target_train", &data.target_train),
        ("target_test", &data.target_test),
        ("ood", &ood),
    ] {
        let root = dir.join(name);
        save_image_dir(set, &root)?;
        for ((&label, id), img) in set.labels.iter().zip(&set.ids).zip(&set.images) {
            let ext = if img.channels == 1 { "pgm" } else { "ppm" };
            files.push(format!("synth/{name}/{}/{id:06}.{ext}", set.class_names[label]));
        }
    }
    ws.commit("synth", fp, files)?;
    Ok(StageStatus::Ran)
}

/// Stage commands of the binary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Finetune,
    Ensemble,
    Ablate,
    Explain(Explainer),
    Oodtest,
    Synth,
}

/// Opens the workspace for `cfg` and runs `cmd`.
pub fn run(cfg: &RunConfig, cmd: Command) -> Result<StageStatus> {
    let mut ws = Workspace::open(cfg)?;
    match cmd {
        Command::Pretrain => cmd_pretrain(&mut ws),
        Command::Finetune => cmd_finetune(&mut ws),
        Command::Ensemble => cmd_ensemble(&mut ws),
        Command::Ablate => cmd_ablate(&mut ws),
        Command::Explain(what) => cmd_explain(&mut ws, what),
        Command::Oodtest => cmd_oodtest(&mut ws),
        Command::Synth => cmd_synth(&mut ws),
    }
}
