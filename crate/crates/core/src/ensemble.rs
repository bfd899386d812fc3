//! Stacking ensemble over fused base-model features: five classical
//! learners, weighted plurality vote, metrics and leave-one-out ablation.

use std::fmt::Write as _;

use crate::classifiers::{fit, read_classifier, write_classifier, ClassifierKind, ClassifierParams, Predictor, TrainedClassifier};
use crate::codec::{Kind, Persist, Reader, Writer};
use crate::data::LabeledImageSet;
use crate::error::{invalid_arg, Error, Result};
use crate::fusion::{apply_transform, fuse_pipeline, FusionMethod, IcaOptions};
use crate::nn::EncoderModel;
use crate::pretrain::{extract_features, BaseModelRecord, Tap};
use crate::{FeatureMatrix, FusionTransform, Matrix};

/// Per-sample weighted plurality over voters; ties go to the lowest class.
pub fn majority_vote(predictions: &[Vec<usize>], weights: &[f64], n_classes: usize) -> Result<Vec<usize>> {
    if predictions.is_empty() {
        return Err(invalid_arg!("no voters"));
    }
    if weights.len() != predictions.len() {
        return Err(invalid_arg!("{} weights for {} voters", weights.len(), predictions.len()));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(invalid_arg!("vote weights must be positive"));
    }
    let n = predictions[0].len();
    if predictions.iter().any(|p| p.len() != n) {
        return Err(invalid_arg!("voters disagree on the number of samples"));
    }
    let mut out = Vec::with_capacity(n);
    let mut tally = vec![0.0; n_classes];
    for i in 0..n {
        tally.iter_mut().for_each(|t| *t = 0.0);
        for (p, &w) in predictions.iter().zip(weights) {
            let c = p[i];
            if c >= n_classes {
                return Err(invalid_arg!("vote for class {c} with {n_classes} classes"));
            }
            tally[c] += w;
        }
        out.push(crate::nn::argmax(&tally));
    }
    Ok(out)
}

/// `counts[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(invalid_arg!("{} labels but {} predictions", truth.len(), predicted.len()));
        }
        let mut counts = vec![vec![0; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= n_classes || p >= n_classes {
                return Err(invalid_arg!("label out of range for {n_classes} classes"));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.n_classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn tp(&self, c: usize) -> usize {
        self.counts[c][c]
    }

    pub fn fp(&self, c: usize) -> usize {
        (0..self.n_classes()).filter(|&t| t != c).map(|t| self.counts[t][c]).sum()
    }

    pub fn fn_(&self, c: usize) -> usize {
        (0..self.n_classes()).filter(|&p| p != c).map(|p| self.counts[c][p]).sum()
    }

    pub fn tn(&self, c: usize) -> usize {
        self.total() - self.tp(c) - self.fp(c) - self.fn_(c)
    }

    pub fn to_csv(&self) -> String {
        let k = self.n_classes();
        let mut s = String::from("true\\pred");
        (0..k).for_each(|c| write!(s, ",{c}").unwrap());
        s.push('\n');
        for (t, row) in self.counts.iter().enumerate() {
            write!(s, "{t}").unwrap();
            row.iter().for_each(|v| write!(s, ",{v}").unwrap());
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    /// One-vs-rest `(TP + TN) / total`.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Ratio with `0/0 = 0`.
fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl ClassMetrics {
    pub fn from_counts(tp: usize, tn: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            accuracy: ratio(tp + tn, tp + tn + fp + fn_),
            precision,
            recall,
            f1,
            support: tp + fn_,
        }
    }
}

/// Micro accuracy plus macro-averaged precision, recall and F1.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let per_class: Vec<ClassMetrics> = (0..cm.n_classes())
            .map(|c| ClassMetrics::from_counts(cm.tp(c), cm.tn(c), cm.fp(c), cm.fn_(c)))
            .collect();
        let k = per_class.len().max(1) as f64;
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k;
        Self {
            accuracy: ratio(cm.trace(), cm.total()),
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            per_class,
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self> {
        Ok(Self::from_confusion(&ConfusionMatrix::new(truth, predicted, n_classes)?))
    }

    pub fn csv_header() -> &'static str {
        "name,accuracy,recall,precision,f1"
    }

    pub fn csv_row(&self, name: &str) -> String {
        format!(
            "{name},{:.6},{:.6},{:.6},{:.6}",
            self.accuracy, self.macro_recall, self.macro_precision, self.macro_f1
        )
    }

    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class,support,accuracy,recall,precision,f1\n");
        for (c, m) in self.per_class.iter().enumerate() {
            writeln!(
                s,
                "{c},{},{:.6},{:.6},{:.6},{:.6}",
                m.support, m.accuracy, m.recall, m.precision, m.f1
            )
            .unwrap();
        }
        s
    }
}

/// Fusion and classifier settings for one ensemble fit.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub method: FusionMethod,
    pub k: Option<usize>,
    /// Caps the automatic `k` at the components carrying this share of
    /// the standardized variance.
    pub variance_retained: Option<f64>,
    pub ica: IcaOptions,
    pub params: ClassifierParams,
    pub kinds: Vec<ClassifierKind>,
    /// One per classifier; unit by default.
    pub weights: Vec<f64>,
    pub tap: Tap,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            method: FusionMethod::ConcatIca,
            k: None,
            variance_retained: Some(0.95),
            ica: IcaOptions::default(),
            params: ClassifierParams::default(),
            kinds: ClassifierKind::ALL.to_vec(),
            weights: vec![1.0; ClassifierKind::ALL.len()],
            tap: Tap::Backbone,
        }
    }
}

impl EnsembleConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.params.seed = seed;
        self.ica.seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub method: FusionMethod,
    pub transform: FusionTransform,
    pub classifiers: Vec<TrainedClassifier>,
    pub weights: Vec<f64>,
    /// Base-model ids and feature widths, in concatenation order.
    pub base_ids: Vec<String>,
    pub base_dims: Vec<usize>,
    pub n_classes: usize,
}

/// Per-classifier and voted labels for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    pub per_classifier: Vec<Vec<usize>>,
    pub voted: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub report: MetricReport,
    pub per_classifier: Vec<(ClassifierKind, MetricReport)>,
}

impl Evaluation {
    /// Mean accuracy of the individual classifiers.
    pub fn mean_classifier_accuracy(&self) -> f64 {
        let n = self.per_classifier.len().max(1) as f64;
        self.per_classifier.iter().map(|(_, r)| r.accuracy).sum::<f64>() / n
    }
}

/// Fits the fusion transform and all classifiers on per-base-model training
/// features.
pub fn train_ensemble_features(
    parts: &[FeatureMatrix],
    base_ids: &[String],
    cfg: &EnsembleConfig,
) -> Result<EnsembleModel> {
    if parts.is_empty() {
        return Err(invalid_arg!("no base-model features"));
    }
    if base_ids.len() != parts.len() {
        return Err(invalid_arg!("{} ids for {} feature blocks", base_ids.len(), parts.len()));
    }
    if cfg.kinds.is_empty() {
        return Err(invalid_arg!("at least one classifier is required"));
    }
    if cfg.weights.len() != cfg.kinds.len() || cfg.weights.iter().any(|&w| !(w > 0.0)) {
        return Err(invalid_arg!("need one positive weight per classifier"));
    }
    let (fused, transform) = fuse_pipeline(parts, cfg.method, cfg.k, cfg.variance_retained, &cfg.ica)?;
    let x = &fused.features;
    let labels = x.labels()?;
    let n_classes = parts.iter().map(FeatureMatrix::n_classes).max().unwrap_or(0);
    let classifiers = cfg
        .kinds
        .iter()
        .map(|&k| fit(k, &x.x, labels, n_classes, &cfg.params))
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel {
        method: cfg.method,
        transform,
        classifiers,
        weights: cfg.weights.clone(),
        base_ids: base_ids.to_vec(),
        base_dims: parts.iter().map(FeatureMatrix::cols).collect(),
        n_classes,
    })
}

impl EnsembleModel {
    pub fn kinds(&self) -> Vec<ClassifierKind> {
        self.classifiers.iter().map(TrainedClassifier::kind).collect()
    }

    /// Concatenates and transforms per-base-model features.
    pub fn fuse(&self, parts: &[FeatureMatrix]) -> Result<FeatureMatrix> {
        let dims: Vec<usize> = parts.iter().map(FeatureMatrix::cols).collect();
        if dims != self.base_dims {
            return Err(invalid_arg!("feature blocks {dims:?} do not match the trained {:?}", self.base_dims));
        }
        let cat = crate::fusion::concat_features(parts)?;
        apply_transform(&self.transform, &cat.features)
    }

    pub fn predict_fused(&self, x: &Matrix) -> Result<EnsemblePrediction> {
        let per_classifier = self
            .classifiers
            .iter()
            .map(|c| c.predict(x))
            .collect::<Result<Vec<_>>>()?;
        let voted = majority_vote(&per_classifier, &self.weights, self.n_classes)?;
        Ok(EnsemblePrediction { per_classifier, voted })
    }

    pub fn predict_parts(&self, parts: &[FeatureMatrix]) -> Result<EnsemblePrediction> {
        self.predict_fused(&self.fuse(parts)?.x)
    }

    pub fn evaluate_parts(&self, parts: &[FeatureMatrix]) -> Result<Evaluation> {
        let fused = self.fuse(parts)?;
        if fused.rows() == 0 {
            return Err(Error::InvalidDataset("empty test set".into()));
        }
        let truth = fused.labels()?;
        let pred = self.predict_fused(&fused.x)?;
        let confusion = ConfusionMatrix::new(truth, &pred.voted, self.n_classes)?;
        let per_classifier = self
            .classifiers
            .iter()
            .zip(&pred.per_classifier)
            .map(|(c, p)| Ok((c.kind(), MetricReport::from_predictions(truth, p, self.n_classes)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Evaluation {
            report: MetricReport::from_confusion(&confusion),
            confusion,
            per_classifier,
        })
    }
}

/// The ensemble's classifier stage seen as one model over fused features:
/// probabilities are the weight-averaged classifier probabilities, labels
/// are the vote.
impl Predictor for EnsembleModel {
    fn n_features(&self) -> usize {
        self.classifiers[0].n_features
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let total: f64 = self.weights.iter().sum();
        let mut acc = Matrix::zeros(x.rows(), self.n_classes);
        for (c, &w) in self.classifiers.iter().zip(&self.weights) {
            let p = c.predict_proba(x)?;
            for (a, &v) in acc.as_mut_slice().iter_mut().zip(p.as_slice()) {
                *a += w * v / total;
            }
        }
        Ok(acc)
    }

    fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.predict_fused(x)?.voted)
    }
}

fn base_features(models: &[(BaseModelRecord, EncoderModel)], set: &LabeledImageSet, tap: Tap) -> Result<Vec<FeatureMatrix>> {
    models.iter().map(|(_, m)| extract_features(m, set, tap)).collect()
}

/// Extracts features from every base model, fuses them and fits the
/// classifiers.
pub fn train_ensemble(
    models: &[(BaseModelRecord, EncoderModel)],
    train: &LabeledImageSet,
    cfg: &EnsembleConfig,
) -> Result<EnsembleModel> {
    let parts = base_features(models, train, cfg.tap)?;
    let ids: Vec<String> = models.iter().map(|(r, _)| r.id()).collect();
    train_ensemble_features(&parts, &ids, cfg)
}

pub fn evaluate(
    model: &EnsembleModel,
    models: &[(BaseModelRecord, EncoderModel)],
    test: &LabeledImageSet,
    tap: Tap,
) -> Result<Evaluation> {
    let ids: Vec<String> = models.iter().map(|(r, _)| r.id()).collect();
    if ids != model.base_ids {
        return Err(Error::InvalidState(format!(
            "ensemble was trained on {:?}, got {ids:?}",
            model.base_ids
        )));
    }
    model.evaluate_parts(&base_features(models, test, tap)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// `None` for the full ensemble.
    pub excluded: Option<String>,
    pub voted: MetricReport,
    pub mean_classifier_accuracy: f64,
    pub delta_voted: f64,
    pub delta_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub full: AblationRow,
    /// One row per excluded base model.
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("excluded,voted_accuracy,mean_classifier_accuracy,delta_voted,delta_mean,macro_f1\n");
        for r in std::iter::once(&self.full).chain(&self.rows) {
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.excluded.as_deref().unwrap_or("none"),
                r.voted.accuracy,
                r.mean_classifier_accuracy,
                r.delta_voted,
                r.delta_mean,
                r.voted.macro_f1
            )
            .unwrap();
        }
        s
    }
}

/// Leave-one-base-model-out on precomputed features.
pub fn ablate_features(
    train: &[FeatureMatrix],
    test: &[FeatureMatrix],
    base_ids: &[String],
    cfg: &EnsembleConfig,
) -> Result<AblationTable> {
    if train.len() < 2 {
        return Err(invalid_arg!("ablation needs at least two base models"));
    }
    if test.len() != train.len() {
        return Err(invalid_arg!("train and test feature blocks differ in count"));
    }
    let full_eval = train_ensemble_features(train, base_ids, cfg)?.evaluate_parts(test)?;
    let full = AblationRow {
        excluded: None,
        mean_classifier_accuracy: full_eval.mean_classifier_accuracy(),
        voted: full_eval.report,
        delta_voted: 0.0,
        delta_mean: 0.0,
    };
    let mut rows = Vec::with_capacity(train.len());
    for skip in 0..train.len() {
        let keep = |v: &[FeatureMatrix]| -> Vec<FeatureMatrix> {
            v.iter().enumerate().filter(|&(i, _)| i != skip).map(|(_, f)| f.clone()).collect()
        };
        let ids: Vec<String> = base_ids.iter().enumerate().filter(|&(i, _)| i != skip).map(|(_, s)| s.clone()).collect();
        let eval = train_ensemble_features(&keep(train), &ids, cfg)?.evaluate_parts(&keep(test))?;
        let mean = eval.mean_classifier_accuracy();
        rows.push(AblationRow {
            excluded: Some(base_ids[skip].clone()),
            delta_voted: eval.report.accuracy - full.voted.accuracy,
            delta_mean: mean - full.mean_classifier_accuracy,
            voted: eval.report,
            mean_classifier_accuracy: mean,
        });
    }
    Ok(AblationTable { full, rows })
}

pub fn ablate(
    models: &[(BaseModelRecord, EncoderModel)],
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    cfg: &EnsembleConfig,
) -> Result<AblationTable> {
    let ids: Vec<String> = models.iter().map(|(r, _)| r.id()).collect();
    ablate_features(
        &base_features(models, train, cfg.tap)?,
        &base_features(models, test, cfg.tap)?,
        &ids,
        cfg,
    )
}

impl Persist for EnsembleModel {
    const KIND: Kind = Kind::Ensemble;

    fn write_body(&self, w: &mut Writer) {
        w.str(self.method.name());
        self.transform.write_body(w);
        w.usize(self.classifiers.len());
        self.classifiers.iter().for_each(|c| write_classifier(w, c));
        w.f64s(&self.weights);
        w.usize(self.base_ids.len());
        self.base_ids.iter().for_each(|s| w.str(s));
        w.usizes(&self.base_dims);
        w.usize(self.n_classes);
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self> {
        let method = FusionMethod::parse(&r.str()?).map_err(|e| r.err(e.to_string()))?;
        let transform = FusionTransform::read_body(r)?;
        let n = r.usize()?;
        let classifiers = (0..n).map(|_| read_classifier(r)).collect::<Result<Vec<_>>>()?;
        let weights = r.f64s()?;
        let n_ids = r.usize()?;
        let base_ids = (0..n_ids).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let model = Self {
            method,
            transform,
            classifiers,
            weights,
            base_ids,
            base_dims: r.usizes()?,
            n_classes: r.usize()?,
        };
        if model.classifiers.is_empty() || model.weights.len() != model.classifiers.len() {
            return Err(r.err("classifier and weight counts disagree"));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vote_examples() {
        let v = |votes: &[usize], w: &[f64]| {
            let preds: Vec<Vec<usize>> = votes.iter().map(|&c| vec![c]).collect();
            majority_vote(&preds, w, 3).unwrap()[0]
        };
        assert_eq!(v(&[0, 0, 0, 1, 1], &[1.0; 5]), 0);
        assert_eq!(v(&[0, 0, 1, 1, 2], &[1.0; 5]), 0);
        assert_eq!(v(&[1, 0, 0, 0, 0], &[3.0, 1.0, 1.0, 1.0, 1.0]), 0);
        assert!(majority_vote(&[vec![0], vec![0, 1]], &[1.0, 1.0], 2).is_err());
        assert!(majority_vote(&[vec![0]], &[1.0, 1.0], 2).is_err());
    }

    #[test]
    fn binary_metric_example() {
        let m = ClassMetrics::from_counts(50, 30, 10, 10);
        assert!((m.accuracy - 0.8).abs() < 1e-15);
        assert!((m.precision - 50.0 / 60.0).abs() < 1e-15);
        assert!((m.recall - 50.0 / 60.0).abs() < 1e-15);
        assert!((m.f1 - 50.0 / 60.0).abs() < 1e-12);
        assert_eq!(ClassMetrics::from_counts(0, 5, 0, 3).f1, 0.0);
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let cm = ConfusionMatrix::new(&y, &y, 3).unwrap();
        assert_eq!(cm.trace(), 5);
        let r = MetricReport::from_confusion(&cm);
        assert_eq!((r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1), (1.0, 1.0, 1.0, 1.0));
    }
}
