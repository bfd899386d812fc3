use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::ParamGrad;
use super::loss::cross_entropy_loss;
use super::model::{EncoderModel, HeadKind};
use super::optim::OptimizerState;
use super::Tensor;
use crate::data::LabeledImageSet;
use crate::error::{invalid_arg, Error, Result};
use crate::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Reduce-on-plateau schedule driven by the epoch loss.
    pub plateau: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            seed: 0,
            plateau: true,
        }
    }
}

/// Per-epoch mean loss and the learning rate in force during the epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
}

/// Applies one optimizer step from gradients of backbone layers
/// `prefix..` and all head layers.
pub(crate) fn apply_update(
    model: &mut EncoderModel,
    opt: &mut OptimizerState,
    prefix: usize,
    backbone_grads: &[Option<ParamGrad>],
    head_grads: &[Option<ParamGrad>],
) {
    let mut params: Vec<&mut [f64]> = Vec::new();
    let mut grads: Vec<&[f64]> = Vec::new();
    let mut flags = Vec::new();
    for (i, layer) in model.backbone.layers.iter_mut().enumerate() {
        let trainable = model.trainable[i];
        if let Some((w, b)) = layer.params_mut() {
            let g = if i >= prefix { backbone_grads[i - prefix].as_ref() } else { None };
            let on = trainable && g.is_some();
            params.push(w);
            params.push(b);
            match g {
                Some(g) if on => {
                    grads.push(&g.weight);
                    grads.push(&g.bias);
                }
                _ => {
                    grads.push(&[]);
                    grads.push(&[]);
                }
            }
            flags.push(on);
            flags.push(on);
        }
    }
    if let Some(head) = model.head.as_mut() {
        for (i, layer) in head.layers.layers.iter_mut().enumerate() {
            if let Some((w, b)) = layer.params_mut() {
                let g = head_grads.get(i).and_then(Option::as_ref);
                params.push(w);
                params.push(b);
                match g {
                    Some(g) => {
                        grads.push(&g.weight);
                        grads.push(&g.bias);
                    }
                    None => {
                        grads.push(&[]);
                        grads.push(&[]);
                    }
                }
                flags.push(g.is_some());
                flags.push(g.is_some());
            }
        }
    }
    opt.adam_step(&mut params, &grads, &flags);
}

fn one_hot_matrix(labels: &[usize], n_classes: usize) -> Matrix {
    Matrix::from_fn(labels.len(), n_classes, |r, c| if labels[r] == c { 1.0 } else { 0.0 })
}

/// Mini-batch cross-entropy training of a model with a classification head.
///
/// Shuffling and dropout draw from a generator seeded by `cfg.seed`. Leading
/// frozen backbone layers are evaluated once up front.
pub fn train_supervised(
    model: &mut EncoderModel,
    set: &LabeledImageSet,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
) -> Result<TrainLog> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| Error::InvalidState("supervised training needs a classification head".into()))?;
    if head.kind != HeadKind::Classification {
        return Err(Error::InvalidState("supervised training needs a classification head".into()));
    }
    let n_out = model.head_output_dim().expect("head present");
    if n_out != set.n_classes() {
        return Err(invalid_arg!(
            "head has {n_out} outputs but the dataset has {} classes",
            set.n_classes()
        ));
    }
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    if set.is_empty() {
        return Err(Error::InvalidDataset("empty training set".into()));
    }
    let mut batch = cfg.batch_size.max(1);
    if batch > set.len() {
        warn!("batch size {batch} exceeds dataset size {}; clamping", set.len());
        batch = set.len();
    }
    let x = Tensor::from_images(&set.images)?;
    let prefix = model.frozen_prefix_len();
    let pre = model.backbone.infer_range(&x, 0..prefix)?;
    let targets = one_hot_matrix(&set.labels, set.n_classes());
    let n_backbone = model.backbone.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(batch) {
            let xb = pre.select(idx);
            let (map, bcache) = model.backbone.forward_range(&xb, prefix..n_backbone, true, &mut rng)?;
            let head = model.head.as_ref().expect("head present");
            let n_head = head.layers.len() - 1; // final Softmax folded into the loss
            let (logits, hcache) = head.layers.forward_range(&map, 0..n_head, true, &mut rng)?;
            let (loss, grad) = cross_entropy_loss(&logits.to_matrix(), &targets.select_rows(idx))?;
            total += loss * idx.len() as f64;
            let (hgrads, gmap) = head.layers.backward_range(&hcache, 0..n_head, Tensor::from_matrix(&grad), true);
            let needs_backbone = model.trainable[prefix..].iter().any(|&t| t);
            let bgrads = if needs_backbone {
                model
                    .backbone
                    .backward_range(&bcache, prefix..n_backbone, gmap.expect("input grad requested"), false)
                    .0
            } else {
                vec![None; n_backbone - prefix]
            };
            apply_update(model, opt, prefix, &bgrads, &hgrads);
        }
        let epoch_loss = total / set.len() as f64;
        log.epoch_loss.push(epoch_loss);
        log.learning_rate.push(opt.learning_rate);
        if cfg.plateau {
            opt.plateau_step(epoch_loss);
        }
    }
    Ok(log)
}

/// Class probabilities for every image (inference mode).
pub fn predict_proba(model: &EncoderModel, set: &LabeledImageSet) -> Result<Matrix> {
    match model.head.as_ref().map(|h| h.kind) {
        Some(HeadKind::Classification) => {}
        _ => return Err(Error::InvalidState("model has no classification head".into())),
    }
    let mut rows = Vec::with_capacity(set.len());
    for chunk in set.images.chunks(64) {
        let out = model.infer(&Tensor::from_images(chunk)?)?;
        for n in 0..out.n {
            rows.push(out.sample(n).to_vec());
        }
    }
    Matrix::from_rows(&rows)
}

pub fn predict_labels(model: &EncoderModel, set: &LabeledImageSet) -> Result<Vec<usize>> {
    let p = predict_proba(model, set)?;
    Ok(p.iter_rows().map(argmax).collect())
}

/// Fraction of correctly classified images.
pub fn accuracy(model: &EncoderModel, set: &LabeledImageSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidDataset("empty evaluation set".into()));
    }
    let pred = predict_labels(model, set)?;
    let correct = pred.iter().zip(&set.labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / set.len() as f64)
}

/// Index of the maximum, lowest index on ties.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

