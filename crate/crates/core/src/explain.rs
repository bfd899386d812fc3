//! Grad-CAM saliency, Shapley attributions, exact t-SNE and the renderers
//! for their outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::classifiers::Predictor;
use crate::data::{encode_pnm, Image};
use crate::ensemble::ConfusionMatrix;
use crate::error::{invalid_arg, Error, Result};
use crate::nn::{argmax, EncoderModel, HeadKind, Layer, Tensor};
use crate::Matrix;

/// `height x width` map in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub model_id: String,
    pub target_class: usize,
}

impl SaliencyMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// `(y, x)` of the first maximum.
    pub fn peak(&self) -> (usize, usize) {
        let i = argmax(&self.values);
        (i / self.width, i % self.width)
    }
}

/// Grad-CAM on the activation of the final convolution (after its ReLU when
/// one follows). The class score is the input of the head's softmax.
pub fn grad_cam(model: &EncoderModel, image: &Image, target_class: usize, model_id: &str) -> Result<SaliencyMap> {
    let layers = &model.backbone.layers;
    let last_conv = layers
        .iter()
        .rposition(|l| matches!(l, Layer::Conv2d(_)))
        .ok_or_else(|| Error::UnsupportedModel("no convolution layer".into()))?;
    let head = match &model.head {
        Some(h) if h.kind == HeadKind::Classification => h,
        _ => return Err(Error::UnsupportedModel("Grad-CAM needs a classification head".into())),
    };
    let n_classes = model.head_output_dim().unwrap_or(0);
    if target_class >= n_classes {
        return Err(invalid_arg!("target class {target_class} out of range for {n_classes} classes"));
    }
    let tap = if matches!(layers.get(last_conv + 1), Some(Layer::Relu)) {
        last_conv + 1
    } else {
        last_conv
    };
    let x = Tensor::from_images(std::iter::once(image))?;
    if (x.c, x.h, x.w) != model.input_shape {
        return Err(invalid_arg!("image shape does not match the model input"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let act = model.backbone.infer_range(&x, 0..tap + 1)?;
    let rest = tap + 1..layers.len();
    let (map, bcache) = model.backbone.forward_range(&act, rest.clone(), false, &mut rng)?;
    let score_layers = 0..head.layers.len() - 1;
    let (scores, hcache) = head.layers.forward_range(&map, score_layers.clone(), false, &mut rng)?;
    let mut g = Tensor::zeros(1, scores.c, 1, 1);
    g.data[target_class] = 1.0;
    let (_, g) = head.layers.backward_range(&hcache, score_layers, g, true);
    let g = g.expect("input gradient requested");
    let (_, g) = model.backbone.backward_range(&bcache, rest, g, true);
    let g = g.expect("input gradient requested");

    let (c, h, w) = (act.c, act.h, act.w);
    let plane = h * w;
    let mut cam = Image::new(h, w, 1);
    for ch in 0..c {
        let grads = &g.data[ch * plane..(ch + 1) * plane];
        let weight = grads.iter().sum::<f64>() / plane as f64;
        if weight == 0.0 {
            continue;
        }
        for (o, &a) in cam.data.iter_mut().zip(&act.data[ch * plane..(ch + 1) * plane]) {
            *o += weight * a;
        }
    }
    cam.data.iter_mut().for_each(|v| *v = v.max(0.0));
    let up = cam.resize(image.height, image.width);
    let max = up.data.iter().cloned().fold(0.0, f64::max);
    let values = if max > 0.0 {
        up.data.iter().map(|&v| (v / max).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; up.data.len()]
    };
    Ok(SaliencyMap {
        height: image.height,
        width: image.width,
        values,
        model_id: model_id.to_string(),
        target_class,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapExplanation {
    pub values: Vec<f64>,
    pub base_value: f64,
    /// Model output at the explained instance.
    pub output: f64,
    /// Explained class for classifier explanations.
    pub class: Option<usize>,
    /// Standard error of each value (sampled mode only).
    pub std_err: Option<Vec<f64>>,
}

impl ShapExplanation {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,phi,std_err\n");
        for (j, v) in self.values.iter().enumerate() {
            let se = self.std_err.as_ref().map_or(String::new(), |e| format!("{:.9}", e[j]));
            writeln!(s, "{j},{v:.9},{se}").unwrap();
        }
        s
    }
}

/// Largest feature count accepted by [`shap_exact`].
pub const SHAP_EXACT_MAX_FEATURES: usize = 15;

fn masked_row(instance: &[f64], fill: &[f64], present: impl Fn(usize) -> bool) -> Vec<f64> {
    (0..instance.len()).map(|j| if present(j) { instance[j] } else { fill[j] }).collect()
}

/// Exact Shapley values of the scalar function `f` (evaluated on batches of
/// rows) at `instance`, absent features replaced by `fill`.
pub fn shap_exact_fn<F>(f: F, instance: &[f64], fill: &[f64]) -> Result<ShapExplanation>
where
    F: Fn(&Matrix) -> Result<Vec<f64>>,
{
    let d = instance.len();
    if d == 0 || fill.len() != d {
        return Err(invalid_arg!("instance and background must have the same nonzero width"));
    }
    if d > SHAP_EXACT_MAX_FEATURES {
        return Err(invalid_arg!(
            "exact SHAP enumerates 2^{d} coalitions; use sampled SHAP above {SHAP_EXACT_MAX_FEATURES} features"
        ));
    }
    let n = 1usize << d;
    let rows: Vec<Vec<f64>> = (0..n).map(|m| masked_row(instance, fill, |j| m >> j & 1 == 1)).collect();
    let v = f(&Matrix::from_rows(&rows)?)?;
    if v.len() != n {
        return Err(invalid_arg!("value function returned {} outputs for {n} rows", v.len()));
    }
    // weight(|S|) = |S|! (d - |S| - 1)! / d!
    let mut fact = vec![1.0f64; d + 1];
    for i in 1..=d {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..d).map(|s| fact[s] * fact[d - s - 1] / fact[d]).collect();
    let mut phi = vec![0.0; d];
    for m in 0..n {
        let size = m.count_ones() as usize;
        for (j, p) in phi.iter_mut().enumerate() {
            if m >> j & 1 == 0 {
                *p += weight[size] * (v[m | 1 << j] - v[m]);
            }
        }
    }
    Ok(ShapExplanation {
        values: phi,
        base_value: v[0],
        output: v[n - 1],
        class: None,
        std_err: None,
    })
}

/// Permutation-sampling Shapley estimate. The residual against
/// `f(instance) - f(fill)` is spread over features in proportion to `|phi|`,
/// so local accuracy holds exactly.
pub fn shap_sampled_fn<F>(f: F, instance: &[f64], fill: &[f64], n_samples: usize, seed: u64) -> Result<ShapExplanation>
where
    F: Fn(&Matrix) -> Result<Vec<f64>>,
{
    let d = instance.len();
    if d == 0 || fill.len() != d {
        return Err(invalid_arg!("instance and background must have the same nonzero width"));
    }
    if n_samples == 0 {
        return Err(invalid_arg!("n_samples must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut perm: Vec<usize> = (0..d).collect();
    let ends = f(&Matrix::from_rows(&[fill.to_vec(), instance.to_vec()])?)?;
    let (base, output) = (ends[0], ends[1]);
    // evaluate permutations in batches to amortize model overhead
    const BATCH: usize = 64;
    let mut done = 0;
    while done < n_samples {
        let take = BATCH.min(n_samples - done);
        let mut perms = Vec::with_capacity(take);
        let mut rows = Vec::with_capacity(take * (d + 1));
        for _ in 0..take {
            perm.shuffle(&mut rng);
            let mut cur = fill.to_vec();
            rows.push(cur.clone());
            for &j in &perm {
                cur[j] = instance[j];
                rows.push(cur.clone());
            }
            perms.push(perm.clone());
        }
        let v = f(&Matrix::from_rows(&rows)?)?;
        for (p, chunk) in perms.iter().zip(v.chunks(d + 1)) {
            for (step, &j) in p.iter().enumerate() {
                let delta = chunk[step + 1] - chunk[step];
                sum[j] += delta;
                sum_sq[j] += delta * delta;
            }
        }
        done += take;
    }
    let n = n_samples as f64;
    let mut phi: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_err = sum_sq
        .iter()
        .zip(&phi)
        .map(|(&sq, &m)| ((sq / n - m * m).max(0.0) / n).sqrt())
        .collect();
    let residual = (output - base) - phi.iter().sum::<f64>();
    let mass: f64 = phi.iter().map(|p| p.abs()).sum();
    if mass > 0.0 {
        let share: Vec<f64> = phi.iter().map(|p| p.abs() / mass).collect();
        phi.iter_mut().zip(share).for_each(|(p, s)| *p += residual * s);
    } else {
        phi.iter_mut().for_each(|p| *p += residual / d as f64);
    }
    Ok(ShapExplanation {
        values: phi,
        base_value: base,
        output,
        class: None,
        std_err: Some(std_err),
    })
}

fn class_value_fn<'a, P: Predictor + ?Sized>(model: &'a P, class: usize) -> impl Fn(&Matrix) -> Result<Vec<f64>> + 'a {
    move |x: &Matrix| Ok(model.predict_proba(x)?.iter_rows().map(|r| r[class]).collect())
}

fn predicted_class<P: Predictor + ?Sized>(model: &P, instance: &[f64]) -> Result<usize> {
    if instance.len() != model.n_features() {
        return Err(invalid_arg!("instance has {} features, model expects {}", instance.len(), model.n_features()));
    }
    Ok(argmax(model.predict_proba(&Matrix::from_rows(&[instance.to_vec()])?)?.row(0)))
}

fn background_mean(background: &Matrix, d: usize) -> Result<Vec<f64>> {
    if background.rows() == 0 || background.cols() != d {
        return Err(invalid_arg!("background must be a non-empty {d}-column matrix"));
    }
    Ok(background.column_means())
}

/// Exact SHAP for the probability of the predicted class; absent features
/// take the background mean.
pub fn shap_exact<P: Predictor + ?Sized>(model: &P, instance: &[f64], background: &Matrix) -> Result<ShapExplanation> {
    let class = predicted_class(model, instance)?;
    let fill = background_mean(background, instance.len())?;
    let mut e = shap_exact_fn(class_value_fn(model, class), instance, &fill)?;
    e.class = Some(class);
    Ok(e)
}

pub fn shap_sampled<P: Predictor + ?Sized>(
    model: &P,
    instance: &[f64],
    background: &Matrix,
    n_samples: usize,
    seed: u64,
) -> Result<ShapExplanation> {
    let class = predicted_class(model, instance)?;
    let fill = background_mean(background, instance.len())?;
    let mut e = shap_sampled_fn(class_value_fn(model, class), instance, &fill, n_samples, seed)?;
    e.class = Some(class);
    Ok(e)
}

/// The `n` rows closest (Euclidean, ties by index) to the feature-wise
/// median.
pub fn default_background(x: &Matrix, n: usize) -> Matrix {
    let median: Vec<f64> = (0..x.cols())
        .map(|j| {
            let mut c = x.column(j);
            c.sort_by(f64::total_cmp);
            let m = c.len();
            if m == 0 {
                0.0
            } else if m % 2 == 1 {
                c[m / 2]
            } else {
                (c[m / 2 - 1] + c[m / 2]) / 2.0
            }
        })
        .collect();
    let mut order: Vec<(f64, usize)> = x
        .iter_rows()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(&median).map(|(a, b)| (a - b) * (a - b)).sum(), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let idx: Vec<usize> = order.iter().take(n).map(|&(_, i)| i).collect();
    x.select_rows(&idx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iters: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iters: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding2D {
    /// `M x 2`.
    pub coords: Matrix,
    pub labels: Option<Vec<usize>>,
    pub kl: f64,
    /// `(iteration, KL)` every 50 iterations, against the unexaggerated P.
    pub kl_trace: Vec<(usize, f64)>,
    pub perplexity: f64,
}

const DIST_FLOOR: f64 = 1e-12;

fn sq_distances(x: &Matrix) -> Vec<f64> {
    let m = x.rows();
    let mut d = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let v = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .max(DIST_FLOOR);
            d[i * m + j] = v;
            d[j * m + i] = v;
        }
    }
    d
}

/// Conditional `p_{j|i}` rows (each sums to 1) with per-row Gaussian
/// bandwidths binary-searched to the target perplexity. Also returns the
/// achieved perplexity of each row.
pub fn conditional_p(x: &Matrix, perplexity: f64) -> Result<(Matrix, Vec<f64>)> {
    let m = x.rows();
    if m < 2 {
        return Err(invalid_arg!("t-SNE needs at least two points"));
    }
    if !(perplexity > 0.0) || perplexity > (m - 1) as f64 {
        return Err(invalid_arg!("perplexity {perplexity} outside (0, {}]", m - 1));
    }
    let d = sq_distances(x);
    let target = perplexity.ln();
    let mut p = Matrix::zeros(m, m);
    let mut achieved = Vec::with_capacity(m);
    let mut row = vec![0.0; m];
    for i in 0..m {
        let di = &d[i * m..(i + 1) * m];
        // distances are shifted by the row minimum for stability
        let dmin = (0..m).filter(|&j| j != i).map(|j| di[j]).fold(f64::INFINITY, f64::min);
        let (mut beta, mut lo, mut hi) = (1.0 / di.iter().sum::<f64>().max(DIST_FLOOR) * (m as f64), 0.0, f64::INFINITY);
        let mut perp = 0.0;
        for _ in 0..50 {
            let mut sum = 0.0;
            let mut dot = 0.0;
            for j in 0..m {
                row[j] = if j == i { 0.0 } else { (-(di[j] - dmin) * beta).exp() };
                sum += row[j];
                dot += row[j] * (di[j] - dmin);
            }
            // H = ln(sum) + beta * E[d - dmin]
            let h = sum.ln() + beta * dot / sum;
            perp = h.exp();
            row.iter_mut().for_each(|v| *v /= sum);
            if (perp - perplexity).abs() < 1e-4 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        p.row_mut(i).copy_from_slice(&row);
        achieved.push(perp);
    }
    Ok((p, achieved))
}

/// `(P + P^T) / 2M`.
pub fn joint_p(cond: &Matrix) -> Matrix {
    let m = cond.rows();
    Matrix::from_fn(m, m, |i, j| (cond[(i, j)] + cond[(j, i)]) / (2.0 * m as f64))
}

fn kl_divergence(p: &Matrix, y: &Matrix) -> f64 {
    let m = p.rows();
    let mut num = vec![0.0; m * m];
    let mut z = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let d = (y[(i, 0)] - y[(j, 0)]).powi(2) + (y[(i, 1)] - y[(j, 1)]).powi(2);
                num[i * m + j] = 1.0 / (1.0 + d);
                z += num[i * m + j];
            }
        }
    }
    let mut kl = 0.0;
    for i in 0..m {
        for j in 0..m {
            let pij = p[(i, j)];
            if i != j && pij > 0.0 {
                let q = (num[i * m + j] / z).max(1e-300);
                kl += pij * (pij / q).ln();
            }
        }
    }
    kl.max(0.0)
}

/// Exact t-SNE to two dimensions (momentum 0.5 then 0.8 after the
/// exaggeration phase, per-coordinate adaptive gains).
pub fn tsne_embed(x: &Matrix, labels: Option<Vec<usize>>, cfg: &TsneConfig) -> Result<Embedding2D> {
    let m = x.rows();
    if m < 4 {
        return Err(invalid_arg!("t-SNE needs at least four points"));
    }
    let mut perplexity = cfg.perplexity;
    if (m as f64) < 3.0 * perplexity {
        let reduced = ((m - 1) as f64 / 3.0).max(1.0);
        log::warn!("perplexity {perplexity} too large for {m} points, using {reduced}");
        perplexity = reduced;
    }
    let (cond, _) = conditional_p(x, perplexity)?;
    let p = joint_p(&cond);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-2).expect("valid normal");
    let mut y = Matrix::from_fn(m, 2, |_, _| normal.sample(&mut rng));
    let mut update = Matrix::zeros(m, 2);
    let mut gains = Matrix::from_fn(m, 2, |_, _| 1.0);
    let mut num = vec![0.0; m * m];
    let mut grad = Matrix::zeros(m, 2);
    let mut kl_trace = Vec::new();
    for it in 0..cfg.iters {
        let exag = if it < cfg.exaggeration_iters { cfg.exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                let d = (y[(i, 0)] - y[(j, 0)]).powi(2) + (y[(i, 1)] - y[(j, 1)]).powi(2);
                let v = 1.0 / (1.0 + d);
                num[i * m + j] = v;
                num[j * m + i] = v;
                z += 2.0 * v;
            }
        }
        for i in 0..m {
            let (mut g0, mut g1) = (0.0, 0.0);
            for j in 0..m {
                if i == j {
                    continue;
                }
                let nij = num[i * m + j];
                let mult = (exag * p[(i, j)] - nij / z) * nij;
                g0 += mult * (y[(i, 0)] - y[(j, 0)]);
                g1 += mult * (y[(i, 1)] - y[(j, 1)]);
            }
            grad[(i, 0)] = 4.0 * g0;
            grad[(i, 1)] = 4.0 * g1;
        }
        for i in 0..m {
            for k in 0..2 {
                let g = grad[(i, k)];
                let gain = &mut gains[(i, k)];
                *gain = if (g > 0.0) != (update[(i, k)] > 0.0) { *gain + 0.2 } else { *gain * 0.8 };
                *gain = gain.max(0.01);
                update[(i, k)] = momentum * update[(i, k)] - cfg.learning_rate * *gain * g;
                y[(i, k)] += update[(i, k)];
            }
        }
        // recentre
        for k in 0..2 {
            let mean = (0..m).map(|i| y[(i, k)]).sum::<f64>() / m as f64;
            (0..m).for_each(|i| y[(i, k)] -= mean);
        }
        if (it + 1) % 50 == 0 {
            kl_trace.push((it + 1, kl_divergence(&p, &y)));
        }
    }
    if y.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("t-SNE diverged".into()));
    }
    let kl = kl_divergence(&p, &y);
    Ok(Embedding2D {
        coords: y,
        labels,
        kl,
        kl_trace,
        perplexity,
    })
}

/// Mean silhouette coefficient (Euclidean). Points in singleton clusters
/// score 0.
pub fn silhouette(x: &Matrix, labels: &[usize]) -> Result<f64> {
    let m = x.rows();
    if labels.len() != m || m == 0 {
        return Err(invalid_arg!("need one label per row"));
    }
    let k = labels.iter().max().map_or(0, |&l| l + 1);
    let dist = |i: usize, j: usize| {
        x.row(i)
            .iter()
            .zip(x.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..m {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in (0..m).filter(|&j| j != i) {
            sums[labels[j]] += dist(i, j);
            counts[labels[j]] += 1;
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    Ok(total / m as f64)
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Heatmap overlay: red carries the saliency, green and blue the grey level
/// of the source image dimmed by the saliency.
pub fn saliency_overlay(map: &SaliencyMap, image: &Image) -> Result<Image> {
    if (map.height, map.width) != (image.height, image.width) {
        return Err(invalid_arg!("saliency map and image sizes differ"));
    }
    let mut out = Image::new(image.height, image.width, 3);
    for y in 0..image.height {
        for x in 0..image.width {
            let grey = (0..image.channels).map(|c| image.get(y, x, c)).sum::<f64>() / image.channels as f64;
            let s = map.get(y, x);
            out.set(y, x, 0, s);
            out.set(y, x, 1, grey * (1.0 - s));
            out.set(y, x, 2, grey * (1.0 - s));
        }
    }
    Ok(out)
}

pub fn embedding_svg(e: &Embedding2D, class_names: &[String]) -> String {
    let (size, pad) = (480.0, 40.0);
    let col = |k: usize| (0..e.coords.rows()).map(move |i| e.coords[(i, k)]);
    let (min_x, max_x) = col(0).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (min_y, max_y) = col(1).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let sx = (size - 2.0 * pad) / (max_x - min_x).max(1e-12);
    let sy = (size - 2.0 * pad) / (max_y - min_y).max(1e-12);
    let legend_w = 140.0;
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{size}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
        size + legend_w
    );
    for i in 0..e.coords.rows() {
        let l = e.labels.as_ref().map_or(0, |l| l[i]);
        writeln!(
            s,
            "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"3\" fill=\"{}\"/>",
            pad + (e.coords[(i, 0)] - min_x) * sx,
            size - pad - (e.coords[(i, 1)] - min_y) * sy,
            PALETTE[l % PALETTE.len()]
        )
        .unwrap();
    }
    let n_classes = e.labels.as_ref().and_then(|l| l.iter().max()).map_or(1, |&m| m + 1);
    for c in 0..n_classes {
        let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let y = pad + 20.0 * c as f64;
        writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>",
            size + 10.0,
            y,
            PALETTE[c % PALETTE.len()],
            size + 26.0,
            y + 9.0,
            xml_escape(&name)
        )
        .unwrap();
    }
    writeln!(s, "<text x=\"{pad}\" y=\"20\" font-size=\"12\">KL {:.4}</text>\n</svg>", e.kl).unwrap();
    s
}

pub fn confusion_svg(cm: &ConfusionMatrix) -> String {
    let k = cm.n_classes();
    let cell = 48.0;
    let off = 40.0;
    let side = off + cell * k as f64 + 10.0;
    let max = cm.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{side}\" height=\"{side}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (t, row) in cm.counts.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            let shade = 255 - (200.0 * v as f64 / max).round() as u8;
            let (x, y) = (off + cell * p as f64, off + cell * t as f64);
            writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\" stroke=\"black\"/><text x=\"{}\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\">{v}</text>",
                x + cell / 2.0,
                y + cell / 2.0 + 5.0
            )
            .unwrap();
        }
    }
    for c in 0..k {
        let mid = off + cell * c as f64 + cell / 2.0;
        writeln!(s, "<text x=\"{mid}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{c}</text>", off - 8.0).unwrap();
        writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{c}</text>", off - 14.0, mid + 4.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Horizontal bars around a zero line, for signed deltas.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let row = 24.0;
    let (label_w, half) = (90.0, 160.0);
    let height = 40.0 + row * labels.len() as f64;
    let width = label_w + 2.0 * half + 70.0;
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    let zero = label_w + half;
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width}\" height=\"{height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"10\" y=\"18\" font-size=\"13\">{}</text>\n",
        xml_escape(title)
    );
    for (i, (l, &v)) in labels.iter().zip(values).enumerate() {
        let y = 30.0 + row * i as f64;
        let len = half * v.abs() / scale;
        let x = if v < 0.0 { zero - len } else { zero };
        let fill = if v < 0.0 { "#d62728" } else { "#2ca02c" };
        writeln!(
            s,
            "<text x=\"10\" y=\"{}\" font-size=\"12\">{}</text><rect x=\"{x:.3}\" y=\"{y}\" width=\"{len:.3}\" height=\"{}\" fill=\"{fill}\"/><text x=\"{}\" y=\"{}\" font-size=\"11\">{v:+.4}</text>",
            y + 14.0,
            xml_escape(l),
            row - 6.0,
            zero + half + 8.0,
            y + 14.0
        )
        .unwrap();
    }
    writeln!(s, "<line x1=\"{zero}\" y1=\"26\" x2=\"{zero}\" y2=\"{height}\" stroke=\"black\"/>\n</svg>").unwrap();
    s
}

/// Something [`render`] can write.
pub enum Artifact<'a> {
    Saliency { map: &'a SaliencyMap, image: &'a Image },
    Embedding { embedding: &'a Embedding2D, class_names: &'a [String] },
    Confusion(&'a ConfusionMatrix),
}

/// Writes a PPM (saliency) or SVG (embedding, confusion matrix).
pub fn render(artifact: &Artifact<'_>, path: &Path) -> Result<()> {
    let bytes = match artifact {
        Artifact::Saliency { map, image } => encode_pnm(&saliency_overlay(map, image)?),
        Artifact::Embedding { embedding, class_names } => embedding_svg(embedding, class_names).into_bytes(),
        Artifact::Confusion(cm) => confusion_svg(cm).into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
