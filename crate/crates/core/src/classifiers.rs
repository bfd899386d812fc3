//! The five higher-level learners: linear SVM, KNN, Gaussian naive Bayes,
//! random forest and gradient-boosted trees.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{Kind, Persist, Reader, Writer};
use crate::error::{invalid_arg, Error, Result};
use crate::nn::argmax;
use crate::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassifierKind {
    Svm,
    Knn,
    Gnb,
    Rf,
    Gbt,
}

impl ClassifierKind {
    /// Fixed ensemble order.
    pub const ALL: [ClassifierKind; 5] = [
        ClassifierKind::Svm,
        ClassifierKind::Knn,
        ClassifierKind::Gnb,
        ClassifierKind::Rf,
        ClassifierKind::Gbt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Svm => "SVM",
            ClassifierKind::Knn => "KNN",
            ClassifierKind::Gnb => "GNB",
            ClassifierKind::Rf => "RF",
            ClassifierKind::Gbt => "GBT",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ClassifierKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid_arg!("unknown classifier {s:?}"))
    }

    fn tag(self) -> u8 {
        self as u8
    }
}

/// Hyperparameters for all five learners.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub svm_c: f64,
    pub svm_tol: f64,
    pub svm_max_iter: usize,
    pub knn_k: usize,
    pub gnb_var_smoothing: f64,
    pub rf_trees: usize,
    pub rf_max_depth: usize,
    pub rf_min_split: usize,
    pub gbt_rounds: usize,
    pub gbt_eta: f64,
    pub gbt_max_depth: usize,
    pub seed: u64,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        Self {
            svm_c: 1.0,
            svm_tol: 1e-3,
            svm_max_iter: 10_000,
            knn_k: 3,
            gnb_var_smoothing: 1e-9,
            rf_trees: 100,
            rf_max_depth: 10,
            rf_min_split: 3,
            gbt_rounds: 50,
            gbt_eta: 0.9,
            gbt_max_depth: 10,
            seed: 0,
        }
    }
}

impl ClassifierParams {
    /// Compact `key=value` rendering used as the training fingerprint.
    pub fn fingerprint(&self) -> String {
        format!(
            "svm_c={} svm_tol={} svm_max_iter={} knn_k={} gnb_var_smoothing={} rf_trees={} rf_max_depth={} \
             rf_min_split={} gbt_rounds={} gbt_eta={} gbt_max_depth={} seed={}",
            self.svm_c,
            self.svm_tol,
            self.svm_max_iter,
            self.knn_k,
            self.gnb_var_smoothing,
            self.rf_trees,
            self.rf_max_depth,
            self.rf_min_split,
            self.gbt_rounds,
            self.gbt_eta,
            self.gbt_max_depth,
            self.seed
        )
    }
}

/// Anything that maps feature rows to class distributions.
pub trait Predictor {
    fn n_features(&self) -> usize;
    fn n_classes(&self) -> usize;
    fn predict_proba(&self, x: &Matrix) -> Result<Matrix>;

    /// Argmax of [`predict_proba`](Self::predict_proba), lowest index on ties.
    fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.predict_proba(x)?.iter_rows().map(argmax).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvm {
    /// `[class][feature]`
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub iterations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Knn {
    pub k: usize,
    pub x: Matrix,
    pub y: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianNb {
    pub log_prior: Vec<f64>,
    /// `[class][feature]`
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    Leaf(Vec<f64>),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    /// Leaf reached by `row` (`x[feature] <= threshold` goes left).
    pub fn leaf(&self, row: &[f64]) -> &[f64] {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf(v) => return v,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if row[*feature] <= *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf(_) => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, TreeNode::Leaf(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomForest {
    pub trees: Vec<TreeNode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBoosting {
    pub eta: f64,
    /// `rounds[r][class]` regression trees with scalar leaves.
    pub rounds: Vec<Vec<TreeNode>>,
    /// Mean training log-loss after each round.
    pub train_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClassifierModel {
    Svm(LinearSvm),
    Knn(Knn),
    Gnb(GaussianNb),
    Rf(RandomForest),
    Gbt(GradientBoosting),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedClassifier {
    pub model: ClassifierModel,
    pub n_classes: usize,
    pub n_features: usize,
    pub fingerprint: String,
}

impl TrainedClassifier {
    pub fn kind(&self) -> ClassifierKind {
        match self.model {
            ClassifierModel::Svm(_) => ClassifierKind::Svm,
            ClassifierModel::Knn(_) => ClassifierKind::Knn,
            ClassifierModel::Gnb(_) => ClassifierKind::Gnb,
            ClassifierModel::Rf(_) => ClassifierKind::Rf,
            ClassifierModel::Gbt(_) => ClassifierKind::Gbt,
        }
    }

    fn proba_row(&self, row: &[f64]) -> Vec<f64> {
        let k = self.n_classes;
        match &self.model {
            ClassifierModel::Svm(m) => {
                let mut s: Vec<f64> = m
                    .weights
                    .iter()
                    .zip(&m.bias)
                    .map(|(w, b)| dot(w, row) + b)
                    .collect();
                crate::nn::softmax_in_place(&mut s);
                s
            }
            ClassifierModel::Knn(m) => knn_scores(m, row, k),
            ClassifierModel::Gnb(m) => {
                let mut lp: Vec<f64> = (0..k).map(|c| gnb_log_joint(m, c, row)).collect();
                crate::nn::softmax_in_place(&mut lp);
                lp
            }
            ClassifierModel::Rf(m) => {
                let mut p = vec![0.0; k];
                for t in &m.trees {
                    for (a, &b) in p.iter_mut().zip(t.leaf(row)) {
                        *a += b;
                    }
                }
                let n = m.trees.len() as f64;
                p.iter_mut().for_each(|v| *v /= n);
                p
            }
            ClassifierModel::Gbt(m) => {
                let mut f = gbt_scores(m, row, k);
                crate::nn::softmax_in_place(&mut f);
                f
            }
        }
    }
}

impl Predictor for TrainedClassifier {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n_features {
            return Err(invalid_arg!(
                "{} expects {} features, got {}",
                self.kind().name(),
                self.n_features,
                x.cols()
            ));
        }
        let rows: Vec<Vec<f64>> = x.iter_rows().map(|r| self.proba_row(r)).collect();
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.n_classes));
        }
        Matrix::from_rows(&rows)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_xy(x: &Matrix, y: &[usize], n_classes: usize) -> Result<()> {
    if x.rows() != y.len() {
        return Err(invalid_arg!("{} rows but {} labels", x.rows(), y.len()));
    }
    if x.rows() == 0 {
        return Err(Error::InvalidDataset("empty training set".into()));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= n_classes) {
        return Err(invalid_arg!("label {bad} out of range for {n_classes} classes"));
    }
    Ok(())
}

fn distinct_classes(y: &[usize]) -> usize {
    let mut seen: Vec<usize> = y.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Fits one learner of the given kind.
pub fn fit(
    kind: ClassifierKind,
    x: &Matrix,
    y: &[usize],
    n_classes: usize,
    params: &ClassifierParams,
) -> Result<TrainedClassifier> {
    check_xy(x, y, n_classes)?;
    let model = match kind {
        ClassifierKind::Svm => ClassifierModel::Svm(fit_svm(x, y, n_classes, params)?),
        ClassifierKind::Knn => ClassifierModel::Knn(fit_knn(x, y, params.knn_k)?),
        ClassifierKind::Gnb => ClassifierModel::Gnb(fit_gnb(x, y, n_classes, params.gnb_var_smoothing)?),
        ClassifierKind::Rf => ClassifierModel::Rf(fit_rf(x, y, n_classes, params)?),
        ClassifierKind::Gbt => ClassifierModel::Gbt(fit_gbt(x, y, n_classes, params)?),
    };
    Ok(TrainedClassifier {
        model,
        n_classes,
        n_features: x.cols(),
        fingerprint: format!("{} {}", kind.name(), params.fingerprint()),
    })
}

/// One-vs-rest linear SVM: for each class minimizes
/// `lambda/2 |w|^2 + mean(hinge)` with `lambda = 1/(C n)` by full-batch
/// subgradient descent (step `1/(lambda t)`), keeping the best iterate. The
/// bias is an extra, regularized, constant feature.
pub fn fit_svm(x: &Matrix, y: &[usize], n_classes: usize, params: &ClassifierParams) -> Result<LinearSvm> {
    if distinct_classes(y) < 2 {
        return Err(Error::InvalidDataset("SVM needs at least two classes".into()));
    }
    if params.svm_c <= 0.0 {
        return Err(invalid_arg!("C must be positive"));
    }
    let (n, d) = x.shape();
    let lambda = 1.0 / (params.svm_c * n as f64);
    let mut weights = Vec::with_capacity(n_classes);
    let mut bias = Vec::with_capacity(n_classes);
    let mut iterations = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let t_sign: Vec<f64> = y.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
        let objective = |w: &[f64], b: f64| {
            let reg = 0.5 * lambda * (dot(w, w) + b * b);
            let hinge: f64 = x
                .iter_rows()
                .zip(&t_sign)
                .map(|(r, &s)| (1.0 - s * (dot(w, r) + b)).max(0.0))
                .sum();
            reg + hinge / n as f64
        };
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut best = (objective(&w, b), w.clone(), b);
        let mut prev = best.0;
        let mut iters = params.svm_max_iter;
        let radius = 1.0 / lambda.sqrt();
        for t in 1..=params.svm_max_iter {
            let eta = 1.0 / (lambda * t as f64);
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (r, &s) in x.iter_rows().zip(&t_sign) {
                if s * (dot(&w, r) + b) < 1.0 {
                    for (g, &v) in gw.iter_mut().zip(r) {
                        *g += s * v;
                    }
                    gb += s;
                }
            }
            let shrink = 1.0 - eta * lambda;
            for (wv, g) in w.iter_mut().zip(&gw) {
                *wv = shrink * *wv + eta * g / n as f64;
            }
            b = shrink * b + eta * gb / n as f64;
            // project onto the ball that contains the optimum
            let norm = (dot(&w, &w) + b * b).sqrt();
            if norm > radius {
                let s = radius / norm;
                w.iter_mut().for_each(|v| *v *= s);
                b *= s;
            }
            let obj = objective(&w, b);
            if obj < best.0 {
                best = (obj, w.clone(), b);
            }
            if (prev - obj).abs() < params.svm_tol {
                iters = t;
                break;
            }
            prev = obj;
        }
        weights.push(best.1);
        bias.push(best.2);
        iterations.push(iters);
    }
    Ok(LinearSvm {
        weights,
        bias,
        iterations,
    })
}

pub fn fit_knn(x: &Matrix, y: &[usize], k: usize) -> Result<Knn> {
    if k == 0 {
        return Err(invalid_arg!("k must be positive"));
    }
    if x.rows() < k {
        return Err(Error::InvalidDataset(format!("KNN needs at least {k} training points")));
    }
    Ok(Knn {
        k,
        x: x.clone(),
        y: y.to_vec(),
    })
}

/// Inverse-distance class weights of the `k` nearest training points
/// (ties in distance broken by training index), normalized to sum 1. A query
/// at distance 0 from a training point takes that point's label outright.
fn knn_scores(m: &Knn, q: &[f64], n_classes: usize) -> Vec<f64> {
    let mut d: Vec<(f64, usize)> = m
        .x
        .iter_rows()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut scores = vec![0.0; n_classes];
    if d[0].0 == 0.0 {
        scores[m.y[d[0].1]] = 1.0;
        return scores;
    }
    for &(dist, i) in &d[..m.k] {
        scores[m.y[i]] += 1.0 / (dist + 1e-12);
    }
    let total: f64 = scores.iter().sum();
    scores.iter_mut().for_each(|s| *s /= total);
    scores
}

/// Gaussian naive Bayes. Every class variance gets
/// `var_smoothing * max_j var(x_j)` added.
pub fn fit_gnb(x: &Matrix, y: &[usize], n_classes: usize, var_smoothing: f64) -> Result<GaussianNb> {
    let (n, d) = x.shape();
    let mut counts = vec![0usize; n_classes];
    y.iter().for_each(|&l| counts[l] += 1);
    if let Some(c) = counts.iter().position(|&k| k < 2) {
        return Err(Error::InvalidDataset(format!("class {c} has fewer than 2 samples")));
    }
    let overall = x.column_means();
    let max_var = (0..d)
        .map(|j| x.iter_rows().map(|r| (r[j] - overall[j]).powi(2)).sum::<f64>() / n as f64)
        .fold(0.0, f64::max);
    let eps = (var_smoothing * max_var).max(f64::MIN_POSITIVE);
    let mut mean = vec![vec![0.0; d]; n_classes];
    for (r, &l) in x.iter_rows().zip(y) {
        for (m, &v) in mean[l].iter_mut().zip(r) {
            *m += v;
        }
    }
    for (m, &c) in mean.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    let mut var = vec![vec![0.0; d]; n_classes];
    for (r, &l) in x.iter_rows().zip(y) {
        for ((s, &v), &m) in var[l].iter_mut().zip(r).zip(&mean[l]) {
            *s += (v - m) * (v - m);
        }
    }
    for (s, &c) in var.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v = *v / c as f64 + eps);
    }
    Ok(GaussianNb {
        log_prior: counts.iter().map(|&c| (c as f64 / n as f64).ln()).collect(),
        mean,
        var,
    })
}

fn gnb_log_joint(m: &GaussianNb, c: usize, row: &[f64]) -> f64 {
    let ll: f64 = row
        .iter()
        .zip(&m.mean[c])
        .zip(&m.var[c])
        .map(|((&x, &mu), &v)| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - mu) * (x - mu) / v))
        .sum();
    m.log_prior[c] + ll
}

fn gini(counts: &[f64], total: f64) -> f64 {
    if total == 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|&c| (c / total) * (c / total)).sum::<f64>()
}

struct ClassTree<'a> {
    x: &'a Matrix,
    y: &'a [usize],
    n_classes: usize,
    max_depth: usize,
    min_split: usize,
    max_features: usize,
}

impl ClassTree<'_> {
    fn leaf(&self, idx: &[usize]) -> TreeNode {
        let mut p = vec![0.0; self.n_classes];
        idx.iter().for_each(|&i| p[self.y[i]] += 1.0);
        let n = idx.len() as f64;
        p.iter_mut().for_each(|v| *v /= n);
        TreeNode::Leaf(p)
    }

    /// Lowest weighted Gini over thresholds of `feature`; `None` if constant.
    fn best_threshold(&self, idx: &[usize], feature: usize) -> Option<(f64, f64)> {
        let mut order: Vec<usize> = idx.to_vec();
        order.sort_by(|&a, &b| self.x[(a, feature)].total_cmp(&self.x[(b, feature)]).then(a.cmp(&b)));
        let total = order.len() as f64;
        let mut right = vec![0.0; self.n_classes];
        order.iter().for_each(|&i| right[self.y[i]] += 1.0);
        let mut left = vec![0.0; self.n_classes];
        let mut best: Option<(f64, f64)> = None;
        for w in 0..order.len() - 1 {
            let i = order[w];
            left[self.y[i]] += 1.0;
            right[self.y[i]] -= 1.0;
            let (a, b) = (self.x[(i, feature)], self.x[(order[w + 1], feature)]);
            if a == b {
                continue;
            }
            let nl = (w + 1) as f64;
            let score = (nl * gini(&left, nl) + (total - nl) * gini(&right, total - nl)) / total;
            if best.is_none_or(|(s, _)| score < s) {
                best = Some((score, a + (b - a) / 2.0));
            }
        }
        best
    }

    fn grow<R: Rng>(&self, idx: &[usize], depth: usize, rng: &mut R) -> TreeNode {
        let first = self.y[idx[0]];
        if depth >= self.max_depth || idx.len() < self.min_split || idx.iter().all(|&i| self.y[i] == first) {
            return self.leaf(idx);
        }
        let d = self.x.cols();
        // candidate features in random order; the first `max_features` are
        // the subsample, later ones are only consulted if none of those splits
        let order: Vec<usize> = sample(rng, d, d).into_vec();
        let mut best: Option<(f64, usize, f64)> = None;
        for (pos, &f) in order.iter().enumerate() {
            if pos >= self.max_features && best.is_some() {
                break;
            }
            if let Some((score, thr)) = self.best_threshold(idx, f) {
                if best.is_none_or(|(s, _, _)| score < s) {
                    best = Some((score, f, thr));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return self.leaf(idx);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[(i, feature)] <= threshold);
        TreeNode::Split {
            feature,
            threshold,
            left: Box::new(self.grow(&l, depth + 1, rng)),
            right: Box::new(self.grow(&r, depth + 1, rng)),
        }
    }
}

/// Per-tree generator seed.
fn tree_seed(seed: u64, t: usize) -> u64 {
    seed ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn fit_rf(x: &Matrix, y: &[usize], n_classes: usize, params: &ClassifierParams) -> Result<RandomForest> {
    let n = x.rows();
    if n < 3 {
        return Err(Error::InvalidDataset("random forest needs at least 3 samples".into()));
    }
    if params.rf_trees == 0 {
        return Err(invalid_arg!("random forest needs at least one tree"));
    }
    let builder = ClassTree {
        x,
        y,
        n_classes,
        max_depth: params.rf_max_depth,
        min_split: params.rf_min_split.max(2),
        max_features: ((x.cols() as f64).sqrt().ceil() as usize).max(1),
    };
    let trees = (0..params.rf_trees)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(params.seed, t));
            let boot: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            builder.grow(&boot, 0, &mut rng)
        })
        .collect();
    Ok(RandomForest { trees })
}

struct RegTree<'a> {
    x: &'a Matrix,
    g: &'a [f64],
    h: &'a [f64],
    max_depth: usize,
}

const MIN_HESSIAN: f64 = 1e-12;

impl RegTree<'_> {
    fn sums(&self, idx: &[usize]) -> (f64, f64) {
        idx.iter().fold((0.0, 0.0), |(g, h), &i| (g + self.g[i], h + self.h[i]))
    }

    fn grow(&self, idx: &[usize], depth: usize) -> TreeNode {
        let (g, h) = self.sums(idx);
        let leaf = || TreeNode::Leaf(vec![-g / h.max(MIN_HESSIAN)]);
        if depth >= self.max_depth || idx.len() < 2 {
            return leaf();
        }
        let parent = g * g / h.max(MIN_HESSIAN);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = idx.to_vec();
        for f in 0..self.x.cols() {
            order.sort_by(|&a, &b| self.x[(a, f)].total_cmp(&self.x[(b, f)]).then(a.cmp(&b)));
            let (mut gl, mut hl) = (0.0, 0.0);
            for w in 0..order.len() - 1 {
                let i = order[w];
                gl += self.g[i];
                hl += self.h[i];
                let (a, b) = (self.x[(i, f)], self.x[(order[w + 1], f)]);
                if a == b {
                    continue;
                }
                let (gr, hr) = (g - gl, h - hl);
                if hl < MIN_HESSIAN || hr < MIN_HESSIAN {
                    continue;
                }
                let gain = gl * gl / hl + gr * gr / hr - parent;
                if gain > 1e-12 && best.is_none_or(|(s, _, _)| gain > s) {
                    best = Some((gain, f, a + (b - a) / 2.0));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return leaf();
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[(i, feature)] <= threshold);
        TreeNode::Split {
            feature,
            threshold,
            left: Box::new(self.grow(&l, depth + 1)),
            right: Box::new(self.grow(&r, depth + 1)),
        }
    }
}

fn gbt_scores(m: &GradientBoosting, row: &[f64], k: usize) -> Vec<f64> {
    let mut f = vec![0.0; k];
    for round in &m.rounds {
        for (c, t) in round.iter().enumerate() {
            f[c] += m.eta * t.leaf(row)[0];
        }
    }
    f
}

/// Softmax gradient boosting: one Newton regression tree per class and
/// round on the cross-entropy gradient/hessian, leaves `-G/H`, zero base
/// score.
pub fn fit_gbt(x: &Matrix, y: &[usize], n_classes: usize, params: &ClassifierParams) -> Result<GradientBoosting> {
    if distinct_classes(y) < 2 {
        return Err(Error::InvalidDataset("boosting needs at least two classes".into()));
    }
    let n = x.rows();
    let mut f = vec![vec![0.0; n_classes]; n];
    let idx: Vec<usize> = (0..n).collect();
    let mut model = GradientBoosting {
        eta: params.gbt_eta,
        rounds: Vec::with_capacity(params.gbt_rounds),
        train_loss: Vec::with_capacity(params.gbt_rounds),
    };
    for _ in 0..params.gbt_rounds {
        let probs: Vec<Vec<f64>> = f
            .iter()
            .map(|s| {
                let mut p = s.clone();
                crate::nn::softmax_in_place(&mut p);
                p
            })
            .collect();
        let mut round = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            let g: Vec<f64> = (0..n).map(|i| probs[i][c] - if y[i] == c { 1.0 } else { 0.0 }).collect();
            let h: Vec<f64> = (0..n).map(|i| (probs[i][c] * (1.0 - probs[i][c])).max(1e-16)).collect();
            let tree = RegTree {
                x,
                g: &g,
                h: &h,
                max_depth: params.gbt_max_depth,
            }
            .grow(&idx, 0);
            round.push(tree);
        }
        for (i, row) in x.iter_rows().enumerate() {
            for (c, t) in round.iter().enumerate() {
                f[i][c] += params.gbt_eta * t.leaf(row)[0];
            }
        }
        model.rounds.push(round);
        model.train_loss.push(log_loss(&f, y));
    }
    Ok(model)
}

fn log_loss(scores: &[Vec<f64>], y: &[usize]) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(y)
        .map(|(s, &l)| {
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - s[l]
        })
        .sum();
    total / y.len() as f64
}

fn write_tree(w: &mut Writer, t: &TreeNode) {
    match t {
        TreeNode::Leaf(v) => {
            w.u8(0);
            w.f64s(v);
        }
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            w.u8(1);
            w.usize(*feature);
            w.f64(*threshold);
            write_tree(w, left);
            write_tree(w, right);
        }
    }
}

fn read_tree(r: &mut Reader<'_>, depth: usize) -> Result<TreeNode> {
    if depth > 64 {
        return Err(r.err("tree too deep"));
    }
    match r.u8()? {
        0 => Ok(TreeNode::Leaf(r.f64s()?)),
        1 => Ok(TreeNode::Split {
            feature: r.usize()?,
            threshold: r.f64()?,
            left: Box::new(read_tree(r, depth + 1)?),
            right: Box::new(read_tree(r, depth + 1)?),
        }),
        t => Err(r.err(format!("unknown tree node tag {t}"))),
    }
}

fn write_rows(w: &mut Writer, rows: &[Vec<f64>]) {
    w.usize(rows.len());
    rows.iter().for_each(|r| w.f64s(r));
}

fn read_rows(r: &mut Reader<'_>) -> Result<Vec<Vec<f64>>> {
    let n = r.usize()?;
    (0..n).map(|_| r.f64s()).collect()
}

pub(crate) fn write_classifier(w: &mut Writer, c: &TrainedClassifier) {
    w.u8(c.kind().tag());
    w.usize(c.n_classes);
    w.usize(c.n_features);
    w.str(&c.fingerprint);
    match &c.model {
        ClassifierModel::Svm(m) => {
            write_rows(w, &m.weights);
            w.f64s(&m.bias);
            w.usizes(&m.iterations);
        }
        ClassifierModel::Knn(m) => {
            w.usize(m.k);
            w.usize(m.x.rows());
            w.usize(m.x.cols());
            w.f64s(m.x.as_slice());
            w.usizes(&m.y);
        }
        ClassifierModel::Gnb(m) => {
            w.f64s(&m.log_prior);
            write_rows(w, &m.mean);
            write_rows(w, &m.var);
        }
        ClassifierModel::Rf(m) => {
            w.usize(m.trees.len());
            m.trees.iter().for_each(|t| write_tree(w, t));
        }
        ClassifierModel::Gbt(m) => {
            w.f64(m.eta);
            w.usize(m.rounds.len());
            for round in &m.rounds {
                w.usize(round.len());
                round.iter().for_each(|t| write_tree(w, t));
            }
            w.f64s(&m.train_loss);
        }
    }
}

pub(crate) fn read_classifier(r: &mut Reader<'_>) -> Result<TrainedClassifier> {
    let tag = r.u8()?;
    let kind = *ClassifierKind::ALL
        .get(tag as usize)
        .ok_or_else(|| r.err(format!("unknown classifier tag {tag}")))?;
    let n_classes = r.usize()?;
    let n_features = r.usize()?;
    let fingerprint = r.str()?;
    let model = match kind {
        ClassifierKind::Svm => ClassifierModel::Svm(LinearSvm {
            weights: read_rows(r)?,
            bias: r.f64s()?,
            iterations: r.usizes()?,
        }),
        ClassifierKind::Knn => {
            let k = r.usize()?;
            let (rows, cols) = (r.usize()?, r.usize()?);
            let data = r.f64s()?;
            if data.len() != rows * cols {
                return Err(r.err("KNN matrix size mismatch"));
            }
            let x = Matrix::from_vec(rows, cols, data).map_err(|e| r.err(e.to_string()))?;
            ClassifierModel::Knn(Knn { k, x, y: r.usizes()? })
        }
        ClassifierKind::Gnb => ClassifierModel::Gnb(GaussianNb {
            log_prior: r.f64s()?,
            mean: read_rows(r)?,
            var: read_rows(r)?,
        }),
        ClassifierKind::Rf => {
            let n = r.usize()?;
            let trees = (0..n).map(|_| read_tree(r, 0)).collect::<Result<_>>()?;
            ClassifierModel::Rf(RandomForest { trees })
        }
        ClassifierKind::Gbt => {
            let eta = r.f64()?;
            let n = r.usize()?;
            let mut rounds = Vec::new();
            for _ in 0..n {
                let k = r.usize()?;
                rounds.push((0..k).map(|_| read_tree(r, 0)).collect::<Result<_>>()?);
            }
            ClassifierModel::Gbt(GradientBoosting {
                eta,
                rounds,
                train_loss: r.f64s()?,
            })
        }
    };
    Ok(TrainedClassifier {
        model,
        n_classes,
        n_features,
        fingerprint,
    })
}

impl Persist for TrainedClassifier {
    const KIND: Kind = Kind::Classifier;

    fn write_body(&self, w: &mut Writer) {
        write_classifier(w, self);
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self> {
        read_classifier(r)
    }
}
