//! Feature fusion: concatenation followed by an optional linear transform
//! (PCA, FastICA or LDA) fitted on training features only.

use std::ops::Range;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::codec::{Kind, Persist, Reader, Writer};
use crate::error::{invalid_arg, Error, Result};
use crate::linalg::{eigh_symmetric, whiten, ColumnStats, Matrix, Real};

/// Feature rows with optional labels and the sample ids they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T> {
    pub x: Matrix<T>,
    pub labels: Option<Vec<usize>>,
    pub ids: Vec<u64>,
}

impl<T: Real> FeatureMatrix<T> {
    pub fn new(x: Matrix<T>, labels: Option<Vec<usize>>, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != x.rows() {
            return Err(invalid_arg!("{} ids for {} rows", ids.len(), x.rows()));
        }
        if let Some(l) = &labels {
            if l.len() != x.rows() {
                return Err(invalid_arg!("{} labels for {} rows", l.len(), x.rows()));
            }
        }
        Ok(Self { x, labels, ids })
    }

    /// Unlabelled matrix with ids `0..rows`.
    pub fn unlabeled(x: Matrix<T>) -> Self {
        let ids = (0..x.rows() as u64).collect();
        Self { x, labels: None, ids }
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn cols(&self) -> usize {
        self.x.cols()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("feature matrix carries no labels".into()))
    }

    /// `1 + max label`, or 0 when unlabelled or empty.
    pub fn n_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Hex sha256 over shape, ids and values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rows() as u64).to_le_bytes());
        h.update((self.cols() as u64).to_le_bytes());
        for id in &self.ids {
            h.update(id.to_le_bytes());
        }
        for v in self.x.as_slice() {
            h.update(v.to_f64_lossy().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformKind {
    Identity,
    Pca,
    Ica,
    Lda,
}

impl TransformKind {
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Pca => "pca",
            TransformKind::Ica => "ica",
            TransformKind::Lda => "lda",
        }
    }

    fn tag(self) -> u8 {
        match self {
            TransformKind::Identity => 0,
            TransformKind::Pca => 1,
            TransformKind::Ica => 2,
            TransformKind::Lda => 3,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => TransformKind::Identity,
            1 => TransformKind::Pca,
            2 => TransformKind::Ica,
            3 => TransformKind::Lda,
            _ => return None,
        })
    }
}

/// A fitted linear map: standardize with training statistics, then
/// multiply by `components` (`D_in x k`).
#[derive(Clone, Debug, PartialEq)]
pub struct FusionTransform<T> {
    pub kind: TransformKind,
    /// `None` only for an identity transform fitted without standardization.
    pub stats: Option<ColumnStats<T>>,
    /// Absent for the identity transform.
    pub components: Option<Matrix<T>>,
    /// PCA only; empty otherwise.
    pub explained_variance_ratio: Vec<T>,
    /// Fingerprint of the training features the transform was fitted on.
    pub fit_fingerprint: String,
}

impl<T: Real> FusionTransform<T> {
    pub fn input_dim(&self) -> Option<usize> {
        match (&self.components, &self.stats) {
            (Some(c), _) => Some(c.rows()),
            (None, Some(s)) => Some(s.mean.len()),
            (None, None) => None,
        }
    }

    pub fn output_dim(&self) -> Option<usize> {
        match &self.components {
            Some(c) => Some(c.cols()),
            None => self.input_dim(),
        }
    }

    pub fn apply(&self, x: &FeatureMatrix<T>) -> Result<FeatureMatrix<T>> {
        apply_transform(self, x)
    }
}

/// Concatenated features with the column range each part occupies.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures<T> {
    pub features: FeatureMatrix<T>,
    pub sources: Vec<Range<usize>>,
    pub transform: TransformKind,
}

/// Appends the parts column-wise. Rows must line up by sample id and carry
/// identical labels.
pub fn concat_features<T: Real>(parts: &[FeatureMatrix<T>]) -> Result<FusedFeatures<T>> {
    let first = parts.first().ok_or_else(|| invalid_arg!("nothing to concatenate"))?;
    let mut sources = Vec::with_capacity(parts.len());
    let mut start = 0;
    for (i, p) in parts.iter().enumerate() {
        if p.rows() != first.rows() {
            return Err(invalid_arg!("part {i} has {} rows, expected {}", p.rows(), first.rows()));
        }
        if p.ids != first.ids {
            return Err(invalid_arg!("part {i} rows are not aligned by sample id"));
        }
        if p.labels != first.labels {
            return Err(invalid_arg!("part {i} labels differ from part 0"));
        }
        sources.push(start..start + p.cols());
        start += p.cols();
    }
    let xs: Vec<&Matrix<T>> = parts.iter().map(|p| &p.x).collect();
    Ok(FusedFeatures {
        features: FeatureMatrix::new(Matrix::hstack(&xs)?, first.labels.clone(), first.ids.clone())?,
        sources,
        transform: TransformKind::Identity,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Multiply,
}

/// Element-wise combination of equally wide parts.
pub fn fuse_elementwise<T: Real>(parts: &[FeatureMatrix<T>], op: ElementwiseOp) -> Result<FeatureMatrix<T>> {
    let cat = concat_features(parts)?;
    let first = &parts[0];
    if parts.iter().any(|p| p.cols() != first.cols()) {
        return Err(invalid_arg!("element-wise fusion needs parts of equal width"));
    }
    let mut x = first.x.clone();
    for p in &parts[1..] {
        for (a, &b) in x.as_mut_slice().iter_mut().zip(p.x.as_slice()) {
            match op {
                ElementwiseOp::Add => *a += b,
                ElementwiseOp::Multiply => *a *= b,
            }
        }
    }
    FeatureMatrix::new(x, cat.features.labels, cat.features.ids)
}

fn check_k<T: Real>(x: &FeatureMatrix<T>, k: usize) -> Result<()> {
    let limit = x.rows().saturating_sub(1).min(x.cols());
    if k == 0 || k > limit {
        return Err(invalid_arg!("k = {k} outside 1..={limit} for a {}x{} matrix", x.rows(), x.cols()));
    }
    Ok(())
}

/// Identity transform, optionally standardizing with the fitted statistics.
pub fn fit_identity<T: Real>(x: &FeatureMatrix<T>, standardize: bool) -> Result<FusionTransform<T>> {
    if standardize && x.rows() < 2 {
        return Err(invalid_arg!("standardization needs at least 2 rows"));
    }
    Ok(FusionTransform {
        kind: TransformKind::Identity,
        stats: standardize.then(|| ColumnStats::fit(&x.x)),
        components: None,
        explained_variance_ratio: Vec::new(),
        fit_fingerprint: x.fingerprint(),
    })
}

/// Principal components of the standardized features.
pub fn fit_pca<T: Real>(x: &FeatureMatrix<T>, k: usize) -> Result<FusionTransform<T>> {
    check_k(x, k)?;
    let stats = ColumnStats::fit(&x.x);
    let z = stats.apply(&x.x)?;
    let eig = eigh_symmetric(&z.covariance()?)?;
    let total: T = eig.values.iter().map(|&v| v.max(T::zero())).sum();
    let ratios = eig.values[..k]
        .iter()
        .map(|&v| if total > T::zero() { v.max(T::zero()) / total } else { T::zero() })
        .collect();
    Ok(FusionTransform {
        kind: TransformKind::Pca,
        stats: Some(stats),
        components: Some(eig.vectors.leading_columns(k)),
        explained_variance_ratio: ratios,
        fit_fingerprint: x.fingerprint(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcaOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    /// Eigenvalues of the standardized covariance below this fraction of the
    /// largest are treated as zero when checking rank.
    pub rank_tol: f64,
}

impl Default for IcaOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-6,
            seed: 0,
            rank_tol: 1e-8,
        }
    }
}

/// Deflation FastICA with the log-cosh contrast (`g = tanh`) on whitened,
/// standardized features. `k` shrinks (with a warning) to the numerical
/// rank of the data.
pub fn fit_ica<T: Real>(x: &FeatureMatrix<T>, k: usize, opts: &IcaOptions) -> Result<FusionTransform<T>> {
    check_k(x, k)?;
    let stats = ColumnStats::fit(&x.x);
    let z = stats.apply(&x.x)?;
    let eig = eigh_symmetric(&z.covariance()?)?;
    let rank = eig.numerical_rank(T::c(opts.rank_tol));
    if rank == 0 {
        return Err(Error::DegenerateInput("features have zero variance".into()));
    }
    let k = if rank < k {
        warn!("feature rank {rank} below requested ICA dimension {k}; reducing");
        rank
    } else {
        k
    };
    let (xw, wmat) = whiten(&z, k)?;
    let n = T::n(xw.rows());
    let tol = T::c(opts.tol);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut unmix: Vec<Vec<T>> = Vec::with_capacity(k);
    let mut proj = vec![T::zero(); xw.rows()];
    for p in 0..k {
        let mut w: Vec<T> = (0..k)
            .map(|_| T::c(StandardNormal.sample(&mut rng)))
            .collect();
        orthonormalize(&mut w, &unmix);
        let mut converged = false;
        for _ in 0..opts.max_iter {
            for (r, pr) in proj.iter_mut().enumerate() {
                *pr = xw.row(r).iter().zip(&w).map(|(&a, &b)| a * b).sum();
            }
            let mut next = vec![T::zero(); k];
            let mut mean_dg = T::zero();
            for (r, &pr) in proj.iter().enumerate() {
                let g = pr.tanh();
                mean_dg += T::one() - g * g;
                for (nv, &xv) in next.iter_mut().zip(xw.row(r)) {
                    *nv += xv * g;
                }
            }
            mean_dg /= n;
            for (nv, &wv) in next.iter_mut().zip(&w) {
                *nv = *nv / n - mean_dg * wv;
            }
            orthonormalize(&mut next, &unmix);
            let dot: T = next.iter().zip(&w).map(|(&a, &b)| a * b).sum();
            w = next;
            if (dot.abs() - T::one()).abs() < tol {
                converged = true;
                break;
            }
        }
        if !converged {
            warn!("ICA component {p} did not converge in {} iterations", opts.max_iter);
        }
        unmix.push(w);
    }
    // components = W_white · Uᵀ, so standardized x maps to x W_white Uᵀ
    let components = Matrix::from_fn(wmat.rows(), k, |i, j| {
        (0..k).map(|m| wmat[(i, m)] * unmix[j][m]).sum()
    });
    Ok(FusionTransform {
        kind: TransformKind::Ica,
        stats: Some(stats),
        components: Some(components),
        explained_variance_ratio: Vec::new(),
        fit_fingerprint: x.fingerprint(),
    })
}

/// Gram-Schmidt against `basis` (orthonormal rows), then unit-normalize.
fn orthonormalize<T: Real>(w: &mut [T], basis: &[Vec<T>]) {
    for b in basis {
        let d: T = w.iter().zip(b).map(|(&a, &c)| a * c).sum();
        for (wv, &bv) in w.iter_mut().zip(b) {
            *wv -= d * bv;
        }
    }
    let norm = w.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm > T::zero() {
        w.iter_mut().for_each(|v| *v /= norm);
    }
}

/// Fisher discriminant directions of the standardized features.
pub fn fit_lda<T: Real>(x: &FeatureMatrix<T>, k: usize) -> Result<FusionTransform<T>> {
    let labels = x.labels()?;
    let c = x.n_classes();
    let mut counts = vec![0usize; c];
    labels.iter().for_each(|&l| counts[l] += 1);
    if c < 2 || counts.iter().any(|&n| n < 2) {
        return Err(Error::InvalidDataset("LDA needs at least 2 classes with 2 samples each".into()));
    }
    if k == 0 || k > c - 1 {
        return Err(invalid_arg!("LDA k = {k} outside 1..={}", c - 1));
    }
    let stats = ColumnStats::fit(&x.x);
    let z = stats.apply(&x.x)?;
    let d = z.cols();
    let mut means = vec![vec![T::zero(); d]; c];
    for (row, &l) in z.iter_rows().zip(labels) {
        for (m, &v) in means[l].iter_mut().zip(row) {
            *m += v;
        }
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= T::n(n));
    }
    let overall = z.column_means();
    let mut sw = Matrix::zeros(d, d);
    for (row, &l) in z.iter_rows().zip(labels) {
        let diff: Vec<T> = row.iter().zip(&means[l]).map(|(&a, &b)| a - b).collect();
        add_outer(&mut sw, &diff, T::one());
    }
    let mut sb = Matrix::zeros(d, d);
    for (m, &n) in means.iter().zip(&counts) {
        let diff: Vec<T> = m.iter().zip(&overall).map(|(&a, &b)| a - b).collect();
        add_outer(&mut sb, &diff, T::n(n));
    }
    let trace: T = (0..d).map(|i| sw[(i, i)]).sum();
    let gamma = T::c(1e-6) * trace / T::n(d);
    let gamma = if gamma > T::zero() { gamma } else { T::c(1e-6) };
    for i in 0..d {
        sw[(i, i)] += gamma;
    }
    // reduce to a symmetric problem: A = V Λ^{-1/2}, solve eig(Aᵀ S_b A)
    let ew = eigh_symmetric(&sw)?;
    let a = Matrix::from_fn(d, d, |i, j| ew.vectors[(i, j)] / ew.values[j].max(gamma).sqrt());
    let m = a.transpose().matmul(&sb)?.matmul(&a)?;
    let m = Matrix::from_fn(d, d, |i, j| (m[(i, j)] + m[(j, i)]) / T::c(2.0));
    let eb = eigh_symmetric(&m)?;
    let components = a.matmul(&eb.vectors.leading_columns(k))?;
    Ok(FusionTransform {
        kind: TransformKind::Lda,
        stats: Some(stats),
        components: Some(components),
        explained_variance_ratio: Vec::new(),
        fit_fingerprint: x.fingerprint(),
    })
}

fn add_outer<T: Real>(m: &mut Matrix<T>, v: &[T], scale: T) {
    for i in 0..v.len() {
        if v[i] == T::zero() {
            continue;
        }
        let s = scale * v[i];
        for (dst, &vj) in m.row_mut(i).iter_mut().zip(v) {
            *dst += s * vj;
        }
    }
}

/// Applies training-fitted statistics and components.
pub fn apply_transform<T: Real>(t: &FusionTransform<T>, x: &FeatureMatrix<T>) -> Result<FeatureMatrix<T>> {
    if let Some(d) = t.input_dim() {
        if x.cols() != d {
            return Err(invalid_arg!("transform expects {d} columns, got {}", x.cols()));
        }
    }
    let z = match &t.stats {
        Some(s) => s.apply(&x.x)?,
        None => x.x.clone(),
    };
    let out = match &t.components {
        Some(c) => z.matmul(c)?,
        None => z,
    };
    FeatureMatrix::new(out, x.labels.clone(), x.ids.clone())
}

/// Production fusion choices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMethod {
    ConcatOnly,
    ConcatPca,
    ConcatIca,
    ConcatLda,
}

impl FusionMethod {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "concat" => FusionMethod::ConcatOnly,
            "concat+pca" => FusionMethod::ConcatPca,
            "concat+ica" => FusionMethod::ConcatIca,
            "concat+lda" => FusionMethod::ConcatLda,
            _ => return Err(invalid_arg!("unknown fusion method {s:?}")),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::ConcatOnly => "concat",
            FusionMethod::ConcatPca => "concat+pca",
            FusionMethod::ConcatIca => "concat+ica",
            FusionMethod::ConcatLda => "concat+lda",
        }
    }
}

/// `min(rows - 1, 128)`.
pub fn default_k(rows: usize) -> usize {
    rows.saturating_sub(1).min(128)
}

/// Number of leading principal components of the standardized features that
/// carry at least `retained` of the total variance.
pub fn variance_k<T: Real>(x: &Matrix<T>, retained: f64) -> Result<usize> {
    if !(retained > 0.0 && retained <= 1.0) {
        return Err(invalid_arg!("retained variance {retained} outside (0, 1]"));
    }
    let z = ColumnStats::fit(x).apply(x)?;
    let eig = eigh_symmetric(&z.covariance()?)?;
    let vals: Vec<f64> = eig.values.iter().map(|v| v.to_f64_lossy().max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateInput("features have zero variance".into()));
    }
    let mut acc = 0.0;
    for (i, v) in vals.iter().enumerate() {
        acc += v;
        if acc >= retained * total * (1.0 - 1e-12) {
            return Ok(i + 1);
        }
    }
    Ok(vals.len())
}

/// Concatenates the parts and fits the method's transform on them. Without
/// an explicit `k`, PCA and ICA keep [`default_k`] components (capped at the
/// column count), further capped by [`variance_k`] when `retained` is given;
/// LDA keeps `n_classes - 1`.
pub fn fuse_pipeline<T: Real>(
    parts: &[FeatureMatrix<T>],
    method: FusionMethod,
    k: Option<usize>,
    retained: Option<f64>,
    ica: &IcaOptions,
) -> Result<(FusedFeatures<T>, FusionTransform<T>)> {
    let cat = concat_features(parts)?;
    let x = &cat.features;
    let auto_k = || -> Result<usize> {
        let k = default_k(x.rows()).min(x.cols());
        Ok(match retained {
            Some(r) => k.min(variance_k(&x.x, r)?),
            None => k,
        })
    };
    let k_or_auto = || -> Result<usize> { k.map_or_else(auto_k, Ok) };
    let transform = match method {
        FusionMethod::ConcatOnly => fit_identity(x, true)?,
        FusionMethod::ConcatPca => fit_pca(x, k_or_auto()?)?,
        FusionMethod::ConcatIca => fit_ica(x, k_or_auto()?, ica)?,
        FusionMethod::ConcatLda => fit_lda(x, k.unwrap_or(x.n_classes().saturating_sub(1)))?,
    };
    let features = apply_transform(&transform, x)?;
    Ok((
        FusedFeatures {
            features,
            sources: cat.sources,
            transform: transform.kind,
        },
        transform,
    ))
}

fn write_matrix(w: &mut Writer, m: &Matrix<f64>) {
    w.usize(m.rows());
    w.usize(m.cols());
    w.f64s(m.as_slice());
}

fn read_matrix(r: &mut Reader<'_>) -> Result<Matrix<f64>> {
    let (rows, cols) = (r.usize()?, r.usize()?);
    let data = r.f64s()?;
    if data.len() != rows * cols {
        return Err(r.err("matrix size mismatch"));
    }
    Matrix::from_vec(rows, cols, data).map_err(|e| r.err(e.to_string()))
}

impl Persist for FusionTransform<f64> {
    const KIND: Kind = Kind::Transform;

    fn write_body(&self, w: &mut Writer) {
        w.u8(self.kind.tag());
        match &self.stats {
            Some(s) => {
                w.bool(true);
                w.f64s(&s.mean);
                w.f64s(&s.std);
            }
            None => w.bool(false),
        }
        match &self.components {
            Some(c) => {
                w.bool(true);
                write_matrix(w, c);
            }
            None => w.bool(false),
        }
        w.f64s(&self.explained_variance_ratio);
        w.str(&self.fit_fingerprint);
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self> {
        let tag = r.u8()?;
        let kind = TransformKind::from_tag(tag).ok_or_else(|| r.err(format!("unknown transform kind {tag}")))?;
        let stats = if r.bool()? {
            let mean = r.f64s()?;
            let std = r.f64s()?;
            if mean.len() != std.len() {
                return Err(r.err("standardization stats length mismatch"));
            }
            Some(ColumnStats { mean, std })
        } else {
            None
        };
        let components = if r.bool()? { Some(read_matrix(r)?) } else { None };
        if let (Some(s), Some(c)) = (&stats, &components) {
            if s.mean.len() != c.rows() {
                return Err(r.err("stats and components disagree on input width"));
            }
        }
        Ok(Self {
            kind,
            stats,
            components,
            explained_variance_ratio: r.f64s()?,
            fit_fingerprint: r.str()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn fm(x: Matrix<f64>) -> FeatureMatrix<f64> {
        FeatureMatrix::unlabeled(x)
    }

    #[test]
    fn concat_shapes_and_sources() {
        let a = fm(Matrix::zeros(4, 3));
        let b = fm(Matrix::zeros(4, 5));
        let c = fm(Matrix::zeros(4, 2));
        let f = concat_features(&[a.clone(), b, c]).unwrap();
        assert_eq!(f.features.x.shape(), (4, 10));
        assert_eq!(f.sources, vec![0..3, 3..8, 8..10]);
        let single = concat_features(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.features, a);
        let mut shuffled = fm(Matrix::zeros(4, 1));
        shuffled.ids.swap(0, 1);
        assert!(concat_features(&[a.clone(), shuffled]).is_err());
        assert!(concat_features(&[a, fm(Matrix::zeros(3, 1))]).is_err());
    }

    #[test]
    fn pca_on_a_line() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let t = fit_pca(&fm(Matrix::from_rows(&rows).unwrap()), 1).unwrap();
        let c = t.components.unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((c[(0, 0)].abs() - s).abs() < 1e-12 && (c[(1, 0)].abs() - s).abs() < 1e-12);
        assert!((t.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pca_k_too_large() {
        let x = fm(Matrix::zeros(3, 5));
        assert!(matches!(fit_pca(&x, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn lda_rejects_k_at_class_count() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64 % 5.0]).collect();
        let x = FeatureMatrix::new(Matrix::from_rows(&rows).unwrap(), Some(vec![0, 0, 1, 1, 2, 2]), (0..6).collect())
            .unwrap();
        assert!(fit_lda(&x, 2).is_ok());
        assert!(fit_lda(&x, 3).is_err());
    }

    #[test]
    fn transform_round_trips_through_codec() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = fm(Matrix::from_fn(30, 4, |_, _| rng.random_range(-1.0..1.0)));
        let t = fit_ica(&x, 3, &IcaOptions::default()).unwrap();
        let bytes = crate::codec::to_bytes(&t);
        let back: FusionTransform<f64> = crate::codec::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        assert_eq!(back, t);
    }
}
