use crate::error::{invalid_arg, Error, Result};
use crate::linalg::{Matrix, Real};

/// Row-wise softmax.
pub fn softmax_rows<T: Real>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_loss<T: Real>(logits: &Matrix<T>, labels: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    if logits.shape() != labels.shape() {
        return Err(invalid_arg!(
            "logits {:?} and labels {:?} differ in shape",
            logits.shape(),
            labels.shape()
        ));
    }
    let rows = logits.rows();
    if rows == 0 {
        return Err(invalid_arg!("empty batch"));
    }
    let n = T::n(rows);
    let probs = softmax_rows(logits);
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for r in 0..rows {
        let row = logits.row(r);
        // log-sum-exp as m + ln(1 + rest) keeps precision when one logit dominates
        let arg = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        let m = row[arg];
        let rest: T = (0..row.len()).filter(|&k| k != arg).map(|k| (row[k] - m).exp()).sum();
        let log_norm = rest.ln_1p();
        for (c, &y) in labels.row(r).iter().enumerate() {
            if y != T::zero() {
                loss += y * ((m - row[c]) + log_norm);
            }
        }
        for (g, &y) in grad.row_mut(r).iter_mut().zip(labels.row(r)) {
            *g = (*g - y) / n;
        }
    }
    Ok((loss / n, grad))
}

/// NT-Xent contrastive loss over `2N` projections where rows `2k` and
/// `2k + 1` are the two views of sample `k`.
///
/// For each row `i` with partner `p(i)`:
/// `l_i = -log( exp(s_{i,p(i)}) / sum_{k != i} exp(s_{i,k}) )`, with
/// `s = cos(z_i, z_k) / tau`; the result is the mean of `l_i` over all `2N`
/// rows. The gradient is with respect to the raw (unnormalized) rows.
pub fn nt_xent_loss<T: Real>(z: &Matrix<T>, tau: T) -> Result<(T, Matrix<T>)> {
    let m = z.rows();
    if m < 2 || m % 2 != 0 {
        return Err(invalid_arg!("NT-Xent needs an even number (>= 2) of rows, got {m}"));
    }
    if tau <= T::zero() {
        return Err(invalid_arg!("temperature must be positive"));
    }
    let d = z.cols();
    let norms: Vec<T> = z.iter_rows().map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == T::zero()) {
        return Err(Error::DegenerateInput(format!("projection row {i} has zero norm")));
    }
    let u = Matrix::from_fn(m, d, |r, c| z[(r, c)] / norms[r]);
    let mut sim = Matrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let s: T = u.row(i).iter().zip(u.row(j)).map(|(&a, &b)| a * b).sum::<T>() / tau;
            sim[(i, j)] = s;
            sim[(j, i)] = s;
        }
    }
    let partner = |i: usize| i ^ 1;
    let scale = T::one() / T::n(m);
    let mut loss = T::zero();
    // ds[i][k] = dL/ds_ik, with s_ik viewed as an entry of row i only.
    let mut ds = Matrix::zeros(m, m);
    for i in 0..m {
        let row = sim.row(i);
        let mx = (0..m).filter(|&k| k != i).fold(T::neg_infinity(), |a, k| a.max(row[k]));
        let denom: T = (0..m).filter(|&k| k != i).map(|k| (row[k] - mx).exp()).sum();
        loss += (mx + denom.ln() - row[partner(i)]) * scale;
        for k in (0..m).filter(|&k| k != i) {
            let p = (row[k] - mx).exp() / denom;
            let target = if k == partner(i) { T::one() } else { T::zero() };
            ds[(i, k)] = (p - target) * scale;
        }
    }
    // dL/du_i = sum_k (ds_ik + ds_ki) u_k / tau
    let mut grad = Matrix::zeros(m, d);
    for i in 0..m {
        let mut du = vec![T::zero(); d];
        for k in (0..m).filter(|&k| k != i) {
            let w = (ds[(i, k)] + ds[(k, i)]) / tau;
            for (g, &uk) in du.iter_mut().zip(u.row(k)) {
                *g += w * uk;
            }
        }
        // project out the radial component: dz = (I - u u^T) du / |z|
        let radial: T = du.iter().zip(u.row(i)).map(|(&a, &b)| a * b).sum();
        for (c, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = (du[c] - radial * u[(i, c)]) / norms[i];
        }
    }
    Ok((loss, grad))
}
