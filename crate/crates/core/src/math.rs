//! Small dense helpers shared by the graph networks and classifiers.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

pub fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity. Caller guarantees both vectors are nonzero.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b) / (norm(a) * norm(b))
}

/// Numerically stable softmax over a slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Rows divided by their L2 norms, plus the norms themselves.
pub fn normalize_rows(m: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = m.map_axis(Axis(1), norm);
    let mut out = m.to_owned();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        row /= n;
    }
    (out, norms)
}

/// Backpropagate through `x -> x / |x|` row-wise.
pub fn normalize_rows_backward(
    normalized: ArrayView2<'_, f64>,
    norms: ArrayView1<'_, f64>,
    grad: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let mut out = grad.to_owned();
    for ((mut g, n), &len) in out.rows_mut().into_iter().zip(normalized.rows()).zip(norms.iter()) {
        let proj = n.dot(&g);
        g.scaled_add(-proj, &n);
        g /= len;
    }
    out
}

/// Pairwise cosine similarity matrix of `rows` (all rows nonzero).
pub fn cosine_matrix(rows: ArrayView2<'_, f64>) -> Array2<f64> {
    let (unit, _) = normalize_rows(rows);
    let mut sims = unit.dot(&unit.t());
    // pin exact symmetry and unit diagonal against rounding
    let n = sims.nrows();
    for i in 0..n {
        sims[[i, i]] = 1.0;
        for j in 0..i {
            let v = sims[[i, j]].clamp(-1.0, 1.0);
            sims[[i, j]] = v;
            sims[[j, i]] = v;
        }
    }
    sims
}

/// Mean cross-entropy of `softmax(scale * cos(query, prototype))` and its
/// gradients.
#[derive(Debug, Clone)]
pub struct CosineCe {
    pub loss: f64,
    pub d_queries: Array2<f64>,
    pub d_prototypes: Array2<f64>,
}

pub fn cosine_cross_entropy(
    queries: ArrayView2<'_, f64>,
    prototypes: ArrayView2<'_, f64>,
    targets: &[usize],
    scale: f64,
) -> CosineCe {
    let n = queries.nrows();
    let (zq, qn) = normalize_rows(queries);
    let (zp, pn) = normalize_rows(prototypes);
    let cos = zq.dot(&zp.t());
    let mut dcos = Array2::<f64>::zeros(cos.raw_dim());
    let mut loss = 0.0;
    let mut probs = vec![0.0; cos.ncols()];
    for (i, &y) in targets.iter().enumerate() {
        for (p, &c) in probs.iter_mut().zip(cos.row(i).iter()) {
            *p = scale * c;
        }
        let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + probs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - probs[y];
        softmax_in_place(&mut probs);
        for (c, &p) in probs.iter().enumerate() {
            let indicator = if c == y { 1.0 } else { 0.0 };
            dcos[[i, c]] = scale * (p - indicator) / n as f64;
        }
    }
    let d_zq = dcos.dot(&zp);
    let d_zp = dcos.t().dot(&zq);
    CosineCe {
        loss: loss / n as f64,
        d_queries: normalize_rows_backward(zq.view(), qn.view(), d_zq.view()),
        d_prototypes: normalize_rows_backward(zp.view(), pn.view(), d_zp.view()),
    }
}

/// Sample mean and unbiased standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
