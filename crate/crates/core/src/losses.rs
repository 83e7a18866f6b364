//! Training objectives with analytic gradients.
//!
//! * contrastive: per anchor `-log(h(a, p) / (h(a, p) + sum_j h(a, n_j)))`
//!   with `h(u, v) = exp(cos(u, v) / tau)`, averaged over anchors.
//! * codebook: `(1/V) sum_v p_v ln p_v` over the mean selection distribution.
//! * uncertainty: `mean_i [ exp(-s_i) d_i / 2 + s_i / 2 ]` with `d = 1 - cos`.
//! * distillation total: uncertainty term plus `lambda * mean_i d(y_m, mu_m)`.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};

use crate::error::{ensure, Result};
use crate::Scalar;

const UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ContrastiveBatch<T> {
    /// (M, D) unit vectors from the first branch.
    pub anchors: Array2<T>,
    /// (M, D) unit vectors at the same locations in the second branch.
    pub positives: Array2<T>,
    /// (K, D) unit vectors from other locations or other batch items.
    pub negatives: Array2<T>,
    /// Optional per-anchor subset of `negatives`; all negatives when `None`.
    pub negative_index: Option<Vec<Vec<usize>>>,
    pub temperature: T,
}

#[derive(Debug, Clone)]
pub struct ContrastiveGrads<T> {
    pub anchors: Array2<T>,
    pub positives: Array2<T>,
    pub negatives: Array2<T>,
}

fn check_unit<T: Scalar>(name: &str, x: ArrayView2<'_, T>) -> Result<()> {
    for (r, row) in x.outer_iter().enumerate() {
        let n = row.dot(&row).sqrt().as_f64();
        ensure!(
            (n - 1.0).abs() <= UNIT_TOLERANCE,
            Input,
            "{name} row {r} has norm {n}, expected unit vectors"
        );
    }
    Ok(())
}

fn log_sum_exp<T: Scalar>(xs: &[T]) -> (T, Vec<T>) {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = xs.iter().map(|&x| (x - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    (m + z.ln(), e.into_iter().map(|v| v / z).collect())
}

/// Mean InfoNCE loss and its gradient with respect to every input vector.
/// Inputs are unit vectors, so cosine similarity is the dot product.
pub fn contrastive_loss<T: Scalar>(b: &ContrastiveBatch<T>) -> Result<(T, ContrastiveGrads<T>)> {
    let (m, d) = b.anchors.dim();
    ensure!(m >= 1, Input, "contrastive batch needs at least one anchor");
    ensure!(b.positives.dim() == (m, d), Shape, "positives must be {m}x{d}");
    ensure!(b.negatives.ncols() == d || b.negatives.nrows() == 0, Shape, "negatives must have {d} columns");
    ensure!(b.temperature > T::zero(), Parameter, "contrastive temperature must be positive");
    check_unit("anchors", b.anchors.view())?;
    check_unit("positives", b.positives.view())?;
    check_unit("negatives", b.negatives.view())?;
    if let Some(idx) = &b.negative_index {
        ensure!(idx.len() == m, Shape, "negative_index needs one entry per anchor");
        ensure!(
            idx.iter().flatten().all(|&k| k < b.negatives.nrows()),
            Input,
            "negative index out of range"
        );
    }
    let tau = b.temperature;
    let all: Vec<usize> = (0..b.negatives.nrows()).collect();
    let mut ga = Array2::<T>::zeros((m, d));
    let mut gp = Array2::<T>::zeros((m, d));
    let mut gn = Array2::<T>::zeros(b.negatives.dim());
    let mut total = T::zero();
    let scale = T::one() / T::from_usize_lossy(m);
    for i in 0..m {
        let a = b.anchors.row(i);
        let p = b.positives.row(i);
        let negs = b.negative_index.as_ref().map_or(&all, |v| &v[i]);
        let mut logits = Vec::with_capacity(1 + negs.len());
        logits.push(a.dot(&p) / tau);
        logits.extend(negs.iter().map(|&k| a.dot(&b.negatives.row(k)) / tau));
        let (lse, w) = log_sum_exp(&logits);
        total += lse - logits[0];
        // dL/dlogit: w_0 - 1 for the positive, w_j for negatives.
        let c0 = (w[0] - T::one()) * scale / tau;
        ga.row_mut(i).scaled_add(c0, &p);
        gp.row_mut(i).scaled_add(c0, &a);
        for (k, &j) in negs.iter().enumerate() {
            let c = w[k + 1] * scale / tau;
            ga.row_mut(i).scaled_add(c, &b.negatives.row(j));
            gn.row_mut(j).scaled_add(c, &a);
        }
    }
    Ok((total * scale, ContrastiveGrads { anchors: ga, positives: gp, negatives: gn }))
}

/// `(1/V) sum p ln p` with `0 ln 0 = 0`, and its gradient. A zero entry gets
/// the gradient at `p = 1e-12` so that it stays finite.
pub fn codebook_loss<T: Scalar>(p: ArrayView1<'_, T>) -> Result<(T, Array1<T>)> {
    let v = p.len();
    ensure!(v >= 1, Input, "empty usage histogram");
    ensure!(p.iter().all(|&x| x.is_finite() && x >= T::zero()), Input, "usage histogram has negative or non-finite entries");
    let inv = T::one() / T::from_usize_lossy(v);
    let loss = p.iter().filter(|&&x| x > T::zero()).map(|&x| x * x.ln()).sum::<T>() * inv;
    let floor = T::lit(1e-12);
    let grad = p.mapv(|x| (x.max(floor).ln() + T::one()) * inv);
    Ok((loss, grad))
}

/// Codebook loss averaged over groups of a (groups, N) histogram.
pub fn grouped_codebook_loss<T: Scalar>(p: &Array2<T>) -> Result<(T, Array2<T>)> {
    let g = T::from_usize_lossy(p.nrows());
    let mut grad = Array2::<T>::zeros(p.dim());
    let mut total = T::zero();
    for (k, row) in p.outer_iter().enumerate() {
        let (l, dg) = codebook_loss(row)?;
        total += l / g;
        grad.row_mut(k).assign(&(dg / g));
    }
    Ok((total, grad))
}

pub fn pretrain_total<T: Scalar>(contrastive: T, codebook: T) -> T {
    contrastive + codebook
}

/// Per-pixel cosine distance `1 - cos(x, y)` on (B, D, H, W) grids with
/// gradients. Zero vectors have cosine 0 and contribute no gradient.
pub fn cosine_distance<T: Scalar>(x: &Array4<T>, y: &Array4<T>) -> Result<(Array3<T>, Array4<T>, Array4<T>)> {
    ensure!(x.dim() == y.dim(), Shape, "feature grids differ: {:?} vs {:?}", x.dim(), y.dim());
    let (b, _, h, w) = x.dim();
    let mut dist = Array3::<T>::zeros((b, h, w));
    let mut dx = Array4::<T>::zeros(x.dim());
    let mut dy = Array4::<T>::zeros(y.dim());
    let tiny = T::lit(1e-12);
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let xv = x.slice(s![bi, .., i, j]);
                let yv = y.slice(s![bi, .., i, j]);
                let nx = xv.dot(&xv).sqrt();
                let ny = yv.dot(&yv).sqrt();
                if nx < tiny || ny < tiny {
                    dist[[bi, i, j]] = T::one();
                    continue;
                }
                let c = xv.dot(&yv) / (nx * ny);
                dist[[bi, i, j]] = T::one() - c;
                // d(1 - cos)/dx = -(y / (|x||y|) - cos x / |x|^2)
                let mut gx = dx.slice_mut(s![bi, .., i, j]);
                gx.assign(&(&xv * (c / (nx * nx)) - &yv * (T::one() / (nx * ny))));
                let mut gy = dy.slice_mut(s![bi, .., i, j]);
                gy.assign(&(&yv * (c / (ny * ny)) - &xv * (T::one() / (nx * ny))));
            }
        }
    }
    Ok((dist, dx, dy))
}

#[derive(Debug, Clone)]
pub struct UncertaintyGrads<T> {
    pub y: Array4<T>,
    pub mu: Array4<T>,
    pub s: Array3<T>,
}

/// `mean_i [ exp(-s_i) d(y_i, mu_i) / 2 + s_i / 2 ]` over all pixels of the batch.
pub fn uncertainty_loss<T: Scalar>(y: &Array4<T>, mu: &Array4<T>, s: &Array3<T>) -> Result<(T, UncertaintyGrads<T>)> {
    let (b, _, h, w) = y.dim();
    ensure!(s.dim() == (b, h, w), Shape, "log-variance grid {:?} does not match features {:?}", s.dim(), (b, h, w));
    ensure!(s.iter().all(|v| v.is_finite()), Input, "log-variance must be finite");
    let (dist, mut dy, mut dmu) = cosine_distance(y, mu)?;
    let count = T::from_usize_lossy(b * h * w);
    let half = T::lit(0.5);
    let mut loss = T::zero();
    let mut ds = Array3::<T>::zeros((b, h, w));
    for ((idx, &d), &sv) in dist.indexed_iter().zip(s.iter()) {
        let e = (-sv).exp();
        loss += half * e * d + half * sv;
        ds[idx] = (half - half * e * d) / count;
        let k = half * e / count;
        dy.slice_mut(s![idx.0, .., idx.1, idx.2]).mapv_inplace(|g| g * k);
        dmu.slice_mut(s![idx.0, .., idx.1, idx.2]).mapv_inplace(|g| g * k);
    }
    Ok((loss / count, UncertaintyGrads { y: dy, mu: dmu, s: ds }))
}

#[derive(Debug, Clone)]
pub struct DistillLoss<T> {
    pub total: T,
    pub uncertainty: T,
    pub consistency: T,
}

#[derive(Debug, Clone)]
pub struct DistillGrads<T> {
    pub y_cross: Array4<T>,
    pub mu_cross: Array4<T>,
    pub s: Array3<T>,
    pub y_same: Array4<T>,
    pub mu_same: Array4<T>,
}

/// Uncertainty loss on the cross-time pair `(y_cross, mu_cross, s)` plus
/// `lambda` times the mean cosine distance of the same-time pair.
pub fn distill_total<T: Scalar>(
    y_cross: &Array4<T>,
    mu_cross: &Array4<T>,
    s: &Array3<T>,
    y_same: &Array4<T>,
    mu_same: &Array4<T>,
    lambda: T,
) -> Result<(DistillLoss<T>, DistillGrads<T>)> {
    ensure!(lambda >= T::zero(), Parameter, "lambda must be non-negative, got {lambda}");
    let (lu, gu) = uncertainty_loss(y_cross, mu_cross, s)?;
    ensure!(
        y_same.dim() == y_cross.dim(),
        Shape,
        "same-time grid {:?} does not match cross-time grid {:?}",
        y_same.dim(),
        y_cross.dim()
    );
    let (dist, mut dys, mut dms) = cosine_distance(y_same, mu_same)?;
    let count = T::from_usize_lossy(dist.len());
    let consistency = dist.sum() / count;
    let k = lambda / count;
    dys.mapv_inplace(|g| g * k);
    dms.mapv_inplace(|g| g * k);
    Ok((
        DistillLoss { total: lu + lambda * consistency, uncertainty: lu, consistency },
        DistillGrads { y_cross: gu.y, mu_cross: gu.mu, s: gu.s, y_same: dys, mu_same: dms },
    ))
}

/// Mean over rows of a (M, D) matrix of unit vectors; used in diagnostics.
pub fn mean_dot<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> T {
    let m = T::from_usize_lossy(a.nrows().max(1));
    (&a * &b).sum_axis(Axis(1)).sum() / m
}
