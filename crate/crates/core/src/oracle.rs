//! Brute-force references for checking the random-feature path.
//!
//! Everything here is `O(N²)` or worse and refuses inputs above a size cap.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

use crate::data::FrameDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rff::{feature_dot, kernel_exact, sample_projection_bank, KernelSpec};
use crate::rng::{self, Stream};

/// Default largest `N` the oracles accept.
pub const DEFAULT_ORACLE_CAP: usize = 5_000;

fn check_cap(n: usize, cap: usize) -> Result<()> {
    if n > cap {
        Err(Error::CapExceeded { n, cap })
    } else {
        Ok(())
    }
}

fn row_vec<T: Copy + Into<f64>>(row: ArrayView1<'_, T>) -> Vec<f64> {
    row.iter().map(|&v| v.into()).collect()
}

/// Dense Gram matrix `K_ij = k(x_i, x_j)`. The upper triangle is computed row
/// by row in parallel and mirrored, so `K` is exactly symmetric.
pub fn exact_kernel_matrix<T>(spec: &KernelSpec, xs: ArrayView2<'_, T>, cap: usize) -> Result<Array2<f64>>
where
    T: Copy + Into<f64> + Send + Sync,
{
    let n = xs.nrows();
    check_cap(n, cap)?;
    let rows: Vec<Vec<f64>> = xs.rows().into_iter().map(row_vec).collect();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| kernel_exact(spec, &rows[i], &rows[j]).expect("equal row lengths"))
                .collect()
        })
        .collect();
    let mut k = Array2::zeros((n, n));
    for (i, row) in upper.iter().enumerate() {
        for (offset, &v) in row.iter().enumerate() {
            let j = i + offset;
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    Ok(k)
}

/// Exact kernel multinomial logistic regression in representer form,
/// `s_c(x) = Σ_j α_jc k(x_j, x)`.
#[derive(Debug, Clone)]
pub struct KernelLogReg {
    spec: KernelSpec,
    support: Array2<f64>,
    alpha: Array2<f64>,
    /// Objective value at the returned α.
    pub objective: f64,
    /// RKHS norm of the objective's functional gradient at the returned α.
    pub gradient_norm: f64,
    pub iterations: usize,
}

/// Stopping threshold on [`KernelLogReg::gradient_norm`].
pub const KERNEL_FIT_TOLERANCE: f64 = 1e-6;

impl KernelLogReg {
    /// Dual coefficients α, `N × C`.
    pub fn alpha(&self) -> ArrayView2<'_, f64> {
        self.alpha.view()
    }

    /// Class scores for a batch of query rows.
    pub fn scores<T>(&self, xs: ArrayView2<'_, T>) -> Result<Array2<f64>>
    where
        T: Copy + Into<f64> + Send + Sync,
    {
        if xs.ncols() != self.support.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.support.ncols(),
                actual: xs.ncols(),
            });
        }
        let support: Vec<Vec<f64>> = self.support.rows().into_iter().map(row_vec).collect();
        let kq: Vec<Vec<f64>> = xs
            .rows()
            .into_iter()
            .map(row_vec)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|q| {
                support
                    .iter()
                    .map(|s| kernel_exact(&self.spec, &q, s).expect("equal row lengths"))
                    .collect()
            })
            .collect();
        let kq = Array2::from_shape_vec(
            (kq.len(), support.len()),
            kq.into_iter().flatten().collect(),
        )
        .expect("rectangular");
        Ok(kq.dot(&self.alpha))
    }

    /// Predicted class per row; ties go to the lowest index.
    pub fn predict<T>(&self, xs: ArrayView2<'_, T>) -> Result<Vec<usize>>
    where
        T: Copy + Into<f64> + Send + Sync,
    {
        let s = self.scores(xs)?;
        Ok(s.rows().into_iter().map(crate::model::argmax).collect())
    }
}

/// Softmax rows in place; returns the mean cross-entropy against `labels`.
fn softmax_xent(scores: &mut Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (mut row, &y) in scores.rows_mut().into_iter().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sy = row[y];
        row.mapv_inplace(|s| (s - max).exp());
        let sum = row.sum();
        row /= sum;
        total += max + sum.ln() - sy;
    }
    total / labels.len() as f64
}

/// Fit α by gradient descent with backtracking line search on
///
/// ```text
/// J(α) = (1/N) Σ_i −log softmax(Kα)_{i, y_i} + (λ/2) tr(αᵀ K α)
/// ```
///
/// Steps follow the functional gradient `G = (P − Y)/N + λα` (the Euclidean
/// gradient is `K G`), which is a descent direction for any PSD `K` and
/// converges far faster than raw α-space steps on ill-conditioned Gram
/// matrices. Stops when `sqrt(tr(Gᵀ K G)) < 1e-6` or after `iters` steps.
pub fn kernel_logreg_fit(
    spec: &KernelSpec,
    dataset: &FrameDataset,
    l2: f64,
    iters: usize,
    cap: usize,
) -> Result<KernelLogReg> {
    if !(l2 > 0.0 && l2.is_finite()) {
        return Err(Error::InvalidParameter(format!("l2 must be positive, got {l2}")));
    }
    let c = dataset.num_classes();
    if c < 2 {
        return Err(Error::InvalidParameter("need at least 2 classes".into()));
    }
    let n = dataset.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let k = exact_kernel_matrix(spec, dataset.features(), cap)?;
    let labels = dataset.labels();

    let objective = |alpha: &Array2<f64>, kalpha: &Array2<f64>| -> (f64, Array2<f64>) {
        let mut probs = kalpha.clone();
        let xent = softmax_xent(&mut probs, labels);
        let reg: f64 = (alpha * kalpha).sum();
        (xent + 0.5 * l2 * reg, probs)
    };

    let mut alpha = Array2::<f64>::zeros((n, c));
    let mut kalpha = Array2::<f64>::zeros((n, c));
    let (mut value, mut probs) = objective(&alpha, &kalpha);
    let mut step = 1.0;
    let mut grad_norm = f64::INFINITY;
    let mut done = 0;
    for it in 0..=iters {
        let mut g = probs.clone();
        for (mut row, &y) in g.rows_mut().into_iter().zip(labels) {
            row[y] -= 1.0;
        }
        g /= n as f64;
        g.scaled_add(l2, &alpha);
        let kg = k.dot(&g);
        let sq: f64 = (&g * &kg).sum();
        grad_norm = sq.max(0.0).sqrt();
        done = it;
        if grad_norm < KERNEL_FIT_TOLERANCE || it == iters {
            break;
        }
        // Armijo backtracking along −G.
        step *= 2.0;
        loop {
            let trial_alpha = &alpha - &(step * &g);
            let trial_kalpha = &kalpha - &(step * &kg);
            let (trial_value, trial_probs) = objective(&trial_alpha, &trial_kalpha);
            if !trial_value.is_finite() {
                step *= 0.5;
            } else if trial_value <= value - 1e-4 * step * sq {
                alpha = trial_alpha;
                kalpha = trial_kalpha;
                value = trial_value;
                probs = trial_probs;
                break;
            } else {
                step *= 0.5;
            }
            if step < 1e-30 {
                // No representable decrease left: converged to machine precision.
                return Ok(KernelLogReg {
                    spec: *spec,
                    support: dataset.features().mapv(f64::from),
                    alpha,
                    objective: value,
                    gradient_norm: grad_norm,
                    iterations: it,
                });
            }
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("kernel logistic regression objective"));
    }
    Ok(KernelLogReg {
        spec: *spec,
        support: dataset.features().mapv(f64::from),
        alpha,
        objective: value,
        gradient_norm: grad_norm,
        iterations: done,
    })
}

/// Central differences `(f(p + ε e_i) − f(p − ε e_i)) / 2ε` for every coordinate.
pub fn central_differences<F>(f: F, point: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let mut p = point.to_vec();
    let mut grads = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = f(&p)?;
        p[i] = orig - eps;
        let down = f(&p)?;
        p[i] = orig;
        grads.push((up - down) / (2.0 * eps));
    }
    Ok(grads)
}

/// Finite-difference gradient of [`Model::loss`] over every trainable
/// parameter, in [`crate::model::Params::iter`] order.
pub fn finite_diff_grad(
    model: &Model,
    features: ArrayView2<'_, f32>,
    labels: &[usize],
    l2: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    let point = model.params().to_vec();
    central_differences(
        |p| {
            let mut m = model.clone();
            m.set_flat_params(p)?;
            m.loss(features, labels, l2)
        },
        &point,
        eps,
    )
}

/// Relative disagreement `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Smallest eigenvalue of a symmetric matrix via cyclic Jacobi rotations.
/// Intended for the small Gram matrices the oracle produces.
pub fn min_eigenvalue_symmetric(m: ArrayView2<'_, f64>) -> Result<f64> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: m.ncols(),
        });
    }
    let mut a = m.to_owned();
    for _sweep in 0..100 {
        let off: f64 = a
            .indexed_iter()
            .filter(|((i, j), _)| i != j)
            .map(|(_, v)| v * v)
            .sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
    }
    Ok(a.diag().iter().copied().fold(f64::INFINITY, f64::min))
}

/// Mean |φᵀφ − K| over all pairs `i < j` of `xs`, for a given feature matrix.
pub fn mean_abs_gram_error(features: ArrayView2<'_, f32>, exact: ArrayView2<'_, f64>) -> f64 {
    let phi = features.mapv(f64::from);
    let approx = phi.dot(&phi.t());
    let n = exact.nrows();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += (approx[[i, j]] - exact[[i, j]]).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Error of the random-feature kernel estimate at one feature count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproxError {
    pub num_features: usize,
    pub rms_error: f64,
    pub max_error: f64,
}

/// Compare `⟨φ(x_i), φ(x_j)⟩` against the exact kernel on `pairs` random
/// pairs of distinct rows, once per entry of `feature_counts`.
///
/// The squared error is averaged over the pairs and over `banks` independent
/// projection banks, so the RMS estimates the expected error over frequency
/// draws rather than the error of one particular bank. The first bank uses
/// `seed` itself; further bank seeds and the pairs come from the pairs stream.
pub fn approximation_errors<T>(
    spec: &KernelSpec,
    xs: ArrayView2<'_, T>,
    feature_counts: &[usize],
    pairs: usize,
    banks: usize,
    seed: u64,
    cap: usize,
) -> Result<Vec<ApproxError>>
where
    T: Copy + Into<f64> + Send + Sync,
{
    let n = xs.nrows();
    check_cap(n, cap)?;
    if n < 2 {
        return Err(Error::InvalidParameter("need at least two rows to form pairs".into()));
    }
    if pairs == 0 || banks == 0 {
        return Err(Error::InvalidParameter("pairs and banks must be positive".into()));
    }
    let mut rng = rng::seeded(seed, Stream::Pairs);
    let pair_list: Vec<(usize, usize)> = (0..pairs)
        .map(|_| {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect();
    let bank_seeds: Vec<u64> = std::iter::once(seed).chain((1..banks).map(|_| rng.gen())).collect();
    let exact = pair_list
        .iter()
        .map(|&(i, j)| kernel_exact(spec, &row_vec(xs.row(i)), &row_vec(xs.row(j))))
        .collect::<Result<Vec<f64>>>()?;

    // Only rows that take part in a pair need features.
    let mut used: Vec<usize> = pair_list.iter().flat_map(|&(i, j)| [i, j]).collect();
    used.sort_unstable();
    used.dedup();
    let mut slot = vec![usize::MAX; n];
    for (k, &r) in used.iter().enumerate() {
        slot[r] = k;
    }
    let sub = xs.select(ndarray::Axis(0), &used);

    let mut out = Vec::with_capacity(feature_counts.len());
    for &d in feature_counts {
        let (mut sq, mut max) = (0.0f64, 0.0f64);
        for &bank_seed in &bank_seeds {
            let bank = sample_projection_bank(*spec, xs.ncols(), d, bank_seed)?;
            let phi = bank.feature_map_batch(sub.view())?;
            for (&(i, j), &k) in pair_list.iter().zip(&exact) {
                let e = (feature_dot(phi.row(slot[i]), phi.row(slot[j])) - k).abs();
                sq += e * e;
                max = max.max(e);
            }
        }
        out.push(ApproxError {
            num_features: d,
            rms_error: (sq / (pairs * banks) as f64).sqrt(),
            max_error: max,
        });
    }
    Ok(out)
}
