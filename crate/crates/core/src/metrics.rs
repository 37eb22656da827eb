//! Frame-level evaluation of posterior matrices.
//!
//! All logs are natural. Probabilities are floored at [`PROB_FLOOR`] before
//! every log, in every metric, so the identity
//! `erp = ln(perplexity) + mean_entropy` holds exactly up to rounding.

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::model::argmax;

pub const PROB_FLOOR: f64 = 1e-12;

/// Held-out metrics of one model on one dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub perplexity: f64,
    pub accuracy: f64,
    /// Mean Shannon entropy of the posteriors, in nats.
    pub mean_entropy: f64,
    /// Entropy-regularized perplexity, `ln(perplexity) + mean_entropy`.
    pub erp: f64,
    pub num_frames: usize,
}

impl MetricsRecord {
    /// Assemble a record from perplexity and entropy; `erp` is derived.
    pub fn new(perplexity: f64, accuracy: f64, mean_entropy: f64, num_frames: usize) -> Self {
        Self {
            perplexity,
            accuracy,
            mean_entropy,
            erp: perplexity.ln() + mean_entropy,
            num_frames,
        }
    }
}

fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Compensated (Neumaier) sum; keeps the metric identities tight at large m.
fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_rows(posteriors: ArrayView2<'_, f64>) -> Result<()> {
    if posteriors.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

fn check_labels(posteriors: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
    check_rows(posteriors)?;
    if labels.len() != posteriors.nrows() {
        return Err(Error::DimensionMismatch {
            expected: posteriors.nrows(),
            actual: labels.len(),
        });
    }
    let num_classes = posteriors.ncols();
    if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    Ok(())
}

/// `exp(−(1/m) Σ ln p(y_i | x_i))`.
pub fn perplexity(posteriors: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    Ok(mean_neg_log_likelihood(posteriors, labels)?.exp())
}

fn mean_neg_log_likelihood(posteriors: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    check_labels(posteriors, labels)?;
    let total = stable_sum(
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -floored_ln(posteriors[[i, y]])),
    );
    Ok(total / labels.len() as f64)
}

/// Fraction of frames whose most probable class (lowest index on ties) is the label.
pub fn accuracy(posteriors: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    check_labels(posteriors, labels)?;
    let hits = posteriors
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `(1/m) Σ_i Σ_k −p_ik ln p_ik`, with `0 ln 0 = 0`.
pub fn mean_entropy(posteriors: ArrayView2<'_, f64>) -> Result<f64> {
    check_rows(posteriors)?;
    let total = stable_sum(
        posteriors
            .iter()
            .map(|&p| if p > 0.0 { -p * floored_ln(p) } else { 0.0 }),
    );
    Ok(total / posteriors.nrows() as f64)
}

/// `−(1/m) Σ_i Σ_k [1(k = y_i) + p_ik] ln p_ik`, evaluated as the literal
/// double sum.
pub fn entropy_regularized_perplexity(
    posteriors: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<f64> {
    check_labels(posteriors, labels)?;
    let total = stable_sum(posteriors.rows().into_iter().zip(labels).flat_map(|(row, &y)| {
        row.into_iter().enumerate().map(move |(k, &p)| {
            let weight = if k == y { 1.0 + p } else { p };
            if weight > 0.0 {
                -weight * floored_ln(p)
            } else {
                0.0
            }
        })
    }));
    Ok(total / labels.len() as f64)
}

/// All four metrics for one posterior matrix.
pub fn evaluate_posteriors(posteriors: ArrayView2<'_, f64>, labels: &[usize]) -> Result<MetricsRecord> {
    let nll = mean_neg_log_likelihood(posteriors, labels)?;
    let entropy = mean_entropy(posteriors)?;
    Ok(MetricsRecord {
        perplexity: nll.exp(),
        accuracy: accuracy(posteriors, labels)?,
        mean_entropy: entropy,
        erp: nll + entropy,
        num_frames: labels.len(),
    })
}
