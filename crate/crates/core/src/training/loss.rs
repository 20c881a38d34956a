//! Spectral reconstruction loss and proposal supervision.

use crate::real::Real;
use crate::sampling::Histogram;

use super::TrainError;

/// Mean squared residual over all rays and bands, and its gradient on `pred`.
///
/// `L = 1/(N_r B) Σ_p Σ_b (I_pb − Î_pb)²`, gradient `2 (Î − I) / (N_r B)`.
pub fn spectral_mse_loss<T: Real>(pred: &[T], truth: &[T], bands: usize) -> Result<(T, Vec<T>), TrainError> {
    if bands == 0 || pred.len() != truth.len() || pred.len() % bands != 0 {
        return Err(TrainError::Shape(format!(
            "prediction holds {} values and truth {} for {} bands",
            pred.len(),
            truth.len(),
            bands
        )));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(TrainError::Shape("loss inputs must be finite".into()));
    }
    let count = T::from_usize(pred.len()).unwrap();
    let mut sum = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(truth) {
        let r = *p - *t;
        sum += r * r;
        grad.push((r + r) / count);
    }
    Ok((sum / count, grad))
}

/// Index range of the bins of `edges` that overlap the open interval `(lo, hi)`.
fn overlapping(edges: &[f64], lo: f64, hi: f64) -> Option<(usize, usize)> {
    let bins = edges.len() - 1;
    let first = edges[1..].partition_point(|e| *e <= lo);
    let end = edges[..bins].partition_point(|s| *s < hi);
    (first < end).then(|| (first, end - 1))
}

/// Proposal mass covering each bin of `target`.
pub fn outer_mass<T: Real>(target_edges: &[f64], proposal: &Histogram<T>) -> Vec<f64> {
    target_edges
        .windows(2)
        .map(|w| match overlapping(&proposal.edges, w[0], w[1]) {
            Some((a, b)) => proposal.weights[a..=b].iter().map(|v| v.as_f64()).sum(),
            None => 0.0,
        })
        .collect()
}

/// Interlevel loss for one proposal histogram against the final one, and
/// its gradient on the proposal weights. The final weights are treated as
/// constants.
///
/// Each final bin contributes `max(0, w − outer)² / (w + ε)`, where `outer`
/// is the proposal mass over every proposal bin the final bin overlaps.
pub fn interlevel_loss_grad<T: Real>(final_hist: &Histogram<T>, proposal: &Histogram<T>) -> (f64, Vec<T>) {
    let eps = f32::EPSILON as f64;
    let outer = outer_mass(&final_hist.edges, proposal);
    let mut loss = 0.0;
    // Difference array over proposal bins: every bin in an overlap range
    // receives the same gradient.
    let mut diff = vec![0.0; proposal.weights.len() + 1];
    for (i, w) in final_hist.edges.windows(2).enumerate() {
        let wf = final_hist.weights[i].as_f64();
        let gap = (wf - outer[i]).max(0.0);
        if gap > 0.0 {
            loss += gap * gap / (wf + eps);
            if let Some((a, b)) = overlapping(&proposal.edges, w[0], w[1]) {
                let g = -2.0 * gap / (wf + eps);
                diff[a] += g;
                diff[b + 1] -= g;
            }
        }
    }
    let mut run = 0.0;
    let grad = diff[..proposal.weights.len()]
        .iter()
        .map(|d| {
            run += d;
            T::lit(run)
        })
        .collect();
    (loss, grad)
}

/// Sum over proposal rounds of the per-ray interlevel loss.
pub fn interlevel_loss<T: Real>(final_hist: &Histogram<T>, proposals: &[Histogram<T>]) -> f64 {
    proposals.iter().map(|p| interlevel_loss_grad(final_hist, p).0).sum()
}
