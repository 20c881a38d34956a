//! Central finite-difference check of the training gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::Model;
use crate::rays::Ray;

use super::{loss_and_gradient, GradientOptions, TrainError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(tensor, index)` of the worst component.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of the total loss with central
/// differences of step `h` over every `stride`-th entry of the listed
/// tensors (indices into [`Model::tensors`]).
pub fn check_gradients(
    model: &Model<f64>,
    rays: &[Ray],
    truth: &[f64],
    opts: &GradientOptions,
    tensors: &[usize],
    stride: usize,
    h: f64,
    floor: f64,
) -> Result<GradCheck, TrainError> {
    let (_, grad) = loss_and_gradient(model, rays, truth, opts)?;
    let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|t| t.to_vec()).collect();
    let mut probe = model.clone();
    let mut out =
        GradCheck { checked: 0, max_rel_error: 0.0, worst: (0, 0), worst_analytic: 0.0, worst_numeric: 0.0 };
    for &ti in tensors {
        let len = analytic[ti].len();
        for i in (0..len).step_by(stride.max(1)) {
            let orig = probe.tensors()[ti][i];
            probe.tensors_mut()[ti][i] = orig + h;
            let plus = loss_and_gradient(&probe, rays, truth, opts)?.0.total;
            probe.tensors_mut()[ti][i] = orig - h;
            let minus = loss_and_gradient(&probe, rays, truth, opts)?.0.total;
            probe.tensors_mut()[ti][i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti][i];
            let e = relative_error(a, numeric, floor);
            out.checked += 1;
            if e > out.max_rel_error {
                out.max_rel_error = e;
                out.worst = (ti, i);
                out.worst_analytic = a;
                out.worst_numeric = numeric;
            }
        }
    }
    Ok(out)
}

/// Moves the field parameters to a generic point: hash features uniform in
/// [-1, 1], every other field parameter shifted by up to 0.1. Freshly
/// initialized biases are zero and features tiny, which leaves ReLU inputs
/// within a finite-difference step of the kink.
pub fn generic_point(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.field.tensors().len();
    for (i, t) in model.tensors_mut().into_iter().take(n).enumerate() {
        for v in t.iter_mut() {
            *v = if i == 0 { rng.random_range(-1.0..1.0) } else { *v + rng.random_range(-0.1..0.1) };
        }
    }
}
