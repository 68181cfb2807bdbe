//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward function, so it stays
//! independent of the tape's backward rules that it is checking.

use rand::Rng;

use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error when both values are ~0.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    /// Coordinates dropped because a perturbation changed a discrete
    /// decision (e.g. an expert route), where the derivative is undefined.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passed(&self, tol: f64, min_samples: usize) -> bool {
        self.samples.len() >= min_samples && self.samples.iter().all(|s| s.rel_err <= tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Picks up to `count` distinct (tensor, element) coordinates uniformly
/// over all elements of `inputs`.
pub fn sample_coords<R: Rng>(inputs: &[Tensor<f64>], count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.numel()).map(move |i| (t, i)))
        .collect();
    if all.len() <= count {
        return all;
    }
    rand::seq::index::sample(rng, all.len(), count)
        .into_iter()
        .map(|k| all[k])
        .collect()
}

/// Compares `analytic[t][i]` against `(f(x + h·e) - f(x - h·e)) / 2h` at
/// each coordinate. `eval` returns the loss plus a signature of every
/// discrete decision taken; coordinates whose perturbation changes the
/// signature are skipped.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    coords: &[(usize, usize)],
    step: f64,
    mut eval: F,
) -> GradCheckReport
where
    F: FnMut(&[Tensor<f64>]) -> (f64, u64),
{
    let mut work = inputs.to_vec();
    let (_, base_sig) = eval(&work);
    let mut report = GradCheckReport::default();
    for &(t, i) in coords {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + step;
        let (plus, sig_p) = eval(&work);
        work[t].data_mut()[i] = orig - step;
        let (minus, sig_m) = eval(&work);
        work[t].data_mut()[i] = orig;
        if sig_p != base_sig || sig_m != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[t].data()[i];
        report.samples.push(GradSample {
            tensor: t,
            index: i,
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric),
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches() {
        let x = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let g = vec![x[0].scale(2.0)];
        let coords = vec![(0, 0), (0, 1), (0, 2)];
        let r = check_gradients(&x, &g, &coords, DEFAULT_STEP, |xs| {
            (xs[0].data().iter().map(|v| v * v).sum(), 0)
        });
        assert!(r.passed(1e-8, 3), "{r:?}");
    }

    #[test]
    fn wrong_gradient_detected() {
        let x = vec![Tensor::vector(vec![1.0])];
        let g = vec![Tensor::vector(vec![3.0])];
        let r = check_gradients(&x, &g, &[(0, 0)], DEFAULT_STEP, |xs| (xs[0].data()[0].powi(2), 0));
        assert!(!r.passed(1e-4, 1));
    }

    #[test]
    fn signature_change_is_skipped() {
        let x = vec![Tensor::vector(vec![0.0])];
        let g = vec![Tensor::vector(vec![1.0])];
        let r = check_gradients(&x, &g, &[(0, 0)], DEFAULT_STEP, |xs| {
            let v = xs[0].data()[0];
            (v.abs(), u64::from(v > 0.0))
        });
        assert_eq!(r.skipped, 1);
        assert!(r.samples.is_empty());
    }
}
