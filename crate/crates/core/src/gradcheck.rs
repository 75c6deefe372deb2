//! Central finite-difference checks of analytic gradients.
//!
//! Coordinates are sampled at random. A coordinate whose forward and backward
//! one-sided slopes disagree by more than `kink_tolerance` has a
//! non-differentiable point (an `|·|` kink) inside the stencil; it is skipped
//! and another one is drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub samples: usize,
    pub seed: u64,
    /// Relative disagreement of one-sided slopes that marks a kink.
    pub kink_tolerance: f64,
    /// Below this magnitude both gradients count as zero.
    pub abs_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-4, samples: 100, seed: 0, kink_tolerance: 1e-2, abs_floor: 1e-9 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    /// `(flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < abs_floor {
        0.0
    } else {
        diff / scale
    }
}

/// `eval` returns `(f(x), ∇f(x))`; the analytic gradient is taken once at `x0`.
pub fn check_gradient<F>(x0: &Tensor, eval: F, cfg: &GradCheck) -> GradCheckReport
where
    F: Fn(&Tensor) -> (f64, Tensor),
{
    let (f0, analytic) = eval(x0);
    assert_eq!(analytic.shape(), x0.shape(), "gradient shape mismatch");
    let f = |x: &Tensor| eval(x).0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let max_attempts = cfg.samples * 20;
    let mut attempts = 0;
    while report.checked < cfg.samples.min(x0.len()) && attempts < max_attempts {
        attempts += 1;
        let i = rng.random_range(0..x0.len());
        let mut xp = x0.clone();
        xp.data_mut()[i] += cfg.step;
        let mut xm = x0.clone();
        xm.data_mut()[i] -= cfg.step;
        let (fp, fm) = (f(&xp), f(&xm));
        let forward = (fp - f0) / cfg.step;
        let backward = (f0 - fm) / cfg.step;
        if relative_error(forward, backward, cfg.abs_floor.max(1e-7)) > cfg.kink_tolerance {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * cfg.step);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric, cfg.abs_floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((i, a, numeric));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_exact_gradient_and_rejects_wrong_one() {
        let x0 = Tensor::from_fn([1, 1, 3, 3], |[_, _, y, x]| 0.3 * y as f64 - 0.2 * x as f64 + 0.15);
        let cfg = GradCheck { samples: 9, ..Default::default() };
        let good = check_gradient(&x0, |x| (x.data().iter().map(|v| v.powi(3)).sum(), x.map(|v| 3.0 * v * v)), &cfg);
        assert!(good.passed(1e-4), "{good:?}");
        let bad = check_gradient(&x0, |x| (x.data().iter().map(|v| v.powi(3)).sum(), x.map(|v| 2.0 * v * v)), &cfg);
        assert!(!bad.passed(1e-3));
    }

    #[test]
    fn skips_coordinates_straddling_a_kink() {
        let x0 = Tensor::new([1, 1, 1, 2], vec![0.0, 0.5]).unwrap();
        let cfg = GradCheck { samples: 1, ..Default::default() };
        let r = check_gradient(&x0, |x| (x.data().iter().map(|v| v.abs()).sum(), x.map(f64::signum)), &cfg);
        assert_eq!(r.checked, 1);
        assert_eq!(r.worst.unwrap().0, 1);
    }
}
