//! Central-difference verification of analytic gradients.
//!
//! Runs in `f64`: the central difference has truncation error O(h^2) and
//! cancellation error O(eps/h), so with h = 1e-4 both sit far below the 1e-4
//! relative tolerance used by the test suite. Shared by the integration tests
//! and the CLI selftest.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    /// Base perturbation; scaled up by |x| for large entries.
    pub step: f64,
    pub rel_tol: f64,
    /// Both gradients below this magnitude count as matching zero.
    pub abs_floor: f64,
    /// Entries sampled per tensor (all of them if the tensor is smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { step: 1e-4, rel_tol: 1e-4, abs_floor: 1e-6, samples_per_tensor: 24, seed: 0x5eed }
    }
}

#[derive(Debug)]
pub struct FdFailure {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<FdFailure>,
}

impl FdReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares `analytic[t][i]` against a central difference of `eval` for a
/// random sample of entries of each input tensor. `eval` must be a pure
/// function of the inputs returning the scalar loss.
pub fn fd_check(
    cfg: &FdConfig,
    inputs: &[Tensor<f64>],
    analytic: &[&Tensor<f64>],
    mut eval: impl FnMut(&[Tensor<f64>]) -> f64,
) -> FdReport {
    assert_eq!(inputs.len(), analytic.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = FdReport { checked: 0, max_rel_err: 0.0, failures: Vec::new() };

    for t in 0..inputs.len() {
        assert_eq!(inputs[t].shape(), analytic[t].shape(), "gradient shape mismatch on tensor {t}");
        let numel = inputs[t].numel();
        let picks: Vec<usize> = if numel <= cfg.samples_per_tensor {
            (0..numel).collect()
        } else {
            rand::seq::index::sample(&mut rng, numel, cfg.samples_per_tensor).into_vec()
        };
        for i in picks {
            let x0 = inputs[t].data()[i];
            let h = cfg.step * x0.abs().max(1.0);

            work[t].data_mut()[i] = x0 + h;
            let up = eval(&work);
            work[t].data_mut()[i] = x0 - h;
            let down = eval(&work);
            work[t].data_mut()[i] = x0;

            let numeric = (up - down) / (2.0 * h);
            let ana = analytic[t].data()[i];
            let denom = numeric.abs().max(ana.abs());
            let rel = if denom < cfg.abs_floor { 0.0 } else { (numeric - ana).abs() / denom };
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > cfg.rel_tol || !numeric.is_finite() || !ana.is_finite() {
                report.failures.push(FdFailure { tensor: t, index: i, analytic: ana, numeric, rel_err: rel });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // f(x) = sum(x^2): true gradient is 2x; feed it 3x and expect failures.
        let x = Tensor::<f64>::from_fn(&[1, 1, 2, 3], |i| 0.5 + i as f64);
        let wrong = x.map(|v| 3.0 * v);
        let report = fd_check(&FdConfig::default(), &[x], &[&wrong], |inp| {
            inp[0].data().iter().map(|v| v * v).sum()
        });
        assert!(!report.ok());
        assert_eq!(report.failures.len(), report.checked);
    }

    #[test]
    fn accepts_the_true_gradient() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 2, 3], |i| 0.5 + i as f64);
        let right = x.map(|v| 2.0 * v);
        let report = fd_check(&FdConfig::default(), &[x], &[&right], |inp| {
            inp[0].data().iter().map(|v| v * v).sum()
        });
        assert!(report.ok(), "max rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn zero_gradient_against_zero_numeric_passes_via_floor() {
        // Constant function: both sides are ~0; the floor keeps 0/0 out.
        let x = Tensor::<f64>::from_fn(&[1, 1, 1, 4], |i| i as f64);
        let zero = Tensor::<f64>::zeros(&[1, 1, 1, 4]);
        let report = fd_check(&FdConfig::default(), &[x], &[&zero], |_| 42.0);
        assert!(report.ok());
    }
}
