//! Variance schedules for the forward corruption process.

use serde::{Deserialize, Serialize};

/// Per-step noise scales `beta_1..beta_K` and cumulative products
/// `alpha_bar_k = prod_{l<=k} (1 - beta_l)` with `alpha_bar_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl VarianceSchedule {
    /// Cosine schedule: `alpha_bar(k) = g(k)/g(0)` with
    /// `g(k) = cos^2(((k/K + s)/(1 + s)) * pi/2)`, `s = 0.008`, betas
    /// clipped to at most 0.999 and `alpha_bar` rebuilt from the clipped
    /// betas so the cumulative-product invariant holds exactly.
    pub fn cosine(steps: usize) -> Self {
        assert!(steps >= 1, "schedule needs at least one step");
        let s = 0.008;
        let g = |k: f64| {
            let x = ((k / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let g0 = g(0.0);
        let mut betas = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for k in 1..=steps {
            let raw = g(k as f64) / g0;
            let beta = (1.0 - raw / prev).min(0.999);
            betas.push(beta);
            prev = raw;
        }
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        assert!(betas.iter().all(|b| *b > 0.0 && *b < 1.0), "betas must lie in (0, 1)");
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Self { betas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_k` for `k` in `1..=K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    /// `alpha_bar_k` for `k` in `0..=K`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Coefficients `(c0, ck)` of the clean-sample posterior mean
    /// `mu = c0 * x0_hat + ck * x_k` for the reverse step `k -> k-1`.
    pub fn posterior_coeffs(&self, k: usize) -> (f64, f64) {
        let beta = self.beta(k);
        let ab_k = self.alpha_bar(k);
        let ab_prev = self.alpha_bar(k - 1);
        let denom = 1.0 - ab_k;
        (ab_prev.sqrt() * beta / denom, (1.0 - beta).sqrt() * (1.0 - ab_prev) / denom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_starts_at_one() {
        let s = VarianceSchedule::cosine(100);
        assert_abs_diff_eq!(s.alpha_bar(0), 1.0);
        // Early alpha_bar stays close to 1.
        assert!(s.alpha_bar(1) > 0.99);
    }

    #[test]
    fn cosine_end_is_heavily_corrupted() {
        let s = VarianceSchedule::cosine(100);
        assert!(s.alpha_bar(100) < 0.01, "alpha_bar_K = {}", s.alpha_bar(100));
    }

    #[test]
    fn betas_lie_in_range() {
        let s = VarianceSchedule::cosine(100);
        for k in 1..=100 {
            let b = s.beta(k);
            assert!(b > 0.0 && b <= 0.999, "beta_{k} = {b}");
        }
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = VarianceSchedule::cosine(100);
        for k in 1..=100 {
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
        }
    }

    #[test]
    fn alpha_bar_is_cumulative_product() {
        let s = VarianceSchedule::cosine(50);
        let mut prod = 1.0;
        for k in 1..=50 {
            prod *= 1.0 - s.beta(k);
            assert_abs_diff_eq!(s.alpha_bar(k), prod, epsilon = 1e-15);
        }
    }

    #[test]
    fn posterior_coeffs_sum_to_one_when_beta_small() {
        let s = VarianceSchedule::cosine(100);
        // k = 1 is exact: mu = x0_hat.
        let (c0, ck) = s.posterior_coeffs(1);
        assert_abs_diff_eq!(c0, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ck, 0.0, epsilon = 1e-12);
        // Early steps: coefficients nearly affine, so x0_hat = x_k keeps
        // the mean in place.
        for k in 2..30 {
            let (c0, ck) = s.posterior_coeffs(k);
            assert!((c0 + ck - 1.0).abs() < 1e-3, "k={k}: {}", c0 + ck);
        }
    }
}
