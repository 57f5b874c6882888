//! Analytic time and space model of the exact and approximate non-local
//! stages. `N` is the pixel count, `C` the channel count, `k` the candidate
//! blocks per target block and `p` the pooling size.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ComplexityEstimate {
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub p: usize,
    /// Exact method: `2N²C`.
    pub psi_time: f64,
    /// Approximate method: `(N/p²)²C + 2kNCp²`.
    pub phi_time: f64,
    /// Exact method: `2N²`.
    pub psi_space: f64,
    /// Approximate method: `(N/p²)² + kN/p² + 2kNp²`.
    pub phi_space: f64,
    /// `φ_time / ψ_time`.
    pub ratio: f64,
    /// Real-valued minimiser of the time ratio, `(N/k)^{1/6}`.
    pub p_optimal: f64,
    /// `1.5 (k/N)^{2/3}`, the ratio at `p_optimal`.
    pub ratio_min: f64,
}

impl ComplexityEstimate {
    pub fn new(n: usize, c: usize, k: usize, p: usize) -> Result<Self> {
        if n == 0 || c == 0 || k == 0 || p == 0 {
            return Err(Error::invalid(
                "complexity_estimate",
                "N, C, k and p must all be positive",
            ));
        }
        if p * p > n {
            return Err(Error::invalid(
                "complexity_estimate",
                format!("p² = {} exceeds N = {n}", p * p),
            ));
        }
        let (nf, cf, kf, pf) = (n as f64, c as f64, k as f64, p as f64);
        let p2 = pf * pf;
        let blocks = nf / p2;
        let psi_time = 2.0 * nf * nf * cf;
        let phi_time = blocks * blocks * cf + 2.0 * kf * nf * cf * p2;
        Ok(ComplexityEstimate {
            n,
            c,
            k,
            p,
            psi_time,
            phi_time,
            psi_space: 2.0 * nf * nf,
            phi_space: blocks * blocks + kf * nf / p2 + 2.0 * kf * nf * p2,
            ratio: phi_time / psi_time,
            p_optimal: (nf / kf).powf(1.0 / 6.0),
            ratio_min: 1.5 * (kf / nf).powf(2.0 / 3.0),
        })
    }

    pub fn space_ratio(&self) -> f64 {
        self.phi_space / self.psi_space
    }
}

/// Closed form of the time ratio at a real-valued `p`: `1/(2p⁴) + kp²/N`.
pub fn time_ratio(n: f64, k: f64, p: f64) -> f64 {
    1.0 / (2.0 * p.powi(4)) + k * p * p / n
}

/// Integer `p` in `1..=⌊√N⌋` minimising [`time_ratio`], with its value.
pub fn best_integer_p(n: usize, k: usize) -> (usize, f64) {
    let p_max = ((n as f64).sqrt() as usize).max(1);
    (1..=p_max)
        .map(|p| (p, time_ratio(n as f64, k as f64, p as f64)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least p = 1")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hd_ratio() {
        let e = ComplexityEstimate::new(1920 * 1080, 64, 4, 10).unwrap();
        // 1/(2·10⁴) + 400/2073600
        assert!((e.ratio - 2.4290123e-4).abs() < 1e-9);
        assert!((e.ratio - time_ratio(2073600.0, 4.0, 10.0)).abs() < 1e-15);
    }

    #[test]
    fn no_savings_boundary() {
        // p = 1 and kp² = N
        let n = 64;
        let e = ComplexityEstimate::new(n, 3, n, 1).unwrap();
        assert!((e.ratio - 1.5).abs() < 1e-12);
    }

    #[test]
    fn optimum_for_180_square() {
        let e = ComplexityEstimate::new(32400, 16, 4, 4).unwrap();
        assert!((e.p_optimal - 8100f64.powf(1.0 / 6.0)).abs() < 1e-12);
        assert!((e.p_optimal - 4.4814).abs() < 1e-3);
        assert!((e.ratio_min - 3.719072e-3).abs() < 1e-8);
        // the closed-form minimum is the ratio at the stationary point
        let at_opt = time_ratio(32400.0, 4.0, e.p_optimal);
        assert!((at_opt - e.ratio_min).abs() < 1e-9);
        let (p, r) = best_integer_p(32400, 4);
        assert!((p as f64 - e.p_optimal).abs() <= 1.0);
        assert!(r >= e.ratio_min && (r - e.ratio_min) / e.ratio_min < 0.1);
    }

    #[test]
    fn space_rows() {
        let e = ComplexityEstimate::new(14400, 16, 4, 10).unwrap();
        assert_eq!(e.psi_space, 2.0 * 14400.0 * 14400.0);
        assert_eq!(e.phi_space, 144.0 * 144.0 + 4.0 * 144.0 + 2.0 * 4.0 * 14400.0 * 100.0);
        assert!(e.space_ratio() < 0.1);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(ComplexityEstimate::new(0, 1, 1, 1).is_err());
        assert!(ComplexityEstimate::new(10, 1, 1, 4).is_err());
        assert!(ComplexityEstimate::new(100, 0, 1, 1).is_err());
    }
}
