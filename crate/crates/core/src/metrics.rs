//! Frame quality metrics and per-sequence fluctuation statistics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `10·log10(peak² / MSE)`. Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr", format!("peak {peak} must be positive")));
    }
    if a.data().is_empty() {
        return Err(Error::invalid("psnr", "empty images"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable Gaussian filter over every valid window position.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&img[y * w + x..]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Local SSIM from windowed moments.
pub(crate) fn ssim_from_moments(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean SSIM over all valid 11×11 Gaussian windows of two single-channel
/// images with dynamic range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    if a.channels() != 1 {
        return Err(Error::invalid(
            "ssim",
            format!("expected one channel, found {}", a.channels()),
        ));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let taps = gaussian_taps();
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<f64>>();
    let mx = filter_valid(x, h, w, &taps);
    let my = filter_valid(y, h, w, &taps);
    let xx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &taps);
    let yy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &taps);
    let xy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &taps);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            ssim_from_moments(ux, uy, xx[i] - ux * ux, yy[i] - uy * uy, xy[i] - ux * uy)
        })
        .sum();
    Ok(total / n as f64)
}

/// Per-frame metric values in frame order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityCurve {
    values: Vec<f64>,
}

impl QualityCurve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("quality_curve", "empty curve"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "quality_curve",
                format!("frame {i} has non-finite value {}", values[i]),
            ));
        }
        Ok(QualityCurve { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Fluctuation {
    /// Population standard deviation.
    pub std: f64,
    /// Mean peak-to-valley drop; `None` when undefined for the curve.
    pub pvd: Option<f64>,
}

/// STD and PVD of a quality curve.
///
/// Peaks are strict interior local maxima. Valleys are strict interior local
/// minima, plus either endpoint when it lies below its only neighbour. Each
/// peak is paired with its nearest valley on each side that has one, and PVD
/// is the mean `peak − valley` over all pairs. Curves shorter than three
/// frames have no PVD. A constant curve has PVD 0; any other curve without
/// a single pair has no PVD.
pub fn fluctuation(curve: &QualityCurve) -> Fluctuation {
    let v = curve.values();
    let mean = curve.mean();
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt();
    Fluctuation {
        std,
        pvd: peak_valley_difference(v),
    }
}

fn peak_valley_difference(v: &[f64]) -> Option<f64> {
    let n = v.len();
    if n < 3 {
        return None;
    }
    let is_peak = |i: usize| i > 0 && i + 1 < n && v[i] > v[i - 1] && v[i] > v[i + 1];
    let is_valley = |i: usize| match i {
        0 => v[0] < v[1],
        i if i + 1 == n => v[i] < v[i - 1],
        i => v[i] < v[i - 1] && v[i] < v[i + 1],
    };
    let (mut sum, mut pairs) = (0.0, 0usize);
    for p in (1..n - 1).filter(|&i| is_peak(i)) {
        if let Some(q) = (0..p).rev().find(|&i| is_valley(i)) {
            sum += v[p] - v[q];
            pairs += 1;
        }
        if let Some(q) = (p + 1..n).find(|&i| is_valley(i)) {
            sum += v[p] - v[q];
            pairs += 1;
        }
    }
    if pairs > 0 {
        Some(sum / pairs as f64)
    } else if v.iter().all(|&x| x == v[0]) {
        Some(0.0)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 2-D window loop with explicit Gaussian weights.
    fn ssim_reference(a: &Tensor, b: &Tensor) -> f64 {
        let r = (SSIM_WINDOW / 2) as f64;
        let mut g = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
        let mut s = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, w) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - r, j as f64 - r);
                *w = (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
                s += *w;
            }
        }
        let (h, w) = (a.height(), a.width());
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=h - SSIM_WINDOW {
            for x in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = g[i][j] / s;
                        let (p, q) = (a.get(0, y + i, x + j), b.get(0, y + i, x + j));
                        mx += wt * p;
                        my += wt * q;
                        sxx += wt * p * p;
                        syy += wt * q * q;
                        sxy += wt * p * q;
                    }
                }
                total += ssim_from_moments(mx, my, sxx - mx * mx, syy - my * my, sxy - mx * my);
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_values() {
        let a = Tensor::zeros(1, 4, 4);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = Tensor::filled(1, 4, 4, 10.0);
        assert!((psnr(&a, &b, 255.0).unwrap() - 28.1308).abs() < 0.01);
        assert!(psnr(&a, &Tensor::zeros(1, 4, 3), 1.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn psnr_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::random(1, 8, 8, 0.0, 1.0, &mut rng);
        let b = Tensor::random(1, 8, 8, 0.0, 1.0, &mut rng);
        let p1 = psnr(&a, &b, 1.0).unwrap();
        let p2 = psnr(&a.scale(255.0), &b.scale(255.0), 255.0).unwrap();
        assert!((p1 - p2).abs() < 1e-10);
    }

    #[test]
    fn ssim_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::random(1, 16, 20, 0.0, 1.0, &mut rng);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let c1 = Tensor::filled(1, 12, 12, 0.3);
        let c2 = Tensor::filled(1, 12, 12, 0.6);
        let s = ssim(&c1, &c2).unwrap();
        let lum = (2.0 * 0.18 + 1e-4) / (0.09 + 0.36 + 1e-4);
        assert!(s < 1.0 && (s - lum).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let a = Tensor::random(1, 17, 14, 0.0, 1.0, &mut rng);
            let b = a.zip_with(&Tensor::random(1, 17, 14, -0.2, 0.2, &mut rng), |x, y| x + y).unwrap();
            let s = ssim(&a, &b).unwrap();
            assert!((s - ssim_reference(&a, &b)).abs() < 1e-8);
            assert_eq!(s, ssim(&b, &a).unwrap());
        }
    }

    #[test]
    fn ssim_errors() {
        let a = Tensor::zeros(1, 10, 20);
        assert!(ssim(&a, &a).is_err());
        let c = Tensor::zeros(2, 12, 12);
        assert!(ssim(&c, &c).is_err());
    }

    #[test]
    fn fluctuation_examples() {
        let f = fluctuation(&QualityCurve::new(vec![30.0, 32.0, 30.0, 33.0, 31.0]).unwrap());
        assert!((f.pvd.unwrap() - 2.25).abs() < 1e-12);
        let f = fluctuation(&QualityCurve::new(vec![5.0; 6]).unwrap());
        assert_eq!((f.std, f.pvd), (0.0, Some(0.0)));
        let f = fluctuation(&QualityCurve::new(vec![1.0, 2.0, 3.0]).unwrap());
        assert!((f.std - 0.816496580927726).abs() < 1e-12);
        assert_eq!(f.pvd, None);
        assert_eq!(fluctuation(&QualityCurve::new(vec![1.0, 3.0]).unwrap()).pvd, None);
    }

    #[test]
    fn curve_validation() {
        assert!(QualityCurve::new(vec![]).is_err());
        assert!(QualityCurve::new(vec![1.0, f64::INFINITY]).is_err());
    }
}
