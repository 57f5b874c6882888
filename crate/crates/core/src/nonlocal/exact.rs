//! Dense inter-frame distance, softmax similarity and state warping.
//!
//! Matrices are indexed `(i, j)` with `i` a pixel of the preceding feature
//! map and `j` a pixel of the current one. Similarity columns are
//! normalised over `i`.

use rayon::prelude::*;

use super::OpCounter;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major real matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn column_sum(&self, j: usize) -> f64 {
        (0..self.rows).map(|i| self.get(i, j)).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `D(i, j)`: Euclidean channel-norm between preceding pixel `i` and current
/// pixel `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseDistance(pub Matrix);

impl DenseDistance {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn n_prev(&self) -> usize {
        self.0.rows
    }

    pub fn n_cur(&self) -> usize {
        self.0.cols
    }
}

/// Column-stochastic similarity `S(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSimilarity {
    matrix: Matrix,
    beta: f64,
}

impl DenseSimilarity {
    /// Wraps a matrix whose columns are already normalised (e.g. a
    /// permutation matrix).
    pub fn from_matrix(matrix: Matrix, beta: f64) -> Result<Self> {
        for j in 0..matrix.cols {
            let s = matrix.column_sum(j);
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(
                    "dense_similarity",
                    format!("column {j} sums to {s}"),
                ));
            }
        }
        Ok(DenseSimilarity { matrix, beta })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

fn check_pair(prev: &Tensor, cur: &Tensor, op: &'static str) -> Result<()> {
    if prev.channels() != cur.channels() {
        return Err(Error::shape(
            op,
            format!("{} vs {} channels", prev.channels(), cur.channels()),
        ));
    }
    if prev.pixels() == 0 || cur.pixels() == 0 {
        return Err(Error::invalid(op, "empty feature map"));
    }
    Ok(())
}

/// Reference distance: a direct loop over every pixel pair and channel.
pub fn pairwise_distance_naive(prev: &Tensor, cur: &Tensor) -> Result<DenseDistance> {
    check_pair(prev, cur, "pairwise_distance_naive")?;
    prev.ensure_same_shape(cur, "pairwise_distance_naive")?;
    let (np, nc) = (prev.pixels(), cur.pixels());
    let mut d = Matrix::zeros(np, nc);
    for i in 0..np {
        for j in 0..nc {
            let mut acc = 0.0;
            for c in 0..prev.channels() {
                let diff = prev.plane(c)[i] - cur.plane(c)[j];
                acc += diff * diff;
            }
            d.data[i * nc + j] = acc.sqrt();
        }
    }
    Ok(DenseDistance(d))
}

/// Distance through the squared-norm expansion `‖a‖² + ‖b‖² − 2aᵀb`.
///
/// Cancellation can push tiny squared distances below zero; they are clamped
/// before the square root.
pub fn pairwise_distance_vectorized(prev: &Tensor, cur: &Tensor) -> Result<DenseDistance> {
    pairwise_distance_vectorized_counted(prev, cur, &mut OpCounter::default())
}

pub(crate) fn pairwise_distance_vectorized_counted(
    prev: &Tensor,
    cur: &Tensor,
    counter: &mut OpCounter,
) -> Result<DenseDistance> {
    check_pair(prev, cur, "pairwise_distance_vectorized")?;
    prev.ensure_same_shape(cur, "pairwise_distance_vectorized")?;
    let (np, nc, ch) = (prev.pixels(), cur.pixels(), prev.channels());
    let norms_prev = squared_norms(prev);
    let norms_cur = squared_norms(cur);
    let mut cross = Matrix::zeros(np, nc);
    for c in 0..ch {
        let a = prev.plane(c);
        let b = cur.plane(c);
        for (i, &ai) in a.iter().enumerate() {
            let row = &mut cross.data[i * nc..(i + 1) * nc];
            for (r, &bj) in row.iter_mut().zip(b) {
                *r += ai * bj;
            }
        }
    }
    for i in 0..np {
        let row = &mut cross.data[i * nc..(i + 1) * nc];
        for (j, v) in row.iter_mut().enumerate() {
            *v = (norms_prev[i] + norms_cur[j] - 2.0 * *v).max(0.0).sqrt();
        }
    }
    counter.distance_norms += ((np + nc) * ch) as u64;
    counter.distance += (np * nc * ch) as u64;
    Ok(DenseDistance(cross))
}

pub(crate) fn squared_norms(t: &Tensor) -> Vec<f64> {
    let mut norms = vec![0.0; t.pixels()];
    for c in 0..t.channels() {
        for (n, &v) in norms.iter_mut().zip(t.plane(c)) {
            *n += v * v;
        }
    }
    norms
}

pub(crate) fn check_beta(beta: f64, op: &'static str) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("beta must be positive, got {beta}")))
    }
}

/// Softmax of `−D/β` down each column.
pub fn similarity_from_distance(d: &DenseDistance, beta: f64) -> Result<DenseSimilarity> {
    check_beta(beta, "similarity_from_distance")?;
    let m = &d.0;
    let (rows, cols) = (m.rows, m.cols);
    let mut s = Matrix::zeros(rows, cols);
    let mut col = vec![0.0; rows];
    for j in 0..cols {
        let mut min = f64::INFINITY;
        for i in 0..rows {
            col[i] = m.data[i * cols + j];
            min = min.min(col[i]);
        }
        let mut total = 0.0;
        for v in col.iter_mut() {
            *v = (-(*v - min) / beta).exp();
            total += *v;
        }
        for (i, v) in col.iter().enumerate() {
            s.data[i * cols + j] = v / total;
        }
    }
    Ok(DenseSimilarity { matrix: s, beta })
}

/// `warped(·, j) = Σ_i state(·, i) · S(i, j)`.
pub fn nl_warp(state: &Tensor, s: &DenseSimilarity) -> Result<Tensor> {
    nl_warp_matrix(state, &s.matrix)
}

pub(crate) fn nl_warp_matrix(state: &Tensor, s: &Matrix) -> Result<Tensor> {
    if state.pixels() != s.rows || s.rows != s.cols {
        return Err(Error::shape(
            "nl_warp",
            format!(
                "state has {} pixels, similarity is {}x{}",
                state.pixels(),
                s.rows,
                s.cols
            ),
        ));
    }
    let n = s.cols;
    let mut out = Tensor::zeros(state.channels(), state.height(), state.width());
    for c in 0..state.channels() {
        let src = state.plane(c);
        let dst = out.plane_mut(c);
        for (i, &v) in src.iter().enumerate() {
            let row = &s.data[i * n..(i + 1) * n];
            for (o, &w) in dst.iter_mut().zip(row) {
                *o += v * w;
            }
        }
    }
    Ok(out)
}

/// Exact distance, similarity and warp fused per target pixel, without
/// materialising the `N × N` matrices.
///
/// Produces the same warped states as
/// `nl_warp(state, similarity_from_distance(pairwise_distance_naive(..)))`
/// in `O(N)` working memory per target pixel.
pub fn exact_warp_streaming(
    prev: &Tensor,
    cur: &Tensor,
    states: &[&Tensor],
    beta: f64,
    counter: &mut OpCounter,
) -> Result<Vec<Tensor>> {
    check_pair(prev, cur, "exact_warp_streaming")?;
    check_beta(beta, "exact_warp_streaming")?;
    let n = prev.pixels();
    for s in states {
        if s.pixels() != n || cur.pixels() != n {
            return Err(Error::shape(
                "exact_warp_streaming",
                format!("state has {} pixels, features have {n}", s.pixels()),
            ));
        }
    }
    let ch = prev.channels();
    let state_ch: usize = states.iter().map(|s| s.channels()).sum();
    let planes_prev: Vec<&[f64]> = (0..ch).map(|c| prev.plane(c)).collect();
    let state_planes: Vec<&[f64]> = states
        .iter()
        .flat_map(|s| (0..s.channels()).map(|c| s.plane(c)))
        .collect();
    let cur_t = to_pixel_major(cur);

    // pixel-major output, one chunk of `state_ch` values per target pixel
    let mut out = vec![0.0; n * state_ch];
    out.par_chunks_mut(state_ch.max(1))
        .enumerate()
        .for_each_init(
            || vec![0.0; n],
            |weights, (j, dst)| {
                weights.fill(0.0);
                let b = &cur_t[j * ch..(j + 1) * ch];
                for (c, plane) in planes_prev.iter().enumerate() {
                    let bc = b[c];
                    for (w, &a) in weights.iter_mut().zip(plane.iter()) {
                        let d = a - bc;
                        *w += d * d;
                    }
                }
                let mut min = f64::INFINITY;
                for w in weights.iter_mut() {
                    *w = w.sqrt();
                    min = min.min(*w);
                }
                let mut total = 0.0;
                for w in weights.iter_mut() {
                    *w = (-(*w - min) / beta).exp();
                    total += *w;
                }
                let inv = 1.0 / total;
                for (o, plane) in dst.iter_mut().zip(&state_planes) {
                    let acc: f64 = plane.iter().zip(weights.iter()).map(|(s, w)| s * w).sum();
                    *o = acc * inv;
                }
            },
        );
    counter.distance += (n * n * ch) as u64;
    counter.warp += (n * n * state_ch) as u64;

    let mut result = Vec::with_capacity(states.len());
    let mut offset = 0;
    for s in states {
        let mut t = Tensor::zeros(s.channels(), s.height(), s.width());
        for c in 0..s.channels() {
            let plane = t.plane_mut(c);
            for (j, v) in plane.iter_mut().enumerate() {
                *v = out[j * state_ch + offset + c];
            }
        }
        offset += s.channels();
        result.push(t);
    }
    Ok(result)
}

/// `(pixel, channel)` layout: the channels of one pixel are contiguous.
pub(crate) fn to_pixel_major(t: &Tensor) -> Vec<f64> {
    let (ch, n) = (t.channels(), t.pixels());
    let mut out = vec![0.0; n * ch];
    for c in 0..ch {
        for (i, &v) in t.plane(c).iter().enumerate() {
            out[i * ch + c] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(c: usize, h: usize, w: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(c, h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn naive_distance_hand_cases() {
        let d = pairwise_distance_naive(&t(1, 1, 2, &[1.0, 3.0]), &t(1, 1, 2, &[0.0, 1.0])).unwrap();
        assert_eq!(d.0.data(), &[1.0, 0.0, 3.0, 2.0]);
        let d = pairwise_distance_naive(&t(2, 1, 1, &[3.0, 4.0]), &t(2, 1, 1, &[0.0, 0.0])).unwrap();
        assert_eq!(d.0.data(), &[5.0]);
    }

    #[test]
    fn identical_frames_have_zero_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Tensor::random(3, 4, 4, -1.0, 1.0, &mut rng);
        let naive = pairwise_distance_naive(&f, &f).unwrap();
        let vec = pairwise_distance_vectorized(&f, &f).unwrap();
        for i in 0..16 {
            assert_eq!(naive.0.get(i, i), 0.0);
            assert!(vec.0.get(i, i) < 1e-7);
            assert!(!vec.0.get(i, i).is_nan());
        }
    }

    #[test]
    fn vectorized_matches_hand_case_and_clamps() {
        let d = pairwise_distance_vectorized(&t(1, 1, 2, &[1.0, 3.0]), &t(1, 1, 2, &[0.0, 1.0]))
            .unwrap();
        let expected = [1.0, 0.0, 3.0, 2.0];
        for (a, b) in d.0.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        // values whose expansion cancels badly
        let f = t(3, 1, 1, &[0.1 + 1e8, 0.3, 1e-9]);
        let d = pairwise_distance_vectorized(&f, &f).unwrap();
        assert!(d.0.get(0, 0) >= 0.0 && d.0.get(0, 0).is_finite());
    }

    #[test]
    fn distance_rejects_mismatch() {
        let a = Tensor::zeros(2, 2, 2);
        assert!(pairwise_distance_naive(&a, &Tensor::zeros(3, 2, 2)).is_err());
        assert!(pairwise_distance_naive(&a, &Tensor::zeros(2, 2, 3)).is_err());
        assert!(pairwise_distance_vectorized(&a, &Tensor::zeros(1, 2, 2)).is_err());
    }

    #[test]
    fn softmax_column_values() {
        let d = DenseDistance(Matrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap());
        let s = similarity_from_distance(&d, 1.0).unwrap();
        assert!((s.matrix().get(0, 0) - 0.8808).abs() < 1e-4);
        assert!((s.matrix().get(1, 0) - 0.1192).abs() < 1e-4);
        assert!(similarity_from_distance(&d, 0.0).is_err());
        assert!(similarity_from_distance(&d, -1.0).is_err());
    }

    #[test]
    fn softmax_uniform_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..3.0)).collect();
        let d = DenseDistance(Matrix::from_vec(5, 5, data).unwrap());
        let s = similarity_from_distance(&d, 1e12).unwrap();
        assert!(s.matrix().data().iter().all(|v| (v - 0.2).abs() < 1e-10));
        let z = DenseDistance(Matrix::zeros(4, 3));
        let s = similarity_from_distance(&z, 1.0).unwrap();
        assert!(s.matrix().data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn warp_hand_case_and_constant() {
        let s = DenseSimilarity::from_matrix(
            Matrix::from_vec(2, 2, vec![0.25, 0.5, 0.75, 0.5]).unwrap(),
            1.0,
        )
        .unwrap();
        let w = nl_warp(&t(1, 1, 2, &[2.0, 4.0]), &s).unwrap();
        assert_eq!(w.data(), &[3.5, 3.0]);
        let c = Tensor::filled(2, 1, 2, 0.7);
        let w = nl_warp(&c, &s).unwrap();
        assert!(w.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
        assert!(nl_warp(&Tensor::zeros(1, 1, 3), &s).is_err());
    }

    #[test]
    fn permutation_warp_reorders() {
        // S(i, j) = 1 when i = perm[j]
        let perm = [2usize, 0, 3, 1];
        let mut m = Matrix::zeros(4, 4);
        for (j, &i) in perm.iter().enumerate() {
            m.set(i, j, 1.0);
        }
        let s = DenseSimilarity::from_matrix(m, 1.0).unwrap();
        let state = t(1, 2, 2, &[10.0, 20.0, 30.0, 40.0]);
        let w = nl_warp(&state, &s).unwrap();
        assert_eq!(w.data(), &[30.0, 10.0, 40.0, 20.0]);
    }

    #[test]
    fn non_stochastic_matrix_rejected() {
        assert!(DenseSimilarity::from_matrix(Matrix::zeros(2, 2), 1.0).is_err());
    }

    #[test]
    fn streaming_matches_dense_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let prev = Tensor::random(4, 5, 6, -1.0, 1.0, &mut rng);
        let cur = Tensor::random(4, 5, 6, -1.0, 1.0, &mut rng);
        let h = Tensor::random(3, 5, 6, -1.0, 1.0, &mut rng);
        let c = Tensor::random(2, 5, 6, -2.0, 2.0, &mut rng);
        let s = similarity_from_distance(&pairwise_distance_naive(&prev, &cur).unwrap(), 0.7)
            .unwrap();
        let mut counter = OpCounter::default();
        let out = exact_warp_streaming(&prev, &cur, &[&h, &c], 0.7, &mut counter).unwrap();
        assert!(out[0].max_abs_diff(&nl_warp(&h, &s).unwrap()) < 1e-12);
        assert!(out[1].max_abs_diff(&nl_warp(&c, &s).unwrap()) < 1e-12);
        assert_eq!(counter.distance, 30 * 30 * 4);
        assert_eq!(counter.warp, 30 * 30 * 5);
    }
}
