//! Two-stage approximation of the non-local similarity.
//!
//! Stage 1 average-pools both feature maps into `p × p` blocks, measures
//! block-to-block distances and keeps, for every block of the current map,
//! the `k` nearest blocks of the preceding map. Stage 2 computes exact
//! pixel distances only against the `k·p²` pixels of those blocks and runs the
//! softmax over them; every other similarity is an implicit zero.

use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::exact::{
    check_beta, pairwise_distance_vectorized_counted, squared_norms, to_pixel_major,
    DenseDistance, DenseSimilarity, Matrix,
};
use super::OpCounter;
use crate::error::{Error, Result};
use crate::tensor::{avg_pool, Tensor};

/// Largest pixel count for which the exact path may materialise `N × N`
/// matrices.
pub const DEFAULT_DENSE_PIXEL_LIMIT: usize = 64 * 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonLocalConfig {
    /// Candidate blocks kept per target block.
    pub k: usize,
    /// Pooling kernel (block side) in pixels.
    pub p: usize,
    /// Softmax temperature.
    pub beta: f64,
    #[serde(default = "default_dense_limit")]
    pub dense_pixel_limit: usize,
}

fn default_dense_limit() -> usize {
    DEFAULT_DENSE_PIXEL_LIMIT
}

impl Default for NonLocalConfig {
    fn default() -> Self {
        NonLocalConfig {
            k: 4,
            p: 10,
            beta: 1.0,
            dense_pixel_limit: DEFAULT_DENSE_PIXEL_LIMIT,
        }
    }
}

impl NonLocalConfig {
    pub fn new(k: usize, p: usize, beta: f64) -> Self {
        NonLocalConfig {
            k,
            p,
            beta,
            ..Default::default()
        }
    }

    /// Checks the configuration against a `height × width` feature map.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.k == 0 || self.p == 0 {
            return Err(Error::invalid("non_local_config", "k and p must be >= 1"));
        }
        check_beta(self.beta, "non_local_config")?;
        let blocks = BlockGrid::new(height, width, self.p)?.blocks();
        if self.k > blocks {
            return Err(Error::invalid(
                "non_local_config",
                format!("k = {} exceeds the {blocks} blocks of a {height}x{width} map", self.k),
            ));
        }
        Ok(())
    }

    /// Whether `n` pixels fit under the dense-path memory limit.
    pub fn check_dense(&self, n: usize) -> Result<()> {
        if n > self.dense_pixel_limit {
            Err(Error::MemoryGuard {
                pixels: n,
                required_bytes: dense_bytes(n),
                limit_pixels: self.dense_pixel_limit,
            })
        } else {
            Ok(())
        }
    }
}

/// Bytes for a dense distance plus a dense similarity matrix of `n` pixels.
pub fn dense_bytes(n: usize) -> u128 {
    2 * (n as u128) * (n as u128) * std::mem::size_of::<f64>() as u128
}

/// Block tiling of a `height × width` map into `p × p` blocks; trailing
/// blocks are clipped to the valid area.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGrid {
    pub height: usize,
    pub width: usize,
    pub p: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl BlockGrid {
    pub fn new(height: usize, width: usize, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("block_grid", "p must be >= 1"));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid("block_grid", "empty feature map"));
        }
        Ok(BlockGrid {
            height,
            width,
            p,
            grid_h: height.div_ceil(p),
            grid_w: width.div_ceil(p),
        })
    }

    pub fn blocks(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Pixel rows and columns covered by block `b`, clipped to the map.
    pub fn extent(&self, b: usize) -> (Range<usize>, Range<usize>) {
        let (by, bx) = (b / self.grid_w, b % self.grid_w);
        let y0 = by * self.p;
        let x0 = bx * self.p;
        (
            y0..(y0 + self.p).min(self.height),
            x0..(x0 + self.p).min(self.width),
        )
    }

    pub fn block_of(&self, pixel: usize) -> usize {
        let (y, x) = (pixel / self.width, pixel % self.width);
        (y / self.p) * self.grid_w + x / self.p
    }

    /// Number of valid pixels in block `b`.
    pub fn block_len(&self, b: usize) -> usize {
        let (rows, cols) = self.extent(b);
        rows.len() * cols.len()
    }
}

/// Pooled features `F^p` together with the block geometry they summarise.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSummary {
    pub grid: BlockGrid,
    pub features: Tensor,
}

impl BlockSummary {
    pub fn new(features: &Tensor, p: usize) -> Result<Self> {
        let grid = BlockGrid::new(features.height(), features.width(), p)?;
        Ok(BlockSummary {
            grid,
            features: avg_pool(features, p)?,
        })
    }
}

/// Stage-1 distances between pooled super-pixels (rows index preceding
/// blocks), with the geometry needed to expand candidates into pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDistance {
    pub grid: BlockGrid,
    pub distance: DenseDistance,
}

pub fn block_distance(prev: &BlockSummary, cur: &BlockSummary) -> Result<BlockDistance> {
    block_distance_counted(prev, cur, &mut OpCounter::default())
}

pub fn block_distance_counted(
    prev: &BlockSummary,
    cur: &BlockSummary,
    counter: &mut OpCounter,
) -> Result<BlockDistance> {
    if prev.grid != cur.grid {
        return Err(Error::shape(
            "block_distance",
            format!("block grids {:?} vs {:?}", prev.grid, cur.grid),
        ));
    }
    let mut inner = OpCounter::default();
    let distance = pairwise_distance_vectorized_counted(&prev.features, &cur.features, &mut inner)?;
    counter.block_norms += inner.distance_norms;
    counter.block_distance += inner.distance;
    Ok(BlockDistance {
        grid: prev.grid,
        distance,
    })
}

/// For every current-frame block, `k` preceding-frame blocks in ascending
/// distance order (ties by ascending block index).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateMap {
    grid: BlockGrid,
    k: usize,
    blocks: Vec<usize>,
}

impl CandidateMap {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn grid(&self) -> &BlockGrid {
        &self.grid
    }

    pub fn candidates(&self, target_block: usize) -> &[usize] {
        &self.blocks[target_block * self.k..(target_block + 1) * self.k]
    }

    pub fn target_blocks(&self) -> usize {
        self.blocks.len() / self.k
    }
}

pub fn topk_blocks(dp: &BlockDistance, k: usize) -> Result<CandidateMap> {
    let m = dp.distance.matrix();
    let n_src = m.rows();
    if k == 0 || k > n_src {
        return Err(Error::invalid(
            "topk_blocks",
            format!("k = {k} outside 1..={n_src}"),
        ));
    }
    let mut blocks = Vec::with_capacity(m.cols() * k);
    let mut order: Vec<usize> = Vec::with_capacity(n_src);
    for j in 0..m.cols() {
        order.clear();
        order.extend(0..n_src);
        let cmp = |a: &usize, b: &usize| m.get(*a, j).total_cmp(&m.get(*b, j)).then(a.cmp(b));
        if k < n_src {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut order[..k];
        head.sort_unstable_by(cmp);
        blocks.extend_from_slice(head);
    }
    Ok(CandidateMap {
        grid: dp.grid,
        k,
        blocks,
    })
}

/// Compressed-row sparsity pattern: for every target pixel the list of
/// source pixels it may draw from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsePattern {
    n_source: usize,
    offsets: Vec<usize>,
    sources: Vec<u32>,
}

impl SparsePattern {
    /// Expands a candidate map into pixel lists. Candidates of target pixel
    /// `j` are the pixels of its block's candidate blocks, block by block in
    /// candidate order, row-major inside each block.
    pub fn from_candidates(cand: &CandidateMap) -> Self {
        let grid = cand.grid;
        let n = grid.pixels();
        let block_pixels: Vec<Vec<u32>> = (0..grid.blocks())
            .map(|b| {
                let (rows, cols) = grid.extent(b);
                rows.flat_map(|y| cols.clone().map(move |x| (y * grid.width + x) as u32))
                    .collect()
            })
            .collect();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut sources = Vec::new();
        offsets.push(0);
        for j in 0..n {
            for &b in cand.candidates(grid.block_of(j)) {
                sources.extend_from_slice(&block_pixels[b]);
            }
            offsets.push(sources.len());
        }
        SparsePattern {
            n_source: n,
            offsets,
            sources,
        }
    }

    /// Every source pixel for every target pixel.
    pub fn full(n: usize) -> Self {
        SparsePattern {
            n_source: n,
            offsets: (0..=n).map(|j| j * n).collect(),
            sources: (0..n).flat_map(|_| 0..n as u32).collect(),
        }
    }

    pub fn n_source(&self) -> usize {
        self.n_source
    }

    pub fn n_target(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.sources.len()
    }

    pub fn row(&self, j: usize) -> Range<usize> {
        self.offsets[j]..self.offsets[j + 1]
    }

    pub fn sources(&self, j: usize) -> &[u32] {
        &self.sources[self.row(j)]
    }

    pub fn max_row_len(&self) -> usize {
        self.offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    /// Splits a value array laid out on this pattern into per-target rows.
    pub(crate) fn rows_mut<'a>(&self, values: &'a mut [f64]) -> Vec<&'a mut [f64]> {
        let mut rows = Vec::with_capacity(self.n_target());
        let mut rest = values;
        for w in self.offsets.windows(2) {
            let (head, tail) = rest.split_at_mut(w[1] - w[0]);
            rows.push(head);
            rest = tail;
        }
        rows
    }
}

/// Stage-2 distances `D̂(i, j)` stored on a sparsity pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDistance {
    pattern: Arc<SparsePattern>,
    values: Vec<f64>,
}

impl SparseDistance {
    pub(crate) fn from_parts(pattern: Arc<SparsePattern>, values: Vec<f64>) -> Self {
        SparseDistance { pattern, values }
    }

    pub fn pattern(&self) -> &Arc<SparsePattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Sparse similarity `Ŝ`: per target pixel, candidate source pixels with
/// softmax weights summing to one. Unstored entries are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSimilarity {
    pattern: Arc<SparsePattern>,
    weights: Vec<f64>,
    beta: f64,
}

impl SparseSimilarity {
    /// Builds a similarity from explicit weights; rows must be normalised.
    pub fn from_weights(pattern: Arc<SparsePattern>, weights: Vec<f64>, beta: f64) -> Result<Self> {
        if weights.len() != pattern.nnz() {
            return Err(Error::shape(
                "sparse_similarity",
                format!("{} weights for {} stored entries", weights.len(), pattern.nnz()),
            ));
        }
        for j in 0..pattern.n_target() {
            let row = &weights[pattern.row(j)];
            let s: f64 = row.iter().sum();
            if row.iter().any(|&w| w < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(
                    "sparse_similarity",
                    format!("target {j} weights sum to {s}"),
                ));
            }
        }
        Ok(SparseSimilarity {
            pattern,
            weights,
            beta,
        })
    }

    /// Wraps weights produced elsewhere on the same pattern without
    /// re-validating rows.
    pub(crate) fn from_parts(pattern: Arc<SparsePattern>, weights: Vec<f64>) -> Self {
        SparseSimilarity {
            pattern,
            weights,
            beta: f64::NAN,
        }
    }

    pub fn n(&self) -> usize {
        self.pattern.n_target()
    }

    pub fn pattern(&self) -> &Arc<SparsePattern> {
        &self.pattern
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `(source, weight)` pairs stored for target pixel `j`.
    pub fn row(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.pattern.row(j);
        self.pattern.sources[r.clone()]
            .iter()
            .map(|&s| s as usize)
            .zip(self.weights[r].iter().copied())
    }

    /// Materialises the full `N × N` column-stochastic matrix.
    pub fn to_dense(&self) -> DenseSimilarity {
        let n = self.pattern.n_source;
        let mut m = Matrix::zeros(n, self.n());
        for j in 0..self.n() {
            for (i, w) in self.row(j) {
                m.set(i, j, m.get(i, j) + w);
            }
        }
        DenseSimilarity::from_matrix(m, self.beta)
            .expect("stored rows are normalised by construction")
    }
}

fn check_features(prev: &Tensor, cur: &Tensor, pattern: &SparsePattern, op: &'static str) -> Result<()> {
    prev.ensure_same_shape(cur, op)?;
    if prev.pixels() != pattern.n_source || cur.pixels() != pattern.n_target() {
        return Err(Error::shape(
            op,
            format!(
                "features have {} pixels, pattern covers {}x{}",
                prev.pixels(),
                pattern.n_source,
                pattern.n_target()
            ),
        ));
    }
    Ok(())
}

/// Exact Euclidean distances for the stored entries of `pattern`, via the
/// squared-norm expansion restricted to those entries.
pub fn sparse_distance(
    prev: &Tensor,
    cur: &Tensor,
    pattern: &Arc<SparsePattern>,
) -> Result<SparseDistance> {
    sparse_distance_counted(prev, cur, pattern, &mut OpCounter::default())
}

pub fn sparse_distance_counted(
    prev: &Tensor,
    cur: &Tensor,
    pattern: &Arc<SparsePattern>,
    counter: &mut OpCounter,
) -> Result<SparseDistance> {
    check_features(prev, cur, pattern, "sparse_distance")?;
    let ch = prev.channels();
    let norms_prev = squared_norms(prev);
    let norms_cur = squared_norms(cur);
    let prev_t = to_pixel_major(prev);
    let cur_t = to_pixel_major(cur);
    let mut values = vec![0.0; pattern.nnz()];
    let rows = pattern.rows_mut(&mut values);
    rows.into_par_iter().enumerate().for_each(|(j, row)| {
        let b = &cur_t[j * ch..(j + 1) * ch];
        for (v, &i) in row.iter_mut().zip(pattern.sources(j)) {
            let i = i as usize;
            let a = &prev_t[i * ch..(i + 1) * ch];
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            *v = (norms_prev[i] + norms_cur[j] - 2.0 * dot).max(0.0).sqrt();
        }
    });
    counter.distance_norms += (2 * prev.pixels() * ch) as u64;
    counter.distance += (pattern.nnz() * ch) as u64;
    Ok(SparseDistance {
        pattern: Arc::clone(pattern),
        values,
    })
}

/// Softmax of `−D̂/β` over each target pixel's stored candidates.
pub fn sparse_softmax(d: &SparseDistance, beta: f64) -> Result<SparseSimilarity> {
    check_beta(beta, "sparse_softmax")?;
    let pattern = &d.pattern;
    let mut weights = d.values.clone();
    pattern.rows_mut(&mut weights).into_par_iter().for_each(|row| {
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        let mut total = 0.0;
        for w in row.iter_mut() {
            *w = (-(*w - min) / beta).exp();
            total += *w;
        }
        for w in row.iter_mut() {
            *w /= total;
        }
    });
    Ok(SparseSimilarity {
        pattern: Arc::clone(pattern),
        weights,
        beta,
    })
}

/// Stage 2: similarities of every target pixel against the pixels of its
/// block's candidate blocks.
pub fn sparse_similarity(
    prev: &Tensor,
    cur: &Tensor,
    cand: &CandidateMap,
    cfg: &NonLocalConfig,
) -> Result<SparseSimilarity> {
    sparse_similarity_counted(prev, cur, cand, cfg, &mut OpCounter::default())
}

pub fn sparse_similarity_counted(
    prev: &Tensor,
    cur: &Tensor,
    cand: &CandidateMap,
    cfg: &NonLocalConfig,
    counter: &mut OpCounter,
) -> Result<SparseSimilarity> {
    if cand.grid.height != cur.height() || cand.grid.width != cur.width() {
        return Err(Error::shape(
            "sparse_similarity",
            format!(
                "candidate blocks tile {}x{}, features are {}x{}",
                cand.grid.height,
                cand.grid.width,
                cur.height(),
                cur.width()
            ),
        ));
    }
    let pattern = Arc::new(SparsePattern::from_candidates(cand));
    let d = sparse_distance_counted(prev, cur, &pattern, counter)?;
    sparse_softmax(&d, cfg.beta)
}

/// `warped(·, j) = Σ_{i ∈ candidates(j)} state(·, i) · Ŝ(i, j)`.
pub fn sparse_nl_warp(state: &Tensor, s: &SparseSimilarity) -> Result<Tensor> {
    sparse_nl_warp_counted(state, s, &mut OpCounter::default())
}

pub fn sparse_nl_warp_counted(
    state: &Tensor,
    s: &SparseSimilarity,
    counter: &mut OpCounter,
) -> Result<Tensor> {
    let pattern = &s.pattern;
    if state.pixels() != pattern.n_source || pattern.n_source != pattern.n_target() {
        return Err(Error::shape(
            "sparse_nl_warp",
            format!(
                "state has {} pixels, similarity covers {}",
                state.pixels(),
                pattern.n_source
            ),
        ));
    }
    let ch = state.channels();
    let src = to_pixel_major(state);
    let mut dst = vec![0.0; src.len()];
    if ch > 0 {
        dst.par_chunks_mut(ch).enumerate().for_each(|(j, out)| {
            let r = pattern.row(j);
            for (&i, &w) in pattern.sources[r.clone()].iter().zip(&s.weights[r]) {
                let i = i as usize;
                for (o, v) in out.iter_mut().zip(&src[i * ch..(i + 1) * ch]) {
                    *o += w * v;
                }
            }
        });
    }
    counter.warp += (pattern.nnz() * ch) as u64;
    let mut out = Tensor::zeros(ch, state.height(), state.width());
    for c in 0..ch {
        for (j, v) in out.plane_mut(c).iter_mut().enumerate() {
            *v = dst[j * ch + c];
        }
    }
    Ok(out)
}

/// Full two-stage similarity between `prev` and `cur`.
pub fn approximate_similarity(
    prev: &Tensor,
    cur: &Tensor,
    cfg: &NonLocalConfig,
    counter: &mut OpCounter,
) -> Result<(CandidateMap, SparseSimilarity)> {
    prev.ensure_same_shape(cur, "approximate_similarity")?;
    cfg.validate(cur.height(), cur.width())?;
    let bp = BlockSummary::new(prev, cfg.p)?;
    let bc = BlockSummary::new(cur, cfg.p)?;
    let dp = block_distance_counted(&bp, &bc, counter)?;
    let cand = topk_blocks(&dp, cfg.k)?;
    let s = sparse_similarity_counted(prev, cur, &cand, cfg, counter)?;
    Ok((cand, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlocal::exact::{nl_warp, pairwise_distance_naive, similarity_from_distance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block_dist(cols: &[&[f64]]) -> BlockDistance {
        // one target block per column
        let rows = cols[0].len();
        let mut m = Matrix::zeros(rows, cols.len());
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        BlockDistance {
            grid: BlockGrid::new(1, rows, 1).unwrap(),
            distance: DenseDistance(m),
        }
    }

    #[test]
    fn grid_extents_tile_without_overlap() {
        let g = BlockGrid::new(7, 10, 3).unwrap();
        assert_eq!((g.grid_h, g.grid_w), (3, 4));
        let mut hits = vec![0u8; 70];
        for b in 0..g.blocks() {
            let (rows, cols) = g.extent(b);
            for y in rows {
                for x in cols.clone() {
                    hits[y * 10 + x] += 1;
                    assert_eq!(g.block_of(y * 10 + x), b);
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
        assert_eq!(g.block_len(g.blocks() - 1), 1);
    }

    #[test]
    fn block_distance_hand_case() {
        let prev = Tensor::from_vec(1, 1, 2, vec![1.0, 3.0]).unwrap();
        let cur = Tensor::from_vec(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let d = block_distance(
            &BlockSummary::new(&prev, 1).unwrap(),
            &BlockSummary::new(&cur, 1).unwrap(),
        )
        .unwrap();
        let expected = [1.0, 0.0, 3.0, 2.0];
        for (a, b) in d.distance.matrix().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_distance_matches_dense_on_pooled() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prev = Tensor::random(3, 9, 12, -1.0, 1.0, &mut rng);
        let cur = Tensor::random(3, 9, 12, -1.0, 1.0, &mut rng);
        let (bp, bc) = (
            BlockSummary::new(&prev, 4).unwrap(),
            BlockSummary::new(&cur, 4).unwrap(),
        );
        let d = block_distance(&bp, &bc).unwrap();
        let oracle = pairwise_distance_naive(&bp.features, &bc.features).unwrap();
        assert!(d.distance.matrix().max_abs_diff(oracle.matrix()) < 1e-9);
        let same = block_distance(&bp, &bp).unwrap();
        for b in 0..bp.grid.blocks() {
            assert!(same.distance.matrix().get(b, b) < 1e-7);
        }
        let other = BlockSummary::new(&cur, 3).unwrap();
        assert!(block_distance(&bp, &other).is_err());
    }

    #[test]
    fn topk_orders_and_breaks_ties() {
        let d = block_dist(&[&[5.0, 1.0, 3.0]]);
        assert_eq!(topk_blocks(&d, 2).unwrap().candidates(0), &[1, 2]);
        assert_eq!(topk_blocks(&d, 3).unwrap().candidates(0), &[1, 2, 0]);
        let flat = block_dist(&[&[2.0, 2.0, 2.0, 2.0]]);
        assert_eq!(topk_blocks(&flat, 2).unwrap().candidates(0), &[0, 1]);
        assert!(topk_blocks(&d, 0).is_err());
        assert!(topk_blocks(&d, 4).is_err());
    }

    #[test]
    fn single_block_equals_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prev = Tensor::random(2, 5, 7, -1.0, 1.0, &mut rng);
        let cur = Tensor::random(2, 5, 7, -1.0, 1.0, &mut rng);
        let cfg = NonLocalConfig::new(1, 8, 0.5);
        let (_, s) = approximate_similarity(&prev, &cur, &cfg, &mut OpCounter::default()).unwrap();
        let exact =
            similarity_from_distance(&pairwise_distance_naive(&prev, &cur).unwrap(), 0.5).unwrap();
        assert!(s.to_dense().matrix().max_abs_diff(exact.matrix()) < 1e-9);
    }

    #[test]
    fn stored_weights_are_normalised_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (h, w, p, k) in [(12, 12, 3, 4), (10, 7, 4, 2), (16, 16, 4, 5)] {
            let prev = Tensor::random(4, h, w, -1.0, 1.0, &mut rng);
            let cur = Tensor::random(4, h, w, -1.0, 1.0, &mut rng);
            let cfg = NonLocalConfig::new(k, p, 1.0);
            let (_, s) =
                approximate_similarity(&prev, &cur, &cfg, &mut OpCounter::default()).unwrap();
            for j in 0..s.n() {
                let row: Vec<_> = s.row(j).collect();
                assert!(row.len() <= k * p * p);
                let total: f64 = row.iter().map(|(_, w)| w).sum();
                assert!((total - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&(_, w)| w >= 0.0));
            }
        }
    }

    #[test]
    fn sparse_warp_cases() {
        let n = 4;
        let pattern = Arc::new(SparsePattern {
            n_source: n,
            offsets: vec![0, 1, 2, 4, 5],
            sources: vec![3, 0, 1, 2, 2],
        });
        let s = SparseSimilarity::from_weights(
            Arc::clone(&pattern),
            vec![1.0, 1.0, 0.25, 0.75, 1.0],
            1.0,
        )
        .unwrap();
        let state = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = sparse_nl_warp(&state, &s).unwrap();
        assert_eq!(w.data(), &[4.0, 1.0, 2.75, 3.0]);
        let c = Tensor::filled(3, 2, 2, -1.5);
        assert!(sparse_nl_warp(&c, &s).unwrap().data().iter().all(|v| (v + 1.5).abs() < 1e-15));
        assert!(sparse_nl_warp(&Tensor::zeros(1, 3, 3), &s).is_err());
        assert!(SparseSimilarity::from_weights(pattern, vec![0.5; 5], 1.0).is_err());
    }

    #[test]
    fn exhaustive_candidates_match_dense_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let prev = Tensor::random(3, 8, 8, -1.0, 1.0, &mut rng);
        let cur = Tensor::random(3, 8, 8, -1.0, 1.0, &mut rng);
        let state = Tensor::random(2, 8, 8, -1.0, 1.0, &mut rng);
        let cfg = NonLocalConfig::new(4, 4, 1.0);
        let (_, s) = approximate_similarity(&prev, &cur, &cfg, &mut OpCounter::default()).unwrap();
        let exact =
            similarity_from_distance(&pairwise_distance_naive(&prev, &cur).unwrap(), 1.0).unwrap();
        let a = sparse_nl_warp(&state, &s).unwrap();
        let b = nl_warp(&state, &exact).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn inconsistent_extents_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::random(2, 8, 8, -1.0, 1.0, &mut rng);
        let g = Tensor::random(2, 6, 8, -1.0, 1.0, &mut rng);
        let bs = BlockSummary::new(&f, 4).unwrap();
        let cand = topk_blocks(&block_distance(&bs, &bs).unwrap(), 2).unwrap();
        let cfg = NonLocalConfig::new(2, 4, 1.0);
        assert!(sparse_similarity(&g, &g, &cand, &cfg).is_err());
        assert!(cfg.validate(8, 8).is_ok());
        assert!(NonLocalConfig::new(5, 4, 1.0).validate(8, 8).is_err());
        assert!(NonLocalConfig::new(1, 4, 0.0).validate(8, 8).is_err());
    }

    #[test]
    fn dense_guard_reports_memory() {
        let cfg = NonLocalConfig::default();
        assert!(cfg.check_dense(64 * 64).is_ok());
        match cfg.check_dense(65 * 64) {
            Err(Error::MemoryGuard { required_bytes, .. }) => {
                assert_eq!(required_bytes, 2 * 4160u128 * 4160 * 8)
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
