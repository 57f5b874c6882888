//! Inter-frame non-local similarity: the exact dense form, its two-stage
//! block-prefiltered approximation and the analytic cost model.

pub mod approx;
pub mod complexity;
pub mod exact;

pub use approx::{
    approximate_similarity, block_distance, dense_bytes, sparse_nl_warp, sparse_similarity,
    topk_blocks, BlockDistance, BlockGrid, BlockSummary, CandidateMap, NonLocalConfig,
    SparseDistance, SparsePattern, SparseSimilarity, DEFAULT_DENSE_PIXEL_LIMIT,
};
pub use complexity::ComplexityEstimate;
pub use exact::{
    exact_warp_streaming, nl_warp, pairwise_distance_naive, pairwise_distance_vectorized,
    similarity_from_distance, DenseDistance, DenseSimilarity, Matrix,
};

/// Multiply-accumulate tallies taken from the actual loop trip counts of the
/// non-local kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    /// Squared norms of pooled super-pixels (stage 1).
    pub block_norms: u64,
    /// Cross terms between pooled super-pixels (stage 1).
    pub block_distance: u64,
    /// Squared norms of full-resolution pixels.
    pub distance_norms: u64,
    /// Per-pair pixel distance work, dense or sparse.
    pub distance: u64,
    /// Weighted sums of the warped state channels.
    pub warp: u64,
}

impl OpCounter {
    pub fn stage1(&self) -> u64 {
        self.block_norms + self.block_distance
    }

    pub fn stage2(&self) -> u64 {
        self.distance_norms + self.distance + self.warp
    }

    pub fn total(&self) -> u64 {
        self.stage1() + self.stage2()
    }
}
