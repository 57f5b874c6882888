//! Instrumented timing of the non-local stage (distance, similarity and
//! warp of one `C`-channel state) next to the analytic cost model.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::convlstm::NonLocalMode;
use crate::error::Result;
use crate::nonlocal::approx::sparse_nl_warp_counted;
use crate::nonlocal::{
    approximate_similarity, dense_bytes, exact_warp_streaming, ComplexityEstimate, NonLocalConfig,
    OpCounter,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchCase {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mode: NonLocalMode,
    pub repetitions: usize,
    pub seed: u64,
    /// Lifts the dense size limit in exact mode.
    pub allow_large_exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub height: usize,
    pub width: usize,
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub p: usize,
    pub mode: NonLocalMode,
    pub ms_per_frame: f64,
    pub measured_stage1: u64,
    pub measured_stage2: u64,
    pub measured_total: u64,
    pub analytic_phi: f64,
    pub analytic_psi: f64,
    pub analytic_ratio: f64,
    /// Measured count over `φ` (approx) or `ψ` (exact).
    pub measured_over_analytic: f64,
    /// Dense similarity bytes the exact route would need.
    pub dense_bytes: u128,
    /// The approximation does no less work than the exact stage.
    pub no_savings: bool,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "height,width,n,c,k,p,mode,ms_per_frame,measured_stage1,\
measured_stage2,measured_total,analytic_phi,analytic_psi,analytic_ratio,measured_over_analytic,\
dense_bytes,no_savings";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3},{},{},{},{},{},{:e},{:.6},{},{}",
            self.height,
            self.width,
            self.n,
            self.c,
            self.k,
            self.p,
            self.mode,
            self.ms_per_frame,
            self.measured_stage1,
            self.measured_stage2,
            self.measured_total,
            self.analytic_phi,
            self.analytic_psi,
            self.analytic_ratio,
            self.measured_over_analytic,
            self.dense_bytes,
            self.no_savings
        )
    }
}

/// Rows of a benchmark run, renderable as CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(BenchRow::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }
}

/// Op counts of one non-local pass without timing.
pub fn count_ops(
    prev: &Tensor,
    cur: &Tensor,
    state: &Tensor,
    cfg: &NonLocalConfig,
    mode: NonLocalMode,
) -> Result<OpCounter> {
    let mut counter = OpCounter::default();
    run_once(prev, cur, state, cfg, mode, &mut counter)?;
    Ok(counter)
}

fn run_once(
    prev: &Tensor,
    cur: &Tensor,
    state: &Tensor,
    cfg: &NonLocalConfig,
    mode: NonLocalMode,
    counter: &mut OpCounter,
) -> Result<Tensor> {
    match mode {
        NonLocalMode::Exact => {
            Ok(exact_warp_streaming(prev, cur, &[state], cfg.beta, counter)?.remove(0))
        }
        NonLocalMode::Approx => {
            let (_, s) = approximate_similarity(prev, cur, cfg, counter)?;
            sparse_nl_warp_counted(state, &s, counter)
        }
    }
}

/// Times the non-local stage on seeded random features.
pub fn bench_nonlocal(case: &BenchCase, cfg: &NonLocalConfig) -> Result<BenchRow> {
    let n = case.height * case.width;
    let estimate = ComplexityEstimate::new(n, case.channels, cfg.k, cfg.p)?;
    if case.mode == NonLocalMode::Exact && !case.allow_large_exact {
        cfg.check_dense(n)?;
    }
    if case.mode == NonLocalMode::Approx {
        cfg.validate(case.height, case.width)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let (c, h, w) = (case.channels, case.height, case.width);
    let prev = Tensor::random(c, h, w, -1.0, 1.0, &mut rng);
    let cur = Tensor::random(c, h, w, -1.0, 1.0, &mut rng);
    let state = Tensor::random(c, h, w, -1.0, 1.0, &mut rng);
    let reps = case.repetitions.max(1);
    let mut counter = OpCounter::default();
    let start = Instant::now();
    for r in 0..reps {
        let mut this = OpCounter::default();
        std::hint::black_box(run_once(&prev, &cur, &state, cfg, case.mode, &mut this)?);
        if r == 0 {
            counter = this;
        }
    }
    let ms_per_frame = start.elapsed().as_secs_f64() * 1e3 / reps as f64;
    let analytic = match case.mode {
        NonLocalMode::Exact => estimate.psi_time,
        NonLocalMode::Approx => estimate.phi_time,
    };
    let total = counter.total();
    Ok(BenchRow {
        height: h,
        width: w,
        n,
        c,
        k: cfg.k,
        p: cfg.p,
        mode: case.mode,
        ms_per_frame,
        measured_stage1: counter.stage1(),
        measured_stage2: counter.stage2(),
        measured_total: total,
        analytic_phi: estimate.phi_time,
        analytic_psi: estimate.psi_time,
        analytic_ratio: estimate.ratio,
        measured_over_analytic: total as f64 / analytic,
        dense_bytes: dense_bytes(n),
        no_savings: case.mode == NonLocalMode::Approx && total as f64 >= estimate.psi_time,
    })
}
