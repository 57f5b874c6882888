//! Finite-difference checks of the taped network gradients.

use nlconvlstm::autodiff::LossKind;
use nlconvlstm::convlstm::NonLocalMode;
use nlconvlstm::enhancer::{encode, EnhanceConfig, FrameSequence, NetworkConfig, NetworkParams};
use nlconvlstm::nonlocal::{block_distance, topk_blocks, BlockSummary, CandidateMap, NonLocalConfig};
use nlconvlstm::training::{loss_and_gradient, loss_only};
use nlconvlstm::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

struct Problem {
    params: NetworkParams,
    seq: FrameSequence,
    target: Tensor,
    cfg: EnhanceConfig,
}

fn problem(mode: NonLocalMode, seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = NetworkConfig {
        frame_channels: 1,
        feature_channels: 4,
        hidden_channels: 4,
        encoder_layers: 2,
        decoder_layers: 1,
        kernel_size: 3,
        ..Default::default()
    };
    let params = NetworkParams::init(config, &mut rng).unwrap();
    let frames = (0..3).map(|_| Tensor::random(1, 8, 8, 0.0, 1.0, &mut rng)).collect();
    Problem {
        params,
        seq: FrameSequence::centered(frames).unwrap(),
        target: Tensor::random(1, 8, 8, 0.0, 1.0, &mut rng),
        cfg: EnhanceConfig {
            nonlocal: NonLocalConfig::new(2, 4, 1.0),
            mode,
        },
    }
}

fn candidate_maps(p: &Problem, params: &NetworkParams) -> Vec<CandidateMap> {
    let feats: Vec<Tensor> = p.seq.frames().iter().map(|f| encode(f, params).unwrap()).collect();
    let cfg = &p.cfg.nonlocal;
    feats
        .windows(2)
        .flat_map(|w| [(&w[0], &w[1]), (&w[1], &w[0])])
        .map(|(a, b)| {
            let dp = block_distance(
                &BlockSummary::new(a, cfg.p).unwrap(),
                &BlockSummary::new(b, cfg.p).unwrap(),
            )
            .unwrap();
            topk_blocks(&dp, cfg.k).unwrap()
        })
        .collect()
}

/// Returns the worst relative error over `count` sampled parameters and
/// checks the candidate maps stay fixed under each perturbation.
fn worst_error(p: &Problem, count: usize, seed: u64) -> f64 {
    let (_, grad) =
        loss_and_gradient(&p.params, &p.seq, &p.target, &p.cfg, LossKind::Norm).unwrap();
    let flat = p.params.to_flat();
    let base_maps = candidate_maps(p, &p.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for idx in sample(&mut rng, flat.len(), count) {
        let eval = |delta: f64| {
            let mut q = p.params.clone();
            let mut v = flat.clone();
            v[idx] += delta;
            q.set_flat(&v).unwrap();
            if p.cfg.mode == NonLocalMode::Approx {
                assert_eq!(candidate_maps(p, &q), base_maps, "param {idx} flips a candidate");
            }
            loss_only(&q, &p.seq, &p.target, &p.cfg, LossKind::Norm).unwrap()
        };
        let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        let err = (grad[idx] - numeric).abs() / grad[idx].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn exact_network_gradient_matches_finite_differences() {
    let p = problem(NonLocalMode::Exact, 1);
    let err = worst_error(&p, 60, 2);
    assert!(err < 1e-4, "worst relative error {err:e}");
}

#[test]
fn approx_network_gradient_ignores_candidate_choice() {
    // finite differences recompute the candidates at every evaluation while
    // the tape keeps them fixed; agreement shows selection carries no gradient
    let p = problem(NonLocalMode::Approx, 3);
    let err = worst_error(&p, 60, 4);
    assert!(err < 1e-4, "worst relative error {err:e}");
}

#[test]
fn mse_and_norm_gradients_are_parallel() {
    let p = problem(NonLocalMode::Exact, 5);
    let (l_norm, g_norm) =
        loss_and_gradient(&p.params, &p.seq, &p.target, &p.cfg, LossKind::Norm).unwrap();
    let (l_mse, g_mse) =
        loss_and_gradient(&p.params, &p.seq, &p.target, &p.cfg, LossKind::MeanSquared).unwrap();
    // d(mse) = 2‖d‖/n · d(norm)
    let scale = 2.0 * l_norm / 64.0;
    assert!((l_mse - l_norm * l_norm / 64.0).abs() < 1e-12);
    for (a, b) in g_mse.iter().zip(&g_norm) {
        assert!((a - scale * b).abs() < 1e-12 * (1.0 + a.abs()));
    }
}
