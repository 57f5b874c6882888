//! ConvLSTM cell whose recurrent state is warped by the inter-frame
//! non-local similarity before entering the gates, and the bidirectional
//! sequence driver.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nonlocal::approx::{approximate_similarity, sparse_nl_warp};
use crate::nonlocal::exact::{nl_warp, pairwise_distance_vectorized, similarity_from_distance};
use crate::nonlocal::{DenseSimilarity, NonLocalConfig, OpCounter, SparseSimilarity};
use crate::tensor::{elementwise, Activation, ConvLayer, LayerSpec, PaddingMode, Tensor};

/// Which similarity the recurrent warp uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonLocalMode {
    Exact,
    #[default]
    Approx,
}

impl std::fmt::Display for NonLocalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NonLocalMode::Exact => "exact",
            NonLocalMode::Approx => "approx",
        })
    }
}

impl std::str::FromStr for NonLocalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" => Ok(NonLocalMode::Exact),
            "approx" => Ok(NonLocalMode::Approx),
            other => Err(format!("unknown mode '{other}', expected exact or approx")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub hidden: Tensor,
    pub cell: Tensor,
}

impl CellState {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        CellState {
            hidden: Tensor::zeros(channels, height, width),
            cell: Tensor::zeros(channels, height, width),
        }
    }

    pub fn channels(&self) -> usize {
        self.hidden.channels()
    }
}

/// Gate index inside the stacked gate convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
}

/// One stacked 3×3 convolution producing all four gates from
/// `concat(F_t, Ĥ)`; output channels are ordered input, forget, output,
/// candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLSTMParams {
    pub gates: ConvLayer,
    pub hidden_channels: usize,
}

impl ConvLSTMParams {
    pub fn spec(feature_channels: usize, hidden_channels: usize, kernel: usize) -> LayerSpec {
        LayerSpec::new(feature_channels + hidden_channels, 4 * hidden_channels, kernel)
    }

    pub fn zeros(feature_channels: usize, hidden_channels: usize, kernel: usize) -> Self {
        ConvLSTMParams {
            gates: ConvLayer::zeros(Self::spec(feature_channels, hidden_channels, kernel)),
            hidden_channels,
        }
    }

    pub fn init<R: Rng + ?Sized>(
        feature_channels: usize,
        hidden_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        ConvLSTMParams {
            gates: ConvLayer::init(Self::spec(feature_channels, hidden_channels, kernel), rng),
            hidden_channels,
        }
    }

    pub fn with_padding(mut self, padding: PaddingMode) -> Self {
        self.gates.spec.padding = padding;
        self
    }

    pub fn feature_channels(&self) -> usize {
        self.gates.spec.in_channels - self.hidden_channels
    }

    pub fn gate_bias_mut(&mut self, gate: Gate) -> &mut [f64] {
        let c = self.hidden_channels;
        let start = gate as usize * c;
        &mut self.gates.bias[start..start + c]
    }
}

/// Standard (peephole-free) ConvLSTM update on an already warped state.
pub fn convlstm_cell(
    features: &Tensor,
    warped: &CellState,
    params: &ConvLSTMParams,
) -> Result<CellState> {
    let ch = params.hidden_channels;
    if features.channels() != params.feature_channels() {
        return Err(Error::shape(
            "convlstm_cell",
            format!(
                "features have {} channels, cell expects {}",
                features.channels(),
                params.feature_channels()
            ),
        ));
    }
    if warped.hidden.shape() != (ch, features.height(), features.width())
        || !warped.hidden.same_shape(&warped.cell)
    {
        return Err(Error::shape(
            "convlstm_cell",
            format!(
                "state {:?}/{:?} vs expected {:?}",
                warped.hidden.shape(),
                warped.cell.shape(),
                (ch, features.height(), features.width())
            ),
        ));
    }
    let x = Tensor::concat_channels(&[features, &warped.hidden])?;
    let z = params.gates.forward(&x)?;
    let gate = |g: Gate, act: Activation| -> Result<Tensor> {
        Ok(elementwise(&z.slice_channels(g as usize * ch, ch)?, act))
    };
    let i = gate(Gate::Input, Activation::Sigmoid)?;
    let f = gate(Gate::Forget, Activation::Sigmoid)?;
    let o = gate(Gate::Output, Activation::Sigmoid)?;
    let g = gate(Gate::Candidate, Activation::Tanh)?;
    let cell = f.mul(&warped.cell)?.add(&i.mul(&g)?)?;
    let hidden = o.mul(&elementwise(&cell, Activation::Tanh))?;
    Ok(CellState { hidden, cell })
}

/// Similarity used to warp a recurrent state.
#[derive(Clone, Debug)]
pub enum Similarity {
    Dense(DenseSimilarity),
    Sparse(SparseSimilarity),
}

impl Similarity {
    /// `S` between `prev` and `cur` features under the selected mode.
    pub fn compute(
        prev: &Tensor,
        cur: &Tensor,
        cfg: &NonLocalConfig,
        mode: NonLocalMode,
    ) -> Result<Self> {
        match mode {
            NonLocalMode::Exact => {
                prev.ensure_same_shape(cur, "similarity")?;
                cfg.check_dense(cur.pixels())?;
                let d = pairwise_distance_vectorized(prev, cur)?;
                Ok(Similarity::Dense(similarity_from_distance(&d, cfg.beta)?))
            }
            NonLocalMode::Approx => {
                let (_, s) = approximate_similarity(prev, cur, cfg, &mut OpCounter::default())?;
                Ok(Similarity::Sparse(s))
            }
        }
    }

    pub fn warp(&self, state: &Tensor) -> Result<Tensor> {
        match self {
            Similarity::Dense(s) => nl_warp(state, s),
            Similarity::Sparse(s) => sparse_nl_warp(state, s),
        }
    }

    pub fn warp_state(&self, state: &CellState) -> Result<CellState> {
        Ok(CellState {
            hidden: self.warp(&state.hidden)?,
            cell: self.warp(&state.cell)?,
        })
    }
}

/// Warps `prev` with `similarity`, then applies the cell.
pub fn nl_convlstm_step_with(
    features: &Tensor,
    prev: &CellState,
    similarity: &Similarity,
    params: &ConvLSTMParams,
) -> Result<CellState> {
    convlstm_cell(features, &similarity.warp_state(prev)?, params)
}

/// One recurrent step. `prev_features` is `None` for the first frame of a
/// direction, in which case the state is consumed without warping.
pub fn nl_convlstm_step(
    prev_features: Option<&Tensor>,
    features: &Tensor,
    prev: &CellState,
    params: &ConvLSTMParams,
    cfg: &NonLocalConfig,
    mode: NonLocalMode,
) -> Result<CellState> {
    match prev_features {
        None => convlstm_cell(features, prev, params),
        Some(fp) => {
            let s = Similarity::compute(fp, features, cfg, mode)?;
            nl_convlstm_step_with(features, prev, &s, params)
        }
    }
}

/// Runs one direction over `features` in the given order, starting from the
/// zero state, and returns the state after every step.
pub fn run_direction<'a>(
    features: impl IntoIterator<Item = &'a Tensor>,
    params: &ConvLSTMParams,
    cfg: &NonLocalConfig,
    mode: NonLocalMode,
) -> Result<Vec<CellState>> {
    let mut states: Vec<CellState> = Vec::new();
    let mut prev_features: Option<&Tensor> = None;
    for f in features {
        let prev = match states.last() {
            Some(s) => s.clone(),
            None => CellState::zeros(params.hidden_channels, f.height(), f.width()),
        };
        let next = nl_convlstm_step(prev_features, f, &prev, params, cfg, mode)?;
        states.push(next);
        prev_features = Some(f);
    }
    Ok(states)
}

/// Forward and backward hidden states at one frame position.
#[derive(Clone, Debug, PartialEq)]
pub struct BidirectionalHidden {
    pub forward: Tensor,
    pub backward: Tensor,
}

/// Independent forward and reversed passes; entry `t` holds both hidden
/// states for frame `t`.
pub fn run_bidirectional(
    features: &[Tensor],
    fwd: &ConvLSTMParams,
    bwd: &ConvLSTMParams,
    cfg: &NonLocalConfig,
    mode: NonLocalMode,
) -> Result<Vec<BidirectionalHidden>> {
    if features.is_empty() {
        return Err(Error::invalid("run_bidirectional", "empty feature sequence"));
    }
    let forward = run_direction(features.iter(), fwd, cfg, mode)?;
    let mut backward = run_direction(features.iter().rev(), bwd, cfg, mode)?;
    backward.reverse();
    Ok(forward
        .into_iter()
        .zip(backward)
        .map(|(f, b)| BidirectionalHidden {
            forward: f.hidden,
            backward: b.hidden,
        })
        .collect())
}
