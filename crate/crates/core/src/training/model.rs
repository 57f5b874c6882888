//! The enhancement network recorded on a [`GradientTape`].
//!
//! Mirrors [`crate::enhancer`] operation for operation so the tape's forward
//! value matches the inference path, while every layer's weight and bias are
//! registered as parameters.

use std::sync::Arc;

use crate::autodiff::{Gradients, GradientTape, LossKind, Value, Var};
use crate::convlstm::{Gate, NonLocalMode};
use crate::enhancer::{EnhanceConfig, FrameSequence, NetworkParams};
use crate::error::{Error, Result};
use crate::nonlocal::{block_distance, topk_blocks, BlockSummary, NonLocalConfig, SparsePattern};
use crate::tensor::{Activation, LayerSpec, Tensor};

/// Weight and bias handles of one convolution.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
    pub spec: LayerSpec,
}

/// Parameter handles in [`NetworkParams::layers`] order.
#[derive(Clone, Debug)]
pub struct TapeParams {
    layers: Vec<LayerVars>,
    encoder_layers: usize,
    hidden_channels: usize,
}

impl TapeParams {
    pub fn register(tape: &mut GradientTape, params: &NetworkParams) -> Self {
        let layers = params
            .layers()
            .into_iter()
            .map(|l| LayerVars {
                weight: tape.param(Value::Kernel(l.weight.clone())),
                bias: tape.param(Value::Vector(l.bias.clone())),
                spec: l.spec,
            })
            .collect();
        TapeParams {
            layers,
            encoder_layers: params.config.encoder_layers,
            hidden_channels: params.config.hidden_channels,
        }
    }

    pub fn layers(&self) -> &[LayerVars] {
        &self.layers
    }

    fn encoder(&self) -> &[LayerVars] {
        &self.layers[..self.encoder_layers]
    }

    fn forward_cell(&self) -> LayerVars {
        self.layers[self.encoder_layers]
    }

    fn backward_cell(&self) -> LayerVars {
        self.layers[self.encoder_layers + 1]
    }

    fn fusion(&self) -> LayerVars {
        self.layers[self.encoder_layers + 2]
    }

    fn decoder(&self) -> &[LayerVars] {
        &self.layers[self.encoder_layers + 3..]
    }

    /// Flattens tape gradients into [`NetworkParams::to_flat`] order.
    pub fn flatten(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for v in [l.weight, l.bias] {
                out.extend_from_slice(grads.get(v).expect("registered on this tape"));
            }
        }
        out
    }
}

fn conv(tape: &mut GradientTape, x: Var, l: LayerVars) -> Result<Var> {
    tape.conv2d(x, l.weight, l.bias, l.spec)
}

fn encode(tape: &mut GradientTape, tp: &TapeParams, frame: Var) -> Result<Var> {
    let enc = tp.encoder();
    let mut x = conv(tape, frame, enc[0])?;
    for &l in &enc[1..] {
        let r = tape.activation(x, Activation::Relu)?;
        x = conv(tape, r, l)?;
    }
    Ok(x)
}

enum TapeSimilarity {
    Dense(Var),
    Sparse(Var),
}

fn similarity(
    tape: &mut GradientTape,
    prev: Var,
    cur: Var,
    cfg: &NonLocalConfig,
    mode: NonLocalMode,
) -> Result<TapeSimilarity> {
    match mode {
        NonLocalMode::Exact => {
            cfg.check_dense(tape.tensor(cur)?.pixels())?;
            let d = tape.distance(prev, cur)?;
            Ok(TapeSimilarity::Dense(tape.softmax(d, cfg.beta)?))
        }
        NonLocalMode::Approx => {
            let (p, c) = (tape.tensor(prev)?, tape.tensor(cur)?);
            p.ensure_same_shape(c, "similarity")?;
            cfg.validate(c.height(), c.width())?;
            let dp = block_distance(&BlockSummary::new(p, cfg.p)?, &BlockSummary::new(c, cfg.p)?)?;
            let pattern = Arc::new(SparsePattern::from_candidates(&topk_blocks(&dp, cfg.k)?));
            let d = tape.sparse_distance(prev, cur, &pattern)?;
            Ok(TapeSimilarity::Sparse(tape.sparse_softmax(d, cfg.beta)?))
        }
    }
}

fn warp(tape: &mut GradientTape, state: Var, sim: &TapeSimilarity) -> Result<Var> {
    match *sim {
        TapeSimilarity::Dense(s) => tape.warp(state, s),
        TapeSimilarity::Sparse(s) => tape.sparse_warp(state, s),
    }
}

fn cell(
    tape: &mut GradientTape,
    features: Var,
    hidden: Var,
    cellv: Var,
    gates: LayerVars,
    ch: usize,
) -> Result<(Var, Var)> {
    let x = tape.concat_channels(&[features, hidden])?;
    let z = conv(tape, x, gates)?;
    let mut gate = |g: Gate, act: Activation| -> Result<Var> {
        let s = tape.slice_channels(z, g as usize * ch, ch)?;
        tape.activation(s, act)
    };
    let i = gate(Gate::Input, Activation::Sigmoid)?;
    let f = gate(Gate::Forget, Activation::Sigmoid)?;
    let o = gate(Gate::Output, Activation::Sigmoid)?;
    let g = gate(Gate::Candidate, Activation::Tanh)?;
    let fc = tape.mul(f, cellv)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.activation(c, Activation::Tanh)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Hidden state after every step of one direction.
fn direction(
    tape: &mut GradientTape,
    features: &[Var],
    gates: LayerVars,
    ch: usize,
    cfg: &EnhanceConfig,
) -> Result<Vec<Var>> {
    let (_, h, w) = tape.tensor(features[0])?.shape();
    let zero = tape.constant(Value::Tensor(Tensor::zeros(ch, h, w)));
    let (mut hidden, mut cellv) = (zero, zero);
    let mut out = Vec::with_capacity(features.len());
    for (t, &f) in features.iter().enumerate() {
        if t > 0 {
            let sim = similarity(tape, features[t - 1], f, &cfg.nonlocal, cfg.mode)?;
            hidden = warp(tape, hidden, &sim)?;
            cellv = warp(tape, cellv, &sim)?;
        }
        (hidden, cellv) = cell(tape, f, hidden, cellv, gates, ch)?;
        out.push(hidden);
    }
    Ok(out)
}

/// Records the network on `tape` and returns the unclamped reconstruction
/// `X_t + residual` of the sequence's target frame.
pub fn forward_on_tape(
    tape: &mut GradientTape,
    tp: &TapeParams,
    seq: &FrameSequence,
    cfg: &EnhanceConfig,
) -> Result<Var> {
    let frames: Vec<Var> = seq
        .frames()
        .iter()
        .map(|f| tape.constant(Value::Tensor(f.clone())))
        .collect();
    let features = frames
        .iter()
        .map(|&f| encode(tape, tp, f))
        .collect::<Result<Vec<_>>>()?;
    let ch = tp.hidden_channels;
    let t = seq.target_index();
    let fwd = direction(tape, &features[..=t], tp.forward_cell(), ch, cfg)?;
    let rev: Vec<Var> = features[t..].iter().rev().copied().collect();
    let bwd = direction(tape, &rev, tp.backward_cell(), ch, cfg)?;
    let fused_in = tape.concat_channels(&[fwd[t], bwd[bwd.len() - 1]])?;
    let mut x = conv(tape, fused_in, tp.fusion())?;
    let dec = tp.decoder();
    for (l, &layer) in dec.iter().enumerate() {
        if l > 0 {
            x = tape.activation(x, Activation::Relu)?;
        }
        x = conv(tape, x, layer)?;
    }
    tape.add(frames[t], x)
}

/// Loss on the unclamped reconstruction and its gradient in
/// [`NetworkParams::to_flat`] order.
pub fn loss_and_gradient(
    params: &NetworkParams,
    seq: &FrameSequence,
    target: &Tensor,
    cfg: &EnhanceConfig,
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    if !seq.target().same_shape(target) {
        return Err(Error::shape(
            "loss_and_gradient",
            format!("target {:?} vs frames {:?}", target.shape(), seq.target().shape()),
        ));
    }
    let mut tape = GradientTape::new();
    let tp = TapeParams::register(&mut tape, params);
    let pred = forward_on_tape(&mut tape, &tp, seq, cfg)?;
    let y = tape.constant(Value::Tensor(target.clone()));
    let loss = tape.loss(pred, y, kind)?;
    let value = tape.scalar(loss)?;
    let grads = tape.backward(loss)?;
    Ok((value, tp.flatten(&grads)))
}

/// Loss of the unclamped reconstruction without recording a tape.
pub fn loss_only(
    params: &NetworkParams,
    seq: &FrameSequence,
    target: &Tensor,
    cfg: &EnhanceConfig,
    kind: LossKind,
) -> Result<f64> {
    let pred = seq.target().add(&crate::enhancer::residual(seq, params, cfg)?)?;
    crate::autodiff::loss_value(&pred, target, kind)
}
