//! End-to-end enhancement: per-frame encoder, bidirectional non-local
//! ConvLSTM, and a decoder that turns both hidden states into a residual
//! added back onto the compressed target frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::convlstm::{run_bidirectional, BidirectionalHidden, ConvLSTMParams, NonLocalMode};
use crate::error::{Error, Result};
use crate::nonlocal::NonLocalConfig;
use crate::tensor::{elementwise, Activation, ConvLayer, LayerSpec, PaddingMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Channels of an input frame (1 for luma).
    pub frame_channels: usize,
    /// `C_f`, encoder output channels.
    pub feature_channels: usize,
    /// `C_h`, ConvLSTM state channels.
    pub hidden_channels: usize,
    /// Encoder convolutions, ReLU between consecutive layers.
    pub encoder_layers: usize,
    /// 3×3 conv + ReLU layers between the 1×1 fusion and the output conv.
    pub decoder_layers: usize,
    pub kernel_size: usize,
    #[serde(default)]
    pub padding: PaddingMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            frame_channels: 1,
            feature_channels: 64,
            hidden_channels: 64,
            encoder_layers: 3,
            decoder_layers: 2,
            kernel_size: 3,
            padding: PaddingMode::Zero,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_channels == 0 || self.feature_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::invalid("network_config", "channel counts must be positive"));
        }
        if self.encoder_layers == 0 {
            return Err(Error::invalid("network_config", "encoder needs at least one layer"));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::invalid("network_config", "kernel size must be odd"));
        }
        Ok(())
    }

    fn conv(&self, cin: usize, cout: usize, kernel: usize) -> LayerSpec {
        LayerSpec::new(cin, cout, kernel).with_padding(self.padding)
    }

    pub fn encoder_specs(&self) -> Vec<LayerSpec> {
        (0..self.encoder_layers)
            .map(|l| {
                let cin = if l == 0 { self.frame_channels } else { self.feature_channels };
                self.conv(cin, self.feature_channels, self.kernel_size)
            })
            .collect()
    }

    pub fn fusion_spec(&self) -> LayerSpec {
        self.conv(2 * self.hidden_channels, self.hidden_channels, 1)
    }

    /// Hidden decoder layers followed by the residual output layer.
    pub fn decoder_specs(&self) -> Vec<LayerSpec> {
        let mut specs: Vec<LayerSpec> = (0..self.decoder_layers)
            .map(|_| self.conv(self.hidden_channels, self.hidden_channels, self.kernel_size))
            .collect();
        specs.push(self.conv(self.hidden_channels, self.frame_channels, self.kernel_size));
        specs
    }

    fn cell(&self, params: ConvLSTMParams) -> ConvLSTMParams {
        params.with_padding(self.padding)
    }
}

/// All learnable weights of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub encoder: Vec<ConvLayer>,
    pub forward: ConvLSTMParams,
    pub backward: ConvLSTMParams,
    pub fusion: ConvLayer,
    pub decoder: Vec<ConvLayer>,
}

impl NetworkParams {
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        Ok(NetworkParams {
            config,
            encoder: config.encoder_specs().into_iter().map(ConvLayer::zeros).collect(),
            forward: config.cell(ConvLSTMParams::zeros(
                config.feature_channels,
                config.hidden_channels,
                k,
            )),
            backward: config.cell(ConvLSTMParams::zeros(
                config.feature_channels,
                config.hidden_channels,
                k,
            )),
            fusion: ConvLayer::zeros(config.fusion_spec()),
            decoder: config.decoder_specs().into_iter().map(ConvLayer::zeros).collect(),
        })
    }

    pub fn init<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        let mut params = NetworkParams::zeros(config)?;
        for layer in params.layers_mut() {
            *layer = ConvLayer::init(layer.spec, rng);
        }
        Ok(params)
    }

    /// Every layer in a fixed order: encoder, forward cell, backward cell,
    /// fusion, decoder.
    pub fn layers(&self) -> Vec<&ConvLayer> {
        let mut v: Vec<&ConvLayer> = self.encoder.iter().collect();
        v.push(&self.forward.gates);
        v.push(&self.backward.gates);
        v.push(&self.fusion);
        v.extend(self.decoder.iter());
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut ConvLayer> {
        let mut v: Vec<&mut ConvLayer> = self.encoder.iter_mut().collect();
        v.push(&mut self.forward.gates);
        v.push(&mut self.backward.gates);
        v.push(&mut self.fusion);
        v.extend(self.decoder.iter_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|l| l.parameter_count()).sum()
    }

    /// All weights then biases, layer by layer, in [`Self::layers`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in self.layers() {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::shape(
                "network_params",
                format!(
                    "{} values for {} parameters",
                    values.len(),
                    self.parameter_count()
                ),
            ));
        }
        let mut offset = 0;
        for l in self.layers_mut() {
            let nw = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&values[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }
}

/// `2T + 1` consecutive compressed frames and the position of the frame to
/// enhance.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Tensor>,
    target_index: usize,
}

impl FrameSequence {
    /// Sequence targeting its centre frame.
    pub fn centered(frames: Vec<Tensor>) -> Result<Self> {
        let mid = frames.len() / 2;
        FrameSequence::new(frames, mid)
    }

    pub fn new(frames: Vec<Tensor>, target_index: usize) -> Result<Self> {
        if frames.is_empty() || frames.len() % 2 == 0 {
            return Err(Error::invalid(
                "frame_sequence",
                format!("need an odd number of frames, got {}", frames.len()),
            ));
        }
        if target_index >= frames.len() {
            return Err(Error::invalid(
                "frame_sequence",
                format!("target {target_index} outside {} frames", frames.len()),
            ));
        }
        let shape = frames[0].shape();
        if let Some(bad) = frames.iter().position(|f| f.shape() != shape) {
            return Err(Error::shape(
                "frame_sequence",
                format!("frame {bad} is {:?}, frame 0 is {shape:?}", frames[bad].shape()),
            ));
        }
        Ok(FrameSequence {
            frames,
            target_index,
        })
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn target(&self) -> &Tensor {
        &self.frames[self.target_index]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `T` for a sequence of `2T + 1` frames.
    pub fn radius(&self) -> usize {
        self.frames.len() / 2
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnhanceConfig {
    pub nonlocal: NonLocalConfig,
    pub mode: NonLocalMode,
}

pub fn encode(frame: &Tensor, params: &NetworkParams) -> Result<Tensor> {
    let mut x = params.encoder[0].forward(frame)?;
    for layer in &params.encoder[1..] {
        x = layer.forward(&elementwise(&x, Activation::Relu))?;
    }
    Ok(x)
}

pub fn decode(h_fwd: &Tensor, h_bwd: &Tensor, params: &NetworkParams) -> Result<Tensor> {
    let ch = params.config.hidden_channels;
    if h_fwd.channels() != ch || !h_fwd.same_shape(h_bwd) {
        return Err(Error::shape(
            "decode",
            format!(
                "hidden states {:?}/{:?}, expected {ch} channels each",
                h_fwd.shape(),
                h_bwd.shape()
            ),
        ));
    }
    let mut x = params.fusion.forward(&Tensor::concat_channels(&[h_fwd, h_bwd])?)?;
    let last = params.decoder.len() - 1;
    for (l, layer) in params.decoder.iter().enumerate() {
        x = layer.forward(&x)?;
        if l != last {
            x = elementwise(&x, Activation::Relu);
        }
    }
    Ok(x)
}

fn check_frames(seq: &FrameSequence, params: &NetworkParams) -> Result<()> {
    let c = seq.target().channels();
    if c != params.config.frame_channels {
        return Err(Error::shape(
            "enhance",
            format!(
                "frames have {c} channels, network expects {}",
                params.config.frame_channels
            ),
        ));
    }
    Ok(())
}

/// Bidirectional hidden states for every frame of the sequence.
pub fn hidden_states(
    seq: &FrameSequence,
    params: &NetworkParams,
    cfg: &EnhanceConfig,
) -> Result<Vec<BidirectionalHidden>> {
    check_frames(seq, params)?;
    let features = seq
        .frames()
        .iter()
        .map(|f| encode(f, params))
        .collect::<Result<Vec<_>>>()?;
    run_bidirectional(&features, &params.forward, &params.backward, &cfg.nonlocal, cfg.mode)
}

/// Decoder residual for the target frame, before it is added to `X_t`.
pub fn residual(seq: &FrameSequence, params: &NetworkParams, cfg: &EnhanceConfig) -> Result<Tensor> {
    let hidden = hidden_states(seq, params, cfg)?;
    let h = &hidden[seq.target_index()];
    decode(&h.forward, &h.backward, params)
}

/// `Ŷ_t = clamp(X_t + residual, 0, 1)` for the target frame.
pub fn enhance(seq: &FrameSequence, params: &NetworkParams, cfg: &EnhanceConfig) -> Result<Tensor> {
    Ok(seq.target().add(&residual(seq, params, cfg)?)?.clamp(0.0, 1.0))
}

/// Enhanced versions of every frame in the sequence.
pub fn enhance_all(
    seq: &FrameSequence,
    params: &NetworkParams,
    cfg: &EnhanceConfig,
) -> Result<Vec<Tensor>> {
    let hidden = hidden_states(seq, params, cfg)?;
    seq.frames()
        .iter()
        .zip(&hidden)
        .map(|(x, h)| Ok(x.add(&decode(&h.forward, &h.backward, params)?)?.clamp(0.0, 1.0)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetworkConfig {
        NetworkConfig {
            frame_channels: 1,
            feature_channels: 4,
            hidden_channels: 3,
            encoder_layers: 3,
            decoder_layers: 2,
            kernel_size: 3,
            padding: PaddingMode::Zero,
        }
    }

    fn clip(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> FrameSequence {
        FrameSequence::centered((0..n).map(|_| Tensor::random(1, h, w, 0.0, 1.0, rng)).collect())
            .unwrap()
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = NetworkParams::init(small(), &mut rng).unwrap();
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.parameter_count());
        let mut q = NetworkParams::zeros(small()).unwrap();
        q.set_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn encoder_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small();
        let zero = NetworkParams::zeros(cfg).unwrap();
        let f = encode(&Tensor::zeros(1, 5, 6), &zero).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        let p = NetworkParams::init(cfg, &mut rng).unwrap();
        let frame = Tensor::random(1, 5, 6, 0.0, 1.0, &mut rng);
        let a = encode(&frame, &p).unwrap();
        assert_eq!(a.shape(), (4, 5, 6));
        assert_eq!(a, encode(&frame.clone(), &p).unwrap());
        assert!(encode(&Tensor::zeros(2, 5, 6), &p).is_err());
    }

    #[test]
    fn decoder_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small();
        let zero = NetworkParams::zeros(cfg).unwrap();
        let h = Tensor::random(3, 4, 4, -1.0, 1.0, &mut rng);
        let g = Tensor::random(3, 4, 4, -1.0, 1.0, &mut rng);
        assert!(decode(&h, &g, &zero).unwrap().data().iter().all(|&v| v == 0.0));

        let mut p = NetworkParams::init(cfg, &mut rng).unwrap();
        let r = decode(&h, &g, &p).unwrap();
        assert_eq!(r.shape(), (1, 4, 4));
        // swap the two input halves of the fusion kernel
        let mut swapped = p.clone();
        for o in 0..3 {
            for i in 0..3 {
                let a = p.fusion.weight.get(o, i, 0, 0);
                let b = p.fusion.weight.get(o, i + 3, 0, 0);
                swapped.fusion.weight.set(o, i, 0, 0, b);
                swapped.fusion.weight.set(o, i + 3, 0, 0, a);
            }
        }
        let rs = decode(&g, &h, &swapped).unwrap();
        assert!(r.max_abs_diff(&rs) < 1e-14);
        assert!(decode(&h, &Tensor::zeros(3, 4, 5), &p).is_err());
        p.config.hidden_channels = 2;
        assert!(decode(&h, &g, &p).is_err());
    }

    #[test]
    fn zero_params_return_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = clip(&mut rng, 3, 6, 6);
        let p = NetworkParams::zeros(small()).unwrap();
        let cfg = EnhanceConfig {
            nonlocal: NonLocalConfig::new(2, 3, 1.0),
            mode: NonLocalMode::Approx,
        };
        assert_eq!(&enhance(&seq, &p, &cfg).unwrap(), seq.target());
    }

    #[test]
    fn residual_additivity_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = clip(&mut rng, 5, 8, 8);
        let p = NetworkParams::init(small(), &mut rng).unwrap();
        let cfg = EnhanceConfig {
            nonlocal: NonLocalConfig::new(2, 4, 1.0),
            mode: NonLocalMode::Exact,
        };
        let r = residual(&seq, &p, &cfg).unwrap();
        let features: Vec<Tensor> = seq.frames().iter().map(|f| encode(f, &p).unwrap()).collect();
        let hid = run_bidirectional(&features, &p.forward, &p.backward, &cfg.nonlocal, cfg.mode)
            .unwrap();
        let direct = decode(&hid[2].forward, &hid[2].backward, &p).unwrap();
        assert_eq!(r, direct);
        let out = enhance(&seq, &p, &cfg).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let all = enhance_all(&seq, &p, &cfg).unwrap();
        assert_eq!(all.len(), 5);
        assert_eq!(all[2], out);
    }

    #[test]
    fn exhaustive_approx_matches_exact_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seq = clip(&mut rng, 3, 8, 8);
        let p = NetworkParams::init(small(), &mut rng).unwrap();
        let mut cfg = EnhanceConfig {
            nonlocal: NonLocalConfig::new(4, 4, 1.0),
            mode: NonLocalMode::Exact,
        };
        let e = residual(&seq, &p, &cfg).unwrap();
        cfg.mode = NonLocalMode::Approx;
        let a = residual(&seq, &p, &cfg).unwrap();
        assert!(e.max_abs_diff(&a) < 1e-5);
    }

    #[test]
    fn circular_encoder_commutes_with_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = NetworkConfig {
            padding: PaddingMode::Circular,
            ..small()
        };
        let mut p = NetworkParams::init(cfg, &mut rng).unwrap();
        for l in &mut p.encoder {
            l.bias.fill(0.0);
        }
        let frame = Tensor::random(1, 6, 7, 0.0, 1.0, &mut rng);
        let shifted = encode(&frame.roll(1, 1), &p).unwrap();
        let expected = encode(&frame, &p).unwrap().roll(1, 1);
        assert!(shifted.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn sequence_validation() {
        assert!(FrameSequence::centered(vec![Tensor::zeros(1, 2, 2); 2]).is_err());
        assert!(FrameSequence::centered(vec![]).is_err());
        assert!(FrameSequence::new(vec![Tensor::zeros(1, 2, 2); 3], 3).is_err());
        let mixed = vec![Tensor::zeros(1, 2, 2), Tensor::zeros(1, 2, 3), Tensor::zeros(1, 2, 2)];
        assert!(FrameSequence::centered(mixed).is_err());
        let s = FrameSequence::centered(vec![Tensor::zeros(1, 2, 2); 7]).unwrap();
        assert_eq!((s.target_index(), s.radius()), (3, 3));
    }
}
