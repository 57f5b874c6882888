//! Dense `channels × height × width` tensors and the convolution, pooling and
//! activation kernels the rest of the crate is built from.
//!
//! Spatial positions are flattened row-major, so pixel `i` of a tensor with
//! width `W` sits at row `i / W`, column `i % W`. All kernels are pure
//! functions of their inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "tensor",
                format!(
                    "{} values cannot fill a {channels}x{height}x{width} tensor",
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random<R: Rng + ?Sized>(
        channels: usize,
        height: usize,
        width: usize,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let data = (0..channels * height * width)
            .map(|_| rng.random_range(lo..hi))
            .collect();
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of spatial positions, `H·W`.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    /// One channel as a flat `H·W` slice.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn ensure_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(other, "zip_with")?;
        Ok(Tensor {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks tensors of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no tensors given"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for t in parts {
            if t.height != h || t.width != w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("spatial {}x{} vs {}x{}", t.height, t.width, h, w),
                ));
            }
            channels += t.channels;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(channels, h, w, data)
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.channels {
            return Err(Error::shape(
                "slice_channels",
                format!(
                    "range {start}..{} exceeds {} channels",
                    start + len,
                    self.channels
                ),
            ));
        }
        let n = self.pixels();
        Tensor::from_vec(
            len,
            self.height,
            self.width,
            self.data[start * n..(start + len) * n].to_vec(),
        )
    }

    /// Circular shift of every channel by `(dy, dx)` pixels.
    pub fn roll(&self, dy: isize, dx: isize) -> Tensor {
        let mut out = Tensor::zeros(self.channels, self.height, self.width);
        let (h, w) = (self.height as isize, self.width as isize);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let ty = (y + dy).rem_euclid(h) as usize;
                    let tx = (x + dx).rem_euclid(w) as usize;
                    out.set(c, ty, tx, self.get(c, y as usize, x as usize));
                }
            }
        }
        out
    }

    /// Window of `h × w` pixels with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Tensor> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::shape(
                "crop",
                format!(
                    "window {h}x{w} at ({y}, {x}) exceeds {}x{}",
                    self.height, self.width
                ),
            ));
        }
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for r in 0..h {
                let src = &self.plane(c)[(y + r) * self.width + x..][..w];
                out.plane_mut(c)[r * w..(r + 1) * w].copy_from_slice(src);
            }
        }
        Ok(out)
    }
}

impl Default for Tensor {
    fn default() -> Self {
        Tensor::zeros(0, 0, 0)
    }
}

/// Convolution weights shaped `(out, in, f, f)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    out_channels: usize,
    in_channels: usize,
    size: usize,
    data: Vec<f64>,
}

impl Kernel {
    pub fn zeros(out_channels: usize, in_channels: usize, size: usize) -> Self {
        Kernel {
            out_channels,
            in_channels,
            size,
            data: vec![0.0; out_channels * in_channels * size * size],
        }
    }

    pub fn from_vec(
        out_channels: usize,
        in_channels: usize,
        size: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != out_channels * in_channels * size * size {
            return Err(Error::shape(
                "kernel",
                format!(
                    "{} values cannot fill a {out_channels}x{in_channels}x{size}x{size} kernel",
                    data.len()
                ),
            ));
        }
        Ok(Kernel {
            out_channels,
            in_channels,
            size,
            data,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.data[self.index(o, i, ky, kx)]
    }

    pub fn set(&mut self, o: usize, i: usize, ky: usize, kx: usize, value: f64) {
        let idx = self.index(o, i, ky, kx);
        self.data[idx] = value;
    }

    fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.size + ky) * self.size + kx
    }

    /// The `size²` taps connecting input channel `i` to output channel `o`.
    fn taps(&self, o: usize, i: usize) -> &[f64] {
        let f2 = self.size * self.size;
        let start = (o * self.in_channels + i) * f2;
        &self.data[start..start + f2]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    /// Out-of-frame taps read zero.
    #[default]
    Zero,
    /// Out-of-frame taps wrap around; used to test translation equivariance.
    Circular,
}

/// Stride-1, same-size convolution layer geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    #[serde(default)]
    pub padding: PaddingMode,
}

impl LayerSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        LayerSpec {
            in_channels,
            out_channels,
            kernel_size,
            padding: PaddingMode::Zero,
        }
    }

    pub fn with_padding(mut self, padding: PaddingMode) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::invalid(
                "layer_spec",
                format!("kernel size must be odd and >= 1, got {}", self.kernel_size),
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("layer_spec", "channel counts must be positive"));
        }
        Ok(())
    }

    fn check(&self, input: &Tensor, weights: &Kernel, bias: &[f64]) -> Result<()> {
        self.validate()?;
        if input.channels() != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input has {} channels, layer expects {}",
                    input.channels(),
                    self.in_channels
                ),
            ));
        }
        if weights.out_channels != self.out_channels
            || weights.in_channels != self.in_channels
            || weights.size != self.kernel_size
        {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weights are {}x{}x{k}x{k}, layer expects {}x{}x{f}x{f}",
                    weights.out_channels,
                    weights.in_channels,
                    self.out_channels,
                    self.in_channels,
                    k = weights.size,
                    f = self.kernel_size
                ),
            ));
        }
        if bias.len() != self.out_channels {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias has {} entries, layer expects {}",
                    bias.len(),
                    self.out_channels
                ),
            ));
        }
        Ok(())
    }
}

/// A convolution layer: geometry, weights and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    pub weight: Kernel,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(spec: LayerSpec) -> Self {
        ConvLayer {
            spec,
            weight: Kernel::zeros(spec.out_channels, spec.in_channels, spec.kernel_size),
            bias: vec![0.0; spec.out_channels],
        }
    }

    /// Weights and biases uniform in `[-s, s]` with `s = fan_in^{-1/2}`.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Self {
        let mut layer = ConvLayer::zeros(spec);
        let fan_in = (spec.in_channels * spec.kernel_size * spec.kernel_size) as f64;
        let s = fan_in.powf(-0.5);
        for w in layer.weight.data_mut() {
            *w = rng.random_range(-s..=s);
        }
        for b in &mut layer.bias {
            *b = rng.random_range(-s..=s);
        }
        layer
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.weight, &self.bias, &self.spec)
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }
}

/// Visits the contiguous row segments that a tap offset `(dy, dx)` connects.
///
/// `f(out_offset, in_offset, len)` receives flat plane offsets such that
/// `out[out_offset + t]` reads `in[in_offset + t]` for `t < len`.
fn for_each_segment(
    height: usize,
    width: usize,
    dy: isize,
    dx: isize,
    padding: PaddingMode,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (h, w) = (height as isize, width as isize);
    match padding {
        PaddingMode::Zero => {
            let x_lo = (-dx).max(0);
            let x_hi = (w - dx).min(w);
            if x_lo >= x_hi {
                return;
            }
            let len = (x_hi - x_lo) as usize;
            for y in (-dy).max(0)..(h - dy).min(h) {
                let out = (y * w + x_lo) as usize;
                let inp = ((y + dy) * w + x_lo + dx) as usize;
                f(out, inp, len);
            }
        }
        PaddingMode::Circular => {
            let sx = dx.rem_euclid(w.max(1));
            for y in 0..h {
                let iy = (y + dy).rem_euclid(h);
                // Output columns [0, w - sx) read [sx, w); the rest wrap to [0, sx).
                let first = (w - sx) as usize;
                if first > 0 {
                    f((y * w) as usize, (iy * w + sx) as usize, first);
                }
                if sx > 0 {
                    f((y * w) as usize + first, (iy * w) as usize, sx as usize);
                }
            }
        }
    }
}

/// Same-size, stride-1 convolution (cross-correlation, as in deep learning
/// frameworks) with per-output-channel bias.
pub fn conv2d(input: &Tensor, weights: &Kernel, bias: &[f64], spec: &LayerSpec) -> Result<Tensor> {
    spec.check(input, weights, bias)?;
    let (h, w) = (input.height, input.width);
    let r = (spec.kernel_size / 2) as isize;
    let f = spec.kernel_size;
    let mut out = Tensor::zeros(spec.out_channels, h, w);
    for o in 0..spec.out_channels {
        let out_plane = out.plane_mut(o);
        out_plane.fill(bias[o]);
        for i in 0..spec.in_channels {
            let in_plane = input.plane(i);
            let taps = weights.taps(o, i);
            for ky in 0..f {
                for kx in 0..f {
                    let wt = taps[ky * f + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    let (dy, dx) = (ky as isize - r, kx as isize - r);
                    for_each_segment(h, w, dy, dx, spec.padding, |oo, io, len| {
                        for (dst, src) in out_plane[oo..oo + len]
                            .iter_mut()
                            .zip(&in_plane[io..io + len])
                        {
                            *dst += wt * src;
                        }
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input, weights and bias.
pub struct Conv2dGrads {
    pub input: Tensor,
    pub weights: Kernel,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weights: &Kernel,
    grad_out: &Tensor,
    spec: &LayerSpec,
) -> Result<Conv2dGrads> {
    let bias = vec![0.0; spec.out_channels];
    spec.check(input, weights, &bias)?;
    if grad_out.shape() != (spec.out_channels, input.height, input.width) {
        return Err(Error::shape(
            "conv2d_backward",
            format!("output gradient shaped {:?}", grad_out.shape()),
        ));
    }
    let (h, w) = (input.height, input.width);
    let r = (spec.kernel_size / 2) as isize;
    let f = spec.kernel_size;
    let mut g_in = Tensor::zeros(input.channels, h, w);
    let mut g_w = Kernel::zeros(spec.out_channels, spec.in_channels, f);
    let g_b: Vec<f64> = (0..spec.out_channels)
        .map(|o| grad_out.plane(o).iter().sum())
        .collect();
    for o in 0..spec.out_channels {
        let go = grad_out.plane(o);
        for i in 0..spec.in_channels {
            let in_plane = input.plane(i);
            for ky in 0..f {
                for kx in 0..f {
                    let (dy, dx) = (ky as isize - r, kx as isize - r);
                    let wt = weights.get(o, i, ky, kx);
                    let mut acc = 0.0;
                    let gi = g_in.plane_mut(i);
                    for_each_segment(h, w, dy, dx, spec.padding, |oo, io, len| {
                        for t in 0..len {
                            acc += go[oo + t] * in_plane[io + t];
                            gi[io + t] += wt * go[oo + t];
                        }
                    });
                    let idx = g_w.index(o, i, ky, kx);
                    g_w.data[idx] = acc;
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: g_in,
        weights: g_w,
        bias: g_b,
    })
}

/// Average pooling with a `p × p` window and stride `p`.
///
/// When `p` does not divide a spatial dimension the last row/column is
/// replicated to fill the trailing blocks.
pub fn avg_pool(input: &Tensor, p: usize) -> Result<Tensor> {
    if p == 0 {
        return Err(Error::invalid("avg_pool", "pooling size must be >= 1"));
    }
    let (h, w) = (input.height, input.width);
    let (gh, gw) = (h.div_ceil(p), w.div_ceil(p));
    let norm = 1.0 / (p * p) as f64;
    let mut out = Tensor::zeros(input.channels, gh, gw);
    for c in 0..input.channels {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for by in 0..gh {
            for bx in 0..gw {
                let mut acc = 0.0;
                for u in 0..p {
                    let y = (by * p + u).min(h - 1);
                    for v in 0..p {
                        let x = (bx * p + v).min(w - 1);
                        acc += src[y * w + x];
                    }
                }
                dst[by * gw + bx] = acc * norm;
            }
        }
    }
    Ok(out)
}

/// Gradient of [`avg_pool`] with respect to its input of shape `input_shape`.
pub fn avg_pool_backward(
    grad_out: &Tensor,
    input_shape: (usize, usize, usize),
    p: usize,
) -> Result<Tensor> {
    if p == 0 {
        return Err(Error::invalid("avg_pool_backward", "pooling size must be >= 1"));
    }
    let (c_in, h, w) = input_shape;
    let (gh, gw) = (h.div_ceil(p), w.div_ceil(p));
    if grad_out.shape() != (c_in, gh, gw) {
        return Err(Error::shape(
            "avg_pool_backward",
            format!(
                "output gradient {:?} does not match pooled {:?}",
                grad_out.shape(),
                (c_in, gh, gw)
            ),
        ));
    }
    let norm = 1.0 / (p * p) as f64;
    let mut g = Tensor::zeros(c_in, h, w);
    for c in 0..c_in {
        let go = grad_out.plane(c);
        let gi = g.plane_mut(c);
        for by in 0..gh {
            for bx in 0..gw {
                let share = go[by * gw + bx] * norm;
                for u in 0..p {
                    let y = (by * p + u).min(h - 1);
                    for v in 0..p {
                        let x = (bx * p + v).min(w - 1);
                        gi[y * w + x] += share;
                    }
                }
            }
        }
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn elementwise(input: &Tensor, act: Activation) -> Tensor {
    input.map(|v| act.apply(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(c, h, w, (1..=c * h * w).map(|v| v as f64).collect()).unwrap()
    }

    fn random_kernel(o: usize, i: usize, f: usize, rng: &mut ChaCha8Rng) -> Kernel {
        let data = (0..o * i * f * f).map(|_| rng.random_range(-1.0..1.0)).collect();
        Kernel::from_vec(o, i, f, data).unwrap()
    }

    #[test]
    fn conv_of_zero_input_is_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = LayerSpec::new(1, 2, 3);
        let w = random_kernel(2, 1, 3, &mut rng);
        let out = conv2d(&Tensor::zeros(1, 3, 3), &w, &[0.5, -2.0], &spec).unwrap();
        assert!(out.plane(0).iter().all(|&v| v == 0.5));
        assert!(out.plane(1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = seq(1, 4, 5);
        let w = Kernel::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let out = conv2d(&x, &w, &[0.0], &LayerSpec::new(1, 1, 1)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn all_ones_kernel_center_sums_neighbourhood() {
        let x = seq(1, 3, 3);
        let w = Kernel::from_vec(1, 1, 3, vec![1.0; 9]).unwrap();
        let out = conv2d(&x, &w, &[0.0], &LayerSpec::new(1, 1, 3)).unwrap();
        assert_eq!(out.get(0, 1, 1), 45.0);
        // corner: 1 + 2 + 4 + 5
        assert_eq!(out.get(0, 0, 0), 12.0);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = seq(2, 3, 3);
        let w = Kernel::zeros(1, 1, 3);
        let err = conv2d(&x, &w, &[0.0], &LayerSpec::new(1, 1, 3)).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
        let even = LayerSpec::new(2, 1, 2);
        assert!(conv2d(&x, &Kernel::zeros(1, 2, 2), &[0.0], &even).is_err());
        let spec = LayerSpec::new(2, 1, 3);
        assert!(conv2d(&x, &Kernel::zeros(1, 2, 3), &[0.0, 1.0], &spec).is_err());
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = LayerSpec::new(3, 2, 3);
        let w = random_kernel(2, 3, 3, &mut rng);
        let bias = [0.0, 0.0];
        for _ in 0..20 {
            let a = Tensor::random(3, 6, 5, -1.0, 1.0, &mut rng);
            let b = Tensor::random(3, 6, 5, -1.0, 1.0, &mut rng);
            let (sa, sb) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mix = a.scale(sa).add(&b.scale(sb)).unwrap();
            let lhs = conv2d(&mix, &w, &bias, &spec).unwrap();
            let rhs = conv2d(&a, &w, &bias, &spec)
                .unwrap()
                .scale(sa)
                .add(&conv2d(&b, &w, &bias, &spec).unwrap().scale(sb))
                .unwrap();
            let scale = lhs.max_abs().max(1.0);
            assert!(lhs.max_abs_diff(&rhs) <= 1e-10 * scale);
        }
    }

    #[test]
    fn conv_matches_direct_loop_in_both_padding_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for padding in [PaddingMode::Zero, PaddingMode::Circular] {
            let spec = LayerSpec::new(2, 3, 5).with_padding(padding);
            let w = random_kernel(3, 2, 5, &mut rng);
            let bias = [0.1, -0.2, 0.3];
            let x = Tensor::random(2, 4, 7, -1.0, 1.0, &mut rng);
            let out = conv2d(&x, &w, &bias, &spec).unwrap();
            let (h, wd) = (4isize, 7isize);
            for o in 0..3 {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = bias[o];
                        for i in 0..2 {
                            for ky in 0..5isize {
                                for kx in 0..5isize {
                                    let (mut sy, mut sx) = (y + ky - 2, xx + kx - 2);
                                    match padding {
                                        PaddingMode::Zero => {
                                            if sy < 0 || sy >= h || sx < 0 || sx >= wd {
                                                continue;
                                            }
                                        }
                                        PaddingMode::Circular => {
                                            sy = sy.rem_euclid(h);
                                            sx = sx.rem_euclid(wd);
                                        }
                                    }
                                    acc += w.get(o, i, ky as usize, kx as usize)
                                        * x.get(i, sy as usize, sx as usize);
                                }
                            }
                        }
                        let got = out.get(o, y as usize, xx as usize);
                        assert!((got - acc).abs() < 1e-12, "{padding:?} {o} {y} {xx}");
                    }
                }
            }
        }
    }

    #[test]
    fn pool_identity_and_block_mean() {
        let x = seq(2, 3, 4);
        assert_eq!(avg_pool(&x, 1).unwrap(), x);
        let y = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = avg_pool(&y, 2).unwrap();
        assert_eq!(p.shape(), (1, 1, 1));
        assert_eq!(p.data(), &[2.5]);
        assert!(avg_pool(&y, 0).is_err());
    }

    #[test]
    fn pool_replicates_trailing_edge() {
        // rows hold their 1-based index
        let x = Tensor::from_vec(1, 3, 3, vec![1., 1., 1., 2., 2., 2., 3., 3., 3.]).unwrap();
        let p = avg_pool(&x, 2).unwrap();
        assert_eq!(p.shape(), (1, 2, 2));
        assert_eq!(p.get(0, 0, 0), 1.5);
        assert_eq!(p.get(0, 0, 1), 1.5);
        // bottom blocks read row 3 twice
        assert_eq!(p.get(0, 1, 0), 3.0);
    }

    #[test]
    fn pool_then_upsample_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in [1, 2, 3, 6] {
            let x = Tensor::random(2, 12, 18, -3.0, 5.0, &mut rng);
            let pooled = avg_pool(&x, p).unwrap();
            // constant upsampling repeats each super-pixel p² times
            assert!((pooled.mean() - x.mean()).abs() < 1e-12);
        }
    }

    #[test]
    fn activations_at_reference_points() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
        assert_eq!(Activation::Relu.apply(3.0), 3.0);
        assert!(Activation::Sigmoid.apply(-800.0).is_finite());
        assert_eq!(Activation::Sigmoid.apply(800.0), 1.0);
        let t = Tensor::from_vec(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(elementwise(&t, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = seq(2, 2, 3);
        let b = seq(1, 2, 3).scale(-1.0);
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.channels(), 3);
        assert_eq!(cat.slice_channels(0, 2).unwrap(), a);
        assert_eq!(cat.slice_channels(2, 1).unwrap(), b);
        assert!(cat.slice_channels(2, 2).is_err());
        assert!(Tensor::concat_channels(&[&a, &seq(1, 3, 3)]).is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Kernel::from_vec(1, 1, 3, vec![0.0; 8]).is_err());
    }
}
