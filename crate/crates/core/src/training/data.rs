//! Seeded moving-rectangle clips with synthetic blocking degradation, and
//! patch sampling for training.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enhancer::FrameSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub clips: usize,
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
    pub rectangles: usize,
    /// Side of the square blocks whose mean anchors the quantizer.
    pub block: usize,
    /// Quantizer step applied to deviations from the block mean.
    pub quant_step: f64,
    /// Half-width of the uniform noise added after quantization.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            clips: 6,
            frames_per_clip: 8,
            height: 32,
            width: 32,
            rectangles: 4,
            block: 4,
            quant_step: 0.4,
            noise: 0.08,
            seed: 0,
        }
    }
}

/// Ground-truth frames and their degraded counterparts.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub raw: Vec<Tensor>,
    pub compressed: Vec<Tensor>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

struct Rect {
    y: f64,
    x: f64,
    vy: f64,
    vx: f64,
    h: usize,
    w: usize,
    value: f64,
}

fn render(height: usize, width: usize, bg: [f64; 3], rects: &[Rect], t: f64) -> Tensor {
    let mut frame = Tensor::zeros(1, height, width);
    for y in 0..height {
        for x in 0..width {
            let v = bg[0] + bg[1] * y as f64 / height as f64 + bg[2] * x as f64 / width as f64;
            frame.set(0, y, x, v);
        }
    }
    for r in rects {
        let y0 = (r.y + r.vy * t).round() as isize;
        let x0 = (r.x + r.vx * t).round() as isize;
        for dy in 0..r.h as isize {
            for dx in 0..r.w as isize {
                let yy = (y0 + dy).rem_euclid(height as isize) as usize;
                let xx = (x0 + dx).rem_euclid(width as isize) as usize;
                frame.set(0, yy, xx, r.value);
            }
        }
    }
    frame
}

/// `X = m + q·round((Y − m)/q) + U(−a, a)` per `block × block` tile with
/// tile mean `m`, clipped to `[0, 1]`.
pub fn degrade<R: Rng + ?Sized>(
    frame: &Tensor,
    block: usize,
    quant_step: f64,
    noise: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if block == 0 || quant_step <= 0.0 || noise < 0.0 {
        return Err(Error::invalid(
            "degrade",
            format!("block {block}, step {quant_step}, noise {noise}"),
        ));
    }
    let (c, h, w) = frame.shape();
    let mut out = frame.clone();
    for ch in 0..c {
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (ye, xe) = ((by + block).min(h), (bx + block).min(w));
                let mut sum = 0.0;
                for y in by..ye {
                    for x in bx..xe {
                        sum += frame.get(ch, y, x);
                    }
                }
                let m = sum / ((ye - by) * (xe - bx)) as f64;
                for y in by..ye {
                    for x in bx..xe {
                        let q = m + quant_step * ((frame.get(ch, y, x) - m) / quant_step).round();
                        out.set(ch, y, x, q);
                    }
                }
            }
        }
    }
    if noise > 0.0 {
        for v in out.data_mut() {
            *v += rng.random_range(-noise..=noise);
        }
    }
    Ok(out.clamp(0.0, 1.0))
}

/// Generates `cfg.clips` clips, deterministic in `cfg.seed`.
pub fn synthetic_clips(cfg: &SyntheticConfig) -> Result<Vec<Clip>> {
    if cfg.height == 0 || cfg.width == 0 || cfg.frames_per_clip == 0 {
        return Err(Error::invalid("synthetic_clips", "empty clip dimensions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut clips = Vec::with_capacity(cfg.clips);
    for _ in 0..cfg.clips {
        let bg = [
            rng.random_range(0.2..0.5),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
        ];
        let rects: Vec<Rect> = (0..cfg.rectangles)
            .map(|_| Rect {
                y: rng.random_range(0.0..h as f64),
                x: rng.random_range(0.0..w as f64),
                vy: rng.random_range(-1.5..1.5),
                vx: rng.random_range(-1.5..1.5),
                h: rng.random_range(3..=(h / 3).max(3)),
                w: rng.random_range(3..=(w / 3).max(3)),
                value: rng.random_range(0.05..0.95),
            })
            .collect();
        let raw: Vec<Tensor> = (0..cfg.frames_per_clip)
            .map(|t| render(h, w, bg, &rects, t as f64))
            .collect();
        let compressed = raw
            .iter()
            .map(|f| degrade(f, cfg.block, cfg.quant_step, cfg.noise, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        clips.push(Clip { raw, compressed });
    }
    Ok(clips)
}

/// Co-located crops of a `2T + 1` compressed window and its ground-truth
/// centre frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub inputs: FrameSequence,
    pub target: Tensor,
    /// Top-left `(y, x)` of the crop.
    pub offset: (usize, usize),
}

/// Crops the same random `patch × patch` window from every frame. `raw`
/// and `compressed` hold the same odd-length window; the ground truth is
/// the raw centre frame.
pub fn sample_patches<R: Rng + ?Sized>(
    raw: &[Tensor],
    compressed: &[Tensor],
    patch: usize,
    rng: &mut R,
) -> Result<TrainingSample> {
    if raw.len() != compressed.len() || raw.is_empty() || raw.len() % 2 == 0 {
        return Err(Error::invalid(
            "sample_patches",
            format!("{} raw and {} compressed frames", raw.len(), compressed.len()),
        ));
    }
    let (_, h, w) = compressed[0].shape();
    if raw.iter().chain(compressed).any(|f| f.shape() != compressed[0].shape()) {
        return Err(Error::shape("sample_patches", "frames differ in shape"));
    }
    if patch == 0 || patch > h || patch > w {
        return Err(Error::invalid(
            "sample_patches",
            format!("patch {patch} for {h}x{w} frames"),
        ));
    }
    let y = rng.random_range(0..=h - patch);
    let x = rng.random_range(0..=w - patch);
    let frames = compressed
        .iter()
        .map(|f| f.crop(y, x, patch, patch))
        .collect::<Result<Vec<_>>>()?;
    let target = raw[raw.len() / 2].crop(y, x, patch, patch)?;
    Ok(TrainingSample {
        inputs: FrameSequence::centered(frames)?,
        target,
        offset: (y, x),
    })
}

/// `batch` samples drawn from random clips and temporal windows of radius
/// `radius`.
pub fn sample_batch<R: Rng + ?Sized>(
    clips: &[Clip],
    batch: usize,
    radius: usize,
    patch: usize,
    rng: &mut R,
) -> Result<Vec<TrainingSample>> {
    let span = 2 * radius + 1;
    let usable: Vec<&Clip> = clips.iter().filter(|c| c.len() >= span).collect();
    if usable.is_empty() {
        return Err(Error::invalid(
            "sample_batch",
            format!("no clip holds {span} frames"),
        ));
    }
    (0..batch)
        .map(|_| {
            let clip = usable[rng.random_range(0..usable.len())];
            let start = rng.random_range(0..=clip.len() - span);
            sample_patches(
                &clip.raw[start..start + span],
                &clip.compressed[start..start + span],
                patch,
                rng,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(n: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Tensor::random(1, h, w, 0.0, 1.0, &mut rng)).collect()
    }

    #[test]
    fn full_patch_is_identity_crop() {
        let raw = frames(3, 6, 6, 1);
        let comp = frames(3, 6, 6, 2);
        let s = sample_patches(&raw, &comp, 6, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.offset, (0, 0));
        assert_eq!(s.target, raw[1]);
        assert_eq!(s.inputs.frames(), &comp[..]);
    }

    #[test]
    fn offsets_within_frame() {
        let raw = vec![Tensor::zeros(1, 256, 448); 3];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut max_y, mut max_x) = (0, 0);
        for _ in 0..400 {
            let s = sample_patches(&raw, &raw, 80, &mut rng).unwrap();
            assert!(s.offset.0 <= 176 && s.offset.1 <= 368);
            assert_eq!(s.target.shape(), (1, 80, 80));
            max_y = max_y.max(s.offset.0);
            max_x = max_x.max(s.offset.1);
        }
        assert!(max_y > 150 && max_x > 330);
    }

    #[test]
    fn crops_are_colocated() {
        let raw = frames(3, 9, 9, 3);
        let s = sample_patches(&raw, &raw, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (y, x) = s.offset;
        for (f, c) in raw.iter().zip(s.inputs.frames()) {
            assert_eq!(c.get(0, 2, 3), f.get(0, y + 2, x + 3));
        }
        assert_eq!(&s.target, s.inputs.target());
    }

    #[test]
    fn deterministic_under_seed() {
        let clips = synthetic_clips(&SyntheticConfig::default()).unwrap();
        let a = sample_batch(&clips, 4, 1, 16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_batch(&clips, 4, 1, 16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(clips, synthetic_clips(&SyntheticConfig::default()).unwrap());
    }

    #[test]
    fn bad_inputs_rejected() {
        let raw = frames(3, 6, 6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_patches(&raw, &raw, 7, &mut rng).is_err());
        assert!(sample_patches(&raw, &raw[..2], 3, &mut rng).is_err());
        assert!(sample_patches(&raw[..2], &raw[..2], 3, &mut rng).is_err());
    }

    #[test]
    fn degradation_is_lossy_and_bounded() {
        let clips = synthetic_clips(&SyntheticConfig::default()).unwrap();
        for c in &clips {
            for (r, x) in c.raw.iter().zip(&c.compressed) {
                assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(r.max_abs_diff(x) > 0.0);
            }
        }
    }

    #[test]
    fn flat_blocks_only_get_noise() {
        let f = Tensor::filled(1, 8, 8, 0.4);
        let x = degrade(&f, 4, 0.3, 0.01, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(x.max_abs_diff(&f) <= 0.01 + 1e-15);
        let exact = degrade(&f, 4, 0.3, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(exact.max_abs_diff(&f) < 1e-15);
    }
}
