use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use nlconvlstm::bench::{bench_nonlocal, BenchCase, BenchReport};
use nlconvlstm::convlstm::NonLocalMode;
use nlconvlstm::enhancer::{enhance, EnhanceConfig, FrameSequence};
use nlconvlstm::io::{load_sequence, save_sequence};
use nlconvlstm::metrics::{fluctuation, psnr, ssim, QualityCurve, SSIM_WINDOW};
use nlconvlstm::nonlocal::complexity::best_integer_p;
use nlconvlstm::nonlocal::{ComplexityEstimate, NonLocalConfig};
use nlconvlstm::training::{
    evaluate, initial_params, load_checkpoint, save_checkpoint, smoothed, synthetic_clips,
    train_toy, Checkpoint, LossKind, SyntheticConfig, TrainConfig,
};
use nlconvlstm::Tensor;

/// PSNR used in curves and summaries when two frames are identical.
const PSNR_CAP_DB: f64 = 100.0;

#[derive(Parser)]
#[command(name = "nlconvlstm", version, about = "Video artifact reduction with similarity-warped ConvLSTM")]
struct Cli {
    /// Worker threads for data-parallel kernels.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance every frame of a sequence with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Time the non-local stage and compare op counts with the cost model.
    Bench(BenchArgs),
    /// Train on seeded synthetic clips and write a checkpoint.
    TrainToy(TrainArgs),
    /// Per-frame PSNR/SSIM between two sequences plus fluctuation stats.
    Metrics(MetricsArgs),
    /// Print the analytic complexity estimate.
    Estimate(EstimateArgs),
}

#[derive(Args, Clone, Copy)]
struct NonLocalArgs {
    /// Candidate blocks kept per target block.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Pooling block size.
    #[arg(long, default_value_t = 10)]
    p: usize,
    /// Softmax temperature.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// exact or approx.
    #[arg(long, default_value = "approx")]
    mode: NonLocalMode,
}

impl NonLocalArgs {
    fn enhance_config(&self) -> EnhanceConfig {
        EnhanceConfig {
            nonlocal: NonLocalConfig::new(self.k, self.p, self.beta),
            mode: self.mode,
        }
    }
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest to write; frames go next to it.
    #[arg(long)]
    output: PathBuf,
    /// Frames on each side of the target.
    #[arg(short = 'T', long = "radius", default_value_t = 3)]
    radius: usize,
    #[command(flatten)]
    nonlocal: NonLocalArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated HxW list, e.g. 120x120,180x180.
    #[arg(long, default_value = "120x120")]
    resolutions: String,
    #[arg(long, default_value_t = 16)]
    c: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// exact, approx or both.
    #[arg(long, default_value = "approx")]
    mode: String,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run exact mode above the dense size limit.
    #[arg(long)]
    allow_large_exact: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 16)]
    patch: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    /// norm or mse.
    #[arg(long, default_value = "norm")]
    loss: String,
    #[arg(short = 'T', long = "radius", default_value_t = 1)]
    radius: usize,
    #[arg(long, default_value_t = 8)]
    feature_channels: usize,
    #[arg(long, default_value_t = 8)]
    hidden_channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    p: usize,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value = "approx")]
    mode: NonLocalMode,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-iteration loss CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Also report PSNR gain on held-out clips.
    #[arg(long)]
    eval: bool,
}

#[derive(Args)]
struct MetricsArgs {
    /// Reference sequence.
    #[arg(long)]
    a: PathBuf,
    /// Distorted or enhanced sequence.
    #[arg(long)]
    b: PathBuf,
    /// Write the per-frame CSV here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long, default_value_t = 1080)]
    height: usize,
    #[arg(long, default_value_t = 1920)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    c: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    ensure!(cli.threads > 0, "--threads must be positive");
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring the thread pool")?;
    match cli.command {
        Command::Enhance(a) => cmd_enhance(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::TrainToy(a) => cmd_train_toy(&a),
        Command::Metrics(a) => cmd_metrics(&a),
        Command::Estimate(a) => cmd_estimate(&a),
    }
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn capped_psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(psnr(a, b, 1.0)?.min(PSNR_CAP_DB))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cmd_enhance(a: &EnhanceArgs) -> Result<()> {
    let seq = load_sequence(&a.manifest)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let params = ckpt.params;
    let m = &seq.manifest;
    ensure!(
        params.config.frame_channels == m.channels,
        "checkpoint expects {}-channel frames, manifest has {}",
        params.config.frame_channels,
        m.channels
    );
    let cfg = a.nonlocal.enhance_config();
    if cfg.mode == NonLocalMode::Approx {
        cfg.nonlocal.validate(m.height, m.width)?;
    } else {
        cfg.nonlocal.check_dense(m.width * m.height)?;
    }
    let n = seq.frames.len();
    let mut enhanced = Vec::with_capacity(n);
    for t in 0..n {
        // edge frames repeat to keep every window 2T + 1 long
        let window = (0..=2 * a.radius)
            .map(|i| seq.frames[(t + i).saturating_sub(a.radius).min(n - 1)].clone())
            .collect();
        let window = FrameSequence::centered(window)?;
        enhanced.push(enhance(&window, &params, &cfg)?);
    }
    if let Some(dir) = a.output.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    save_sequence(&a.output, &enhanced, None)?;
    println!("wrote {} enhanced frames to {}", n, a.output.display());
    if let Some(gt) = &seq.ground_truth {
        let mut rows = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for ((x, y), e) in seq.frames.iter().zip(gt).zip(&enhanced) {
            rows.0.push(capped_psnr(x, y)?);
            rows.1.push(capped_psnr(e, y)?);
            if m.channels == 1 && m.height >= SSIM_WINDOW && m.width >= SSIM_WINDOW {
                rows.2.push(ssim(x, y)?);
                rows.3.push(ssim(e, y)?);
            }
        }
        println!(
            "psnr_input={:.4} psnr_enhanced={:.4} delta_psnr={:.4}",
            mean(&rows.0),
            mean(&rows.1),
            mean(&rows.1) - mean(&rows.0)
        );
        if !rows.2.is_empty() {
            println!(
                "ssim_input={:.6} ssim_enhanced={:.6} delta_ssim={:.6}",
                mean(&rows.2),
                mean(&rows.3),
                mean(&rows.3) - mean(&rows.2)
            );
        }
    }
    Ok(())
}

fn parse_resolutions(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|r| {
            let (h, w) = r
                .trim()
                .split_once(['x', 'X'])
                .with_context(|| format!("resolution {r:?} is not HxW"))?;
            Ok((h.parse()?, w.parse()?))
        })
        .collect()
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let modes = match a.mode.as_str() {
        "both" => vec![NonLocalMode::Exact, NonLocalMode::Approx],
        m => vec![m.parse().map_err(anyhow::Error::msg)?],
    };
    let cfg = NonLocalConfig::new(a.k, a.p, a.beta);
    let mut report = BenchReport::default();
    for (height, width) in parse_resolutions(&a.resolutions)? {
        for &mode in &modes {
            let case = BenchCase {
                height,
                width,
                channels: a.c,
                mode,
                repetitions: a.repetitions,
                seed: a.seed,
                allow_large_exact: a.allow_large_exact,
            };
            report.rows.push(bench_nonlocal(&case, &cfg)?);
        }
    }
    emit(a.output.as_deref(), &report.to_csv())
}

fn cmd_train_toy(a: &TrainArgs) -> Result<()> {
    let loss = match a.loss.as_str() {
        "norm" => LossKind::Norm,
        "mse" => LossKind::MeanSquared,
        other => bail!("unknown loss {other:?}, expected norm or mse"),
    };
    let mut cfg = TrainConfig {
        loss,
        iterations: a.iterations,
        batch_size: a.batch,
        patch: a.patch,
        radius: a.radius,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.adam.lr = a.lr;
    cfg.network.feature_channels = a.feature_channels;
    cfg.network.hidden_channels = a.hidden_channels;
    cfg.enhance = EnhanceConfig {
        nonlocal: NonLocalConfig::new(a.k, a.p, a.beta),
        mode: a.mode,
    };
    let data = SyntheticConfig {
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    let clips = synthetic_clips(&data)?;
    let out = train_toy(&clips, &cfg)?;
    save_checkpoint(
        &a.checkpoint,
        &Checkpoint {
            params: out.params.clone(),
            adam: Some(out.adam.clone()),
        },
    )?;
    if let Some(path) = &a.loss_csv {
        let mut csv = String::from("iteration,loss\n");
        for (i, l) in out.losses.iter().enumerate() {
            writeln!(csv, "{i},{l:e}").expect("writing to a String");
        }
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    let s = smoothed(&out.losses, 20);
    match (s.get(19.min(s.len().saturating_sub(1))), s.last()) {
        (Some(first), Some(last)) => println!(
            "iterations={} initial_smoothed={first:.6} final_smoothed={last:.6}",
            out.losses.len()
        ),
        _ => println!("iterations=0"),
    }
    if a.eval {
        let held = synthetic_clips(&SyntheticConfig {
            clips: 2,
            seed: data.seed.wrapping_add(0x5eed),
            ..data
        })?;
        let before = evaluate(&held, &initial_params(&cfg)?, &cfg.enhance, cfg.radius)?;
        let after = evaluate(&held, &out.params, &cfg.enhance, cfg.radius)?;
        println!(
            "held_out_psnr_input={:.4} init_delta_psnr={:.4} delta_psnr={:.4}",
            after.psnr_input,
            before.delta_psnr(),
            after.delta_psnr()
        );
    }
    println!("checkpoint={}", a.checkpoint.display());
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let sa = load_sequence(&a.a)?;
    let sb = load_sequence(&a.b)?;
    ensure!(
        sa.frames.len() == sb.frames.len(),
        "{} frames vs {} frames",
        sa.frames.len(),
        sb.frames.len()
    );
    let (ma, mb) = (&sa.manifest, &sb.manifest);
    ensure!(
        (ma.width, ma.height, ma.channels) == (mb.width, mb.height, mb.channels),
        "frame dimensions differ: {}x{}x{} vs {}x{}x{}",
        ma.height,
        ma.width,
        ma.channels,
        mb.height,
        mb.width,
        mb.channels
    );
    let with_ssim = ma.channels == 1 && ma.height >= SSIM_WINDOW && ma.width >= SSIM_WINDOW;
    let mut csv = String::from(if with_ssim { "frame,psnr,ssim\n" } else { "frame,psnr\n" });
    let (mut p_curve, mut s_curve) = (Vec::new(), Vec::new());
    for (i, (x, y)) in sa.frames.iter().zip(&sb.frames).enumerate() {
        let p = psnr(x, y, 1.0)?;
        p_curve.push(p.min(PSNR_CAP_DB));
        write!(csv, "{i},{p:.6}").expect("writing to a String");
        if with_ssim {
            let s = ssim(x, y)?;
            s_curve.push(s);
            write!(csv, ",{s:.9}").expect("writing to a String");
        }
        csv.push('\n');
    }
    emit(a.output.as_deref(), &csv)?;
    let describe = |name: &str, curve: Vec<f64>| -> Result<String> {
        let c = QualityCurve::new(curve)?;
        let f = fluctuation(&c);
        let pvd = f.pvd.map_or("absent".to_string(), |v| format!("{v:.6}"));
        Ok(format!("{name}: mean={:.6} std={:.6} pvd={pvd}", c.mean(), f.std))
    };
    let mut summary = describe("psnr", p_curve)?;
    if with_ssim {
        summary = format!("{summary}\n{}", describe("ssim", s_curve)?);
    }
    if a.output.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}

fn cmd_estimate(a: &EstimateArgs) -> Result<()> {
    let n = a.height * a.width;
    let est = ComplexityEstimate::new(n, a.c, a.k, a.p)?;
    let (best_p, best_ratio) = best_integer_p(n, a.k);
    let mut value = serde_json::to_value(est)?;
    value["space_ratio"] = est.space_ratio().into();
    value["best_integer_p"] = best_p.into();
    value["best_integer_ratio"] = best_ratio.into();
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}
