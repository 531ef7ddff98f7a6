use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;

use ssaclr_core::bound_lab::{self, DiscreteWorld, PacPenaltyInputs};
use ssaclr_core::config::{load_flat, parse_override, TrainConfig};
use ssaclr_core::data::{base_augment, DatasetSpec, Split};
use ssaclr_core::encoder::{read_checkpoint, Tap};
use ssaclr_core::eval::{
    clean_accuracy, robust_accuracy, top_k_accuracy, train_linear_probe, AttackConfig, Classifier, ProbeConfig,
    ProbedEncoder,
};
use ssaclr_core::fourier::{fft_augment_views, mixing_coefficients, AugmentConfig};
use ssaclr_core::seed;
use ssaclr_core::shift_gap::{estimate_shift_gap, EncoderSubject, GapForm, PositiveSampler, ShiftGapConfig, TauFactor};
use ssaclr_core::train::{
    append_metrics, format_summary, run_experiment_matrix, standard_variants, train_ssl, EvalSettings, MetricsRecord,
    METRICS_FILE,
};
use ssaclr_core::Image;

#[derive(Parser)]
#[command(name = "ssaclr", version, about = "Contrastive pretraining with sharpness-aware updates and Fourier views")]
struct Cli {
    /// Root directory for run outputs; relative output paths resolve here.
    #[arg(long, env = "SSACLR_OUTPUT_ROOT", default_value = "runs", global = true)]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder.
    Train(TrainArgs),
    /// Fit a linear probe on frozen features and report top-k accuracy.
    LinearEval(LinearEvalArgs),
    /// Clean and FGSM accuracy of encoder + probe.
    RobustEval(RobustEvalArgs),
    /// Shift-gap estimate for a checkpoint.
    ShiftGap(ShiftGapArgs),
    /// Exact checks on finite worlds.
    BoundLab(BoundLabArgs),
    /// Write original, base-augmented and Fourier-mixed views as PNG.
    AugmentPreview(PreviewArgs),
    /// Train and evaluate the ablation variants.
    Matrix(MatrixArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat dotted-key config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, root: &Path) -> Result<TrainConfig> {
        let mut flat = match &self.config {
            Some(p) => load_flat(p).with_context(|| format!("reading {}", p.display()))?,
            None => Default::default(),
        };
        for o in &self.overrides {
            let (k, v) = parse_override(o)?;
            flat.insert(k, v);
        }
        let mut cfg = TrainConfig::from_flat(&flat)?;
        if cfg.output_dir.is_relative() {
            cfg.output_dir = root.join(&cfg.output_dir);
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: DatasetSpec,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = TapArg::Backbone)]
    tap: TapArg,
    #[arg(long, default_value_t = ProbeConfig::default().epochs)]
    probe_epochs: usize,
    #[arg(long, default_value_t = ProbeConfig::default().lr)]
    probe_lr: f64,
    /// Metrics stream to append to; defaults to the one beside the checkpoint.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TapArg {
    Backbone,
    Projection,
}

impl From<TapArg> for Tap {
    fn from(t: TapArg) -> Tap {
        match t {
            TapArg::Backbone => Tap::Backbone,
            TapArg::Projection => Tap::Projection,
        }
    }
}

#[derive(Args)]
struct LinearEvalArgs {
    #[command(flatten)]
    probe: ProbeArgs,
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Write `label<TAB>feature...` rows for the test split.
    #[arg(long)]
    feature_dump: Option<PathBuf>,
}

#[derive(Args)]
struct RobustEvalArgs {
    #[command(flatten)]
    probe: ProbeArgs,
    #[arg(long, default_value_t = 8.0 / 255.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 1)]
    k: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum AugArg {
    Base,
    Fft,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum TauFactorArg {
    None,
    InverseTau,
    Tau,
}

#[derive(Args)]
struct ShiftGapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: DatasetSpec,
    #[arg(long, value_enum, default_value_t = AugArg::Base)]
    aug: AugArg,
    #[arg(long, default_value_t = 8)]
    n_mc: usize,
    #[arg(long, default_value_t = 0.5)]
    exponent: f64,
    #[arg(long, value_enum, default_value_t = TauFactorArg::None)]
    tau_factor: TauFactorArg,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    MeanClassifier,
    KTrend,
    PacPenalty,
}

#[derive(Args)]
struct BoundLabArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    #[arg(long, default_value_t = 200)]
    n_worlds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Monte Carlo samples for K beyond the enumeration guard.
    #[arg(long, default_value_t = 200_000)]
    samples: usize,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    data: DatasetSpec,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory, relative to the output root.
    #[arg(long, default_value = "preview")]
    out: PathBuf,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated subset of variant names.
    #[arg(long)]
    variants: Option<String>,
    #[arg(long, default_value_t = 8.0 / 255.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 8)]
    n_mc: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` reports a completed run whose checks did not all pass.
fn run(cli: Cli) -> Result<bool> {
    let root = cli.output_root;
    match cli.command {
        Command::Train(a) => {
            let cfg = a.config.resolve(&root)?;
            let out = train_ssl(&cfg)?;
            let last = out.metrics.last().and_then(|m| m.mean_loss);
            println!(
                "checkpoint {} after {} steps; final mean loss {}",
                out.checkpoint.display(),
                out.steps,
                last.map_or("n/a".into(), |l| format!("{l:.6}"))
            );
            Ok(true)
        }
        Command::LinearEval(a) => linear_eval(&a),
        Command::RobustEval(a) => robust_eval(&a),
        Command::ShiftGap(a) => shift_gap(&a),
        Command::BoundLab(a) => bound_lab_suite(&a),
        Command::AugmentPreview(a) => preview(&a, &root),
        Command::Matrix(a) => matrix(&a, &root),
    }
}

struct Probed {
    encoder: ssaclr_core::encoder::Encoder,
    params: Vec<f64>,
    probe: ssaclr_core::eval::LinearProbe,
    tap: Tap,
    test: ssaclr_core::data::LabeledSet,
    metrics: PathBuf,
    epoch: usize,
}

fn fit_probe(a: &ProbeArgs) -> Result<Probed> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let encoder = ckpt.encoder()?;
    let train = a.data.load(Split::Train)?;
    let test = a.data.load(Split::Test)?;
    let cfg = ProbeConfig {
        epochs: a.probe_epochs,
        lr: a.probe_lr,
        tap: a.tap.into(),
        seed: a.seed,
        ..ProbeConfig::default()
    };
    let probe = train_linear_probe(&encoder, &ckpt.params.values, &train, &cfg)?;
    let metrics = a.metrics.clone().unwrap_or_else(|| {
        a.checkpoint.parent().map(|p| p.join(METRICS_FILE)).unwrap_or_else(|| PathBuf::from(METRICS_FILE))
    });
    Ok(Probed {
        encoder,
        params: ckpt.params.values,
        probe,
        tap: cfg.tap,
        test,
        metrics,
        epoch: ckpt.header.epoch,
    })
}

fn linear_eval(a: &LinearEvalArgs) -> Result<bool> {
    let p = fit_probe(&a.probe)?;
    let model = ProbedEncoder {
        encoder: &p.encoder,
        params: &p.params,
        probe: &p.probe,
        tap: p.tap,
    };
    let logits = p.test.images.iter().map(|x| model.logits(x)).collect::<ssaclr_core::Result<Vec<_>>>()?;
    let acc = top_k_accuracy(&logits, &p.test.labels, a.k)?;
    println!("top-{} accuracy {acc:.4} on {} test images", a.k, p.test.len());
    let mut record = MetricsRecord::eval(p.epoch);
    match a.k {
        1 => record.top1 = Some(acc),
        5 => record.top5 = Some(acc),
        _ => {}
    }
    append_metrics(&p.metrics, &record)?;
    if let Some(path) = &a.feature_dump {
        let feats = p.encoder.embed(&p.params, &p.test.images, p.tap)?;
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for (f, y) in feats.iter().zip(&p.test.labels) {
            let row: Vec<String> = f.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{y}\t{}", row.join("\t"))?;
        }
        out.flush()?;
    }
    Ok(true)
}

fn robust_eval(a: &RobustEvalArgs) -> Result<bool> {
    let p = fit_probe(&a.probe)?;
    let model = ProbedEncoder {
        encoder: &p.encoder,
        params: &p.params,
        probe: &p.probe,
        tap: p.tap,
    };
    let attack = AttackConfig { epsilon: a.epsilon };
    let clean = clean_accuracy(&model, &p.test)?;
    let robust = robust_accuracy(&model, &p.test, &attack)?;
    println!("clean top-1 {clean:.4}; FGSM (eps = {:.5}) top-1 {robust:.4}", a.epsilon);
    let mut record = MetricsRecord::eval(p.epoch);
    record.top1 = Some(clean);
    record.robust = Some(robust);
    append_metrics(&p.metrics, &record)?;
    Ok(true)
}

fn shift_gap(a: &ShiftGapArgs) -> Result<bool> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let encoder = ckpt.encoder()?;
    let data = a.data.load(Split::Test)?;
    let aug = ssaclr_core::data::BaseAugConfig::default();
    let sampler = match a.aug {
        AugArg::Identity => PositiveSampler::Identity,
        AugArg::Base => PositiveSampler::Base { aug },
        AugArg::Fft => PositiveSampler::Fourier {
            aug,
            alpha: a.alpha,
            batch_size: a.batch_size,
        },
    };
    let subject = EncoderSubject {
        encoder: &encoder,
        params: &ckpt.params.values,
        sampler,
    };
    let cfg = ShiftGapConfig {
        n_mc_aug: a.n_mc,
        form: GapForm {
            exponent: a.exponent,
            tau_factor: match a.tau_factor {
                TauFactorArg::None => TauFactor::None,
                TauFactorArg::InverseTau => TauFactor::InverseTau,
                TauFactorArg::Tau => TauFactor::Tau,
            },
            tau: a.tau,
        },
        seed: a.seed,
    };
    let report = estimate_shift_gap(&subject, &data.images, &data.labels, data.num_classes, &cfg)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(true)
}

fn bound_lab_suite(a: &BoundLabArgs) -> Result<bool> {
    let mut all = true;
    match a.suite {
        Suite::MeanClassifier => {
            let mut rng = seed::rng(a.seed);
            for i in 0..a.n_worlds {
                let n = rng.gen_range(1..=6);
                let m = rng.gen_range(1..=3);
                let d = rng.gen_range(2..=4);
                let w = DiscreteWorld::random(&mut rng, n, m, d);
                let c = bound_lab::verify_mean_classifier_step(&w, a.tau);
                all &= c.holds;
                println!(
                    "{}",
                    serde_json::json!({"world": i, "n": n, "classes": m, "lhs": c.lhs, "rhs": c.rhs,
                        "slack": c.slack, "uncorrected_slack": c.uncorrected_slack, "holds": c.holds})
                );
            }
        }
        Suite::KTrend => {
            let w = bound_lab::four_point_world();
            let trend = bound_lab::k_trend(&w, a.tau, &[1, 2, 4, 8], a.samples, a.seed)?;
            for p in &trend {
                println!(
                    "{}",
                    serde_json::json!({"k": p.k, "loss": p.loss.value, "stderr": p.loss.stderr, "gap": p.gap})
                );
            }
            let (first, last) = (trend[0], trend[trend.len() - 1]);
            all = last.gap + 3.0 * last.loss.stderr.unwrap_or(0.0) < first.gap;
        }
        Suite::PacPenalty => {
            let mut rng = seed::rng(a.seed);
            for i in 0..a.n_worlds {
                let inputs = PacPenaltyInputs {
                    n: rng.gen_range(1..=100_000),
                    t: rng.gen_range(1..=1_000_000),
                    delta: rng.gen_range(1e-6..1.0),
                    rho: rng.gen_range(1e-3..1.0),
                    tau: rng.gen_range(0.05..2.0),
                    beta_neg: rng.gen_range(0.0..64.0),
                    theta_norm: rng.gen_range(0.0..100.0),
                };
                let v = bound_lab::pac_penalty(&inputs)?;
                println!("{}", serde_json::json!({"case": i, "inputs": inputs, "penalty": v}));
            }
        }
    }
    Ok(all)
}

fn to_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = img.shape();
    let px: Vec<u8> = (0..h * w)
        .flat_map(|i| {
            (0..3).map(move |ch| {
                let v = img.pixels()[i * c + if c == 1 { 0 } else { ch }];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            })
        })
        .collect();
    image::RgbImage::from_raw(w as u32, h as u32, px)
        .context("pixel buffer size")?
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn preview(a: &PreviewArgs, root: &Path) -> Result<bool> {
    let data = a.data.load(Split::Train)?;
    let n = a.count.min(data.len());
    if n < 2 {
        bail!("preview needs at least two images");
    }
    let out = if a.out.is_relative() { root.join(&a.out) } else { a.out.clone() };
    fs::create_dir_all(&out)?;
    let aug = ssaclr_core::data::BaseAugConfig::default();
    let base: Vec<Image> =
        data.images[..n].iter().enumerate().map(|(i, x)| base_augment(x, seed::derive(a.seed, i as u64), &aug)).collect();
    // mean-pixel features stand in for an encoder when pairing previews
    let feats: Vec<Vec<f64>> = base
        .iter()
        .map(|x| {
            let v: Vec<f64> = (0..x.channels()).map(|c| x.channel(c).iter().sum::<f64>()).collect();
            let norm = v.iter().map(|t| t * t).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|t| t / norm).collect()
        })
        .collect();
    let mix = AugmentConfig {
        alpha: a.alpha,
        rng_seed: seed::derive(a.seed, u64::MAX),
    };
    let mixed = fft_augment_views(&base, &feats, &mix)?;
    for i in 0..n {
        to_png(&data.images[i], &out.join(format!("{i:03}-original.png")))?;
        to_png(&base[i], &out.join(format!("{i:03}-base.png")))?;
        to_png(&mixed[i], &out.join(format!("{i:03}-fft.png")))?;
    }
    let betas = mixing_coefficients(&mix, n);
    fs::write(out.join("betas.json"), serde_json::to_vec_pretty(&betas)?)?;
    println!("wrote {} previews to {}", n, out.display());
    Ok(true)
}

fn matrix(a: &MatrixArgs, root: &Path) -> Result<bool> {
    let base = a.config.resolve(root)?;
    let mut variants = standard_variants(&base);
    if let Some(list) = &a.variants {
        let wanted: Vec<&str> = list.split(',').map(str::trim).collect();
        if let Some(w) = wanted.iter().find(|w| !variants.iter().any(|v| v.name == **w)) {
            bail!("unknown variant `{w}`");
        }
        variants.retain(|v| wanted.contains(&v.name.as_str()));
    }
    let settings = EvalSettings {
        probe: base.probe,
        attack: AttackConfig { epsilon: a.epsilon },
        gap: ShiftGapConfig {
            n_mc_aug: a.n_mc,
            seed: base.seed,
            ..ShiftGapConfig::default()
        },
        gap_alpha: base.fft.alpha,
    };
    let rows = run_experiment_matrix(&variants, &base.output_dir, &settings)?;
    let text = format_summary(&rows);
    fs::create_dir_all(&base.output_dir)?;
    let path = base.output_dir.join("summary.tsv");
    fs::write(&path, &text)?;
    print!("{text}");
    eprintln!("summary written to {}", path.display());
    Ok(rows.iter().all(|r| r.status == "ok"))
}
