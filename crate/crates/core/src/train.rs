//! Contrastive training loop, metrics stream and the ablation matrix.

use std::cell::Cell;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{base_augment, DatasetSpec, LabeledSet, Split};
use crate::encoder::{read_checkpoint, write_checkpoint, Checkpoint, ContrastiveObjective, Encoder, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{
    clean_accuracy, robust_accuracy, top_k_accuracy, train_linear_probe, AttackConfig, LinearProbe, ProbeConfig,
    ProbedEncoder,
};
use crate::fourier::{fft_augment_views, AugmentConfig};
use crate::image::Image;
use crate::objective::Objective;
use crate::sam::{sam_step, sgd_step, DEFAULT_ADAPTIVE_RHO, DEFAULT_RHO};
use crate::seed;
use crate::shift_gap::{estimate_shift_gap, EncoderSubject, PositiveSampler, ShiftGapConfig, ShiftGapReport};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.json";

// seed streams
const INIT: u64 = 0;
const SHUFFLE: u64 = 1;
const VIEWS: u64 = 2;
const MIXING: u64 = 3;

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Completed epochs; 0 for records of a standalone evaluation.
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_clock_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub robust: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub shift_gap: Option<f64>,
}

impl MetricsRecord {
    pub fn eval(epoch: usize) -> Self {
        Self {
            epoch,
            mean_loss: None,
            lr: None,
            wall_clock_s: None,
            top1: None,
            top5: None,
            robust: None,
            shift_gap: None,
        }
    }
}

/// Appends one JSON record per line.
pub fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: Vec<MetricsRecord>,
    pub steps: usize,
    pub gradient_evaluations: usize,
}

/// Counts gradient evaluations and optionally poisons one step.
struct Instrumented<'a> {
    inner: &'a dyn Objective,
    evaluations: &'a Cell<usize>,
    poison: bool,
}

impl Objective for Instrumented<'_> {
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.evaluations.set(self.evaluations.get() + 1);
        let (v, g) = self.inner.value_and_grad(params)?;
        Ok(if self.poison { (f64::NAN, g) } else { (v, g) })
    }
}

/// Two base views per anchor, interleaved so views `2k` and `2k+1` share
/// anchor `k`.
pub fn draw_views(config: &TrainConfig, data: &LabeledSet, batch: &[usize], epoch: usize) -> Vec<Image> {
    let mut views = Vec::with_capacity(2 * batch.len());
    for &i in batch {
        for v in 0..2u64 {
            let s = seed::derive_path(config.seed, &[VIEWS, epoch as u64, i as u64, v]);
            views.push(base_augment(&data.images[i], s, &config.aug));
        }
    }
    views
}

fn build_encoder(config: &TrainConfig, data: &LabeledSet) -> Result<Encoder> {
    let shape = data
        .shape()
        .ok_or_else(|| Error::Config(format!("dataset {} is empty", config.data)))?;
    Encoder::new(config.encoder.build(shape))
}

pub fn train_ssl(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = config.data.load(Split::Train)?;
    if data.len() < 2 {
        return Err(Error::Config("training needs at least two samples".into()));
    }
    let encoder = build_encoder(config, &data)?;
    let hash = config.config_hash();

    let (mut params, start_epoch) = match &config.resume {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            if ckpt.header.config_hash != hash {
                return Err(Error::Config(format!(
                    "checkpoint {} was produced by config {} but this config hashes to {hash}; refusing to resume",
                    path.display(),
                    ckpt.header.config_hash
                )));
            }
            if ckpt.encoder()?.config() != encoder.config() {
                return Err(Error::Checkpoint("checkpoint encoder does not match the configured encoder".into()));
            }
            (ckpt.params, ckpt.header.epoch)
        }
        None => (encoder.init_params(seed::derive(config.seed, INIT)), 0),
    };

    fs::create_dir_all(&config.output_dir)?;
    fs::write(config.output_dir.join(CONFIG_FILE), serde_json::to_vec_pretty(config)?)?;
    let metrics_path = config.output_dir.join(METRICS_FILE);
    let ckpt_path = config.output_dir.join(CHECKPOINT_FILE);
    let save = |params: &EncoderParams, epoch: usize| {
        write_checkpoint(&ckpt_path, &Checkpoint::new(&encoder, params.clone(), hash.clone(), epoch))
    };

    let batches: Vec<Vec<usize>> = {
        let b = config.batch_size;
        let n = data.len();
        (0..n.div_ceil(b)).map(|k| (k * b..(k * b + b).min(n)).collect()).filter(|v: &Vec<usize>| v.len() >= 2).collect()
    };
    let sam = config.sam_config();
    let evaluations = Cell::new(0);
    let mut step = start_epoch * batches.len();
    let mut metrics = Vec::new();

    for epoch in start_epoch..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive_path(config.seed, &[SHUFFLE, epoch as u64])));
        let mut loss_sum = 0.0;
        for (bi, slots) in batches.iter().enumerate() {
            let batch: Vec<usize> = slots.iter().map(|&s| order[s]).collect();
            let mut views = draw_views(config, &data, &batch, epoch);
            if config.fft.enabled && epoch >= config.fft.warmup_epochs {
                let feats = encoder.forward(&params.values, &views)?;
                let mix = AugmentConfig {
                    alpha: config.fft.alpha,
                    rng_seed: seed::derive_path(config.seed, &[MIXING, epoch as u64, bi as u64]),
                };
                views = fft_augment_views(&views, &feats, &mix)?;
            }
            let objective = ContrastiveObjective {
                encoder: &encoder,
                views: &views,
                tau: config.tau,
                beta: None,
            };
            let objective = Instrumented {
                inner: &objective,
                evaluations: &evaluations,
                poison: config.nan_at_step == Some(step),
            };
            let outcome = if config.sam.enabled {
                sam_step(&params.values, &objective, &sam, step)
            } else {
                sgd_step(&params.values, &objective, config.lr, step)
            };
            let outcome = match outcome {
                Ok(o) => o,
                Err(e) => {
                    save(&params, epoch)?;
                    return Err(Error::TrainingAborted {
                        step,
                        reason: e.to_string(),
                    });
                }
            };
            params = EncoderParams::new(outcome.params, params.layout)?;
            loss_sum += outcome.loss;
            step += 1;
        }
        let mean_loss = loss_sum / batches.len() as f64;
        let record = MetricsRecord {
            mean_loss: Some(mean_loss),
            lr: Some(config.lr),
            wall_clock_s: config.record_wall_clock.then(|| started.elapsed().as_secs_f64()),
            ..MetricsRecord::eval(epoch + 1)
        };
        append_metrics(&metrics_path, &record)?;
        metrics.push(record);
        let done = epoch + 1;
        if done == config.epochs || (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) {
            save(&params, done)?;
        }
    }
    if start_epoch >= config.epochs {
        save(&params, start_epoch)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        metrics,
        steps: step - start_epoch * batches.len(),
        gradient_evaluations: evaluations.get(),
    })
}

/// Evaluation settings shared by every matrix row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub probe: ProbeConfig,
    pub attack: AttackConfig,
    pub gap: ShiftGapConfig,
    /// Mixing strength of the Fourier sampler used for the shift gap.
    pub gap_alpha: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            attack: AttackConfig::default(),
            gap: ShiftGapConfig::default(),
            gap_alpha: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub robust: f64,
    pub gap_base: ShiftGapReport,
    pub gap_fft: ShiftGapReport,
}

/// Probe on the train split, everything else on the test split.
pub fn evaluate(
    encoder: &Encoder,
    params: &[f64],
    train: &LabeledSet,
    test: &LabeledSet,
    config: &TrainConfig,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let probe: LinearProbe = train_linear_probe(encoder, params, train, &settings.probe)?;
    let model = ProbedEncoder {
        encoder,
        params,
        probe: &probe,
        tap: settings.probe.tap,
    };
    let logits = test.images.iter().map(|x| crate::eval::Classifier::logits(&model, x)).collect::<Result<Vec<_>>>()?;
    let top1 = top_k_accuracy(&logits, &test.labels, 1)?;
    let top5 = top_k_accuracy(&logits, &test.labels, 5.min(test.num_classes))?;
    let robust = robust_accuracy(&model, test, &settings.attack)?;
    let gap = |sampler| {
        let subject = EncoderSubject {
            encoder,
            params,
            sampler,
        };
        estimate_shift_gap(&subject, &test.images, &test.labels, test.num_classes, &settings.gap)
    };
    let gap_base = gap(PositiveSampler::Base { aug: config.aug })?;
    let gap_fft = gap(PositiveSampler::Fourier {
        aug: config.aug,
        alpha: settings.gap_alpha,
        batch_size: 2 * config.batch_size,
    })?;
    Ok(EvalReport {
        top1,
        top5,
        robust,
        gap_base,
        gap_fft,
    })
}

/// Loads a checkpoint and evaluates it on `data`.
pub fn evaluate_checkpoint(path: &Path, data: &DatasetSpec, config: &TrainConfig, settings: &EvalSettings) -> Result<EvalReport> {
    let ckpt = read_checkpoint(path)?;
    let encoder = ckpt.encoder()?;
    let train = data.load(Split::Train)?;
    let test = data.load(Split::Test)?;
    evaluate(&encoder, &ckpt.params.values, &train, &test, config, settings)
}

/// Clean top-1 accuracy of an already trained probe.
pub fn probe_accuracy(encoder: &Encoder, params: &[f64], probe: &LinearProbe, tap: crate::encoder::Tap, data: &LabeledSet) -> Result<f64> {
    clean_accuracy(
        &ProbedEncoder {
            encoder,
            params,
            probe,
            tap,
        },
        data,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

/// Baseline, +SAM, +ASAM, +FFT and the full combination, sharing `base`'s
/// seed; each trains into its own subdirectory of `base.output_dir`.
pub fn standard_variants(base: &TrainConfig) -> Vec<Variant> {
    let mut plain = base.clone();
    plain.sam.enabled = false;
    plain.fft.enabled = false;
    let make = |name: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = plain.clone();
        f(&mut cfg);
        Variant {
            name: name.to_string(),
            config: cfg,
        }
    };
    vec![
        make("simclr", &|_| {}),
        make("simclr+sam", &|c| {
            c.sam.enabled = true;
            c.sam.rho = DEFAULT_RHO;
        }),
        make("simclr+asam", &|c| {
            c.sam.enabled = true;
            c.sam.adaptive = true;
            c.sam.rho = DEFAULT_ADAPTIVE_RHO;
        }),
        make("simclr+fft", &|c| c.fft.enabled = true),
        make("ssa-clr", &|c| {
            c.sam.enabled = true;
            c.sam.rho = DEFAULT_RHO;
            c.fft.enabled = true;
        }),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub robust: Option<f64>,
    pub gap_base: Option<f64>,
    pub gap_fft: Option<f64>,
    /// `ok` or the error that stopped the variant.
    pub status: String,
}

fn run_variant(variant: &Variant, dir: PathBuf, settings: &EvalSettings) -> Result<SummaryRow> {
    let mut cfg = variant.config.clone();
    cfg.output_dir = dir;
    let outcome = train_ssl(&cfg)?;
    let report = evaluate_checkpoint(&outcome.checkpoint, &cfg.data, &cfg, settings)?;
    Ok(SummaryRow {
        variant: variant.name.clone(),
        seed: cfg.seed,
        final_loss: outcome.metrics.last().and_then(|m| m.mean_loss),
        top1: Some(report.top1),
        top5: Some(report.top5),
        robust: Some(report.robust),
        gap_base: Some(report.gap_base.aggregate),
        gap_fft: Some(report.gap_fft.aggregate),
        status: "ok".into(),
    })
}

/// Trains and evaluates every variant under `root`; a failing variant
/// yields a row with empty cells instead of stopping the matrix.
pub fn run_experiment_matrix(variants: &[Variant], root: &Path, settings: &EvalSettings) -> Result<Vec<SummaryRow>> {
    if variants.is_empty() {
        return Err(Error::Config("the experiment matrix needs at least one variant".into()));
    }
    Ok(variants
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let dir = root.join(format!("{i:02}-{}", v.name));
            run_variant(v, dir, settings).unwrap_or_else(|e| SummaryRow {
                variant: v.name.clone(),
                seed: v.config.seed,
                final_loss: None,
                top1: None,
                top5: None,
                robust: None,
                gap_base: None,
                gap_fft: None,
                status: format!("failed: {e}"),
            })
        })
        .collect())
}

const SUMMARY_HEADER: &str = "variant\tseed\tfinal_loss\ttop1\ttop5\trobust\tgap_base\tgap_fft\tstatus";

/// Tab-separated summary; empty cells mark failed measurements.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let status = r.status.replace(['\t', '\n'], " ");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.variant,
            r.seed,
            cell(r.final_loss),
            cell(r.top1),
            cell(r.top5),
            cell(r.robust),
            cell(r.gap_base),
            cell(r.gap_fft),
            status
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ArchKind;

    fn small_config(dir: &Path) -> TrainConfig {
        let mut cfg = TrainConfig {
            data: "synthetic:n=6,classes=2,size=6,seed=3".parse().unwrap(),
            batch_size: 4,
            epochs: 2,
            output_dir: dir.to_path_buf(),
            ..TrainConfig::default()
        };
        cfg.encoder.arch = ArchKind::Mlp;
        cfg.encoder.hidden = vec![16];
        cfg.encoder.feature_dim = 8;
        cfg.encoder.projection_hidden = 8;
        cfg.encoder.projection_dim = 4;
        cfg
    }

    #[test]
    fn one_epoch_smoke_and_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.epochs = 1;
        let out = train_ssl(&cfg).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert!(out.metrics[0].mean_loss.unwrap().is_finite());
        let ckpt = read_checkpoint(&out.checkpoint).unwrap();
        assert_eq!(ckpt.header.epoch, 1);
        assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), out.metrics);
    }

    #[test]
    fn baseline_uses_one_gradient_per_step_and_sam_two() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let plain = train_ssl(&cfg).unwrap();
        assert_eq!(plain.gradient_evaluations, plain.steps);
        let mut sam = small_config(&dir.path().join("sam"));
        sam.sam.enabled = true;
        let out = train_ssl(&sam).unwrap();
        assert_eq!(out.gradient_evaluations, 2 * out.steps);
    }

    #[test]
    fn nan_injection_aborts_and_keeps_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        cfg.epochs = 3;
        // three batches per epoch; step 4 is in the second epoch
        cfg.nan_at_step = Some(4);
        match train_ssl(&cfg) {
            Err(Error::TrainingAborted { step, .. }) => assert_eq!(step, 4),
            other => panic!("{other:?}"),
        }
        let ckpt = read_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert!(ckpt.params.values.iter().all(|v| v.is_finite()));
        let metrics = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(metrics.len(), 1);
        assert!(metrics.iter().all(|m| m.mean_loss.unwrap().is_finite()));
    }

    #[test]
    fn resume_continues_and_rejects_foreign_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let full = small_config(&dir.path().join("full"));
        let straight = train_ssl(&full).unwrap();

        let mut first = small_config(&dir.path().join("split"));
        first.epochs = 1;
        let part = train_ssl(&first).unwrap();
        let mut rest = small_config(&dir.path().join("split"));
        rest.resume = Some(part.checkpoint.clone());
        train_ssl(&rest).unwrap();
        let a = read_checkpoint(&straight.checkpoint).unwrap();
        let b = read_checkpoint(&dir.path().join("split").join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(a.params.values, b.params.values);

        let mut other = small_config(&dir.path().join("other"));
        other.tau = 0.3;
        other.resume = Some(part.checkpoint);
        assert!(matches!(train_ssl(&other), Err(Error::Config(m)) if m.contains("refusing")));
    }

    #[test]
    fn matrix_rows_are_deterministic_and_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let base = small_config(dir.path());
        let variants = standard_variants(&base);
        assert_eq!(variants.len(), 5);
        let full = &variants[4].config;
        assert!(full.sam.enabled && full.fft.enabled && !full.sam.adaptive);

        let mut broken = variants[0].clone();
        broken.name = "broken".into();
        broken.config.data = "cifar10:/nonexistent".parse().unwrap();
        let settings = EvalSettings {
            gap: ShiftGapConfig {
                n_mc_aug: 2,
                ..ShiftGapConfig::default()
            },
            ..EvalSettings::default()
        };
        let list = vec![variants[0].clone(), variants[0].clone(), broken];
        let rows = run_experiment_matrix(&list, dir.path(), &settings).unwrap();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[0].status, "ok");
        assert!(rows[0].top1.is_some() && rows[0].robust.is_some() && rows[0].gap_base.is_some());
        assert!(rows[2].status.starts_with("failed") && rows[2].top1.is_none());
        let text = format_summary(&rows);
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(3).unwrap().contains("\t\t"));
    }
}
