//! Monte Carlo estimate of the distance between class-mean features and the
//! mean features of augmented anchors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{base_augment, BaseAugConfig};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::fourier::{fft_augment_views, AugmentConfig};
use crate::image::Image;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TauFactor {
    #[default]
    None,
    /// Multiply by `1 / tau`.
    InverseTau,
    /// Multiply by `tau`.
    Tau,
}

/// Per-anchor transform `factor * |m_c - m_aug(x)|^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapForm {
    pub exponent: f64,
    pub tau_factor: TauFactor,
    pub tau: f64,
}

impl Default for GapForm {
    fn default() -> Self {
        Self {
            exponent: 0.5,
            tau_factor: TauFactor::None,
            tau: 0.5,
        }
    }
}

impl GapForm {
    pub fn validate(&self) -> Result<()> {
        if !(self.exponent > 0.0 && self.exponent.is_finite()) {
            return Err(Error::Metric(format!("gap exponent must be positive, got {}", self.exponent)));
        }
        if self.tau_factor != TauFactor::None && !(self.tau > 0.0) {
            return Err(Error::Metric(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn apply(&self, distance: f64) -> f64 {
        let factor = match self.tau_factor {
            TauFactor::None => 1.0,
            TauFactor::InverseTau => 1.0 / self.tau,
            TauFactor::Tau => self.tau,
        };
        factor * distance.powf(self.exponent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftGapConfig {
    /// Augmented copies averaged per anchor.
    pub n_mc_aug: usize,
    pub form: GapForm,
    pub seed: u64,
}

impl Default for ShiftGapConfig {
    fn default() -> Self {
        Self {
            n_mc_aug: 8,
            form: GapForm::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftGapReport {
    pub per_class_gap: BTreeMap<usize, f64>,
    pub aggregate: f64,
    pub n_mc_aug: usize,
    pub exponent: f64,
    pub tau_factor: TauFactor,
}

/// Something with a feature map and a stochastic augmentation.
pub trait GapSubject {
    type Item: Clone;
    fn features(&self, items: &[Self::Item]) -> Result<Vec<Vec<f64>>>;
    /// One augmented copy of every item, reproducible from `seed`.
    fn augment(&self, items: &[Self::Item], seed: u64) -> Result<Vec<Self::Item>>;
}

pub fn estimate_shift_gap<S: GapSubject>(
    subject: &S,
    items: &[S::Item],
    labels: &[usize],
    num_classes: usize,
    config: &ShiftGapConfig,
) -> Result<ShiftGapReport> {
    config.form.validate()?;
    if config.n_mc_aug == 0 {
        return Err(Error::Metric("n_mc_aug must be at least 1".into()));
    }
    if items.len() != labels.len() {
        return Err(Error::Metric(format!("{} items but {} labels", items.len(), labels.len())));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::Metric(format!("label {y} out of range for {num_classes} classes")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Metric(format!("class {c} has no samples")));
    }

    // running means, so identical inputs average to themselves exactly
    let raw = subject.features(items)?;
    let d = raw.first().map_or(0, Vec::len);
    let mut class_means = vec![vec![0.0; d]; num_classes];
    let mut seen = vec![0usize; num_classes];
    for (f, &y) in raw.iter().zip(labels) {
        seen[y] += 1;
        running_mean(&mut class_means[y], f, seen[y]);
    }

    let mut aug_means = vec![vec![0.0; d]; items.len()];
    for r in 0..config.n_mc_aug {
        let augmented = subject.augment(items, seed::derive(config.seed, r as u64))?;
        for (acc, f) in aug_means.iter_mut().zip(subject.features(&augmented)?) {
            running_mean(acc, &f, r + 1);
        }
    }

    let mut sums = vec![0.0; num_classes];
    for (aug, &y) in aug_means.iter().zip(labels) {
        let dist = class_means[y]
            .iter()
            .zip(aug)
            .map(|(m, a)| (m - a).powi(2))
            .sum::<f64>()
            .sqrt();
        sums[y] += config.form.apply(dist);
    }
    let per_class_gap: BTreeMap<usize, f64> =
        sums.iter().zip(&counts).enumerate().map(|(c, (s, &n))| (c, s / n as f64)).collect();
    let total = labels.len() as f64;
    let aggregate = per_class_gap.iter().map(|(&c, g)| counts[c] as f64 / total * g).sum();
    Ok(ShiftGapReport {
        per_class_gap,
        aggregate,
        n_mc_aug: config.n_mc_aug,
        exponent: config.form.exponent,
        tau_factor: config.form.tau_factor,
    })
}

fn running_mean(mean: &mut [f64], x: &[f64], count: usize) {
    for (m, v) in mean.iter_mut().zip(x) {
        *m += (v - *m) / count as f64;
    }
}

/// How positive views are drawn for the gap estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositiveSampler {
    Identity,
    Base { aug: BaseAugConfig },
    /// Base augmentation followed by amplitude mixing within chunks of
    /// `batch_size` views.
    Fourier {
        aug: BaseAugConfig,
        alpha: f64,
        batch_size: usize,
    },
}

/// A trained encoder together with a positive sampler.
pub struct EncoderSubject<'a> {
    pub encoder: &'a Encoder,
    pub params: &'a [f64],
    pub sampler: PositiveSampler,
}

impl GapSubject for EncoderSubject<'_> {
    type Item = Image;

    fn features(&self, items: &[Image]) -> Result<Vec<Vec<f64>>> {
        self.encoder.forward(self.params, items)
    }

    fn augment(&self, items: &[Image], seed_value: u64) -> Result<Vec<Image>> {
        let aug = match &self.sampler {
            PositiveSampler::Identity => return Ok(items.to_vec()),
            PositiveSampler::Base { aug } | PositiveSampler::Fourier { aug, .. } => aug,
        };
        let base: Vec<Image> = items
            .iter()
            .enumerate()
            .map(|(i, x)| base_augment(x, seed::derive_path(seed_value, &[0, i as u64]), aug))
            .collect();
        match &self.sampler {
            PositiveSampler::Identity | PositiveSampler::Base { .. } => Ok(base),
            PositiveSampler::Fourier { alpha, batch_size, .. } => {
                if *batch_size < 2 {
                    return Err(Error::Metric("Fourier sampler needs batch_size >= 2".into()));
                }
                let mut out = Vec::with_capacity(base.len());
                for (j, chunk) in base.chunks(*batch_size).enumerate() {
                    if chunk.len() < 2 {
                        out.extend_from_slice(chunk);
                        continue;
                    }
                    let feats = self.encoder.forward(self.params, chunk)?;
                    let cfg = AugmentConfig {
                        alpha: *alpha,
                        rng_seed: seed::derive_path(seed_value, &[1, j as u64]),
                    };
                    out.extend(fft_augment_views(chunk, &feats, &cfg)?);
                }
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::tests::tiny_mlp;
    use rand::Rng;

    /// Scalar features with a deterministic shift added by augmentation.
    struct Shifted {
        offset: f64,
    }

    impl GapSubject for Shifted {
        type Item = f64;
        fn features(&self, items: &[f64]) -> Result<Vec<Vec<f64>>> {
            Ok(items.iter().map(|&x| vec![x]).collect())
        }
        fn augment(&self, items: &[f64], _seed: u64) -> Result<Vec<f64>> {
            Ok(items.iter().map(|x| x + self.offset).collect())
        }
    }

    /// Features scattered by uniform noise of half-width `spread`.
    struct Noisy {
        spread: f64,
    }

    impl GapSubject for Noisy {
        type Item = f64;
        fn features(&self, items: &[f64]) -> Result<Vec<Vec<f64>>> {
            Ok(items.iter().map(|&x| vec![x]).collect())
        }
        fn augment(&self, items: &[f64], s: u64) -> Result<Vec<f64>> {
            let mut rng = seed::rng(s);
            Ok(items.iter().map(|x| x + rng.gen_range(-self.spread..self.spread)).collect())
        }
    }

    fn exact_form() -> ShiftGapConfig {
        ShiftGapConfig {
            n_mc_aug: 3,
            form: GapForm {
                exponent: 1.0,
                ..GapForm::default()
            },
            seed: 0,
        }
    }

    #[test]
    fn identity_augmentation_on_constant_classes_has_zero_gap() {
        let items = vec![1.0, 1.0, 1.0, -2.0, -2.0];
        let labels = vec![0, 0, 0, 1, 1];
        let r = estimate_shift_gap(&Shifted { offset: 0.0 }, &items, &labels, 2, &exact_form()).unwrap();
        assert_eq!(r.aggregate, 0.0);
        assert!(r.per_class_gap.values().all(|&g| g == 0.0));
    }

    #[test]
    fn constant_shift_gives_its_magnitude() {
        let items = vec![0.0, 0.0, 3.0];
        let labels = vec![0, 0, 1];
        let r = estimate_shift_gap(&Shifted { offset: 0.25 }, &items, &labels, 2, &exact_form()).unwrap();
        assert!((r.aggregate - 0.25).abs() < 1e-12);
        let sqrt_form = ShiftGapConfig {
            form: GapForm::default(),
            ..exact_form()
        };
        let r = estimate_shift_gap(&Shifted { offset: 0.25 }, &items, &labels, 2, &sqrt_form).unwrap();
        assert!((r.aggregate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tau_factors_scale_the_gap() {
        let items = vec![0.0, 1.0];
        let labels = vec![0, 1];
        let gap = |tau_factor| {
            let cfg = ShiftGapConfig {
                form: GapForm {
                    exponent: 1.0,
                    tau_factor,
                    tau: 0.5,
                },
                ..exact_form()
            };
            estimate_shift_gap(&Shifted { offset: 0.3 }, &items, &labels, 2, &cfg).unwrap().aggregate
        };
        assert!((gap(TauFactor::InverseTau) - 0.6).abs() < 1e-12);
        assert!((gap(TauFactor::Tau) - 0.15).abs() < 1e-12);
    }

    #[test]
    fn aggregate_weights_classes_by_frequency() {
        // class 0 spread around its mean, class 1 constant
        let items = vec![-1.0, 1.0, 5.0];
        let labels = vec![0, 0, 1];
        let r = estimate_shift_gap(&Shifted { offset: 0.0 }, &items, &labels, 2, &exact_form()).unwrap();
        assert!((r.per_class_gap[&0] - 1.0).abs() < 1e-12);
        assert_eq!(r.per_class_gap[&1], 0.0);
        assert!((r.aggregate - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_class_is_an_error() {
        let err = estimate_shift_gap(&Shifted { offset: 0.0 }, &[0.0], &[0], 2, &exact_form()).unwrap_err();
        assert!(matches!(err, Error::Metric(ref m) if m.contains("class 1")));
    }

    #[test]
    fn estimator_variance_shrinks_with_samples() {
        let items = vec![0.0; 4];
        let labels = vec![0, 0, 1, 1];
        let variance = |n: usize| {
            let vals: Vec<f64> = (0..20)
                .map(|s| {
                    let cfg = ShiftGapConfig {
                        n_mc_aug: n,
                        seed: s,
                        ..exact_form()
                    };
                    estimate_shift_gap(&Noisy { spread: 1.0 }, &items, &labels, 2, &cfg).unwrap().aggregate
                })
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
        };
        assert!(variance(64) < variance(16));
    }

    #[test]
    fn agrees_with_exact_world_gap() {
        use crate::bound_lab::{exact_shift_gap, DiscreteWorld};
        // points on a line; augmentation moves each point to its neighbour
        // with fixed probabilities, so the MC average converges to the exact
        // transition mean
        let world = DiscreteWorld::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
            vec![0.5, 0.5],
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.5, 0.5]],
        )
        .unwrap();
        let transition = vec![vec![0.8, 0.2, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.3, 0.7]];
        let form = GapForm::default();
        let exact = exact_shift_gap(&world, &transition, &form).unwrap();

        struct Walk(Vec<Vec<f64>>, Vec<Vec<f64>>);
        impl GapSubject for Walk {
            type Item = usize;
            fn features(&self, items: &[usize]) -> Result<Vec<Vec<f64>>> {
                Ok(items.iter().map(|&i| self.1[i].clone()).collect())
            }
            fn augment(&self, items: &[usize], s: u64) -> Result<Vec<usize>> {
                let mut rng = seed::rng(s);
                Ok(items
                    .iter()
                    .map(|&i| {
                        let u: f64 = rng.gen();
                        let mut acc = 0.0;
                        self.0[i].iter().position(|p| {
                            acc += p;
                            u < acc
                        })
                        .unwrap_or(i)
                    })
                    .collect())
            }
        }
        // items reproduce the class conditionals in proportion
        let items = vec![0, 0, 1, 2];
        let labels = vec![0, 0, 1, 1];
        let cfg = ShiftGapConfig {
            n_mc_aug: 20_000,
            form,
            seed: 11,
        };
        let r = estimate_shift_gap(&Walk(transition, world.features().to_vec()), &items, &labels, 2, &cfg).unwrap();
        assert!((r.aggregate - exact).abs() < 0.02, "{} vs {exact}", r.aggregate);
    }

    #[test]
    fn encoder_subject_is_reproducible() {
        let enc = tiny_mlp();
        let params = enc.init_params(3);
        let mut rng = seed::rng(2);
        let items: Vec<Image> = (0..6)
            .map(|_| Image::new(3, 3, 1, (0..9).map(|_| rng.gen()).collect()).unwrap())
            .collect();
        let labels = vec![0, 1, 0, 1, 0, 1];
        let identity = EncoderSubject {
            encoder: &enc,
            params: &params.values,
            sampler: PositiveSampler::Identity,
        };
        let one_per_class = estimate_shift_gap(&identity, &items[..2], &labels[..2], 2, &ShiftGapConfig::default()).unwrap();
        assert_eq!(one_per_class.aggregate, 0.0);
        for sampler in [
            PositiveSampler::Base {
                aug: BaseAugConfig::default(),
            },
            PositiveSampler::Fourier {
                aug: BaseAugConfig::default(),
                alpha: 0.2,
                batch_size: 4,
            },
        ] {
            let subject = EncoderSubject {
                encoder: &enc,
                params: &params.values,
                sampler,
            };
            let a = estimate_shift_gap(&subject, &items, &labels, 2, &ShiftGapConfig::default()).unwrap();
            let b = estimate_shift_gap(&subject, &items, &labels, 2, &ShiftGapConfig::default()).unwrap();
            assert_eq!(a, b);
            // unit features bound each distance by 2
            assert!(a.aggregate >= 0.0 && a.aggregate <= 2f64.sqrt());
        }
    }
}
