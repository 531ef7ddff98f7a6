//! Linear probing, top-k accuracy and single-step FGSM robustness.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::encoder::{Encoder, Tap};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{temperature_cross_entropy, temperature_cross_entropy_with_grad};
use crate::seed;

pub const DEFAULT_EPSILON: f64 = 8.0 / 255.0;
/// Temperature of the cross-entropy the attack differentiates.
pub const ATTACK_TAU: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub tap: Tap,
    pub tau: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            tap: Tap::Backbone,
            tau: 1.0,
            seed: 0,
            batch_size: 32,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Eval(format!("invalid probe config {self:?}")));
        }
        Ok(())
    }
}

/// Affine classifier on standardised features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// `M x d`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LinearProbe {
    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn standardise(&self, feature: &[f64]) -> Vec<f64> {
        feature.iter().zip(&self.mean).zip(&self.scale).map(|((f, m), s)| (f - m) / s).collect()
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        let z = self.standardise(feature);
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(&z).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }

    /// Pulls a logit gradient back to the raw feature.
    pub fn feature_gradient(&self, d_logits: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; self.mean.len()];
        for (g, w) in d_logits.iter().zip(&self.weights) {
            for (acc, a) in d.iter_mut().zip(w) {
                *acc += g * a;
            }
        }
        d.iter_mut().zip(&self.scale).for_each(|(v, s)| *v /= s);
        d
    }
}

/// Mini-batch SGD on temperature cross-entropy from zero weights.
pub fn train_linear_probe_on_features(
    features: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<LinearProbe> {
    config.validate()?;
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Eval(format!("{} features for {} labels", features.len(), labels.len())));
    }
    for c in 0..num_classes {
        if !labels.contains(&c) {
            return Err(Error::Eval(format!("class {c} missing from probe training data")));
        }
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Eval(format!("label {y} out of range for {num_classes} classes")));
    }
    let d = features[0].len();
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
    }
    let mut scale = vec![0.0; d];
    for f in features {
        scale.iter_mut().zip(f).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    scale.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });

    let mut probe = LinearProbe {
        weights: vec![vec![0.0; d]; num_classes],
        bias: vec![0.0; num_classes],
        mean,
        scale,
    };
    let standardised: Vec<Vec<f64>> = features.iter().map(|f| probe.standardise(f)).collect();
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut rng = seed::rng(config.seed);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut gw = vec![vec![0.0; d]; num_classes];
            let mut gb = vec![0.0; num_classes];
            for &i in batch {
                let z = &standardised[i];
                let logits: Vec<f64> = probe
                    .weights
                    .iter()
                    .zip(&probe.bias)
                    .map(|(w, b)| b + w.iter().zip(z).map(|(a, x)| a * x).sum::<f64>())
                    .collect();
                let (_, g) = temperature_cross_entropy_with_grad(&logits, labels[i], config.tau)?;
                for (c, gc) in g.iter().enumerate() {
                    gb[c] += gc;
                    gw[c].iter_mut().zip(z).for_each(|(acc, x)| *acc += gc * x);
                }
            }
            let step = config.lr / batch.len() as f64;
            for c in 0..num_classes {
                probe.bias[c] -= step * gb[c];
                probe.weights[c].iter_mut().zip(&gw[c]).for_each(|(w, g)| *w -= step * g);
            }
        }
    }
    Ok(probe)
}

/// Probe on frozen encoder features at `config.tap`.
pub fn train_linear_probe(encoder: &Encoder, params: &[f64], data: &LabeledSet, config: &ProbeConfig) -> Result<LinearProbe> {
    let features = encoder.embed(params, &data.images, config.tap)?;
    train_linear_probe_on_features(&features, &data.labels, data.num_classes, config)
}

/// Fraction of rows whose label ranks among the `k` largest logits; equal
/// logits rank the lower class index first.
pub fn top_k_accuracy(logits: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Eval(format!("{} logit rows for {} labels", logits.len(), labels.len())));
    }
    let mut hits = 0usize;
    for (row, &y) in logits.iter().zip(labels) {
        let m = row.len();
        if k == 0 || k > m {
            return Err(Error::Eval(format!("k = {k} outside 1..={m}")));
        }
        if y >= m {
            return Err(Error::Eval(format!("label {y} out of range for {m} classes")));
        }
        let target = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < y))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Image classifier exposing the pixel gradient of its loss.
pub trait Classifier {
    fn logits(&self, image: &Image) -> Result<Vec<f64>>;
    /// Cross-entropy at temperature `ATTACK_TAU` and its gradient in pixel
    /// layout.
    fn loss_input_gradient(&self, image: &Image, label: usize) -> Result<(f64, Vec<f64>)>;
}

/// Frozen encoder composed with a linear probe.
pub struct ProbedEncoder<'a> {
    pub encoder: &'a Encoder,
    pub params: &'a [f64],
    pub probe: &'a LinearProbe,
    pub tap: Tap,
}

impl Classifier for ProbedEncoder<'_> {
    fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        let f = self.encoder.embed(self.params, std::slice::from_ref(image), self.tap)?;
        Ok(self.probe.logits(&f[0]))
    }

    fn loss_input_gradient(&self, image: &Image, label: usize) -> Result<(f64, Vec<f64>)> {
        let mut loss = Ok(0.0);
        let pull = |feature: &[f64]| {
            let logits = self.probe.logits(feature);
            match temperature_cross_entropy_with_grad(&logits, label, ATTACK_TAU) {
                Ok((l, g)) => {
                    loss = Ok(l);
                    self.probe.feature_gradient(&g)
                }
                Err(e) => {
                    loss = Err(e);
                    vec![0.0; feature.len()]
                }
            }
        };
        let (_, dx) = match self.tap {
            Tap::Backbone => self.encoder.backbone_input_gradient(self.params, image, pull)?,
            Tap::Projection => self.encoder.projection_input_gradient(self.params, image, pull)?,
        };
        Ok((loss?, dx))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Eval(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clip(x + eps * sign(grad), 0, 1)`, with rounding kept inside the budget.
pub fn fgsm_attack(model: &dyn Classifier, image: &Image, label: usize, config: &AttackConfig) -> Result<Image> {
    config.validate()?;
    if !image.in_unit_range() {
        return Err(Error::Eval("attack input must lie in [0, 1]".into()));
    }
    if config.epsilon == 0.0 {
        return Ok(image.clone());
    }
    let (_, grad) = model.loss_input_gradient(image, label)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Eval("non-finite input gradient".into()));
    }
    let eps = config.epsilon;
    let mut out = image.clone();
    for (p, g) in out.pixels_mut().iter_mut().zip(&grad) {
        let x = *p;
        let mut v = (x + eps * sign(*g)).clamp(0.0, 1.0);
        while (v - x).abs() > eps {
            v = if v > x { v.next_down() } else { v.next_up() };
        }
        *p = v;
    }
    Ok(out)
}

pub fn clean_accuracy(model: &dyn Classifier, data: &LabeledSet) -> Result<f64> {
    let logits = data.images.iter().map(|x| model.logits(x)).collect::<Result<Vec<_>>>()?;
    top_k_accuracy(&logits, &data.labels, 1)
}

/// Top-1 accuracy on FGSM-perturbed inputs.
pub fn robust_accuracy(model: &dyn Classifier, data: &LabeledSet, config: &AttackConfig) -> Result<f64> {
    let logits = data
        .images
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| model.logits(&fgsm_attack(model, x, y, config)?))
        .collect::<Result<Vec<_>>>()?;
    top_k_accuracy(&logits, &data.labels, 1)
}

/// Mean temperature cross-entropy of `probe` on precomputed features.
pub fn probe_loss(probe: &LinearProbe, features: &[Vec<f64>], labels: &[usize], tau: f64) -> Result<f64> {
    let mut total = 0.0;
    for (f, &y) in features.iter().zip(labels) {
        total += temperature_cross_entropy(&probe.logits(f), y, tau)?;
    }
    Ok(total / features.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::tests::tiny_mlp;
    use crate::encoder::finite_diff_gradient;
    use rand::Rng;

    struct ConstantModel(Vec<f64>);

    impl Classifier for ConstantModel {
        fn logits(&self, _: &Image) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
        fn loss_input_gradient(&self, image: &Image, label: usize) -> Result<(f64, Vec<f64>)> {
            Ok((temperature_cross_entropy(&self.0, label, 1.0)?, vec![0.0; image.pixels().len()]))
        }
    }

    fn tiny_set(n: usize, s: u64) -> LabeledSet {
        let mut rng = seed::rng(s);
        let images = (0..n)
            .map(|_| Image::new(3, 3, 1, (0..9).map(|_| rng.gen()).collect()).unwrap())
            .collect();
        let labels = (0..n).map(|i| i % 2).collect();
        LabeledSet::new(images, labels, 2).unwrap()
    }

    #[test]
    fn one_hot_features_are_fit_exactly() {
        let m = 4;
        let features: Vec<Vec<f64>> = (0..40).map(|i| (0..m).map(|c| f64::from(u8::from(c == i % m))).collect()).collect();
        let labels: Vec<usize> = (0..40).map(|i| i % m).collect();
        let cfg = ProbeConfig {
            epochs: 20,
            ..ProbeConfig::default()
        };
        let probe = train_linear_probe_on_features(&features, &labels, m, &cfg).unwrap();
        let logits: Vec<Vec<f64>> = features.iter().map(|f| probe.logits(f)).collect();
        assert_eq!(top_k_accuracy(&logits, &labels, 1).unwrap(), 1.0);
    }

    #[test]
    fn missing_class_is_an_error() {
        let err = train_linear_probe_on_features(&[vec![1.0], vec![2.0]], &[0, 0], 2, &ProbeConfig::default());
        assert!(matches!(err, Err(Error::Eval(ref m)) if m.contains("class 1")));
    }

    #[test]
    fn probe_training_leaves_encoder_untouched_and_is_deterministic() {
        let enc = tiny_mlp();
        let params = enc.init_params(1);
        let before = params.values.clone();
        let set = tiny_set(20, 2);
        let a = train_linear_probe(&enc, &params.values, &set, &ProbeConfig::default()).unwrap();
        let b = train_linear_probe(&enc, &params.values, &set, &ProbeConfig::default()).unwrap();
        assert_eq!(params.values, before);
        assert_eq!(a, b);
    }

    #[test]
    fn probe_reduces_its_loss() {
        let mut rng = seed::rng(9);
        let features: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<usize> = features.iter().map(|f| usize::from(f[0] + 0.5 * f[1] > 0.0)).collect();
        let short = ProbeConfig {
            epochs: 1,
            ..ProbeConfig::default()
        };
        let l1 = probe_loss(&train_linear_probe_on_features(&features, &labels, 2, &short).unwrap(), &features, &labels, 1.0).unwrap();
        let l2 = probe_loss(
            &train_linear_probe_on_features(&features, &labels, 2, &ProbeConfig::default()).unwrap(),
            &features,
            &labels,
            1.0,
        )
        .unwrap();
        assert!(l2 < l1);
    }

    #[test]
    fn top_k_cases() {
        assert_eq!(top_k_accuracy(&[vec![0.9, 0.1]], &[1], 1).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&[vec![0.9, 0.1]], &[1], 2).unwrap(), 1.0);
        // ties favour the lower index
        assert_eq!(top_k_accuracy(&[vec![0.5, 0.5]], &[0], 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&[vec![0.5, 0.5]], &[1], 1).unwrap(), 0.0);
        assert!(top_k_accuracy(&[vec![0.5, 0.5]], &[1], 0).is_err());
        assert!(top_k_accuracy(&[vec![0.5, 0.5]], &[1], 3).is_err());
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let mut rng = seed::rng(4);
        let logits: Vec<Vec<f64>> = (0..100).map(|_| (0..10).map(|_| (rng.gen_range(0..6) as f64) / 5.0).collect()).collect();
        let labels: Vec<usize> = (0..100).map(|_| rng.gen_range(0..10)).collect();
        let mut last = 0.0;
        for k in 1..=10 {
            let mut hits = 0;
            for (row, &y) in logits.iter().zip(&labels) {
                let mut idx: Vec<usize> = (0..10).collect();
                idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
                if idx[..k].contains(&y) {
                    hits += 1;
                }
            }
            let acc = top_k_accuracy(&logits, &labels, k).unwrap();
            assert_eq!(acc, hits as f64 / 100.0);
            assert!(acc >= last);
            last = acc;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn composed_gradient_matches_finite_differences() {
        let enc = tiny_mlp();
        let params = enc.init_params(5);
        let set = tiny_set(20, 6);
        for tap in [Tap::Backbone, Tap::Projection] {
            let cfg = ProbeConfig {
                tap,
                ..ProbeConfig::default()
            };
            let probe = train_linear_probe(&enc, &params.values, &set, &cfg).unwrap();
            let model = ProbedEncoder {
                encoder: &enc,
                params: &params.values,
                probe: &probe,
                tap,
            };
            let x = &set.images[3];
            let (_, g) = model.loss_input_gradient(x, 1).unwrap();
            let fd = finite_diff_gradient(
                x.pixels(),
                |p| {
                    let img = Image::new(3, 3, 1, p.to_vec()).unwrap();
                    temperature_cross_entropy(&model.logits(&img).unwrap(), 1, 1.0).unwrap()
                },
                1e-6,
            );
            assert!(crate::encoder::relative_error(&g, &fd) < 1e-5, "{tap:?}");
        }
    }

    #[test]
    fn attack_contracts() {
        let enc = tiny_mlp();
        let params = enc.init_params(7);
        let set = tiny_set(20, 8);
        let probe = train_linear_probe(&enc, &params.values, &set, &ProbeConfig::default()).unwrap();
        let model = ProbedEncoder {
            encoder: &enc,
            params: &params.values,
            probe: &probe,
            tap: Tap::Backbone,
        };
        let zero = AttackConfig { epsilon: 0.0 };
        for (x, &y) in set.images.iter().zip(&set.labels) {
            assert_eq!(&fgsm_attack(&model, x, y, &zero).unwrap(), x);
            let adv = fgsm_attack(&model, x, y, &AttackConfig::default()).unwrap();
            assert!(adv.in_unit_range());
            assert!(adv.max_abs_diff(x).unwrap() <= DEFAULT_EPSILON);
        }
        assert_eq!(robust_accuracy(&model, &set, &zero).unwrap(), clean_accuracy(&model, &set).unwrap());
        assert!(fgsm_attack(&model, &set.images[0], 0, &AttackConfig { epsilon: -1.0 }).is_err());

        // composition oracle
        let cfg = AttackConfig::default();
        let logits: Vec<Vec<f64>> = set
            .images
            .iter()
            .zip(&set.labels)
            .map(|(x, &y)| model.logits(&fgsm_attack(&model, x, y, &cfg).unwrap()).unwrap())
            .collect();
        assert_eq!(robust_accuracy(&model, &set, &cfg).unwrap(), top_k_accuracy(&logits, &set.labels, 1).unwrap());
    }

    #[test]
    fn constant_model_is_unaffected() {
        let set = tiny_set(10, 3);
        let model = ConstantModel(vec![0.2, 0.7]);
        let cfg = AttackConfig { epsilon: 0.3 };
        for (x, &y) in set.images.iter().zip(&set.labels) {
            assert_eq!(&fgsm_attack(&model, x, y, &cfg).unwrap(), x);
        }
        assert_eq!(robust_accuracy(&model, &set, &cfg).unwrap(), clean_accuracy(&model, &set).unwrap());
    }

    #[test]
    fn budget_holds_under_rounding() {
        struct Push;
        impl Classifier for Push {
            fn logits(&self, _: &Image) -> Result<Vec<f64>> {
                Ok(vec![0.0, 0.0])
            }
            fn loss_input_gradient(&self, image: &Image, _: usize) -> Result<(f64, Vec<f64>)> {
                Ok((0.0, image.pixels().iter().enumerate().map(|(i, _)| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()))
            }
        }
        let mut rng = seed::rng(10);
        for _ in 0..200 {
            let img = Image::new(4, 4, 3, (0..48).map(|_| rng.gen::<f64>()).collect()).unwrap();
            let eps = rng.gen_range(0.0..0.1);
            let adv = fgsm_attack(&Push, &img, 0, &AttackConfig { epsilon: eps }).unwrap();
            assert!(adv.in_unit_range());
            for (a, x) in adv.pixels().iter().zip(img.pixels()) {
                assert!((a - x).abs() <= eps);
            }
        }
    }
}
