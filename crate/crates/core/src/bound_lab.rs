//! Exact checks of the supervised/unsupervised loss inequalities on finite
//! worlds where every expectation is a finite sum.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{dot, info_nce_from_similarities, log_sum_exp, temperature_cross_entropy};
use crate::seed;
use crate::shift_gap::GapForm;

/// Largest world for which K-negative expectations are enumerated exactly.
pub const MAX_EXACT_POINTS: usize = 6;
pub const MAX_EXACT_NEGATIVES: usize = 4;

/// Finite data space: class priors, class conditionals over points, and a
/// unit feature vector per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteWorld {
    features: Vec<Vec<f64>>,
    priors: Vec<f64>,
    conditionals: Vec<Vec<f64>>,
}

impl DiscreteWorld {
    pub fn new(features: Vec<Vec<f64>>, priors: Vec<f64>, conditionals: Vec<Vec<f64>>) -> Result<Self> {
        let n = features.len();
        if n == 0 || priors.is_empty() {
            return Err(Error::Lab("a world needs at least one point and one class".into()));
        }
        if conditionals.len() != priors.len() {
            return Err(Error::Lab(format!(
                "{} priors but {} class conditionals",
                priors.len(),
                conditionals.len()
            )));
        }
        let sums_to_one = |p: &[f64]| (p.iter().sum::<f64>() - 1.0).abs() <= 1e-12 && p.iter().all(|&x| x >= 0.0);
        if !sums_to_one(&priors) || priors.iter().any(|&p| p <= 0.0) {
            return Err(Error::Lab("priors must be positive and sum to 1".into()));
        }
        for (c, p) in conditionals.iter().enumerate() {
            if p.len() != n || !sums_to_one(p) {
                return Err(Error::Lab(format!("conditional of class {c} is not a distribution over {n} points")));
            }
        }
        let d = features[0].len();
        for (i, f) in features.iter().enumerate() {
            if f.len() != d || (dot(f, f).sqrt() - 1.0).abs() > 1e-10 {
                return Err(Error::Lab(format!("feature of point {i} is not a unit vector of dimension {d}")));
            }
        }
        Ok(Self {
            features,
            priors,
            conditionals,
        })
    }

    /// Random world with `n` points, `m` classes and `d`-dimensional features.
    pub fn random(rng: &mut impl Rng, n: usize, m: usize, d: usize) -> Self {
        let normalise = |v: Vec<f64>| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let features = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = dot(&v, &v).sqrt().max(1e-9);
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let priors = normalise((0..m).map(|_| rng.gen_range(0.1..1.0)).collect());
        let conditionals = (0..m)
            .map(|_| {
                let mut w: Vec<f64> = (0..n)
                    .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.05..1.0) })
                    .collect();
                if w.iter().all(|&x| x == 0.0) {
                    w[rng.gen_range(0..n)] = 1.0;
                }
                normalise(w)
            })
            .collect();
        Self::new(features, priors, conditionals).expect("generated world is valid")
    }

    pub fn n_points(&self) -> usize {
        self.features.len()
    }

    pub fn n_classes(&self) -> usize {
        self.priors.len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn conditionals(&self) -> &[Vec<f64>] {
        &self.conditionals
    }

    /// `p_data(x) = sum_c pi_c p_c(x)`.
    pub fn data_marginal(&self) -> Vec<f64> {
        (0..self.n_points())
            .map(|x| self.priors.iter().zip(&self.conditionals).map(|(pi, p)| pi * p[x]).sum())
            .collect()
    }

    /// Mean feature of each class, `E_{x ~ p_c} f(x)`.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let d = self.features[0].len();
        self.conditionals
            .iter()
            .map(|p| {
                let mut m = vec![0.0; d];
                for (w, f) in p.iter().zip(&self.features) {
                    for (acc, v) in m.iter_mut().zip(f) {
                        *acc += w * v;
                    }
                }
                m
            })
            .collect()
    }

    /// Positive-pair weights `p_pos(x, x+) = sum_c pi_c p_c(x) p_c(x+)`.
    pub fn positive_pairs(&self) -> Vec<Vec<f64>> {
        let n = self.n_points();
        let mut out = vec![vec![0.0; n]; n];
        for (pi, p) in self.priors.iter().zip(&self.conditionals) {
            for x in 0..n {
                for y in 0..n {
                    out[x][y] += pi * p[x] * p[y];
                }
            }
        }
        out
    }

    fn sim(&self, a: usize, b: usize) -> f64 {
        dot(&self.features[a], &self.features[b])
    }
}

/// Supervised loss of the mean classifier `W_c = E_{p_c} f`, by enumeration.
pub fn sup_loss_mean_classifier(world: &DiscreteWorld, tau: f64) -> f64 {
    let means = world.class_means();
    let mut total = 0.0;
    for (c, (pi, p)) in world.priors().iter().zip(world.conditionals()).enumerate() {
        for (x, &w) in p.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let logits: Vec<f64> = means.iter().map(|m| dot(m, &world.features[x])).collect();
            total += pi * w * temperature_cross_entropy(&logits, c, tau).expect("valid logits");
        }
    }
    total
}

/// `E_pos[-f(x).f(x+)/tau] + E_x log E_{x-} exp(f(x).f(x-)/tau)`, exactly.
pub fn surrogate_unsup_loss(world: &DiscreteWorld, tau: f64) -> f64 {
    let n = world.n_points();
    let pairs = world.positive_pairs();
    let mut alignment = 0.0;
    for x in 0..n {
        for y in 0..n {
            alignment -= pairs[x][y] * world.sim(x, y) / tau;
        }
    }
    let pdata = world.data_marginal();
    let log_p: Vec<f64> = pdata.iter().map(|p| p.ln()).collect();
    let mut uniformity = 0.0;
    for x in 0..n {
        if pdata[x] == 0.0 {
            continue;
        }
        let z: Vec<f64> = (0..n)
            .filter(|&y| pdata[y] > 0.0)
            .map(|y| log_p[y] + world.sim(x, y) / tau)
            .collect();
        uniformity += pdata[x] * log_sum_exp(&z);
    }
    alignment + uniformity
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ExpectationMethod {
    /// Full enumeration; fails if the world exceeds the size guard.
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
    /// Enumeration when within the guard, Monte Carlo otherwise.
    Auto { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    /// Standard error; `None` for exact enumeration.
    pub stderr: Option<f64>,
}

/// Expectation of the K-negative loss over `p_pos x p_data^K`.
pub fn exact_info_nce_expectation(
    world: &DiscreteWorld,
    tau: f64,
    beta: f64,
    k: usize,
    method: ExpectationMethod,
) -> Result<Estimate> {
    if k == 0 {
        return Err(Error::Lab("at least one negative is required".into()));
    }
    if !(tau > 0.0) || !(beta >= 0.0) {
        return Err(Error::Lab(format!("invalid tau {tau} or beta {beta}")));
    }
    let within_guard = world.n_points() <= MAX_EXACT_POINTS && k <= MAX_EXACT_NEGATIVES;
    match method {
        ExpectationMethod::Exact if !within_guard => Err(Error::Lab(format!(
            "exact enumeration limited to n <= {MAX_EXACT_POINTS}, K <= {MAX_EXACT_NEGATIVES}; got n = {}, K = {k}",
            world.n_points()
        ))),
        ExpectationMethod::Exact => Ok(enumerate_expectation(world, tau, beta, k)),
        ExpectationMethod::Auto { .. } if within_guard => Ok(enumerate_expectation(world, tau, beta, k)),
        ExpectationMethod::Auto { samples, seed } | ExpectationMethod::MonteCarlo { samples, seed } => {
            monte_carlo_expectation(world, tau, beta, k, samples, seed)
        }
    }
}

fn enumerate_expectation(world: &DiscreteWorld, tau: f64, beta: f64, k: usize) -> Estimate {
    let n = world.n_points();
    let pairs = world.positive_pairs();
    let pdata = world.data_marginal();
    let mut tuple = vec![0usize; k];
    let mut total = 0.0;
    loop {
        let weight: f64 = tuple.iter().map(|&t| pdata[t]).product();
        if weight > 0.0 {
            for x in 0..n {
                let negs: Vec<f64> = tuple.iter().map(|&t| world.sim(x, t)).collect();
                for y in 0..n {
                    let w = pairs[x][y];
                    if w > 0.0 {
                        total += w * weight * info_nce_from_similarities(world.sim(x, y), &negs, tau, beta);
                    }
                }
            }
        }
        // odometer over n^k tuples
        let mut i = 0;
        while i < k {
            tuple[i] += 1;
            if tuple[i] < n {
                break;
            }
            tuple[i] = 0;
            i += 1;
        }
        if i == k {
            break;
        }
    }
    Estimate {
        value: total,
        stderr: None,
    }
}

fn monte_carlo_expectation(
    world: &DiscreteWorld,
    tau: f64,
    beta: f64,
    k: usize,
    samples: usize,
    seed_value: u64,
) -> Result<Estimate> {
    if samples < 2 {
        return Err(Error::Lab("Monte Carlo needs at least two samples".into()));
    }
    let mut rng = seed::rng(seed_value);
    let class_dist = WeightedIndex::new(world.priors()).map_err(|e| Error::Lab(e.to_string()))?;
    let cond: Vec<WeightedIndex<f64>> = world
        .conditionals()
        .iter()
        .map(|p| WeightedIndex::new(p).map_err(|e| Error::Lab(e.to_string())))
        .collect::<Result<_>>()?;
    let data = WeightedIndex::new(world.data_marginal()).map_err(|e| Error::Lab(e.to_string()))?;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut negs = vec![0.0; k];
    for i in 0..samples {
        let c = class_dist.sample(&mut rng);
        let x = cond[c].sample(&mut rng);
        let y = cond[c].sample(&mut rng);
        for s in negs.iter_mut() {
            *s = world.sim(x, data.sample(&mut rng));
        }
        let v = info_nce_from_similarities(world.sim(x, y), &negs, tau, beta);
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / (samples - 1) as f64;
    Ok(Estimate {
        value: mean,
        stderr: Some((var / samples as f64).sqrt()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCheck {
    /// Mean-classifier supervised loss.
    pub lhs: f64,
    /// Surrogate loss plus `log(1 / min_c pi_c)`.
    pub rhs: f64,
    pub slack: f64,
    /// `surrogate - lhs`, i.e. the slack without the prior correction.
    pub uncorrected_slack: f64,
    pub holds: bool,
}

/// Checks `L_sup(mean classifier) <= L_surrogate + log(1 / min_c pi_c)`.
pub fn verify_mean_classifier_step(world: &DiscreteWorld, tau: f64) -> StepCheck {
    let lhs = sup_loss_mean_classifier(world, tau);
    let surrogate = surrogate_unsup_loss(world, tau);
    let min_prior = world.priors().iter().copied().fold(f64::INFINITY, f64::min);
    let rhs = surrogate - min_prior.ln();
    StepCheck {
        lhs,
        rhs,
        slack: rhs - lhs,
        uncorrected_slack: surrogate - lhs,
        holds: lhs <= rhs + 1e-9,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacPenaltyInputs {
    /// Sample count.
    pub n: u64,
    /// Parameter count.
    pub t: u64,
    pub delta: f64,
    pub rho: f64,
    pub tau: f64,
    pub beta_neg: f64,
    pub theta_norm: f64,
}

impl PacPenaltyInputs {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n >= 1
            && self.t >= 1
            && self.delta > 0.0
            && self.delta < 1.0
            && self.rho > 0.0
            && self.tau > 0.0
            && self.beta_neg >= 0.0
            && self.theta_norm >= 0.0
            && [self.rho, self.tau, self.beta_neg, self.theta_norm].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Lab(format!("invalid penalty inputs {self:?}")))
        }
    }

    /// Posterior scale `rho / (sqrt(T) + sqrt(log N))`.
    pub fn sigma(&self) -> f64 {
        self.rho / ((self.t as f64).sqrt() + (self.n as f64).ln().sqrt())
    }

    /// Loss bound `2/tau + log(1 + beta)`.
    pub fn loss_bound(&self) -> f64 {
        2.0 / self.tau + self.beta_neg.ln_1p()
    }
}

/// Concrete generalisation penalty
/// `(1/sqrt N)[1/2 + (T/2) log(1 + |theta|^2/(T sigma^2)) + log(1/delta) + 6 log(N+T)]
///  + L^2/(8 sqrt N) + 2L/sqrt N`.
pub fn pac_penalty(inputs: &PacPenaltyInputs) -> Result<f64> {
    inputs.validate()?;
    let n = inputs.n as f64;
    let t = inputs.t as f64;
    let sigma = inputs.sigma();
    let l = inputs.loss_bound();
    let kl = 0.5 * t * (inputs.theta_norm.powi(2) / (t * sigma * sigma)).ln_1p();
    let bracket = 0.5 + kl + (1.0 / inputs.delta).ln() + 6.0 * (n + t).ln();
    Ok(bracket / n.sqrt() + l * l / (8.0 * n.sqrt()) + 2.0 * l / n.sqrt())
}

/// Exact shift gap of a world under a stochastic augmentation given as a
/// row-stochastic transition matrix over points.
pub fn exact_shift_gap(world: &DiscreteWorld, transition: &[Vec<f64>], form: &GapForm) -> Result<f64> {
    let n = world.n_points();
    if transition.len() != n || transition.iter().any(|r| r.len() != n || (r.iter().sum::<f64>() - 1.0).abs() > 1e-12) {
        return Err(Error::Lab("transition must be an n x n row-stochastic matrix".into()));
    }
    let means = world.class_means();
    let d = world.features[0].len();
    let aug_means: Vec<Vec<f64>> = transition
        .iter()
        .map(|row| {
            let mut m = vec![0.0; d];
            for (w, f) in row.iter().zip(&world.features) {
                for (acc, v) in m.iter_mut().zip(f) {
                    *acc += w * v;
                }
            }
            m
        })
        .collect();
    let mut total = 0.0;
    for (c, (pi, p)) in world.priors().iter().zip(world.conditionals()).enumerate() {
        for x in 0..n {
            if p[x] == 0.0 {
                continue;
            }
            let dist = means[c]
                .iter()
                .zip(&aug_means[x])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            total += pi * p[x] * form.apply(dist);
        }
    }
    Ok(total)
}

/// Fixed world used by the K-trend suite: four unit features on a circle,
/// two overlapping classes.
pub fn four_point_world() -> DiscreteWorld {
    let feats = [0.0f64, 0.5, 2.2, 2.9].iter().map(|a| vec![a.cos(), a.sin()]).collect();
    DiscreteWorld::new(
        feats,
        vec![0.5, 0.5],
        vec![vec![0.6, 0.4, 0.0, 0.0], vec![0.0, 0.0, 0.3, 0.7]],
    )
    .expect("fixed world is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KTrendPoint {
    pub k: usize,
    pub loss: Estimate,
    /// `|L_un - surrogate - log K|` at `beta = K`.
    pub gap: f64,
}

/// Gap between the K-negative loss and the surrogate plus `log K` for each
/// `K`; sizes beyond the enumeration guard use Monte Carlo.
pub fn k_trend(world: &DiscreteWorld, tau: f64, ks: &[usize], samples: usize, seed_value: u64) -> Result<Vec<KTrendPoint>> {
    let surrogate = surrogate_unsup_loss(world, tau);
    ks.iter()
        .map(|&k| {
            let method = ExpectationMethod::Auto {
                samples,
                seed: seed::derive(seed_value, k as u64),
            };
            let loss = exact_info_nce_expectation(world, tau, k as f64, k, method)?;
            Ok(KTrendPoint {
                k,
                loss,
                gap: (loss.value - surrogate - (k as f64).ln()).abs(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn constant_world(m: usize) -> DiscreteWorld {
        DiscreteWorld::new(
            vec![vec![1.0, 0.0]; 3],
            vec![1.0 / m as f64; m],
            vec![vec![0.5, 0.25, 0.25]; m],
        )
        .unwrap()
    }

    fn orthogonal_world() -> DiscreteWorld {
        DiscreteWorld::new(
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]],
            vec![0.5, 0.5],
            vec![vec![0.5, 0.5, 0.0, 0.0], vec![0.0, 0.0, 0.5, 0.5]],
        )
        .unwrap()
    }

    #[test]
    fn rejects_invalid_worlds() {
        assert!(DiscreteWorld::new(vec![vec![1.0, 0.0]], vec![0.5], vec![vec![1.0]]).is_err());
        assert!(DiscreteWorld::new(vec![vec![2.0, 0.0]], vec![1.0], vec![vec![1.0]]).is_err());
        assert!(DiscreteWorld::new(vec![vec![1.0, 0.0]], vec![1.0], vec![vec![0.9]]).is_err());
    }

    #[test]
    fn mean_classifier_on_indistinguishable_classes() {
        for m in 1..5 {
            let l = sup_loss_mean_classifier(&constant_world(m), 0.7);
            assert!((l - (m as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_classifier_on_orthogonal_classes() {
        // log(1 + e^-1), 40-digit reference
        let l = sup_loss_mean_classifier(&orthogonal_world(), 1.0);
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-14);
    }

    #[test]
    fn surrogate_cases() {
        assert!(surrogate_unsup_loss(&constant_world(2), 0.3).abs() < 1e-12);
        let antipodal = DiscreteWorld::new(
            vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            vec![0.5, 0.5],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        // -1/tau + log cosh(1/tau) at tau = 1
        assert!((surrogate_unsup_loss(&antipodal, 1.0) - (-0.566_219_169_516_972_8)).abs() < 1e-14);
        let mut rng = seed::rng(1);
        for _ in 0..100 {
            let w = DiscreteWorld::random(&mut rng, 5, 3, 3);
            assert!(surrogate_unsup_loss(&w, 0.5) >= -2.0 / 0.5 - 1e-12);
        }
    }

    #[test]
    fn constant_world_expectation_is_log_one_plus_beta() {
        for k in 1..4 {
            for beta in [0.5, 1.0, 3.0] {
                let e = exact_info_nce_expectation(&constant_world(2), 0.4, beta, k, ExpectationMethod::Exact).unwrap();
                assert!((e.value - f64::ln_1p(beta)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn enumeration_agrees_with_monte_carlo() {
        let mut rng = seed::rng(7);
        let w = DiscreteWorld::random(&mut rng, 3, 2, 2);
        let exact = exact_info_nce_expectation(&w, 0.5, 2.0, 2, ExpectationMethod::Exact).unwrap();
        let mc = exact_info_nce_expectation(
            &w,
            0.5,
            2.0,
            2,
            ExpectationMethod::MonteCarlo {
                samples: 100_000,
                seed: 3,
            },
        )
        .unwrap();
        let se = mc.stderr.unwrap();
        assert!((exact.value - mc.value).abs() <= 3.0 * se, "{exact:?} {mc:?}");
    }

    #[test]
    fn guard_rejects_large_exact_requests() {
        let w = four_point_world();
        assert!(matches!(
            exact_info_nce_expectation(&w, 0.5, 8.0, 8, ExpectationMethod::Exact),
            Err(Error::Lab(_))
        ));
        let auto = exact_info_nce_expectation(&w, 0.5, 8.0, 8, ExpectationMethod::Auto { samples: 1000, seed: 1 }).unwrap();
        assert!(auto.stderr.is_some());
        let auto = exact_info_nce_expectation(&w, 0.5, 2.0, 2, ExpectationMethod::Auto { samples: 1000, seed: 1 }).unwrap();
        assert!(auto.stderr.is_none());
    }

    #[test]
    fn trend_world_matches_reference_enumeration() {
        // values from an independent enumeration over p_pos x p_data^K
        let w = four_point_world();
        let surrogate = surrogate_unsup_loss(&w, 0.5);
        assert!((surrogate - (-0.635_628_590_312_294_9)).abs() < 1e-12);
        let reference = [(1, 0.372_179_418_032_455_2), (2, 0.659_706_785_455_030_8), (4, 1.081_318_236_694_963)];
        for (k, v) in reference {
            let e = exact_info_nce_expectation(&w, 0.5, k as f64, k, ExpectationMethod::Exact).unwrap();
            assert!((e.value - v).abs() < 1e-12, "K = {k}");
        }
    }

    #[test]
    fn gap_to_surrogate_shrinks_with_k() {
        let w = four_point_world();
        let surrogate = surrogate_unsup_loss(&w, 0.5);
        let gaps: Vec<f64> = [1usize, 2, 4]
            .iter()
            .map(|&k| {
                let e = exact_info_nce_expectation(&w, 0.5, k as f64, k, ExpectationMethod::Exact).unwrap();
                (e.value - surrogate - (k as f64).ln()).abs()
            })
            .collect();
        assert!(gaps[2] < gaps[1] && gaps[1] < gaps[0], "{gaps:?}");
        let trend = k_trend(&w, 0.5, &[1, 2, 4, 8], 200_000, 1).unwrap();
        assert_eq!(trend[2].gap, gaps[2]);
        let last = trend[3];
        assert!(last.loss.stderr.is_some());
        // 40-digit enumeration over multisets gives 1.6172850098122935
        assert!((last.loss.value - 1.617_285_009_812_293_5).abs() <= 4.0 * last.loss.stderr.unwrap());
    }

    #[test]
    fn step_check_boundary_cases() {
        let c = verify_mean_classifier_step(&constant_world(2), 1.0);
        assert!((c.lhs - LN_2).abs() < 1e-12 && (c.rhs - LN_2).abs() < 1e-12);
        assert!(c.slack.abs() < 1e-9 && c.holds);
        // the uncorrected form fails on this world
        assert!(c.uncorrected_slack < -0.5);
        let single = verify_mean_classifier_step(&constant_world(1), 1.0);
        assert!(single.lhs.abs() < 1e-12 && single.holds);
    }

    #[test]
    fn step_check_holds_on_random_worlds() {
        let mut rng = seed::rng(42);
        for _ in 0..200 {
            let n = rng.gen_range(1..=6);
            let m = rng.gen_range(1..=3);
            let d = rng.gen_range(2..=4);
            let w = DiscreteWorld::random(&mut rng, n, m, d);
            let tau = rng.gen_range(0.1..2.0);
            let c = verify_mean_classifier_step(&w, tau);
            assert!(c.holds, "{c:?}");
        }
    }

    fn pac_inputs() -> PacPenaltyInputs {
        PacPenaltyInputs {
            n: 100,
            t: 10,
            delta: 0.1,
            rho: 0.05,
            tau: 0.5,
            beta_neg: 1.0,
            theta_norm: 1.0,
        }
    }

    #[test]
    fn pac_penalty_reference_values() {
        // 40-digit direct evaluation of the final display
        let v = pac_penalty(&pac_inputs()).unwrap();
        assert!((v - 7.828_640_717_821_478).abs() < 1e-12);
        let zero = PacPenaltyInputs {
            theta_norm: 0.0,
            ..pac_inputs()
        };
        assert!((pac_penalty(&zero).unwrap() - 4.314_496_545_616_815).abs() < 1e-12);
    }

    #[test]
    fn pac_penalty_monotonicity() {
        let base = pac_inputs();
        let mut last = 0.0;
        for i in 0..20 {
            let v = pac_penalty(&PacPenaltyInputs {
                theta_norm: 0.25 * i as f64,
                ..base
            })
            .unwrap();
            assert!(v > last);
            last = v;
        }
        let small_delta = pac_penalty(&PacPenaltyInputs { delta: 0.01, ..base }).unwrap();
        assert!(small_delta > pac_penalty(&base).unwrap());
        let big_t = pac_penalty(&PacPenaltyInputs { t: 1000, ..base }).unwrap();
        assert!(big_t > pac_penalty(&base).unwrap());
        assert!(pac_penalty(&PacPenaltyInputs { delta: 1.0, ..base }).is_err());
    }
}
