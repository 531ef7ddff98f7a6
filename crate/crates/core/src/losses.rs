//! Weighted InfoNCE and temperature-scaled cross-entropy.
//!
//! For an anchor `a`, positive `p` and `K` negatives the loss is
//!
//! ```text
//! -log[ e^{a.p/tau} / ( e^{a.p/tau} + (beta/K) sum_k e^{a.n_k/tau} ) ]
//! ```
//!
//! and `beta = K` gives the usual SimCLR form. Features must already be unit
//! norm; normalisation is the encoder's job.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Temperature.
    pub tau: f64,
    /// Weight on the averaged negative term.
    pub beta_neg: f64,
    /// Number of negatives per anchor.
    pub negatives: usize,
}

impl LossConfig {
    /// The standard setting `beta = K`.
    pub fn standard(tau: f64, negatives: usize) -> Self {
        Self {
            tau,
            beta_neg: negatives as f64,
            negatives,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Contract(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.beta_neg >= 0.0) || !self.beta_neg.is_finite() {
            return Err(Error::Contract(format!(
                "negative weight must be non-negative, got {}",
                self.beta_neg
            )));
        }
        if self.negatives == 0 {
            return Err(Error::Contract("at least one negative is required".into()));
        }
        Ok(())
    }

    /// Upper bound `2/tau + log(1 + beta)` valid for unit-norm features.
    pub fn loss_bound(&self) -> f64 {
        2.0 / self.tau + self.beta_neg.ln_1p()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = dot(v, v).sqrt();
    if (n - 1.0).abs() > UNIT_NORM_TOLERANCE || !n.is_finite() {
        return Err(Error::Contract(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Loss and its derivatives with respect to the positive similarity and
/// each negative similarity.
fn similarity_loss(pos_sim: f64, neg_sims: &[f64], tau: f64, beta: f64) -> (f64, f64, Vec<f64>) {
    let k = neg_sims.len() as f64;
    let mut z = Vec::with_capacity(neg_sims.len() + 1);
    z.push(pos_sim / tau);
    if beta > 0.0 {
        let log_w = (beta / k).ln();
        z.extend(neg_sims.iter().map(|s| s / tau + log_w));
    }
    let lse = log_sum_exp(&z);
    let loss = lse - z[0];
    let d_pos = ((z[0] - lse).exp() - 1.0) / tau;
    let d_neg = if beta > 0.0 {
        z[1..].iter().map(|zi| (zi - lse).exp() / tau).collect()
    } else {
        vec![0.0; neg_sims.len()]
    };
    (loss, d_pos, d_neg)
}

/// Single-anchor loss from precomputed similarities; `beta = 0` drops the
/// negative term entirely.
pub fn info_nce_from_similarities(pos_sim: f64, neg_sims: &[f64], tau: f64, beta: f64) -> f64 {
    similarity_loss(pos_sim, neg_sims, tau, beta).0
}

/// Gradients of a single-anchor loss with respect to its input vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

fn info_nce_unchecked(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    tau: f64,
    beta: f64,
) -> InfoNceGrad {
    let pos_sim = dot(anchor, positive);
    let neg_sims: Vec<f64> = negatives.iter().map(|n| dot(anchor, n)).collect();
    let (loss, d_pos, d_neg) = similarity_loss(pos_sim, &neg_sims, tau, beta);
    let mut g_anchor: Vec<f64> = positive.iter().map(|p| d_pos * p).collect();
    let mut g_negs = Vec::with_capacity(negatives.len());
    for (n, &d) in negatives.iter().zip(&d_neg) {
        for (g, x) in g_anchor.iter_mut().zip(n) {
            *g += d * x;
        }
        g_negs.push(anchor.iter().map(|a| d * a).collect());
    }
    InfoNceGrad {
        loss,
        anchor: g_anchor,
        positive: anchor.iter().map(|a| d_pos * a).collect(),
        negatives: g_negs,
    }
}

fn check_inputs(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], config: &LossConfig) -> Result<()> {
    config.validate()?;
    if negatives.len() != config.negatives {
        return Err(Error::Contract(format!(
            "expected {} negatives, got {}",
            config.negatives,
            negatives.len()
        )));
    }
    let d = anchor.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::Contract("feature dimensions differ".into()));
    }
    check_unit(anchor, "anchor")?;
    check_unit(positive, "positive")?;
    for n in negatives {
        check_unit(n, "negative")?;
    }
    Ok(())
}

pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], config: &LossConfig) -> Result<f64> {
    info_nce_with_grad(anchor, positive, negatives, config).map(|g| g.loss)
}

pub fn info_nce_with_grad(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    config: &LossConfig,
) -> Result<InfoNceGrad> {
    check_inputs(anchor, positive, negatives, config)?;
    Ok(info_nce_unchecked(anchor, positive, negatives, config.tau, config.beta_neg))
}

/// Negatives of view `i` inside a batch of `2b` views: everything except the
/// view itself and its paired view.
pub fn in_batch_negatives(n_views: usize, i: usize) -> impl Iterator<Item = usize> {
    let partner = i ^ 1;
    (0..n_views).filter(move |&j| j != i && j != partner)
}

/// Mean in-batch loss over all `2b` anchors, with `K = 2(b - 1)` negatives.
/// `beta = None` selects `beta = K`.
pub fn info_nce_batch(views: &[Vec<f64>], tau: f64, beta: Option<f64>) -> Result<f64> {
    info_nce_batch_with_grad(views, tau, beta).map(|(l, _)| l)
}

/// [`info_nce_batch`] together with its gradient with respect to every view.
pub fn info_nce_batch_with_grad(
    views: &[Vec<f64>],
    tau: f64,
    beta: Option<f64>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if views.len() % 2 != 0 || views.len() < 4 {
        return Err(Error::Contract(format!(
            "in-batch loss needs 2b views with b >= 2, got {} views",
            views.len()
        )));
    }
    let n = views.len();
    let negatives = n - 2;
    let config = LossConfig {
        tau,
        beta_neg: beta.unwrap_or(negatives as f64),
        negatives,
    };
    config.validate()?;
    let d = views[0].len();
    for v in views {
        if v.len() != d {
            return Err(Error::Contract("feature dimensions differ".into()));
        }
        check_unit(v, "view feature")?;
    }

    // similarity matrix is shared by all anchors
    let sims: Vec<Vec<f64>> = views
        .iter()
        .map(|a| views.iter().map(|b| dot(a, b)).collect())
        .collect();
    let mut total = 0.0;
    let mut d_sims = vec![vec![0.0; n]; n];
    for i in 0..n {
        let partner = i ^ 1;
        let neg_idx: Vec<usize> = in_batch_negatives(n, i).collect();
        let neg_sims: Vec<f64> = neg_idx.iter().map(|&j| sims[i][j]).collect();
        let (loss, d_pos, d_neg) = similarity_loss(sims[i][partner], &neg_sims, tau, config.beta_neg);
        total += loss;
        d_sims[i][partner] += d_pos;
        for (&j, g) in neg_idx.iter().zip(d_neg) {
            d_sims[i][j] += g;
        }
    }
    let scale = 1.0 / n as f64;
    let mut grads = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            let g = d_sims[i][j] * scale;
            if g == 0.0 {
                continue;
            }
            for t in 0..d {
                grads[i][t] += g * views[j][t];
                grads[j][t] += g * views[i][t];
            }
        }
    }
    Ok((total * scale, grads))
}

/// `-log softmax(logits / tau)[label]` with a zero-based label.
pub fn temperature_cross_entropy(logits: &[f64], label: usize, tau: f64) -> Result<f64> {
    temperature_cross_entropy_with_grad(logits, label, tau).map(|(l, _)| l)
}

/// Cross-entropy and its gradient `(softmax - onehot) / tau` in the logits.
pub fn temperature_cross_entropy_with_grad(logits: &[f64], label: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::Contract("cross-entropy needs at least one logit".into()));
    }
    if label >= logits.len() {
        return Err(Error::Contract(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("tau must be positive, got {tau}")));
    }
    let z: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    let lse = log_sum_exp(&z);
    let grad = z
        .iter()
        .enumerate()
        .map(|(i, zi)| ((zi - lse).exp() - if i == label { 1.0 } else { 0.0 }) / tau)
        .collect();
    Ok((lse - z[label], grad))
}
