//! Fourier amplitude-mixing augmentation for positive pairs.
//!
//! Each view is transformed with a 2-D DFT, its amplitude is linearly
//! interpolated towards the amplitude of the most similar other view in the
//! batch, and the image is rebuilt from the mixed amplitude and its own
//! untouched phase. Multi-channel images are processed channel by channel
//! with one mixing coefficient per view.

use std::f64::consts::PI;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

/// A row-major `H x W` plane of complex values.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexPlane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl ComplexPlane {
    #[inline]
    pub fn at(&self, u: usize, v: usize) -> Complex64 {
        self.data[u * self.width + v]
    }
}

/// Amplitude and phase planes of every channel of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralImage {
    pub height: usize,
    pub width: usize,
    pub amplitude: Vec<Vec<f64>>,
    pub phase: Vec<Vec<f64>>,
}

impl SpectralImage {
    pub fn from_image(image: &Image) -> Self {
        let (h, w, c) = image.shape();
        let mut amplitude = Vec::with_capacity(c);
        let mut phase = Vec::with_capacity(c);
        for ch in 0..c {
            let spectrum = dft2(&image.channel(ch), h, w);
            let (a, p) = amplitude_phase(&spectrum);
            amplitude.push(a);
            phase.push(p);
        }
        Self {
            height: h,
            width: w,
            amplitude,
            phase,
        }
    }

    pub fn channels(&self) -> usize {
        self.amplitude.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Upper bound of the mixing coefficient, drawn from `Uniform(0, alpha)`.
    pub alpha: f64,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Augment(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// `2b` augmented views; views `2i` and `2i + 1` are the two views of anchor `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub views: Vec<Image>,
}

impl ContrastiveBatch {
    pub fn new(views: Vec<Image>) -> Result<Self> {
        if views.len() % 2 != 0 {
            return Err(Error::Contract(format!(
                "a contrastive batch holds an even number of views, got {}",
                views.len()
            )));
        }
        Ok(Self { views })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn anchors(&self) -> usize {
        self.views.len() / 2
    }

    /// Index of the view sharing an anchor with view `k`.
    pub fn partner_of(k: usize) -> usize {
        k ^ 1
    }
}

fn transform(data: &mut [Complex64], height: usize, width: usize, direction: FftDirection) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft(width, direction);
    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft(height, direction);
    let mut column = vec![Complex64::default(); height];
    for v in 0..width {
        for (u, slot) in column.iter_mut().enumerate() {
            *slot = data[u * width + v];
        }
        col_fft.process(&mut column);
        for (u, value) in column.iter().enumerate() {
            data[u * width + v] = *value;
        }
    }
}

/// Unnormalized forward 2-D DFT of a real row-major plane:
/// `X(u, v) = sum_{h, w} x(h, w) exp(-2 pi i (h u / H + w v / W))`.
pub fn dft2(plane: &[f64], height: usize, width: usize) -> ComplexPlane {
    assert_eq!(plane.len(), height * width, "plane size mismatch");
    let mut data: Vec<Complex64> = plane.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    transform(&mut data, height, width, FftDirection::Forward);
    ComplexPlane {
        height,
        width,
        data,
    }
}

/// Inverse 2-D DFT scaled by `1 / (H W)`, so `idft2(dft2(x)) = x`.
pub fn idft2(spectrum: &ComplexPlane) -> Vec<Complex64> {
    let mut data = spectrum.data.clone();
    transform(&mut data, spectrum.height, spectrum.width, FftDirection::Inverse);
    let scale = 1.0 / (spectrum.height * spectrum.width) as f64;
    for z in &mut data {
        *z *= scale;
    }
    data
}

/// Splits a spectrum into amplitude and phase. Phase lies in `(-pi, pi]`
/// and is `0` wherever the amplitude is `0`.
pub fn amplitude_phase(spectrum: &ComplexPlane) -> (Vec<f64>, Vec<f64>) {
    spectrum
        .data
        .iter()
        .map(|z| {
            let a = z.re.hypot(z.im);
            if a == 0.0 {
                return (0.0, 0.0);
            }
            let mut p = z.im.atan2(z.re);
            if p <= -PI {
                p = PI;
            }
            (a, p)
        })
        .unzip()
}

/// `(1 - beta) * a_self + beta * a_partner`, entrywise.
pub fn mix_amplitude(a_self: &[f64], a_partner: &[f64], beta: f64) -> Result<Vec<f64>> {
    if a_self.len() != a_partner.len() {
        return Err(Error::Augment(format!(
            "amplitude planes differ in size: {} vs {}",
            a_self.len(),
            a_partner.len()
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Augment(format!(
            "mixing coefficient must lie in [0, 1], got {beta}"
        )));
    }
    Ok(a_self
        .iter()
        .zip(a_partner)
        .map(|(s, p)| (1.0 - beta) * s + beta * p)
        .collect())
}

/// Inverse transform of `amplitude * exp(i phase)` keeping only the real part.
pub fn reconstruct_unclipped(
    amplitude: &[f64],
    phase: &[f64],
    height: usize,
    width: usize,
) -> Result<Vec<f64>> {
    if amplitude.len() != phase.len() || amplitude.len() != height * width {
        return Err(Error::Augment(format!(
            "cannot rebuild a {height}x{width} plane from {} amplitudes and {} phases",
            amplitude.len(),
            phase.len()
        )));
    }
    let spectrum = ComplexPlane {
        height,
        width,
        data: amplitude
            .iter()
            .zip(phase)
            .map(|(&a, &p)| Complex64::from_polar(a, p))
            .collect(),
    };
    Ok(idft2(&spectrum).into_iter().map(|z| z.re).collect())
}

/// Like [`reconstruct_unclipped`], with the result clipped to `[0, 1]`.
pub fn reconstruct(amplitude: &[f64], phase: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
    let mut plane = reconstruct_unclipped(amplitude, phase, height, width)?;
    for x in &mut plane {
        *x = x.clamp(0.0, 1.0);
    }
    Ok(plane)
}

/// Index `l != k` maximising `features[k] . features[l]`; ties go to the
/// smallest index.
pub fn most_similar_index(features: &[Vec<f64>], k: usize) -> Result<usize> {
    if features.len() < 2 {
        return Err(Error::Augment(format!(
            "pairing needs at least two features, got {}",
            features.len()
        )));
    }
    if k >= features.len() {
        return Err(Error::Augment(format!(
            "index {k} out of range for {} features",
            features.len()
        )));
    }
    let anchor = &features[k];
    let mut best: Option<(usize, f64)> = None;
    for (l, f) in features.iter().enumerate() {
        if l == k {
            continue;
        }
        let s = dot(anchor, f);
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((l, s)),
        }
    }
    Ok(best.map(|(l, _)| l).expect("n >= 2 leaves a candidate"))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mixing coefficients for `n` views, one independent sub-seed per view.
pub fn mixing_coefficients(config: &AugmentConfig, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            if config.alpha == 0.0 {
                return 0.0;
            }
            let u: f64 = seed::rng(seed::derive(config.rng_seed, k as u64)).gen();
            config.alpha * u
        })
        .collect()
}

/// Mixes the amplitude of `view` towards `partner` by `beta`, keeping the
/// phase of `view`. A zero coefficient returns the view unchanged.
pub fn mix_views(view: &Image, partner: &SpectralImage, own: &SpectralImage, beta: f64) -> Result<Image> {
    if (view.height(), view.width(), view.channels())
        != (partner.height, partner.width, partner.channels())
    {
        return Err(Error::Augment(format!(
            "partner spectrum {}x{}x{} does not match view {:?}",
            partner.height,
            partner.width,
            partner.channels(),
            view.shape()
        )));
    }
    if beta == 0.0 {
        return Ok(view.clone());
    }
    let mut out = view.clone();
    for c in 0..view.channels() {
        let mixed = mix_amplitude(&own.amplitude[c], &partner.amplitude[c], beta)?;
        let plane = reconstruct(&mixed, &own.phase[c], view.height(), view.width())?;
        out.set_channel(c, &plane);
    }
    Ok(out)
}

/// Replaces every view by its amplitude-mixed counterpart. `features` holds
/// one unit vector per view, computed by the current encoder on these views.
pub fn fft_augment_batch(
    batch: &ContrastiveBatch,
    features: &[Vec<f64>],
    config: &AugmentConfig,
) -> Result<ContrastiveBatch> {
    ContrastiveBatch::new(fft_augment_views(&batch.views, features, config)?)
}

/// Amplitude mixing over an arbitrary list of views; partners are searched
/// among all of them.
pub fn fft_augment_views(views: &[Image], features: &[Vec<f64>], config: &AugmentConfig) -> Result<Vec<Image>> {
    config.validate()?;
    if features.len() != views.len() {
        return Err(Error::Augment(format!(
            "{} features supplied for {} views",
            features.len(),
            views.len()
        )));
    }
    let betas = mixing_coefficients(config, views.len());
    if betas.iter().all(|&b| b == 0.0) {
        return Ok(views.to_vec());
    }
    let spectra: Vec<SpectralImage> = views.iter().map(SpectralImage::from_image).collect();
    let mut out = Vec::with_capacity(views.len());
    for (k, view) in views.iter().enumerate() {
        let partner = most_similar_index(features, k)?;
        out.push(mix_views(view, &spectra[partner], &spectra[k], betas[k])?);
    }
    Ok(out)
}
