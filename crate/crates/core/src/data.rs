//! Datasets and the base augmentation pool.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Contract(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Contract(format!("label {y} out of range for {num_classes} classes")));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|x| x.shape() != first.shape()) {
                return Err(Error::Contract("images in a dataset must share one shape".into()));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(height, width, channels)` of the images, if any.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Image::shape)
    }

    /// The first `n` samples.
    pub fn truncate(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self.labels.truncate(n);
        self
    }
}

fn unreadable(path: &Path, e: std::io::Error) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        offset: 0,
        reason: e.to_string(),
    }
}

/// Reads one CIFAR-10 binary batch file.
pub fn load_cifar10_file(path: &Path) -> Result<LabeledSet> {
    let bytes = fs::read(path).map_err(|e| unreadable(path, e))?;
    let complete = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if complete != bytes.len() {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            offset: complete as u64,
            reason: format!(
                "truncated record: {} trailing bytes, expected {CIFAR_RECORD}",
                bytes.len() - complete
            ),
        });
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                offset: (r * CIFAR_RECORD) as u64,
                reason: format!("label byte {label} is not below {CIFAR_CLASSES}"),
            });
        }
        let body = &record[1..];
        let mut pixels = vec![0.0; 3 * plane];
        for c in 0..3 {
            for i in 0..plane {
                pixels[i * 3 + c] = f64::from(body[c * plane + i]) / 255.0;
            }
        }
        images.push(Image::new(CIFAR_SIDE, CIFAR_SIDE, 3, pixels)?);
        labels.push(label);
    }
    LabeledSet::new(images, labels, CIFAR_CLASSES)
}

/// Reads every `data_batch_*.bin` in `dir`, in name order.
pub fn load_cifar10(dir: &Path) -> Result<LabeledSet> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| unreadable(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Ingest {
            path: dir.to_path_buf(),
            offset: 0,
            reason: "no data_batch_*.bin files".into(),
        });
    }
    let mut out = LabeledSet::new(Vec::new(), Vec::new(), CIFAR_CLASSES)?;
    for f in files {
        let part = load_cifar10_file(&f)?;
        out.images.extend(part.images);
        out.labels.extend(part.labels);
    }
    Ok(out)
}

/// Writes 32x32 RGB images in CIFAR-10 record layout; pixels are quantised
/// to the nearest of 256 levels.
pub fn write_cifar10(path: &Path, set: &LabeledSet) -> Result<()> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut bytes = Vec::with_capacity(set.len() * CIFAR_RECORD);
    for (img, &y) in set.images.iter().zip(&set.labels) {
        if img.shape() != (CIFAR_SIDE, CIFAR_SIDE, 3) || y >= CIFAR_CLASSES {
            return Err(Error::Contract(format!(
                "CIFAR records need 32x32x3 images and labels below 10, got {:?} / {y}",
                img.shape()
            )));
        }
        bytes.push(y as u8);
        for c in 0..3 {
            for i in 0..plane {
                bytes.push((img.pixels()[i * 3 + c].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Per-class oriented gratings with a class tint, plus seeded noise, random
/// phase and amplitude. Labels are balanced and interleaved.
pub fn gen_synthetic(n_per_class: usize, classes: usize, size: usize, seed_value: u64) -> Result<LabeledSet> {
    if n_per_class == 0 || classes < 2 || size == 0 {
        return Err(Error::Contract(format!(
            "synthetic data needs n >= 1, M >= 2, size >= 1; got {n_per_class}, {classes}, {size}"
        )));
    }
    let mut images = Vec::with_capacity(n_per_class * classes);
    let mut labels = Vec::with_capacity(images.capacity());
    for i in 0..n_per_class {
        for c in 0..classes {
            let mut rng = seed::rng(seed::derive_path(seed_value, &[i as u64, c as u64]));
            images.push(synthetic_image(c, classes, size, &mut rng));
            labels.push(c);
        }
    }
    LabeledSet::new(images, labels, classes)
}

fn synthetic_image(c: usize, classes: usize, size: usize, rng: &mut impl Rng) -> Image {
    use std::f64::consts::{FRAC_PI_2, TAU};
    let angle = FRAC_PI_2 * c as f64 / (classes - 1) as f64;
    let cycles = 2.0 + (c % 3) as f64;
    let (dx, dy) = (angle.cos(), angle.sin());
    let phase = rng.gen_range(0.0..TAU);
    let amp = rng.gen_range(0.1..0.25);
    let offset = rng.gen_range(-0.1..0.1);
    let tint: Vec<f64> = (0..3)
        .map(|ch| 0.5 + offset + 0.03 * (TAU * c as f64 / classes as f64 + ch as f64 * TAU / 3.0).cos())
        .collect();
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let t = (x as f64 * dx + y as f64 * dy) / size as f64;
            let wave = amp * (TAU * cycles * t + phase).sin();
            for tc in &tint {
                let noise = rng.gen_range(-0.2..0.2);
                pixels.push((tc + wave + noise).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(size, size, 3, pixels).expect("valid synthetic image")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// `synthetic:n=100,classes=2,size=16,seed=0` or `cifar10:<dir>[,limit=N]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        n_per_class: usize,
        classes: usize,
        size: usize,
        seed: u64,
    },
    Cifar10 {
        dir: PathBuf,
        limit: Option<usize>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            n_per_class: 100,
            classes: 2,
            size: 16,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn load(&self, split: Split) -> Result<LabeledSet> {
        match self {
            DatasetSpec::Synthetic {
                n_per_class,
                classes,
                size,
                seed: s,
            } => {
                let s = match split {
                    Split::Train => *s,
                    Split::Test => seed::derive(*s, 1),
                };
                gen_synthetic(*n_per_class, *classes, *size, s)
            }
            DatasetSpec::Cifar10 { dir, limit } => {
                let set = match split {
                    Split::Train => load_cifar10(dir)?,
                    Split::Test => load_cifar10_file(&dir.join("test_batch.bin"))?,
                };
                Ok(match limit {
                    Some(n) => set.truncate(*n),
                    None => set,
                })
            }
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Synthetic {
                n_per_class,
                classes,
                size,
                seed,
            } => write!(f, "synthetic:n={n_per_class},classes={classes},size={size},seed={seed}"),
            DatasetSpec::Cifar10 { dir, limit } => {
                write!(f, "cifar10:{}", dir.display())?;
                if let Some(n) = limit {
                    write!(f, ",limit={n}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("dataset `{s}`: {why}"));
        let (kind, rest) = s.split_once(':').ok_or_else(|| bad("expected <kind>:<args>"))?;
        match kind {
            "synthetic" => {
                let DatasetSpec::Synthetic {
                    mut n_per_class,
                    mut classes,
                    mut size,
                    mut seed,
                } = DatasetSpec::default()
                else {
                    unreachable!()
                };
                for kv in rest.split(',').filter(|p| !p.is_empty()) {
                    let (k, v) = kv.split_once('=').ok_or_else(|| bad("expected key=value"))?;
                    let num = || v.parse::<u64>().map_err(|_| bad(&format!("`{v}` is not an integer")));
                    match k {
                        "n" => n_per_class = num()? as usize,
                        "classes" => classes = num()? as usize,
                        "size" => size = num()? as usize,
                        "seed" => seed = num()?,
                        _ => return Err(bad(&format!("unknown key `{k}`"))),
                    }
                }
                Ok(DatasetSpec::Synthetic {
                    n_per_class,
                    classes,
                    size,
                    seed,
                })
            }
            "cifar10" => {
                let mut parts = rest.split(',');
                let dir = PathBuf::from(parts.next().filter(|d| !d.is_empty()).ok_or_else(|| bad("missing directory"))?);
                let mut limit = None;
                for kv in parts {
                    match kv.split_once('=') {
                        Some(("limit", v)) => {
                            limit = Some(v.parse().map_err(|_| bad(&format!("`{v}` is not an integer")))?)
                        }
                        _ => return Err(bad(&format!("unknown option `{kv}`"))),
                    }
                }
                Ok(DatasetSpec::Cifar10 { dir, limit })
            }
            _ => Err(bad("kind must be `synthetic` or `cifar10`")),
        }
    }
}

/// Parameters of the base augmentation pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseAugConfig {
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_strength: f64,
    pub jitter_p: f64,
    pub grayscale_p: f64,
}

impl Default for BaseAugConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_strength: 0.4,
            jitter_p: 0.8,
            grayscale_p: 0.2,
        }
    }
}

impl BaseAugConfig {
    /// Every op disabled; `base_augment` becomes the identity.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            jitter_strength: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.crop_scale;
        let (r0, r1) = self.crop_ratio;
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0)
            || !(0.0 < r0 && r0 <= r1)
            || !prob(self.flip_p)
            || !prob(self.jitter_p)
            || !prob(self.grayscale_p)
            || !(0.0..1.0).contains(&self.jitter_strength)
        {
            return Err(Error::Config(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }
}

/// Crop window in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Area and log-aspect drawn uniformly; falls back to the full image after
/// ten rejected draws.
pub fn sample_crop(height: usize, width: usize, scale: (f64, f64), ratio: (f64, f64), rng: &mut impl Rng) -> CropBox {
    let area = (height * width) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale.0, scale.1);
        let r = uniform(rng, lr0, lr1).exp();
        let w = (target * r).sqrt().round() as usize;
        let h = (target / r).sqrt().round() as usize;
        if (1..=width).contains(&w) && (1..=height).contains(&h) {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return CropBox {
                top,
                left,
                height: h,
                width: w,
            };
        }
    }
    CropBox {
        top: 0,
        left: 0,
        height,
        width,
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Bilinear resample of `crop` back to the full image size, sampling at
/// pixel centres.
pub fn crop_resize(image: &Image, crop: CropBox) -> Image {
    let (h, w, c) = image.shape();
    let mut out = Image::zeros(h, w, c).expect("shape of a valid image");
    let coord = |i: usize, out_len: usize, start: usize, len: usize| {
        let s = start as f64 + (i as f64 + 0.5) * len as f64 / out_len as f64 - 0.5;
        let s = s.clamp(start as f64, (start + len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(start + len - 1);
        (i0, i1, s - i0 as f64)
    };
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, crop.top, crop.height);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w, crop.left, crop.width);
            for ch in 0..c {
                let top = image.get(y0, x0, ch) * (1.0 - fx) + image.get(y0, x1, ch) * fx;
                let bottom = image.get(y1, x0, ch) * (1.0 - fx) + image.get(y1, x1, ch) * fx;
                out.set(y, x, ch, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

pub fn hflip(image: &Image) -> Image {
    let (h, w, c) = image.shape();
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.set(y, x, ch, image.get(y, w - 1 - x, ch));
            }
        }
    }
    out
}

fn luma(image: &Image, y: usize, x: usize) -> f64 {
    if image.channels() == 1 {
        image.get(y, x, 0)
    } else {
        0.299 * image.get(y, x, 0) + 0.587 * image.get(y, x, 1) + 0.114 * image.get(y, x, 2)
    }
}

/// Replaces every channel with the luma; single-channel images are returned
/// unchanged.
pub fn to_grayscale(image: &Image) -> Image {
    let mut out = image.clone();
    if image.channels() == 1 {
        return out;
    }
    for y in 0..image.height() {
        for x in 0..image.width() {
            let g = luma(image, y, x);
            for ch in 0..3 {
                out.set(y, x, ch, g);
            }
        }
    }
    out
}

/// Brightness, contrast and saturation factors, applied in that order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

pub fn color_jitter(image: &Image, factors: JitterFactors) -> Image {
    let mut out = image.clone();
    out.pixels_mut().iter_mut().for_each(|p| *p = (*p * factors.brightness).clamp(0.0, 1.0));

    let (h, w, c) = out.shape();
    let mean_luma = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| luma(&out, y, x)).sum::<f64>()
        / (h * w) as f64;
    out.pixels_mut()
        .iter_mut()
        .for_each(|p| *p = ((*p - mean_luma) * factors.contrast + mean_luma).clamp(0.0, 1.0));

    if c == 3 {
        let gray = to_grayscale(&out);
        for (p, g) in out.pixels_mut().iter_mut().zip(gray.pixels()) {
            *p = (g + (*p - g) * factors.saturation).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn apply_crop(image: &Image, config: &BaseAugConfig, seed_value: u64) -> Image {
    if config.crop_scale == (1.0, 1.0) {
        return image.clone();
    }
    let mut rng = seed::rng(seed_value);
    let crop = sample_crop(image.height(), image.width(), config.crop_scale, config.crop_ratio, &mut rng);
    crop_resize(image, crop)
}

pub fn apply_flip(image: &Image, p: f64, seed_value: u64) -> Image {
    if p > 0.0 && seed::rng(seed_value).gen_bool(p) {
        hflip(image)
    } else {
        image.clone()
    }
}

pub fn apply_jitter(image: &Image, strength: f64, p: f64, seed_value: u64) -> Image {
    let mut rng = seed::rng(seed_value);
    if !(p > 0.0 && rng.gen_bool(p)) {
        return image.clone();
    }
    let mut draw = || uniform(&mut rng, 1.0 - strength, 1.0 + strength);
    let factors = JitterFactors {
        brightness: draw(),
        contrast: draw(),
        saturation: draw(),
    };
    color_jitter(image, factors)
}

pub fn apply_grayscale(image: &Image, p: f64, seed_value: u64) -> Image {
    if p > 0.0 && seed::rng(seed_value).gen_bool(p) {
        to_grayscale(image)
    } else {
        image.clone()
    }
}

/// Crop, flip, jitter, grayscale; op `i` draws from `seed::derive(seed, i)`.
pub fn base_augment(image: &Image, seed_value: u64, config: &BaseAugConfig) -> Image {
    let sub = |i| seed::derive(seed_value, i);
    let x = apply_crop(image, config, sub(0));
    let x = apply_flip(&x, config.flip_p, sub(1));
    let x = apply_jitter(&x, config.jitter_strength, config.jitter_p, sub(2));
    apply_grayscale(&x, config.grayscale_p, sub(3))
}
