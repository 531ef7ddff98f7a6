//! Small feature extractors with a two-layer projection head.
//!
//! The backbone is either an MLP over flattened pixels or a three-block
//! convolutional net. Its output feeds a `Dense -> ReLU -> Dense` projection
//! head whose output is normalised to unit length. All parameters live in
//! one flat vector described by a [`ParamLayout`].

mod checkpoint;
mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader};
pub use layers::Layer;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::info_nce_batch_with_grad;
use crate::objective::Objective;
use crate::seed;

/// Pixels enter the network as `(p - INPUT_CENTRE) * INPUT_GAIN`, mapping
/// `[0, 1]` to `[-1, 1]`.
pub const INPUT_CENTRE: f64 = 0.5;
pub const INPUT_GAIN: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Mlp { hidden: Vec<usize> },
    SmallConv { channels: [usize; 3] },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    /// Expected input shape `(height, width, channels)`.
    pub input: (usize, usize, usize),
    /// Backbone feature dimension.
    pub feature_dim: usize,
    pub projection_hidden: usize,
    pub projection_dim: usize,
}

impl EncoderConfig {
    pub fn mlp(input: (usize, usize, usize), hidden: Vec<usize>, feature_dim: usize) -> Self {
        Self {
            architecture: Architecture::Mlp { hidden },
            input,
            feature_dim,
            projection_hidden: feature_dim,
            projection_dim: feature_dim.div_ceil(2).max(2),
        }
    }

    pub fn small_conv(input: (usize, usize, usize), channels: [usize; 3], feature_dim: usize) -> Self {
        Self {
            architecture: Architecture::SmallConv { channels },
            input,
            feature_dim,
            projection_hidden: feature_dim,
            projection_dim: feature_dim.div_ceil(2).max(2),
        }
    }
}

/// Where features are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    #[default]
    Backbone,
    Projection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Maps contiguous parameter ranges to named layer tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
}

impl ParamLayout {
    pub fn total(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl EncoderParams {
    pub fn new(values: Vec<f64>, layout: ParamLayout) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::Model(format!(
                "{} parameters do not fit a layout of {}",
                values.len(),
                layout.total()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Splits the flat vector into its named tensors.
    pub fn unflatten(&self) -> Vec<(String, Vec<f64>)> {
        self.layout
            .segments
            .iter()
            .map(|s| (s.name.clone(), self.values[s.offset..s.offset + s.len].to_vec()))
            .collect()
    }

    /// Inverse of [`EncoderParams::unflatten`].
    pub fn flatten(layout: &ParamLayout, tensors: &[(String, Vec<f64>)]) -> Result<Self> {
        if tensors.len() != layout.segments.len() {
            return Err(Error::Model("tensor count does not match layout".into()));
        }
        let mut values = vec![0.0; layout.total()];
        for (seg, (name, data)) in layout.segments.iter().zip(tensors) {
            if &seg.name != name || seg.len != data.len() {
                return Err(Error::Model(format!(
                    "tensor {name} ({}) does not match segment {} ({})",
                    data.len(),
                    seg.name,
                    seg.len
                )));
            }
            values[seg.offset..seg.offset + seg.len].copy_from_slice(data);
        }
        Self::new(values, layout.clone())
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input of every backbone layer followed by the backbone output.
    backbone: Vec<Vec<f64>>,
    head: Vec<Vec<f64>>,
    /// Unnormalised projection and its norm.
    norm: f64,
    pub feature: Vec<f64>,
}

impl Trace {
    pub fn backbone_feature(&self) -> &[f64] {
        self.backbone.last().expect("non-empty backbone trace")
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    backbone: Vec<Layer>,
    head: Vec<Layer>,
    layout: ParamLayout,
}

const MIN_PROJECTION_NORM: f64 = 1e-12;
const INIT_BIAS: f64 = 0.1;

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let (h, w, c) = config.input;
        if h == 0 || w == 0 || (c != 1 && c != 3) {
            return Err(Error::Model(format!("unsupported input shape {:?}", config.input)));
        }
        if config.feature_dim == 0 || config.projection_hidden == 0 || config.projection_dim == 0 {
            return Err(Error::Model("layer widths must be positive".into()));
        }
        let mut offset = 0;
        let mut segments = Vec::new();
        let mut backbone = Vec::new();
        let mut push = |layer: Layer, name: String, layers: &mut Vec<Layer>, offset: &mut usize| {
            if layer.param_count() > 0 {
                segments.push(Segment {
                    name: format!("{name}.weight"),
                    offset: *offset,
                    len: layer.weight_count(),
                });
                segments.push(Segment {
                    name: format!("{name}.bias"),
                    offset: *offset + layer.weight_count(),
                    len: layer.param_count() - layer.weight_count(),
                });
                *offset += layer.param_count();
            }
            layers.push(layer);
        };

        match &config.architecture {
            Architecture::Mlp { hidden } => {
                let mut inp = h * w * c;
                for (i, &width) in hidden.iter().enumerate() {
                    if width == 0 {
                        return Err(Error::Model("hidden widths must be positive".into()));
                    }
                    let layer = Layer::Dense {
                        inp,
                        out: width,
                        offset,
                    };
                    push(layer, format!("backbone.dense{i}"), &mut backbone, &mut offset);
                    backbone.push(Layer::Relu);
                    inp = width;
                }
                let layer = Layer::Dense {
                    inp,
                    out: config.feature_dim,
                    offset,
                };
                push(layer, "backbone.out".into(), &mut backbone, &mut offset);
                backbone.push(Layer::Relu);
            }
            Architecture::SmallConv { channels } => {
                if h < 8 || w < 8 {
                    return Err(Error::Model(format!(
                        "three pooling blocks need inputs of at least 8x8, got {h}x{w}"
                    )));
                }
                let (mut ch, mut hh, mut ww) = (c, h, w);
                for (i, &out_c) in channels.iter().enumerate() {
                    if out_c == 0 {
                        return Err(Error::Model("channel counts must be positive".into()));
                    }
                    let conv = Layer::Conv3x3 {
                        in_c: ch,
                        out_c,
                        height: hh,
                        width: ww,
                        offset,
                    };
                    push(conv, format!("backbone.conv{i}"), &mut backbone, &mut offset);
                    backbone.push(Layer::Relu);
                    backbone.push(Layer::AvgPool2 {
                        channels: out_c,
                        height: hh,
                        width: ww,
                    });
                    ch = out_c;
                    hh /= 2;
                    ww /= 2;
                }
                let layer = Layer::Dense {
                    inp: ch * hh * ww,
                    out: config.feature_dim,
                    offset,
                };
                push(layer, "backbone.out".into(), &mut backbone, &mut offset);
                backbone.push(Layer::Relu);
            }
        }

        let mut head = Vec::new();
        let first = Layer::Dense {
            inp: config.feature_dim,
            out: config.projection_hidden,
            offset,
        };
        push(first, "head.dense0".into(), &mut head, &mut offset);
        head.push(Layer::Relu);
        let second = Layer::Dense {
            inp: config.projection_hidden,
            out: config.projection_dim,
            offset,
        };
        push(second, "head.dense1".into(), &mut head, &mut offset);

        Ok(Self {
            config,
            backbone,
            head,
            layout: ParamLayout { segments },
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.backbone.iter().chain(&self.head)
    }

    /// He-uniform weights and small positive biases, which keeps the ReLU
    /// paths of narrow networks from starting out dead.
    pub fn init_params(&self, seed_value: u64) -> EncoderParams {
        let mut rng = seed::rng(seed_value);
        let mut values = vec![0.0; self.num_params()];
        for layer in self.layers() {
            if let Some(offset) = layer.offset() {
                let bound = (6.0 / layer.fan_in() as f64).sqrt();
                for v in &mut values[offset..offset + layer.weight_count()] {
                    *v = rng.gen_range(-bound..bound);
                }
                for v in &mut values[offset + layer.weight_count()..offset + layer.param_count()] {
                    *v = INIT_BIAS;
                }
            }
        }
        EncoderParams {
            values,
            layout: self.layout.clone(),
        }
    }

    fn input_vector(&self, image: &Image) -> Result<Vec<f64>> {
        if image.shape() != self.config.input {
            return Err(Error::Model(format!(
                "image shape {:?} does not match encoder input {:?}",
                image.shape(),
                self.config.input
            )));
        }
        let centre = |p: f64| (p - INPUT_CENTRE) * INPUT_GAIN;
        Ok(match self.config.architecture {
            Architecture::Mlp { .. } => image.pixels().iter().map(|&p| centre(p)).collect(),
            // convolutions work on planar C x H x W tensors
            Architecture::SmallConv { .. } => (0..image.channels())
                .flat_map(|c| image.channel(c))
                .map(centre)
                .collect(),
        })
    }

    fn input_gradient_to_image(&self, mut grad: Vec<f64>, image: &Image) -> Vec<f64> {
        grad.iter_mut().for_each(|g| *g *= INPUT_GAIN);
        match self.config.architecture {
            Architecture::Mlp { .. } => grad,
            Architecture::SmallConv { .. } => {
                let (h, w, c) = image.shape();
                let mut out = vec![0.0; h * w * c];
                for ch in 0..c {
                    for i in 0..h * w {
                        out[i * c + ch] = grad[ch * h * w + i];
                    }
                }
                out
            }
        }
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Model(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        Ok(())
    }

    pub fn trace(&self, params: &[f64], image: &Image) -> Result<Trace> {
        self.check_params(params)?;
        let mut backbone = vec![self.input_vector(image)?];
        for layer in &self.backbone {
            let next = layer.forward(params, backbone.last().unwrap());
            backbone.push(next);
        }
        let mut head = vec![backbone.last().unwrap().clone()];
        for layer in &self.head {
            let next = layer.forward(params, head.last().unwrap());
            head.push(next);
        }
        let z = head.last().unwrap();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Model("non-finite projection".into()));
        }
        if norm < MIN_PROJECTION_NORM {
            return Err(Error::Model("projection collapsed to zero; cannot normalise".into()));
        }
        let feature = z.iter().map(|v| v / norm).collect();
        Ok(Trace {
            backbone,
            head,
            norm,
            feature,
        })
    }

    /// Unit-norm projected features of a batch.
    pub fn forward(&self, params: &[f64], images: &[Image]) -> Result<Vec<Vec<f64>>> {
        images
            .iter()
            .map(|img| self.trace(params, img).map(|t| t.feature))
            .collect()
    }

    /// Features at the requested tap point, without normalising backbone output.
    pub fn embed(&self, params: &[f64], images: &[Image], tap: Tap) -> Result<Vec<Vec<f64>>> {
        images
            .iter()
            .map(|img| match tap {
                Tap::Projection => self.trace(params, img).map(|t| t.feature),
                Tap::Backbone => self.backbone_forward(params, img),
            })
            .collect()
    }

    pub fn backbone_forward(&self, params: &[f64], image: &Image) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let mut x = self.input_vector(image)?;
        for layer in &self.backbone {
            x = layer.forward(params, &x);
        }
        Ok(x)
    }

    /// Backpropagates `d_feature` (gradient with respect to the normalised
    /// projection) through the whole network. Parameter gradients are added
    /// to `grad`; the returned vector is the gradient in image pixel layout.
    pub fn backward(&self, params: &[f64], trace: &Trace, d_feature: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let y = &trace.feature;
        let proj = y.iter().zip(d_feature).map(|(a, b)| a * b).sum::<f64>();
        let mut d: Vec<f64> = y
            .iter()
            .zip(d_feature)
            .map(|(yi, gi)| (gi - yi * proj) / trace.norm)
            .collect();
        for (layer, x) in self.head.iter().zip(&trace.head).rev() {
            d = layer.backward(params, x, &d, grad);
        }
        self.backward_backbone(params, &trace.backbone, d, grad)
    }

    fn backward_backbone(&self, params: &[f64], acts: &[Vec<f64>], mut d: Vec<f64>, grad: &mut [f64]) -> Vec<f64> {
        for (layer, x) in self.backbone.iter().zip(acts).rev() {
            d = layer.backward(params, x, &d, grad);
        }
        d
    }

    /// Gradient of `d_backbone . backbone(image)` with respect to the image
    /// pixels (in [`Image`] layout), together with the backbone features.
    pub fn backbone_input_gradient(
        &self,
        params: &[f64],
        image: &Image,
        d_backbone: impl FnOnce(&[f64]) -> Vec<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_params(params)?;
        let mut acts = vec![self.input_vector(image)?];
        for layer in &self.backbone {
            let next = layer.forward(params, acts.last().unwrap());
            acts.push(next);
        }
        let feature = acts.last().unwrap().clone();
        let d = d_backbone(&feature);
        let mut scratch = vec![0.0; self.num_params()];
        let dx = self.backward_backbone(params, &acts, d, &mut scratch);
        Ok((feature, self.input_gradient_to_image(dx, image)))
    }

    /// Gradient of the normalised projection contracted with `d_feature`,
    /// with respect to the image pixels.
    pub fn projection_input_gradient(
        &self,
        params: &[f64],
        image: &Image,
        d_feature: impl FnOnce(&[f64]) -> Vec<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let trace = self.trace(params, image)?;
        let d = d_feature(&trace.feature);
        let mut scratch = vec![0.0; self.num_params()];
        let dx = self.backward(params, &trace, &d, &mut scratch);
        Ok((trace.feature.clone(), self.input_gradient_to_image(dx, image)))
    }
}

/// In-batch InfoNCE of the encoder's features on a fixed set of views.
pub struct ContrastiveObjective<'a> {
    pub encoder: &'a Encoder,
    pub views: &'a [Image],
    pub tau: f64,
    pub beta: Option<f64>,
}

impl Objective for ContrastiveObjective<'_> {
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let traces: Vec<Trace> = self
            .views
            .iter()
            .map(|v| self.encoder.trace(params, v))
            .collect::<Result<_>>()?;
        let feats: Vec<Vec<f64>> = traces.iter().map(|t| t.feature.clone()).collect();
        let (loss, d_feats) = info_nce_batch_with_grad(&feats, self.tau, self.beta)?;
        let mut grad = vec![0.0; params.len()];
        for (trace, d) in traces.iter().zip(&d_feats) {
            self.encoder.backward(params, trace, d, &mut grad);
        }
        Ok((loss, grad))
    }

    fn value(&self, params: &[f64]) -> Result<f64> {
        let feats = self.encoder.forward(params, self.views)?;
        crate::losses::info_nce_batch(&feats, self.tau, self.beta)
    }
}

/// Gradient of `objective` at `params`, rejecting non-finite results.
pub fn loss_gradient(params: &[f64], objective: &dyn Objective) -> Result<Vec<f64>> {
    let (value, grad) = objective.value_and_grad(params)?;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Model("non-finite loss or gradient".into()));
    }
    Ok(grad)
}

/// Central-difference gradient, one pair of evaluations per coordinate.
pub fn finite_diff_gradient(params: &[f64], f: impl Fn(&[f64]) -> f64, step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut x = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, 1e-10)` over whole vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-10)
}
