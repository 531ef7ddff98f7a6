//! Layers with hand-written forward and backward passes over a flat
//! parameter buffer.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// `y = W x + b`, `W` stored row-major as `out x inp`.
    Dense {
        inp: usize,
        out: usize,
        offset: usize,
    },
    /// 3x3 convolution, stride 1, zero padding 1, over `C x H x W` tensors.
    /// Weights are stored `out_c x in_c x 3 x 3`, followed by `out_c` biases.
    Conv3x3 {
        in_c: usize,
        out_c: usize,
        height: usize,
        width: usize,
        offset: usize,
    },
    Relu,
    /// 2x2 average pooling with stride 2 (odd trailing rows/columns dropped).
    AvgPool2 {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Dense { inp, out, .. } => inp * out + out,
            Layer::Conv3x3 { in_c, out_c, .. } => out_c * in_c * 9 + out_c,
            Layer::Relu | Layer::AvgPool2 { .. } => 0,
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            Layer::Dense { inp, .. } => inp,
            Layer::Conv3x3 { in_c, .. } => in_c * 9,
            _ => 0,
        }
    }

    pub fn offset(&self) -> Option<usize> {
        match *self {
            Layer::Dense { offset, .. } | Layer::Conv3x3 { offset, .. } => Some(offset),
            _ => None,
        }
    }

    /// Number of weights preceding the biases of this layer.
    pub fn weight_count(&self) -> usize {
        match *self {
            Layer::Dense { inp, out, .. } => inp * out,
            Layer::Conv3x3 { in_c, out_c, .. } => out_c * in_c * 9,
            _ => 0,
        }
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        match *self {
            Layer::Dense { out, .. } => out,
            Layer::Conv3x3 {
                out_c, height, width, ..
            } => out_c * height * width,
            Layer::Relu => input_len,
            Layer::AvgPool2 {
                channels,
                height,
                width,
            } => channels * (height / 2) * (width / 2),
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        match *self {
            Layer::Dense { inp, out, offset } => {
                let w = &params[offset..offset + inp * out];
                let b = &params[offset + inp * out..offset + inp * out + out];
                w.chunks_exact(inp)
                    .zip(b)
                    .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                    .collect()
            }
            Layer::Conv3x3 {
                in_c,
                out_c,
                height,
                width,
                offset,
            } => {
                let hw = height * width;
                let w = &params[offset..offset + out_c * in_c * 9];
                let b = &params[offset + out_c * in_c * 9..offset + out_c * in_c * 9 + out_c];
                let mut y = vec![0.0; out_c * hw];
                for o in 0..out_c {
                    let plane = &mut y[o * hw..(o + 1) * hw];
                    plane.iter_mut().for_each(|v| *v = b[o]);
                    for i in 0..in_c {
                        let src = &x[i * hw..(i + 1) * hw];
                        let k = &w[(o * in_c + i) * 9..(o * in_c + i) * 9 + 9];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let kv = k[ky * 3 + kx];
                                for r in 0..height {
                                    let sr = r as isize + ky as isize - 1;
                                    if sr < 0 || sr >= height as isize {
                                        continue;
                                    }
                                    let srow = &src[sr as usize * width..(sr as usize + 1) * width];
                                    let drow = &mut plane[r * width..(r + 1) * width];
                                    let (lo, hi) = match kx {
                                        0 => (1, width),
                                        1 => (0, width),
                                        _ => (0, width.saturating_sub(1)),
                                    };
                                    for c in lo..hi {
                                        drow[c] += kv * srow[c + kx - 1];
                                    }
                                }
                            }
                        }
                    }
                }
                y
            }
            Layer::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            Layer::AvgPool2 {
                channels,
                height,
                width,
            } => {
                let (oh, ow) = (height / 2, width / 2);
                let mut y = vec![0.0; channels * oh * ow];
                for c in 0..channels {
                    let src = &x[c * height * width..(c + 1) * height * width];
                    for r in 0..oh {
                        for q in 0..ow {
                            let s = src[2 * r * width + 2 * q]
                                + src[2 * r * width + 2 * q + 1]
                                + src[(2 * r + 1) * width + 2 * q]
                                + src[(2 * r + 1) * width + 2 * q + 1];
                            y[(c * oh + r) * ow + q] = 0.25 * s;
                        }
                    }
                }
                y
            }
        }
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the layer input `x`.
    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        match *self {
            Layer::Dense { inp, out, offset } => {
                let w = &params[offset..offset + inp * out];
                let mut dx = vec![0.0; inp];
                for (o, &g) in dy.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let row = &w[o * inp..(o + 1) * inp];
                    let grow = &mut grad[offset + o * inp..offset + (o + 1) * inp];
                    for i in 0..inp {
                        grow[i] += g * x[i];
                        dx[i] += g * row[i];
                    }
                    grad[offset + inp * out + o] += g;
                }
                dx
            }
            Layer::Conv3x3 {
                in_c,
                out_c,
                height,
                width,
                offset,
            } => {
                let hw = height * width;
                let nw = out_c * in_c * 9;
                let w = &params[offset..offset + nw];
                let mut dx = vec![0.0; in_c * hw];
                for o in 0..out_c {
                    let dplane = &dy[o * hw..(o + 1) * hw];
                    grad[offset + nw + o] += dplane.iter().sum::<f64>();
                    for i in 0..in_c {
                        let src = &x[i * hw..(i + 1) * hw];
                        let base = (o * in_c + i) * 9;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let kv = w[base + ky * 3 + kx];
                                let mut gk = 0.0;
                                for r in 0..height {
                                    let sr = r as isize + ky as isize - 1;
                                    if sr < 0 || sr >= height as isize {
                                        continue;
                                    }
                                    let sr = sr as usize;
                                    let (lo, hi) = match kx {
                                        0 => (1, width),
                                        1 => (0, width),
                                        _ => (0, width.saturating_sub(1)),
                                    };
                                    for c in lo..hi {
                                        let g = dplane[r * width + c];
                                        let si = i * hw + sr * width + c + kx - 1;
                                        gk += g * src[sr * width + c + kx - 1];
                                        dx[si] += g * kv;
                                    }
                                }
                                grad[offset + base + ky * 3 + kx] += gk;
                            }
                        }
                    }
                }
                dx
            }
            Layer::Relu => x
                .iter()
                .zip(dy)
                .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                .collect(),
            Layer::AvgPool2 {
                channels,
                height,
                width,
            } => {
                let (oh, ow) = (height / 2, width / 2);
                let mut dx = vec![0.0; channels * height * width];
                for c in 0..channels {
                    for r in 0..oh {
                        for q in 0..ow {
                            let g = 0.25 * dy[(c * oh + r) * ow + q];
                            let base = c * height * width;
                            dx[base + 2 * r * width + 2 * q] += g;
                            dx[base + 2 * r * width + 2 * q + 1] += g;
                            dx[base + (2 * r + 1) * width + 2 * q] += g;
                            dx[base + (2 * r + 1) * width + 2 * q + 1] += g;
                        }
                    }
                }
                dx
            }
        }
    }
}
