//! Layer zoo and the per-layer forward / vector-Jacobian kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VccError};
use crate::tensor::TensorF32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    #[serde(rename = "conv2d")]
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d { kernel: usize, stride: usize },
    #[serde(rename = "dense")]
    Dense {
        in_features: usize,
        out_features: usize,
    },
    #[serde(rename = "flatten")]
    Flatten,
    #[serde(rename = "global-average-pool")]
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Flatten => "flatten",
            LayerSpec::GlobalAvgPool => "global-average-pool",
        }
    }

    /// Number of weight and bias scalars the layer carries.
    pub fn param_counts(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (out_channels * in_channels * kernel * kernel, out_channels),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => (out_features * in_features, out_features),
            _ => (0, 0),
        }
    }

    pub fn has_params(&self) -> bool {
        self.param_counts().0 > 0
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| VccError::InvalidInput(format!("{}: {msg}", self.name()));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let &[c, h, w] = input else {
                    return Err(bad(format!("expects C×H×W input, got {input:?}")));
                };
                if c != in_channels {
                    return Err(bad(format!("expects {in_channels} channels, got {c}")));
                }
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err(bad("kernel, stride and channel count must be positive".into()));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(bad(format!("kernel {kernel} larger than padded input {h}×{w}")));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { kernel, stride } => {
                let &[c, h, w] = input else {
                    return Err(bad(format!("expects C×H×W input, got {input:?}")));
                };
                if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                    return Err(bad(format!("window {kernel}/{stride} does not fit {h}×{w}")));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if input != [in_features] {
                    return Err(bad(format!("expects [{in_features}] input, got {input:?}")));
                }
                if out_features == 0 {
                    return Err(bad("out_features must be positive".into()));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::GlobalAvgPool => {
                let &[c, _, _] = input else {
                    return Err(bad(format!("expects C×H×W input, got {input:?}")));
                };
                Ok(vec![c])
            }
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { .. } | LayerSpec::Relu | LayerSpec::MaxPool2d { .. }
        )
    }
}

/// Weights and biases of a parametrised layer. Conv weights are laid out
/// `out × in × k × k`; dense weights `out × in`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn forward(spec: &LayerSpec, params: &LayerParams, x: &TensorF32) -> TensorF32 {
    match *spec {
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => conv_forward(x, params, out_channels, kernel, stride, padding),
        LayerSpec::Relu => {
            let data = x.data().iter().map(|&v| v.max(0.0)).collect();
            TensorF32::from_parts(x.shape().to_vec(), data)
        }
        LayerSpec::MaxPool2d { kernel, stride } => maxpool_forward(x, kernel, stride),
        LayerSpec::Dense {
            in_features,
            out_features,
        } => {
            let xin = x.data();
            let out = (0..out_features)
                .map(|o| {
                    let row = &params.weight[o * in_features..(o + 1) * in_features];
                    (params.bias[o] as f64 + crate::tensor::dot_f32(row, xin)) as f32
                })
                .collect();
            TensorF32::from_parts(vec![out_features], out)
        }
        LayerSpec::Flatten => TensorF32::from_parts(vec![x.len()], x.data().to_vec()),
        LayerSpec::GlobalAvgPool => {
            let (c, h, w) = x.chw().expect("validated spatial input");
            TensorF32::from_parts(vec![c], gap_channels(x.data(), c, h * w))
        }
    }
}

pub(crate) fn gap_channels(data: &[f32], channels: usize, plane: usize) -> Vec<f32> {
    (0..channels)
        .map(|ch| {
            let s: f64 = data[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).sum();
            (s / plane as f64) as f32
        })
        .collect()
}

/// Gradients with respect to a layer's parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Vector–Jacobian product through one layer. `x` is the layer input and
/// `g` the gradient with respect to its output. Parameter gradients are
/// accumulated into `param_grads` when provided.
pub(crate) fn backward(
    spec: &LayerSpec,
    params: &LayerParams,
    x: &TensorF32,
    g: &[f32],
    param_grads: Option<&mut ParamGrads>,
) -> Vec<f32> {
    match *spec {
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => conv_backward(x, params, g, out_channels, kernel, stride, padding, param_grads),
        LayerSpec::Relu => x
            .data()
            .iter()
            .zip(g)
            .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
            .collect(),
        LayerSpec::MaxPool2d { kernel, stride } => maxpool_backward(x, g, kernel, stride),
        LayerSpec::Dense {
            in_features,
            out_features,
        } => {
            let mut gx = vec![0.0f64; in_features];
            for o in 0..out_features {
                let go = g[o] as f64;
                if go == 0.0 {
                    continue;
                }
                let row = &params.weight[o * in_features..(o + 1) * in_features];
                for (acc, &wv) in gx.iter_mut().zip(row) {
                    *acc += go * wv as f64;
                }
            }
            if let Some(pg) = param_grads {
                let xin = x.data();
                for o in 0..out_features {
                    let go = g[o] as f64;
                    pg.bias[o] += go;
                    let row = &mut pg.weight[o * in_features..(o + 1) * in_features];
                    for (acc, &xv) in row.iter_mut().zip(xin) {
                        *acc += go * xv as f64;
                    }
                }
            }
            gx.into_iter().map(|v| v as f32).collect()
        }
        LayerSpec::Flatten => g.to_vec(),
        LayerSpec::GlobalAvgPool => {
            let (c, h, w) = x.chw().expect("validated spatial input");
            let plane = h * w;
            let mut out = vec![0.0f32; c * plane];
            for ch in 0..c {
                let v = (g[ch] as f64 / plane as f64) as f32;
                out[ch * plane..(ch + 1) * plane].fill(v);
            }
            out
        }
    }
}

fn conv_forward(
    x: &TensorF32,
    params: &LayerParams,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> TensorF32 {
    let (cin, h, w) = x.chw().expect("validated spatial input");
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let input = x.data();
    let mut out = vec![0.0f32; out_channels * oh * ow];
    let mut acc = vec![0.0f64; oh * ow];
    for oc in 0..out_channels {
        acc.fill(params.bias[oc] as f64);
        for ic in 0..cin {
            let plane = &input[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let wv = params.weight[((oc * cin + ic) * kernel + ky) * kernel + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = valid_range(kx, padding, stride, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let arow = &mut acc[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - padding;
                            let src = &row[ix0..ix0 + (ox_hi - ox_lo)];
                            for (a, &v) in arow[ox_lo..ox_hi].iter_mut().zip(src) {
                                *a += wv * v as f64;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - padding;
                                arow[ox] += wv * row[ix] as f64;
                            }
                        }
                    }
                }
            }
        }
        for (o, &a) in out[oc * oh * ow..(oc + 1) * oh * ow].iter_mut().zip(&acc) {
            *o = a as f32;
        }
    }
    TensorF32::from_parts(vec![out_channels, oh, ow], out)
}

/// Range of output columns whose input column `ox*stride + k - pad` lies inside `[0, w)`.
fn valid_range(k: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // ox*stride + k - pad <= w - 1
    let hi = if w + pad < k + 1 {
        0
    } else {
        ((w + pad - k - 1) / stride + 1).min(ow)
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &TensorF32,
    params: &LayerParams,
    g: &[f32],
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    param_grads: Option<&mut ParamGrads>,
) -> Vec<f32> {
    let (cin, h, w) = x.chw().expect("validated spatial input");
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let input = x.data();
    let mut gin = vec![0.0f64; cin * h * w];
    for oc in 0..out_channels {
        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..cin {
            let ginplane = &mut gin[ic * h * w..(ic + 1) * h * w];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let wv = params.weight[((oc * cin + ic) * kernel + ky) * kernel + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = valid_range(kx, padding, stride, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let irow = &mut ginplane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in ox_lo..ox_hi {
                            irow[ox * stride + kx - padding] += wv * grow[ox] as f64;
                        }
                    }
                }
            }
        }
    }
    if let Some(pg) = param_grads {
        for oc in 0..out_channels {
            let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
            pg.bias[oc] += gplane.iter().map(|&v| v as f64).sum::<f64>();
            for ic in 0..cin {
                let plane = &input[ic * h * w..(ic + 1) * h * w];
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let (ox_lo, ox_hi) = valid_range(kx, padding, stride, w, ow);
                        let mut acc = 0.0f64;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for ox in ox_lo..ox_hi {
                                acc += grow[ox] as f64 * row[ox * stride + kx - padding] as f64;
                            }
                        }
                        pg.weight[((oc * cin + ic) * kernel + ky) * kernel + kx] += acc;
                    }
                }
            }
        }
    }
    gin.into_iter().map(|v| v as f32).collect()
}

fn maxpool_forward(x: &TensorF32, kernel: usize, stride: usize) -> TensorF32 {
    let (c, h, w) = x.chw().expect("validated spatial input");
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let input = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(plane[argmax_window(plane, w, oy, ox, kernel, stride)]);
            }
        }
    }
    TensorF32::from_parts(vec![c, oh, ow], out)
}

/// Index of the first maximum inside a pooling window (row-major scan).
fn argmax_window(plane: &[f32], w: usize, oy: usize, ox: usize, kernel: usize, stride: usize) -> usize {
    let mut best = oy * stride * w + ox * stride;
    for ky in 0..kernel {
        for kx in 0..kernel {
            let idx = (oy * stride + ky) * w + ox * stride + kx;
            if plane[idx] > plane[best] {
                best = idx;
            }
        }
    }
    best
}

fn maxpool_backward(x: &TensorF32, g: &[f32], kernel: usize, stride: usize) -> Vec<f32> {
    let (c, h, w) = x.chw().expect("validated spatial input");
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let input = x.data();
    let mut gin = vec![0.0f64; c * h * w];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let idx = argmax_window(plane, w, oy, ox, kernel, stride);
                gin[ch * h * w + idx] += g[(ch * oh + oy) * ow + ox] as f64;
            }
        }
    }
    gin.into_iter().map(|v| v as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_covers_padding() {
        // k=0, pad=1, stride=1, w=4, ow=4: ox=0 maps to ix=-1.
        assert_eq!(valid_range(0, 1, 1, 4, 4), (1, 4));
        assert_eq!(valid_range(2, 1, 1, 4, 4), (0, 3));
        assert_eq!(valid_range(1, 1, 1, 4, 4), (0, 4));
        // stride 2, pad 1, kernel index 0, w=5 -> ow=3: ix = 2*ox - 1
        assert_eq!(valid_range(0, 1, 2, 5, 3), (1, 3));
    }

    #[test]
    fn output_shapes() {
        let conv = LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 4,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        assert_eq!(conv.output_shape(&[3, 8, 8]).unwrap(), vec![4, 8, 8]);
        assert!(conv.output_shape(&[2, 8, 8]).is_err());
        let pool = LayerSpec::MaxPool2d { kernel: 2, stride: 2 };
        assert_eq!(pool.output_shape(&[4, 7, 7]).unwrap(), vec![4, 3, 3]);
        assert_eq!(LayerSpec::Flatten.output_shape(&[2, 3, 3]).unwrap(), vec![18]);
        assert_eq!(LayerSpec::GlobalAvgPool.output_shape(&[5, 2, 2]).unwrap(), vec![5]);
    }

    #[test]
    fn manifest_kind_names() {
        let s = serde_json::to_string(&LayerSpec::GlobalAvgPool).unwrap();
        assert_eq!(s, r#"{"kind":"global-average-pool"}"#);
        let p: LayerSpec = serde_json::from_str(r#"{"kind":"maxpool2d","kernel":2,"stride":2}"#).unwrap();
        assert_eq!(p, LayerSpec::MaxPool2d { kernel: 2, stride: 2 });
    }
}
