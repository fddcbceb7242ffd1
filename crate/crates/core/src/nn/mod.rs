//! Minimal CPU neural-network layers with explicit forward/backward passes.
//!
//! Just enough machinery for a MobileNetV2-style feature extractor plus a
//! small dense head: convolutions (standard and depthwise) with
//! TensorFlow-style `same` padding, batch normalization, ReLU6, dense
//! layers, dropout, global average pooling, and softmax cross-entropy.
//!
//! Convention: activations are `(N, C, H, W)` f32 arrays; dense activations
//! are `(N, F)`.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView3, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

pub mod mobilenetv2;

/// A named tensor of model state. Trainable weights carry gradients; running
/// statistics are buffers that persist in checkpoints but are never optimized.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub trainable: bool,
    pub buffer: bool,
}

impl Param {
    pub fn weight(name: impl Into<String>, value: ArrayD<f32>) -> Param {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { name: name.into(), value, grad, trainable: true, buffer: false }
    }

    pub fn buffer(name: impl Into<String>, value: ArrayD<f32>) -> Param {
        let grad = ArrayD::zeros(IxDyn(&[0]));
        Param { name: name.into(), value, grad, trainable: false, buffer: true }
    }

    pub fn zero_grad(&mut self) {
        if !self.buffer {
            self.grad.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }
}

/// Glorot-uniform initialization.
pub fn glorot_uniform(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-limit..limit) as f32).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// He-uniform initialization (variance-preserving under ReLU-family
/// activations). Used for convolutions so that a randomly initialized
/// backbone, whose batch norms run in frozen identity mode, still produces
/// activations of usable magnitude after many layers.
pub fn he_uniform(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-limit..limit) as f32).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// TensorFlow `same` padding: `(before, after)` for one spatial axis.
pub fn tf_same_pads(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (total / 2, total - total / 2)
}

fn pad3(x: &ArrayView3<f32>, pt: usize, pb: usize, pl: usize, pr: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h + pt + pb, w + pl + pr));
    out.slice_mut(s![.., pt..pt + h, pl..pl + w]).assign(x);
    out
}

/// Unfold one padded image into a `(C*k*k, oh*ow)` patch matrix.
fn im2col(padded: &Array3<f32>, kernel: usize, stride: usize, oh: usize, ow: usize) -> Array2<f32> {
    let (c, _, pw) = padded.dim();
    let mut col = Array2::zeros((c * kernel * kernel, oh * ow));
    let src = padded.as_slice().unwrap();
    let plane = padded.dim().1 * pw;
    for ch in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let mut dst = col.row_mut(row);
                let dst = dst.as_slice_mut().unwrap();
                for oy in 0..oh {
                    let sy = oy * stride + ky;
                    let base = ch * plane + sy * pw + kx;
                    for ox in 0..ow {
                        dst[oy * ow + ox] = src[base + ox * stride];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the inverse of [`im2col`] back into a padded image buffer.
fn col2im(col: &Array2<f32>, c: usize, ph: usize, pw: usize, kernel: usize, stride: usize, oh: usize, ow: usize) -> Array3<f32> {
    let mut out = Array3::zeros((c, ph, pw));
    let dst = out.as_slice_mut().unwrap();
    let plane = ph * pw;
    for ch in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let srcrow = col.row(row);
                let srcrow = srcrow.as_slice().unwrap();
                for oy in 0..oh {
                    let sy = oy * stride + ky;
                    let base = ch * plane + sy * pw + kx;
                    for ox in 0..ow {
                        dst[base + ox * stride] += srcrow[oy * ow + ox];
                    }
                }
            }
        }
    }
    out
}

/// 2D convolution, no bias, TF `same` padding.
pub struct Conv2d {
    pub weight: Param,
    pub stride: usize,
    kernel: usize,
    c_in: usize,
    c_out: usize,
    cached_input: Option<Array4<f32>>,
}

impl Conv2d {
    pub fn new(name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut ChaCha20Rng) -> Conv2d {
        let fan_in = c_in * kernel * kernel;
        let weight =
            Param::weight(format!("{name}.weight"), he_uniform(rng, &[c_out, c_in, kernel, kernel], fan_in));
        Conv2d { weight, stride, kernel, c_in, c_out, cached_input: None }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    pub fn forward(&mut self, x: &Array4<f32>, cache: bool) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.c_in);
        let (oh, ow) = self.out_dims(h, w);
        let (pt, pb) = tf_same_pads(h, self.kernel, self.stride);
        let (pl, pr) = tf_same_pads(w, self.kernel, self.stride);
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.c_out, self.c_in * self.kernel * self.kernel))
            .unwrap()
            .to_owned();

        let planes: Vec<Array3<f32>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let padded = pad3(&x.index_axis(Axis(0), i), pt, pb, pl, pr);
                let col = im2col(&padded, self.kernel, self.stride, oh, ow);
                let y = wmat.dot(&col);
                y.into_shape_with_order((self.c_out, oh, ow)).unwrap()
            })
            .collect();

        if cache {
            self.cached_input = Some(x.clone());
        }
        stack4(&planes)
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let x = self.cached_input.take().expect("conv backward without cached forward");
        let (n, _, h, w) = x.dim();
        let (_, _, oh, ow) = dy.dim();
        let (pt, pb) = tf_same_pads(h, self.kernel, self.stride);
        let (pl, pr) = tf_same_pads(w, self.kernel, self.stride);
        let kk = self.c_in * self.kernel * self.kernel;
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.c_out, kk))
            .unwrap()
            .to_owned();

        let per_image: Vec<(Array2<f32>, Array3<f32>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let padded = pad3(&x.index_axis(Axis(0), i), pt, pb, pl, pr);
                let col = im2col(&padded, self.kernel, self.stride, oh, ow);
                let dy_i = dy
                    .index_axis(Axis(0), i)
                    .into_shape_with_order((self.c_out, oh * ow))
                    .unwrap()
                    .to_owned();
                let dw = dy_i.dot(&col.t());
                let dcol = wmat.t().dot(&dy_i);
                let dpadded = col2im(&dcol, self.c_in, h + pt + pb, w + pl + pr, self.kernel, self.stride, oh, ow);
                let dx = dpadded.slice(s![.., pt..pt + h, pl..pl + w]).to_owned();
                (dw, dx)
            })
            .collect();

        let mut dxs = Vec::with_capacity(n);
        let mut dw_total = Array2::<f32>::zeros((self.c_out, kk));
        for (dw, dx) in per_image {
            dw_total += &dw;
            dxs.push(dx);
        }
        self.weight.grad += &dw_total
            .into_shape_with_order(IxDyn(&[self.c_out, self.c_in, self.kernel, self.kernel]))
            .unwrap();
        stack4(&dxs)
    }
}

/// Depthwise 3x3 (or kxk) convolution, no bias, TF `same` padding.
pub struct DepthwiseConv2d {
    pub weight: Param, // (C, k, k)
    pub stride: usize,
    kernel: usize,
    channels: usize,
    cached_input: Option<Array4<f32>>,
}

impl DepthwiseConv2d {
    pub fn new(name: &str, channels: usize, kernel: usize, stride: usize, rng: &mut ChaCha20Rng) -> DepthwiseConv2d {
        let fan = kernel * kernel;
        let weight = Param::weight(
            format!("{name}.weight"),
            he_uniform(rng, &[channels, kernel, kernel], fan),
        );
        DepthwiseConv2d { weight, stride, kernel, channels, cached_input: None }
    }

    pub fn forward(&mut self, x: &Array4<f32>, cache: bool) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let oh = h.div_ceil(self.stride);
        let ow = w.div_ceil(self.stride);
        let (pt, pb) = tf_same_pads(h, self.kernel, self.stride);
        let (pl, pr) = tf_same_pads(w, self.kernel, self.stride);
        let k = self.kernel;
        let weight = &self.weight.value;

        let planes: Vec<Array3<f32>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let padded = pad3(&x.index_axis(Axis(0), i), pt, pb, pl, pr);
                let mut y = Array3::zeros((c, oh, ow));
                for ch in 0..c {
                    let xin = padded.index_axis(Axis(0), ch);
                    let mut yout = y.index_axis_mut(Axis(0), ch);
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = weight[[ch, ky, kx]];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let sy = oy * self.stride + ky;
                                for ox in 0..ow {
                                    yout[[oy, ox]] += wv * xin[[sy, ox * self.stride + kx]];
                                }
                            }
                        }
                    }
                }
                y
            })
            .collect();

        if cache {
            self.cached_input = Some(x.clone());
        }
        stack4(&planes)
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let x = self.cached_input.take().expect("depthwise backward without cached forward");
        let (n, c, h, w) = x.dim();
        let (_, _, oh, ow) = dy.dim();
        let (pt, pb) = tf_same_pads(h, self.kernel, self.stride);
        let (pl, pr) = tf_same_pads(w, self.kernel, self.stride);
        let k = self.kernel;
        let weight = &self.weight.value;

        let per_image: Vec<(Array3<f32>, Array3<f32>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let padded = pad3(&x.index_axis(Axis(0), i), pt, pb, pl, pr);
                let dy_i = dy.index_axis(Axis(0), i);
                let mut dw = Array3::zeros((c, k, k));
                let mut dpad = Array3::zeros(padded.raw_dim());
                for ch in 0..c {
                    let xin = padded.index_axis(Axis(0), ch);
                    let dout = dy_i.index_axis(Axis(0), ch);
                    let mut dxin = dpad.index_axis_mut(Axis(0), ch);
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0f32;
                            let wv = weight[[ch, ky, kx]];
                            for oy in 0..oh {
                                let sy = oy * self.stride + ky;
                                for ox in 0..ow {
                                    let sx = ox * self.stride + kx;
                                    let d = dout[[oy, ox]];
                                    acc += d * xin[[sy, sx]];
                                    dxin[[sy, sx]] += d * wv;
                                }
                            }
                            dw[[ch, ky, kx]] = acc;
                        }
                    }
                }
                let dx = dpad.slice(s![.., pt..pt + h, pl..pl + w]).to_owned();
                (dw, dx)
            })
            .collect();

        let mut dxs = Vec::with_capacity(n);
        let mut dw_total = Array3::<f32>::zeros((c, k, k));
        for (dw, dx) in per_image {
            dw_total += &dw;
            dxs.push(dx);
        }
        self.weight.grad += &dw_total.into_shape_with_order(IxDyn(&[c, k, k])).unwrap();
        stack4(&dxs)
    }
}

/// Batch normalization over channel axis of `(N, C, H, W)` activations.
///
/// The backbone always runs with frozen statistics (inference mode), the
/// standard practice when fine-tuning: only gamma/beta receive gradients
/// when the owning block is trainable.
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f32,
    cached_input: Option<Array4<f32>>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Param::weight(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::weight(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Param::buffer(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(format!("{name}.running_var"), ArrayD::ones(IxDyn(&[channels]))),
            eps: 1e-3,
            cached_input: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, cache: bool) -> Array4<f32> {
        let (_, c, _, _) = x.dim();
        let mut y = x.clone();
        for ch in 0..c {
            let mean = self.running_mean.value[ch];
            let inv_std = 1.0 / (self.running_var.value[ch] + self.eps).sqrt();
            let g = self.gamma.value[ch];
            let b = self.beta.value[ch];
            y.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| (v - mean) * inv_std * g + b);
        }
        if cache {
            self.cached_input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let x = self.cached_input.take().expect("bn backward without cached forward");
        let (_, c, _, _) = x.dim();
        let mut dx = dy.clone();
        for ch in 0..c {
            let mean = self.running_mean.value[ch];
            let inv_std = 1.0 / (self.running_var.value[ch] + self.eps).sqrt();
            let g = self.gamma.value[ch];
            let dy_c = dy.slice(s![.., ch, .., ..]);
            let x_c = x.slice(s![.., ch, .., ..]);
            let mut dgamma = 0.0f32;
            let mut dbeta = 0.0f32;
            ndarray::Zip::from(&dy_c).and(&x_c).for_each(|&d, &v| {
                dgamma += d * (v - mean) * inv_std;
                dbeta += d;
            });
            self.gamma.grad[ch] += dgamma;
            self.beta.grad[ch] += dbeta;
            dx.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| v * g * inv_std);
        }
        dx
    }
}

/// ReLU clipped at 6, the MobileNet activation.
pub struct Relu6 {
    cached_input: Option<Array4<f32>>,
}

impl Relu6 {
    pub fn new() -> Relu6 {
        Relu6 { cached_input: None }
    }

    pub fn forward(&mut self, x: &Array4<f32>, cache: bool) -> Array4<f32> {
        if cache {
            self.cached_input = Some(x.clone());
        }
        x.mapv(|v| v.clamp(0.0, 6.0))
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let x = self.cached_input.take().expect("relu6 backward without cached forward");
        let mut dx = dy.clone();
        ndarray::Zip::from(&mut dx).and(&x).for_each(|d, &v| {
            if !(0.0..6.0).contains(&v) {
                *d = 0.0;
            }
        });
        dx
    }
}

impl Default for Relu6 {
    fn default() -> Self {
        Relu6::new()
    }
}

/// Fully connected layer with bias on `(N, F)` activations.
pub struct Dense {
    pub weight: Param, // (out, in)
    pub bias: Param,   // (out,)
    cached_input: Option<Array2<f32>>,
}

impl Dense {
    pub fn new(name: &str, f_in: usize, f_out: usize, rng: &mut ChaCha20Rng) -> Dense {
        Dense {
            weight: Param::weight(format!("{name}.weight"), glorot_uniform(rng, &[f_out, f_in], f_in, f_out)),
            bias: Param::weight(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[f_out]))),
            cached_input: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f32>, cache: bool) -> Array2<f32> {
        let w = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        y += &b;
        if cache {
            self.cached_input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let x = self.cached_input.take().expect("dense backward without cached forward");
        let w = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let dw = dy.t().dot(&x);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&w);
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &db.into_dyn();
        dx
    }
}

/// ReLU on dense activations.
pub struct Relu {
    cached_input: Option<Array2<f32>>,
}

impl Relu {
    pub fn new() -> Relu {
        Relu { cached_input: None }
    }

    pub fn forward(&mut self, x: &Array2<f32>, cache: bool) -> Array2<f32> {
        if cache {
            self.cached_input = Some(x.clone());
        }
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let x = self.cached_input.take().expect("relu backward without cached forward");
        let mut dx = dy.clone();
        ndarray::Zip::from(&mut dx).and(&x).for_each(|d, &v| {
            if v <= 0.0 {
                *d = 0.0;
            }
        });
        dx
    }
}

impl Default for Relu {
    fn default() -> Self {
        Relu::new()
    }
}

/// Batch normalization over feature axis of `(N, F)` activations. Unlike the
/// backbone batch norms, this one trains with batch statistics and keeps
/// exponential moving averages for inference.
pub struct BatchNorm1d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f32,
    pub momentum: f32,
    cache: Option<Bn1dCache>,
}

struct Bn1dCache {
    x_hat: Array2<f32>,
    inv_std: Array1<f32>,
}

impl BatchNorm1d {
    pub fn new(name: &str, features: usize) -> BatchNorm1d {
        BatchNorm1d {
            gamma: Param::weight(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[features]))),
            beta: Param::weight(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[features]))),
            running_mean: Param::buffer(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[features]))),
            running_var: Param::buffer(format!("{name}.running_var"), ArrayD::ones(IxDyn(&[features]))),
            eps: 1e-3,
            // Low enough that the running statistics converge within the
            // few dozen steps a short training run takes.
            momentum: 0.9,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        let (n, f) = x.dim();
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        if train {
            let mean = x.mean_axis(Axis(0)).unwrap();
            let var = x.map_axis(Axis(0), |col| {
                let m = col.mean().unwrap();
                col.iter().map(|&v| (v - m) * (v - m)).sum::<f32>() / n as f32
            });
            let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
            let mut x_hat = x.clone();
            for j in 0..f {
                let m = mean[j];
                let is = inv_std[j];
                x_hat.column_mut(j).mapv_inplace(|v| (v - m) * is);
            }
            let mut y = x_hat.clone();
            for j in 0..f {
                let g = gamma[j];
                let b = beta[j];
                y.column_mut(j).mapv_inplace(|v| v * g + b);
            }
            for j in 0..f {
                self.running_mean.value[j] = self.momentum * self.running_mean.value[j] + (1.0 - self.momentum) * mean[j];
                self.running_var.value[j] = self.momentum * self.running_var.value[j] + (1.0 - self.momentum) * var[j];
            }
            self.cache = Some(Bn1dCache { x_hat, inv_std });
            y
        } else {
            let mut y = x.clone();
            for j in 0..f {
                let m = self.running_mean.value[j];
                let is = 1.0 / (self.running_var.value[j] + self.eps).sqrt();
                let g = gamma[j];
                let b = beta[j];
                y.column_mut(j).mapv_inplace(|v| (v - m) * is * g + b);
            }
            y
        }
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let Bn1dCache { x_hat, inv_std } = self.cache.take().expect("bn1d backward without train forward");
        let (n, f) = dy.dim();
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut dx = Array2::zeros((n, f));
        for j in 0..f {
            let dy_j = dy.column(j);
            let xh_j = x_hat.column(j);
            let dgamma: f32 = dy_j.iter().zip(xh_j.iter()).map(|(&d, &h)| d * h).sum();
            let dbeta: f32 = dy_j.sum();
            self.gamma.grad[j] += dgamma;
            self.beta.grad[j] += dbeta;
            let g = gamma[j];
            let is = inv_std[j];
            let nf = n as f32;
            for i in 0..n {
                let dxhat_term = nf * dy_j[i] - dbeta - xh_j[i] * dgamma;
                dx[[i, j]] = g * is / nf * dxhat_term;
            }
        }
        dx
    }
}

/// Inverted dropout. Active only in training mode.
pub struct Dropout {
    pub rate: f32,
    mask: Option<Array2<f32>>,
}

impl Dropout {
    pub fn new(rate: f32) -> Dropout {
        Dropout { rate, mask: None }
    }

    pub fn forward(&mut self, x: &Array2<f32>, train: bool, rng: &mut ChaCha20Rng) -> Array2<f32> {
        if !train || self.rate == 0.0 {
            return x.clone();
        }
        let keep = 1.0 - self.rate;
        let mask = Array2::from_shape_fn(x.dim(), |_| {
            if rng.random::<f32>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let y = x * &mask;
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        match self.mask.take() {
            Some(mask) => dy * &mask,
            None => dy.clone(),
        }
    }
}

/// Global average pooling: `(N, C, H, W)` to `(N, C)`.
pub fn gap_forward(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array2::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            y[[i, ch]] = x.slice(s![i, ch, .., ..]).sum() / (h * w) as f32;
        }
    }
    y
}

pub fn gap_backward(dy: &Array2<f32>, h: usize, w: usize) -> Array4<f32> {
    let (n, c) = dy.dim();
    let scale = 1.0 / (h * w) as f32;
    Array4::from_shape_fn((n, c, h, w), |(i, ch, _, _)| dy[[i, ch]] * scale)
}

/// Numerically stable row-wise softmax.
pub fn softmax(logits: &Array2<f32>) -> Array2<f32> {
    let mut y = logits.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f32 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    y
}

/// Mean categorical cross-entropy of softmax probabilities against one-hot
/// targets.
pub fn cross_entropy(probs: &Array2<f32>, onehot: &Array2<f32>) -> f32 {
    let n = probs.nrows() as f32;
    let mut loss = 0.0f32;
    ndarray::Zip::from(probs).and(onehot).for_each(|&p, &t| {
        if t > 0.0 {
            loss -= t * p.max(1e-12).ln();
        }
    });
    loss / n
}

/// Gradient of mean cross-entropy with respect to the logits.
pub fn softmax_cce_grad(probs: &Array2<f32>, onehot: &Array2<f32>) -> Array2<f32> {
    let n = probs.nrows() as f32;
    (probs - onehot) / n
}

fn stack4(planes: &[Array3<f32>]) -> Array4<f32> {
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn random4(rng: &mut ChaCha20Rng, dims: (usize, usize, usize, usize)) -> Array4<f32> {
        Array4::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0f32))
    }

    #[test]
    fn tf_same_pads_known_cases() {
        // Stride 1 keeps the size; a 3x3 kernel pads one pixel each side.
        assert_eq!(tf_same_pads(7, 3, 1), (1, 1));
        assert_eq!(tf_same_pads(7, 1, 1), (0, 0));
        // Stride 2 on even input: one pixel of asymmetric padding, after.
        assert_eq!(tf_same_pads(224, 3, 2), (0, 1));
        // Stride 2 on odd input: symmetric.
        assert_eq!(tf_same_pads(7, 3, 2), (1, 1));
    }

    /// Direct convolution with explicit loops, the oracle for `Conv2d`.
    fn conv_reference(x: &Array4<f32>, w: &ArrayD<f32>, stride: usize) -> Array4<f32> {
        let (n, c_in, h, wd) = x.dim();
        let c_out = w.shape()[0];
        let k = w.shape()[2];
        let oh = h.div_ceil(stride);
        let ow = wd.div_ceil(stride);
        let (pt, _) = tf_same_pads(h, k, stride);
        let (pl, _) = tf_same_pads(wd, k, stride);
        let mut y = Array4::zeros((n, c_out, oh, ow));
        for i in 0..n {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = (oy * stride + ky) as isize - pt as isize;
                                    let sx = (ox * stride + kx) as isize - pl as isize;
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                        acc += x[[i, ci, sy as usize, sx as usize]]
                                            * w[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[[i, co, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        for stride in [1, 2] {
            let mut r = rng(10 + stride as u64);
            let mut conv = Conv2d::new("t", 3, 4, 3, stride, &mut r);
            let x = random4(&mut r, (2, 3, 9, 8));
            let got = conv.forward(&x, false);
            let want = conv_reference(&x, &conv.weight.value, stride);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn depthwise_matches_grouped_direct_convolution() {
        let mut r = rng(20);
        let channels = 5;
        let mut dw = DepthwiseConv2d::new("t", channels, 3, 2, &mut r);
        let x = random4(&mut r, (2, channels, 7, 7));
        let got = dw.forward(&x, false);
        // Expand the (C, k, k) depthwise kernel into a block-diagonal dense
        // kernel and reuse the dense oracle.
        let k = 3;
        let mut dense = ArrayD::zeros(IxDyn(&[channels, channels, k, k]));
        for c in 0..channels {
            for ky in 0..k {
                for kx in 0..k {
                    dense[[c, c, ky, kx]] = dw.weight.value[[c, ky, kx]];
                }
            }
        }
        let want = conv_reference(&x, &dense, 2);
        for (a, b) in got.iter().zip(want.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-4);
        }
    }

    #[test]
    fn gap_matches_plain_mean() {
        let mut r = rng(30);
        let x = random4(&mut r, (3, 4, 5, 6));
        let y = gap_forward(&x);
        for i in 0..3 {
            for c in 0..4 {
                let mut sum = 0.0f32;
                for h in 0..5 {
                    for w in 0..6 {
                        sum += x[[i, c, h, w]];
                    }
                }
                assert_abs_diff_eq!(y[[i, c]], sum / 30.0, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_survive_large_logits() {
        let logits = ndarray::array![[1.0f32, 2.0, 3.0], [1000.0, 1000.0, -1000.0], [-500.0, 0.0, 500.0]];
        let probs = softmax(&logits);
        for row in probs.rows() {
            let sum: f32 = row.sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
            assert!(row.iter().all(|p| p.is_finite() && *p >= 0.0));
        }
        // Known values for the first row.
        let z: f32 = (1.0f32).exp() + (2.0f32).exp() + (3.0f32).exp();
        assert_abs_diff_eq!(probs[[0, 0]], 1.0f32.exp() / z, epsilon = 1e-6);
    }

    #[test]
    fn cross_entropy_matches_scalar_definition() {
        let probs = ndarray::array![[0.7f32, 0.2, 0.1], [0.1, 0.8, 0.1]];
        let onehot = ndarray::array![[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let want = -((0.7f32).ln() + (0.8f32).ln()) / 2.0;
        assert_abs_diff_eq!(cross_entropy(&probs, &onehot), want, epsilon = 1e-6);
    }

    #[test]
    fn softmax_cce_grad_is_probs_minus_targets_over_n() {
        let probs = ndarray::array![[0.6f32, 0.3, 0.1], [0.2, 0.5, 0.3]];
        let onehot = ndarray::array![[0.0f32, 1.0, 0.0], [1.0, 0.0, 0.0]];
        let grad = softmax_cce_grad(&probs, &onehot);
        assert_abs_diff_eq!(grad[[0, 0]], 0.3, epsilon = 1e-6);
        assert_abs_diff_eq!(grad[[0, 1]], -0.35, epsilon = 1e-6);
        assert_abs_diff_eq!(grad[[1, 0]], -0.4, epsilon = 1e-6);
    }

    #[test]
    fn dense_forward_matches_matmul() {
        let mut r = rng(40);
        let mut dense = Dense::new("t", 3, 2, &mut r);
        let x = ndarray::array![[1.0f32, 2.0, 3.0]];
        let y = dense.forward(&x, false);
        let w = dense.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for j in 0..2 {
            let want = w[[j, 0]] + 2.0 * w[[j, 1]] + 3.0 * w[[j, 2]] + dense.bias.value[j];
            assert_abs_diff_eq!(y[[0, j]], want, epsilon = 1e-6);
        }
    }

    #[test]
    fn batchnorm1d_train_normalizes_batch_statistics() {
        let mut bn = BatchNorm1d::new("t", 2);
        let mut r = rng(50);
        let x = Array2::from_shape_fn((64, 2), |_| r.random_range(-3.0..5.0f32));
        let y = bn.forward(&x, true);
        for j in 0..2 {
            let col = y.column(j);
            let mean: f32 = col.mean().unwrap();
            let var: f32 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 64.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-4);
            // gamma=1, beta=0, so the output variance is var/(var+eps) ~ 1.
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-2);
        }
    }

    #[test]
    fn batchnorm1d_inference_uses_running_statistics() {
        let mut bn = BatchNorm1d::new("t", 1);
        bn.running_mean.value[0] = 2.0;
        bn.running_var.value[0] = 4.0;
        let x = ndarray::array![[6.0f32]];
        let y = bn.forward(&x, false);
        let want = (6.0 - 2.0) / (4.0f32 + bn.eps).sqrt();
        assert_abs_diff_eq!(y[[0, 0]], want, epsilon = 1e-5);
    }

    #[test]
    fn relu6_clamps_and_gates_gradients() {
        let mut act = Relu6::new();
        let x = Array4::from_shape_vec((1, 1, 1, 4), vec![-1.0, 0.5, 5.0, 7.0]).unwrap();
        let y = act.forward(&x, true);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 0.5, 5.0, 6.0]);
        let dy = Array4::from_elem((1, 1, 1, 4), 1.0);
        let dx = act.backward(&dy);
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn dropout_masks_scale_by_keep_probability() {
        let mut drop = Dropout::new(0.5);
        let mut r = rng(60);
        let x = Array2::from_elem((4, 50), 1.0f32);
        let y = drop.forward(&x, true, &mut r);
        for v in y.iter() {
            assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-6, "unexpected dropout output {v}");
        }
        // Inference mode and rate 0 are both identity.
        assert_eq!(drop.forward(&x, false, &mut r), x);
        let mut none = Dropout::new(0.0);
        assert_eq!(none.forward(&x, true, &mut r), x);
    }

    #[test]
    fn conv_backward_gradients_match_finite_differences() {
        let mut r = rng(70);
        let mut conv = Conv2d::new("t", 2, 3, 3, 2, &mut r);
        let x = random4(&mut r, (1, 2, 6, 6));
        let loss = |conv: &mut Conv2d, x: &Array4<f32>| -> f32 { conv.forward(x, false).sum() };

        conv.weight.zero_grad();
        let y = conv.forward(&x, true);
        let dy = Array4::from_elem(y.raw_dim(), 1.0f32);
        let dx = conv.backward(&dy);

        let eps = 1e-3f32;
        // Weight gradient, spot-checked.
        for idx in [0usize, 7, 23] {
            let g = conv.weight.grad.as_slice().unwrap()[idx];
            conv.weight.value.as_slice_mut().unwrap()[idx] += eps;
            let lp = loss(&mut conv, &x);
            conv.weight.value.as_slice_mut().unwrap()[idx] -= 2.0 * eps;
            let lm = loss(&mut conv, &x);
            conv.weight.value.as_slice_mut().unwrap()[idx] += eps;
            let num = (lp - lm) / (2.0 * eps);
            assert_abs_diff_eq!(g, num, epsilon = 2e-2);
        }
        // Input gradient, spot-checked.
        let mut x2 = x.clone();
        for idx in [0usize, 11, 40] {
            let g = dx.as_slice().unwrap()[idx];
            x2.as_slice_mut().unwrap()[idx] += eps;
            let lp = loss(&mut conv, &x2);
            x2.as_slice_mut().unwrap()[idx] -= 2.0 * eps;
            let lm = loss(&mut conv, &x2);
            x2.as_slice_mut().unwrap()[idx] += eps;
            let num = (lp - lm) / (2.0 * eps);
            assert_abs_diff_eq!(g, num, epsilon = 2e-2);
        }
    }
}
