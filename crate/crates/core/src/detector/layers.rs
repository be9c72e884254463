//! Differentiable building blocks. Every module caches what its backward
//! pass needs during `forward`, and `backward` accumulates parameter
//! gradients while returning the gradient with respect to its input.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{gemm, Param, Tensor};
use crate::error::{Error, Result};

/// Self-normalizing activation constants.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

pub trait Module {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor>;
    /// Gradient of the loss with respect to the last forward input.
    /// Must follow a `forward` call.
    fn backward(&mut self, grad_out: &Tensor) -> Tensor;
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));
}

/// Variance-scaling fan-in initializer: `N(0, scale / fan_in)`.
pub(crate) fn variance_scaling(
    rng: &mut ChaCha8Rng,
    len: usize,
    fan_in: usize,
    scale: f64,
) -> Vec<f64> {
    let normal = Normal::new(0.0, (scale / fan_in as f64).sqrt()).expect("positive std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

#[inline]
pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// TensorFlow-style SAME padding: output `ceil(size / stride)`, with the
/// odd pixel of padding on the bottom/right.
fn same_padding(size: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = size.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(size);
    (out, total / 2)
}

/// 2-D convolution with SAME padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        Self {
            cin,
            cout,
            k,
            stride,
            weight: Param::new(
                format!("{name}.weight"),
                vec![cout, cin, k, k],
                variance_scaling(rng, cout * fan_in, fan_in, 2.0),
                true,
            ),
            bias: bias
                .then(|| Param::new(format!("{name}.bias"), vec![cout], vec![0.0; cout], false)),
            input: None,
        }
    }

    fn geometry(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let (oh, pt) = same_padding(h, self.k, self.stride);
        let (ow, pl) = same_padding(w, self.k, self.stride);
        (oh, ow, pt, pl)
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, col: &mut [f64]) {
        let (oh, ow, pt, pl) = self.geometry(h, w);
        let k = self.k;
        let plane = oh * ow;
        for ci in 0..self.cin {
            let xc = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - pt as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                        // ix = ox * stride + kx - pl must land in [0, w)
                        let s = self.stride;
                        let ox0 = (pl.saturating_sub(kx)).div_ceil(s).min(ow);
                        let ox1 = if w + pl > kx {
                            (w + pl - kx).div_ceil(s).min(ow)
                        } else {
                            0
                        }
                        .max(ox0);
                        dst[..ox0].iter_mut().for_each(|v| *v = 0.0);
                        dst[ox1..].iter_mut().for_each(|v| *v = 0.0);
                        if ox1 == ox0 {
                            continue;
                        }
                        let start = ox0 * s + kx - pl;
                        if s == 1 {
                            dst[ox0..ox1].copy_from_slice(&src[start..start + (ox1 - ox0)]);
                        } else {
                            for (d, v) in
                                dst[ox0..ox1].iter_mut().zip(src[start..].iter().step_by(s))
                            {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, dx: &mut [f64]) {
        let (oh, ow, pt, pl) = self.geometry(h, w);
        let k = self.k;
        let plane = oh * ow;
        for ci in 0..self.cin {
            let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - pt as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - pl as isize;
                            if ix >= 0 && ix < w as isize {
                                dxc[iy as usize * w + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn direct(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

impl Module for Conv2d {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Result<Tensor> {
        x.expect_channels(self.cin, "conv")?;
        let (oh, ow, _, _) = self.geometry(x.h, x.w);
        let plane = oh * ow;
        let ckk = self.cin * self.k * self.k;
        let mut out = Tensor::zeros(x.n, self.cout, oh, ow);
        let mut col = if self.direct() {
            Vec::new()
        } else {
            vec![0.0; ckk * plane]
        };
        for i in 0..x.n {
            let cols: &[f64] = if self.direct() {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), x.h, x.w, &mut col);
                &col
            };
            let o = out.sample_mut(i);
            gemm(
                self.cout,
                ckk,
                plane,
                &self.weight.value,
                false,
                cols,
                false,
                o,
                0.0,
            );
            if let Some(b) = &self.bias {
                for (co, chunk) in o.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += b.value[co]);
                }
            }
        }
        self.input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("forward before backward");
        let (oh, ow, _, _) = self.geometry(x.h, x.w);
        let plane = oh * ow;
        let ckk = self.cin * self.k * self.k;
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut col = vec![0.0; if self.direct() { 0 } else { ckk * plane }];
        let mut dcol = vec![0.0; ckk * plane];
        for i in 0..x.n {
            let go = g.sample(i);
            let cols: &[f64] = if self.direct() {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), x.h, x.w, &mut col);
                &col
            };
            gemm(
                self.cout,
                plane,
                ckk,
                go,
                false,
                cols,
                true,
                &mut self.weight.grad,
                1.0,
            );
            if let Some(b) = &mut self.bias {
                for (co, chunk) in go.chunks(plane).enumerate() {
                    b.grad[co] += chunk.iter().sum::<f64>();
                }
            }
            if self.direct() {
                gemm(
                    ckk,
                    self.cout,
                    plane,
                    &self.weight.value,
                    true,
                    go,
                    false,
                    dx.sample_mut(i),
                    0.0,
                );
            } else {
                gemm(
                    ckk,
                    self.cout,
                    plane,
                    &self.weight.value,
                    true,
                    go,
                    false,
                    &mut dcol,
                    0.0,
                );
                self.col2im(&dcol, x.h, x.w, dx.sample_mut(i));
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Per-channel `k x k` convolution, stride 1, SAME padding (odd `k`).
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub channels: usize,
    pub k: usize,
    pub weight: Param,
    input: Option<Tensor>,
}

impl DepthwiseConv2d {
    pub fn new(name: &str, channels: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(k % 2 == 1, "depthwise kernel must be odd");
        Self {
            channels,
            k,
            weight: Param::new(
                format!("{name}.weight"),
                vec![channels, k, k],
                variance_scaling(rng, channels * k * k, k * k, 2.0),
                true,
            ),
            input: None,
        }
    }
}

impl Module for DepthwiseConv2d {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Result<Tensor> {
        x.expect_channels(self.channels, "depthwise conv")?;
        let (h, w, k) = (x.h as isize, x.w as isize, self.k as isize);
        let p = k / 2;
        let mut out = Tensor::zeros(x.n, x.c, x.h, x.w);
        let plane = x.plane_len();
        for i in 0..x.n {
            let xs = x.sample(i);
            let os = out.sample_mut(i);
            for c in 0..x.c {
                let xc = &xs[c * plane..(c + 1) * plane];
                let oc = &mut os[c * plane..(c + 1) * plane];
                let wc = &self.weight.value[c * self.k * self.k..(c + 1) * self.k * self.k];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wc[(ky * k + kx) as usize];
                        let (dy, dx) = (ky - p, kx - p);
                        let (y0, y1) = ((-dy).max(0), (h - dy).min(h));
                        let (x0, x1) = ((-dx).max(0), (w - dx).min(w));
                        let span = (x1 - x0) as usize;
                        for y in y0..y1 {
                            let o = (y * w + x0) as usize;
                            let i = ((y + dy) * w + x0 + dx) as usize;
                            for (ov, iv) in oc[o..o + span].iter_mut().zip(&xc[i..i + span]) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
        self.input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("forward before backward");
        let (h, w, k) = (x.h as isize, x.w as isize, self.k as isize);
        let p = k / 2;
        let plane = x.plane_len();
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        for i in 0..x.n {
            let xs = x.sample(i);
            let gs = g.sample(i);
            let dxs = dx.sample_mut(i);
            for c in 0..x.c {
                let xc = &xs[c * plane..(c + 1) * plane];
                let gc = &gs[c * plane..(c + 1) * plane];
                let dxc = &mut dxs[c * plane..(c + 1) * plane];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = c * self.k * self.k + (ky * k + kx) as usize;
                        let wv = self.weight.value[widx];
                        let (dy, ddx) = (ky - p, kx - p);
                        let (y0, y1) = ((-dy).max(0), (h - dy).min(h));
                        let (x0, x1) = ((-ddx).max(0), (w - ddx).min(w));
                        let mut acc = 0.0;
                        let span = (x1 - x0) as usize;
                        for y in y0..y1 {
                            let o = (y * w + x0) as usize;
                            let src = ((y + dy) * w + x0 + ddx) as usize;
                            let go = &gc[o..o + span];
                            for ((gv, xv), dv) in go
                                .iter()
                                .zip(&xc[src..src + span])
                                .zip(&mut dxc[src..src + span])
                            {
                                acc += gv * xv;
                                *dv += gv * wv;
                            }
                        }
                        self.weight.grad[widx] += acc;
                    }
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
    }
}

/// Depthwise `k x k` convolution followed by a pointwise `1 x 1` convolution.
#[derive(Debug, Clone)]
pub struct SeparableConv2d {
    pub depthwise: DepthwiseConv2d,
    pub pointwise: Conv2d,
}

impl SeparableConv2d {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            depthwise: DepthwiseConv2d::new(&format!("{name}.depthwise"), cin, k, rng),
            pointwise: Conv2d::new(&format!("{name}.pointwise"), cin, cout, 1, 1, false, rng),
        }
    }
}

impl Module for SeparableConv2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let d = self.depthwise.forward(x, train)?;
        self.pointwise.forward(&d, train)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let d = self.pointwise.backward(g);
        self.depthwise.backward(&d)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.depthwise.visit_params(f);
        self.pointwise.visit_params(f);
    }
}

/// Batch normalization over `(N, H, W)` per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub decay: f64,
    pub eps: f64,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize, decay: f64) -> Self {
        Self {
            channels,
            decay,
            eps: 1e-3,
            gamma: Param::new(
                format!("{name}.gamma"),
                vec![channels],
                vec![1.0; channels],
                false,
            ),
            beta: Param::new(
                format!("{name}.beta"),
                vec![channels],
                vec![0.0; channels],
                false,
            ),
            running_mean: Param::buffer(
                format!("{name}.running_mean"),
                vec![channels],
                vec![0.0; channels],
            ),
            running_var: Param::buffer(
                format!("{name}.running_var"),
                vec![channels],
                vec![1.0; channels],
            ),
            cache: None,
        }
    }
}

impl Module for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        x.expect_channels(self.channels, "batch norm")?;
        let plane = x.plane_len();
        let count = (x.n * plane) as f64;
        let (mean, var) = if train {
            let mut mean = vec![0.0; x.c];
            let mut var = vec![0.0; x.c];
            for i in 0..x.n {
                for (c, chunk) in x.sample(i).chunks(plane).enumerate() {
                    mean[c] += chunk.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for i in 0..x.n {
                for (c, chunk) in x.sample(i).chunks(plane).enumerate() {
                    var[c] += chunk.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            for c in 0..x.c {
                let rm = &mut self.running_mean.value[c];
                *rm = self.decay * *rm + (1.0 - self.decay) * mean[c];
                let rv = &mut self.running_var.value[c];
                *rv = self.decay * *rv + (1.0 - self.decay) * var[c];
            }
            (mean, var)
        } else {
            (
                self.running_mean.value.clone(),
                self.running_var.value.clone(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut out = Tensor::zeros(x.n, x.c, x.h, x.w);
        let len = x.c * plane;
        for ((xs, hs), os) in x
            .data
            .chunks(len)
            .zip(xhat.data.chunks_mut(len))
            .zip(out.data.chunks_mut(len))
        {
            for c in 0..x.c {
                let (m, is, g, b) = (mean[c], inv_std[c], self.gamma.value[c], self.beta.value[c]);
                let r = c * plane..(c + 1) * plane;
                for ((xv, hv), ov) in xs[r.clone()].iter().zip(&mut hs[r.clone()]).zip(&mut os[r]) {
                    *hv = (xv - m) * is;
                    *ov = g * *hv + b;
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            train,
        });
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("forward before backward");
        let xhat = &cache.xhat;
        let plane = xhat.plane_len();
        let count = (xhat.n * plane) as f64;
        let mut sum_g = vec![0.0; xhat.c];
        let mut sum_gx = vec![0.0; xhat.c];
        for i in 0..xhat.n {
            let gs = g.sample(i);
            let hs = xhat.sample(i);
            for c in 0..xhat.c {
                for j in c * plane..(c + 1) * plane {
                    sum_g[c] += gs[j];
                    sum_gx[c] += gs[j] * hs[j];
                }
            }
        }
        for c in 0..xhat.c {
            self.beta.grad[c] += sum_g[c];
            self.gamma.grad[c] += sum_gx[c];
        }
        let mut dx = Tensor::zeros(xhat.n, xhat.c, xhat.h, xhat.w);
        for i in 0..xhat.n {
            let gs = g.sample(i);
            let hs = xhat.sample(i);
            let ds = dx.sample_mut(i);
            for c in 0..xhat.c {
                let scale = self.gamma.value[c] * cache.inv_std[c];
                for j in c * plane..(c + 1) * plane {
                    ds[j] = if cache.train {
                        scale * (gs[j] - sum_g[c] / count - hs[j] * sum_gx[c] / count)
                    } else {
                        scale * gs[j]
                    };
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Selu,
    Sigmoid,
    Softmax,
    None,
}

/// Elementwise activation (softmax is applied by the loss, not here).
#[derive(Debug, Clone)]
pub struct Activation {
    pub kind: ActivationKind,
    input: Option<Tensor>,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        assert!(kind != ActivationKind::Softmax, "softmax lives in the loss");
        Self { kind, input: None }
    }

    fn apply(&self, v: f64) -> f64 {
        match self.kind {
            ActivationKind::Relu => v.max(0.0),
            ActivationKind::Selu => selu(v),
            ActivationKind::Sigmoid => sigmoid(v),
            ActivationKind::None | ActivationKind::Softmax => v,
        }
    }

    fn derivative(&self, v: f64) -> f64 {
        match self.kind {
            ActivationKind::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Selu => {
                if v > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * v.exp()
                }
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(v);
                s * (1.0 - s)
            }
            ActivationKind::None | ActivationKind::Softmax => 1.0,
        }
    }
}

impl Module for Activation {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let out = x.map(|v| self.apply(v));
        self.input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("forward before backward");
        let mut dx = g.clone();
        for (d, &v) in dx.data.iter_mut().zip(&x.data) {
            *d *= self.derivative(v);
        }
        dx
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
}

/// 2x2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Vec<usize>,
    in_shape: [usize; 4],
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Module for MaxPool2 {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Result<Tensor> {
        if x.h < 2 || x.w < 2 {
            return Err(Error::Shape(format!("cannot pool {}x{}", x.h, x.w)));
        }
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        self.argmax = vec![0; out.data.len()];
        let mut o = 0;
        for nc in 0..x.n * x.c {
            let base = nc * x.h * x.w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * x.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * x.w + 2 * ox + dx;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                    out.data[o] = x.data[best];
                    self.argmax[o] = best;
                    o += 1;
                }
            }
        }
        self.in_shape = x.shape();
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let [n, c, h, w] = self.in_shape;
        let mut dx = Tensor::zeros(n, c, h, w);
        for (o, &src) in self.argmax.iter().enumerate() {
            dx.data[src] += g.data[o];
        }
        dx
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
}

/// Mean over the spatial plane: `N x C x H x W -> N x C x 1 x 1`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    in_shape: [usize; 4],
}

impl Module for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let plane = x.plane_len();
        let data = x
            .data
            .chunks(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        self.in_shape = x.shape();
        Tensor::from_vec(x.n, x.c, 1, 1, data)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let [n, c, h, w] = self.in_shape;
        let plane = h * w;
        let mut dx = Tensor::zeros(n, c, h, w);
        for (ch, &gv) in dx.data.chunks_mut(plane).zip(&g.data) {
            ch.iter_mut().for_each(|d| *d = gv / plane as f64);
        }
        dx
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
}

/// Fully connected layer on the flattened sample: `N x D -> N x out x 1 x 1`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Dense {
    pub fn new(
        name: &str,
        inputs: usize,
        outputs: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::new(
                format!("{name}.weight"),
                vec![outputs, inputs],
                variance_scaling(rng, inputs * outputs, inputs, scale),
                true,
            ),
            bias: Param::new(
                format!("{name}.bias"),
                vec![outputs],
                vec![0.0; outputs],
                false,
            ),
            input: None,
        }
    }
}

impl Module for Dense {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let d = x.c * x.h * x.w;
        if d != self.inputs {
            return Err(Error::Shape(format!(
                "dense expects {} inputs, got {d}",
                self.inputs
            )));
        }
        let mut out = Tensor::zeros(x.n, self.outputs, 1, 1);
        for row in out.data.chunks_mut(self.outputs) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            x.n,
            d,
            self.outputs,
            &x.data,
            false,
            &self.weight.value,
            true,
            &mut out.data,
            1.0,
        );
        self.input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("forward before backward");
        let d = self.inputs;
        gemm(
            self.outputs,
            x.n,
            d,
            &g.data,
            true,
            &x.data,
            false,
            &mut self.weight.grad,
            1.0,
        );
        for row in g.data.chunks(self.outputs) {
            for (b, v) in self.bias.grad.iter_mut().zip(row) {
                *b += v;
            }
        }
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        gemm(
            x.n,
            self.outputs,
            d,
            &g.data,
            false,
            &self.weight.value,
            false,
            &mut dx.data,
            0.0,
        );
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
