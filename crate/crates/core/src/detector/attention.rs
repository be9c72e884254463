//! Spatial and channel attention masks.

use rand_chacha::ChaCha8Rng;

use super::layers::{sigmoid, variance_scaling, Conv2d, Module};
use super::tensor::{gemm, Param, Tensor};
use crate::error::{Error, Result};

/// Channelwise max and mean maps, concatenated and convolved down to one
/// channel; the sigmoid of that map rescales every channel of the input.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv2d,
    cache: Option<SpatialCache>,
}

#[derive(Debug, Clone)]
struct SpatialCache {
    input: Tensor,
    argmax: Vec<usize>,
    mask: Vec<f64>,
}

impl SpatialAttention {
    pub fn new(name: &str, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut conv = Conv2d::new(&format!("{name}.conv"), 2, 1, kernel, 1, true, rng);
        // sigmoid follows; keep the initial mask away from saturation
        let fan_in = 2 * kernel * kernel;
        conv.weight.value = variance_scaling(rng, fan_in, fan_in, 1.0);
        Self { conv, cache: None }
    }

    /// `N x H x W` mask from the last forward pass.
    pub fn last_mask(&self) -> Option<&[f64]> {
        self.cache.as_ref().map(|c| c.mask.as_slice())
    }
}

impl Module for SpatialAttention {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        if x.c == 0 || x.h == 0 || x.w == 0 {
            return Err(Error::Shape(
                "spatial attention on an empty feature map".into(),
            ));
        }
        let plane = x.plane_len();
        let mut pooled = Tensor::zeros(x.n, 2, x.h, x.w);
        let mut argmax = vec![0usize; x.n * plane];
        for i in 0..x.n {
            let xs = x.sample(i);
            let ps = pooled.sample_mut(i);
            for p in 0..plane {
                let (mut best, mut best_c, mut sum) = (xs[p], 0, 0.0);
                for c in 0..x.c {
                    let v = xs[c * plane + p];
                    sum += v;
                    if v > best {
                        best = v;
                        best_c = c;
                    }
                }
                ps[p] = best;
                ps[plane + p] = sum / x.c as f64;
                argmax[i * plane + p] = best_c;
            }
        }
        let z = self.conv.forward(&pooled, train)?;
        let mask: Vec<f64> = z.data.iter().map(|&v| sigmoid(v)).collect();
        let mut out = x.clone();
        for i in 0..x.n {
            let m = &mask[i * plane..(i + 1) * plane];
            for ch in out.sample_mut(i).chunks_mut(plane) {
                ch.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
            }
        }
        self.cache = Some(SpatialCache {
            input: x.clone(),
            argmax,
            mask,
        });
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("forward before backward");
        let x = &cache.input;
        let plane = x.plane_len();
        let mut dx = g.clone();
        let mut dz = Tensor::zeros(x.n, 1, x.h, x.w);
        for i in 0..x.n {
            let m = &cache.mask[i * plane..(i + 1) * plane];
            let xs = x.sample(i);
            let gs = g.sample(i);
            let dzs = dz.sample_mut(i);
            for c in 0..x.c {
                for p in 0..plane {
                    dzs[p] += gs[c * plane + p] * xs[c * plane + p];
                }
            }
            for p in 0..plane {
                dzs[p] *= m[p] * (1.0 - m[p]);
            }
            for ch in dx.sample_mut(i).chunks_mut(plane) {
                ch.iter_mut().zip(m).for_each(|(d, s)| *d *= s);
            }
        }
        let dpooled = self.conv.backward(&dz);
        for i in 0..x.n {
            let dp = dpooled.sample(i).to_vec();
            let ds = dx.sample_mut(i);
            for p in 0..plane {
                let c = cache.argmax[i * plane + p];
                ds[c * plane + p] += dp[p];
                let share = dp[plane + p] / x.c as f64;
                for c in 0..x.c {
                    ds[c * plane + p] += share;
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params(f);
    }
}

/// Global max and mean vectors through a shared `C -> C/4 -> C` network;
/// the sigmoid of their sum rescales each channel.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub channels: usize,
    pub hidden: usize,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    cache: Option<ChannelCache>,
}

#[derive(Debug, Clone)]
struct ChannelCache {
    input: Tensor,
    argmax: Vec<usize>,
    /// `2N x C`: max rows then mean rows.
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    scale: Vec<f64>,
}

impl ChannelAttention {
    pub fn new(name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "channel attention needs a channel count divisible by 4, got {channels}"
            )));
        }
        let hidden = channels / 4;
        Ok(Self {
            channels,
            hidden,
            w1: Param::new(
                format!("{name}.fc1.weight"),
                vec![hidden, channels],
                variance_scaling(rng, hidden * channels, channels, 2.0),
                true,
            ),
            b1: Param::new(
                format!("{name}.fc1.bias"),
                vec![hidden],
                vec![0.0; hidden],
                false,
            ),
            w2: Param::new(
                format!("{name}.fc2.weight"),
                vec![channels, hidden],
                variance_scaling(rng, hidden * channels, hidden, 1.0),
                true,
            ),
            b2: Param::new(
                format!("{name}.fc2.bias"),
                vec![channels],
                vec![0.0; channels],
                false,
            ),
            cache: None,
        })
    }

    /// The shared fully connected stack applied to one `C`-vector.
    pub fn fc(&self, v: &[f64]) -> Vec<f64> {
        let mut h = self.b1.value.clone();
        gemm(
            1,
            self.channels,
            self.hidden,
            v,
            false,
            &self.w1.value,
            true,
            &mut h,
            1.0,
        );
        h.iter_mut().for_each(|x| *x = x.max(0.0));
        let mut out = self.b2.value.clone();
        gemm(
            1,
            self.hidden,
            self.channels,
            &h,
            false,
            &self.w2.value,
            true,
            &mut out,
            1.0,
        );
        out
    }

    /// Pre-sigmoid logits (`N x C`) from the last forward pass.
    pub fn last_logits(&self) -> Option<&[f64]> {
        self.cache.as_ref().map(|c| c.logits.as_slice())
    }

    /// Per-channel scale factors (`N x C`) from the last forward pass.
    pub fn last_scale(&self) -> Option<&[f64]> {
        self.cache.as_ref().map(|c| c.scale.as_slice())
    }
}

impl Module for ChannelAttention {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Result<Tensor> {
        x.expect_channels(self.channels, "channel attention")?;
        let (n, c, plane) = (x.n, x.c, x.plane_len());
        let mut pooled = vec![0.0; 2 * n * c];
        let mut argmax = vec![0usize; n * c];
        for i in 0..n {
            for (ch, vals) in x.sample(i).chunks(plane).enumerate() {
                let (mut best, mut at, mut sum) = (vals[0], 0, 0.0);
                for (p, &v) in vals.iter().enumerate() {
                    sum += v;
                    if v > best {
                        best = v;
                        at = p;
                    }
                }
                pooled[i * c + ch] = best;
                pooled[(n + i) * c + ch] = sum / plane as f64;
                argmax[i * c + ch] = at;
            }
        }
        let rows = 2 * n;
        let mut hidden_pre = vec![0.0; rows * self.hidden];
        for r in hidden_pre.chunks_mut(self.hidden) {
            r.copy_from_slice(&self.b1.value);
        }
        gemm(
            rows,
            c,
            self.hidden,
            &pooled,
            false,
            &self.w1.value,
            true,
            &mut hidden_pre,
            1.0,
        );
        let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
        let mut a = vec![0.0; rows * c];
        for r in a.chunks_mut(c) {
            r.copy_from_slice(&self.b2.value);
        }
        gemm(
            rows,
            self.hidden,
            c,
            &hidden,
            false,
            &self.w2.value,
            true,
            &mut a,
            1.0,
        );
        let logits: Vec<f64> = (0..n * c).map(|j| a[j] + a[n * c + j]).collect();
        let scale: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();
        let mut out = x.clone();
        for i in 0..n {
            for (ch, vals) in out.sample_mut(i).chunks_mut(plane).enumerate() {
                let s = scale[i * c + ch];
                vals.iter_mut().for_each(|v| *v *= s);
            }
        }
        self.cache = Some(ChannelCache {
            input: x.clone(),
            argmax,
            pooled,
            hidden_pre,
            hidden,
            logits,
            scale,
        });
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("forward before backward");
        let x = &cache.input;
        let (n, c, plane) = (x.n, x.c, x.plane_len());
        let rows = 2 * n;
        let mut dlogit = vec![0.0; n * c];
        let mut dx = g.clone();
        for i in 0..n {
            let xs = x.sample(i);
            let gs = g.sample(i);
            for ch in 0..c {
                let s = cache.scale[i * c + ch];
                let dot: f64 = (0..plane)
                    .map(|p| gs[ch * plane + p] * xs[ch * plane + p])
                    .sum();
                dlogit[i * c + ch] = dot * s * (1.0 - s);
            }
            for (ch, vals) in dx.sample_mut(i).chunks_mut(plane).enumerate() {
                let s = cache.scale[i * c + ch];
                vals.iter_mut().for_each(|v| *v *= s);
            }
        }
        // both branches see the same logit gradient
        let mut da = dlogit.clone();
        da.extend_from_slice(&dlogit);
        gemm(
            c,
            rows,
            self.hidden,
            &da,
            true,
            &cache.hidden,
            false,
            &mut self.w2.grad,
            1.0,
        );
        for r in da.chunks(c) {
            self.b2.grad.iter_mut().zip(r).for_each(|(b, v)| *b += v);
        }
        let mut dh = vec![0.0; rows * self.hidden];
        gemm(
            rows,
            c,
            self.hidden,
            &da,
            false,
            &self.w2.value,
            false,
            &mut dh,
            0.0,
        );
        for (d, &pre) in dh.iter_mut().zip(&cache.hidden_pre) {
            if pre <= 0.0 {
                *d = 0.0;
            }
        }
        gemm(
            self.hidden,
            rows,
            c,
            &dh,
            true,
            &cache.pooled,
            false,
            &mut self.w1.grad,
            1.0,
        );
        for r in dh.chunks(self.hidden) {
            self.b1.grad.iter_mut().zip(r).for_each(|(b, v)| *b += v);
        }
        let mut dpooled = vec![0.0; rows * c];
        gemm(
            rows,
            self.hidden,
            c,
            &dh,
            false,
            &self.w1.value,
            false,
            &mut dpooled,
            0.0,
        );
        for i in 0..n {
            let ds = dx.sample_mut(i);
            for ch in 0..c {
                ds[ch * plane + cache.argmax[i * c + ch]] += dpooled[i * c + ch];
                let share = dpooled[(n + i) * c + ch] / plane as f64;
                ds[ch * plane..(ch + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += share);
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            n,
            c,
            h,
            w,
            (0..n * c * h * w)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn spatial_mask_in_open_unit_interval_and_shape_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sa = SpatialAttention::new("sa", 7, &mut rng);
        let x = random(2, 64, 16, 16, 2);
        let y = sa.forward(&x, false).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(sa.last_mask().unwrap().iter().all(|&m| m > 0.0 && m < 1.0));
    }

    #[test]
    fn spatial_zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sa = SpatialAttention::new("sa", 7, &mut rng);
        let y = sa.forward(&Tensor::zeros(1, 8, 6, 6), false).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_scale_range_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ca = ChannelAttention::new("ca", 16, &mut rng).unwrap();
        let x = random(3, 16, 5, 5, 4);
        let y = ca.forward(&x, false).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(ca.last_scale().unwrap().iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn channel_constant_map_logit_is_twice_fc() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ca = ChannelAttention::new("ca", 8, &mut rng).unwrap();
        ca.b1.value.iter_mut().for_each(|b| *b = 0.1);
        ca.b2.value.iter_mut().for_each(|b| *b = -0.2);
        let v: Vec<f64> = (0..8).map(|c| c as f64 * 0.3 - 1.0).collect();
        let mut x = Tensor::zeros(1, 8, 4, 4);
        for (c, ch) in x.data.chunks_mut(16).enumerate() {
            ch.iter_mut().for_each(|p| *p = v[c]);
        }
        ca.forward(&x, false).unwrap();
        let fc = ca.fc(&v);
        for (l, f) in ca.last_logits().unwrap().iter().zip(&fc) {
            assert!((l - 2.0 * f).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_count_not_divisible_by_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            ChannelAttention::new("ca", 6, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
