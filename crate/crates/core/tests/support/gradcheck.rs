//! Central finite differences against analytic backward passes. The loss is
//! `sum(r * f(x))` for a random `r`, so the upstream gradient is `r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctforensics::detector::{
    Activation, ActivationKind, BatchNorm2d, ChannelAttention, Conv2d, Dense, DepthwiseConv2d,
    Detector, DetectorConfig, GlobalAvgPool, MaxPool2, Module, Param, ResidualBlock,
    SeparableConv2d, SpatialAttention, Tensor,
};
use ctforensics::Result;

pub const INSTANCES: u64 = 20;
const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Coordinates probed per tensor; larger tensors are subsampled.
const PROBES: usize = 24;

pub trait Net {
    fn fwd(&mut self, x: &Tensor) -> Result<Tensor>;
    fn bwd(&mut self, g: &Tensor) -> Tensor;
    fn params(&mut self, f: &mut dyn FnMut(&mut Param));
}

impl<M: Module> Net for M {
    fn fwd(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward(x, true)
    }
    fn bwd(&mut self, g: &Tensor) -> Tensor {
        self.backward(g)
    }
    fn params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.visit_params(f)
    }
}

pub struct Whole(pub Detector);

impl Net for Whole {
    fn fwd(&mut self, x: &Tensor) -> Result<Tensor> {
        self.0.forward(x, true)
    }
    fn bwd(&mut self, g: &Tensor) -> Tensor {
        self.0.backward(g)
    }
    fn params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.0.visit_params(f)
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape[0], shape[1], shape[2], shape[3], data).unwrap()
}

fn loss(net: &mut dyn Net, x: &Tensor, r: &[f64]) -> f64 {
    let y = net.fwd(x).unwrap();
    y.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn nudge(net: &mut dyn Net, name: &str, i: usize, delta: f64) {
    net.params(&mut |p| {
        if p.name == name {
            p.value[i] += delta;
        }
    })
}

fn probes(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= PROBES {
        (0..len).collect()
    } else {
        (0..PROBES).map(|_| rng.random_range(0..len)).collect()
    }
}

/// `||a - n|| / max(||a||, ||n||)` over the probed coordinates.
fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences at `H` and `H / 2` agree to `O(H^2)` where the loss
/// is smooth. A larger gap marks a ReLU or max-pool switch inside the step.
const KINK: f64 = 1e-6;

#[derive(Debug, Default, Clone, Copy)]
pub struct Stats {
    pub worst: f64,
    pub probed: usize,
    pub kinks: usize,
}

/// Central difference along one coordinate, or `None` at a kink. `eval`
/// returns the loss with the coordinate shifted by its argument.
fn slope(mut eval: impl FnMut(f64) -> f64) -> Option<f64> {
    let full = (eval(H) - eval(-H)) / (2.0 * H);
    let half = (eval(H / 2.0) - eval(-H / 2.0)) / H;
    ((full - half).abs() <= KINK * full.abs().max(half.abs()) + 1e-8).then_some(full)
}

/// Worst relative error over the input and every trainable tensor.
fn check(net: &mut dyn Net, x: &Tensor, rng: &mut ChaCha8Rng, stats: &mut Stats) {
    let y = net.fwd(x).unwrap();
    let r: Vec<f64> = (0..y.data.len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let g = Tensor::from_vec(y.n, y.c, y.h, y.w, r.clone()).unwrap();
    net.params(&mut |p| p.zero_grad());
    let dx = net.bwd(&g);

    let (mut ana, mut num) = (Vec::new(), Vec::new());
    for i in probes(x.data.len(), rng) {
        let mut xp = x.clone();
        stats.probed += 1;
        let s = slope(|d| {
            xp.data[i] = x.data[i] + d;
            loss(net, &xp, &r)
        });
        match s {
            Some(n) => {
                ana.push(dx.data[i]);
                num.push(n);
            }
            None => stats.kinks += 1,
        }
    }
    stats.worst = stats.worst.max(rel_error(&ana, &num));

    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    net.params(&mut |p| {
        if p.trainable {
            grads.push((p.name.clone(), p.grad.clone()));
        }
    });
    for (name, grad) in grads {
        let (mut ana, mut num) = (Vec::new(), Vec::new());
        for i in probes(grad.len(), rng) {
            stats.probed += 1;
            let s = slope(|d| {
                nudge(net, &name, i, d);
                let l = loss(net, x, &r);
                nudge(net, &name, i, -d);
                l
            });
            match s {
                Some(n) => {
                    ana.push(grad[i]);
                    num.push(n);
                }
                None => stats.kinks += 1,
            }
        }
        let e = rel_error(&ana, &num);
        assert!(e.is_finite(), "{name}: non-finite error");
        stats.worst = stats.worst.max(e);
    }
}

pub type Builder = Box<dyn Fn(&mut ChaCha8Rng) -> Box<dyn Net>>;

/// Error statistics over `INSTANCES` seeded instances, or the first
/// instance whose error exceeds `TOL`.
pub fn worst_error(shape: [usize; 4], build: &Builder) -> std::result::Result<Stats, (u64, f64)> {
    let mut stats = Stats::default();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut net = build(&mut rng);
        let x = random_tensor(&mut rng, shape);
        let before = stats.worst;
        stats.worst = 0.0;
        check(net.as_mut(), &x, &mut rng, &mut stats);
        if stats.worst.is_nan() || stats.worst > TOL {
            return Err((seed, stats.worst));
        }
        stats.worst = stats.worst.max(before);
    }
    Ok(stats)
}

/// One case per layer type and configuration.
pub fn cases() -> Vec<(&'static str, [usize; 4], Builder)> {
    let detector_cfg = DetectorConfig {
        input_size: 16,
        base_width: 4,
        dense_units: 8,
        ..DetectorConfig::default()
    };
    vec![
        (
            "conv2d 3x3",
            [2, 3, 6, 6],
            Box::new(|rng: &mut ChaCha8Rng| -> Box<dyn Net> {
                Box::new(Conv2d::new("c", 3, 4, 3, 1, true, rng))
            }),
        ),
        (
            "conv2d 1x1 stride 2",
            [2, 3, 6, 6],
            Box::new(|rng: &mut ChaCha8Rng| -> Box<dyn Net> {
                Box::new(Conv2d::new("c", 3, 4, 1, 2, false, rng))
            }),
        ),
        (
            "depthwise conv",
            [2, 3, 6, 6],
            Box::new(|rng: &mut ChaCha8Rng| -> Box<dyn Net> {
                Box::new(DepthwiseConv2d::new("d", 3, 3, rng))
            }),
        ),
        (
            "separable conv",
            [2, 3, 6, 6],
            Box::new(|rng: &mut ChaCha8Rng| -> Box<dyn Net> {
                Box::new(SeparableConv2d::new("s", 3, 4, 3, rng))
            }),
        ),
        (
            "batch norm",
            [3, 4, 4, 4],
            Box::new(|rng: &mut ChaCha8Rng| -> Box<dyn Net> {
                let mut bn = BatchNorm2d::new("bn", 4, 0.9);
                bn.visit_params(&mut |p| {
                    if p.trainable {
                        p.value
                            .iter_mut()
                            .for_each(|v| *v += rng.random_range(-0.5..0.5));
                    }
                });
                Box::new(bn)
            }),
        ),
        (
            "selu",
            [2, 3, 4, 4],
            Box::new(|_: &mut ChaCha8Rng| -> Box<dyn Net> {
                Box::new(Activation::new(ActivationKind::Selu))
            }),
        ),
        (
            "relu",
            [2, 3, 4, 4],
            Box::new(|_: &mut ChaCha8Rng| -> Box<dyn Net> {
                Box::new(Activation::new(ActivationKind::Relu))
            }),
        ),
        (
            "sigmoid",
            [2, 3, 4, 4],
            Box::new(|_: &mut ChaCha8Rng| -> Box<dyn Net> {
                Box::new(Activation::new(ActivationKind::Sigmoid))
            }),
        ),
        (
            "max pool",
            [2, 3, 6, 6],
            Box::new(|_: &mut ChaCha8Rng| -> Box<dyn Net> { Box::new(MaxPool2::new()) }),
        ),
        (
            "global average pool",
            [2, 3, 5, 5],
            Box::new(|_: &mut ChaCha8Rng| -> Box<dyn Net> { Box::new(GlobalAvgPool::default()) }),
        ),
        (
            "dense",
            [3, 2, 3, 3],
            Box::new(|rng: &mut ChaCha8Rng| -> Box<dyn Net> {
                Box::new(Dense::new("fc", 18, 5, 1.0, rng))
            }),
        ),
        (
            "spatial attention",
            [2, 4, 6, 6],
            Box::new(|rng: &mut ChaCha8Rng| -> Box<dyn Net> {
                Box::new(SpatialAttention::new("sa", 7, rng))
            }),
        ),
        (
            "channel attention",
            [2, 8, 4, 4],
            Box::new(|rng: &mut ChaCha8Rng| -> Box<dyn Net> {
                Box::new(ChannelAttention::new("ca", 8, rng).unwrap())
            }),
        ),
        (
            "residual block",
            [2, 4, 6, 6],
            Box::new(|rng: &mut ChaCha8Rng| -> Box<dyn Net> {
                Box::new(ResidualBlock::new("r", 4, 4, false, 0.9, rng).unwrap())
            }),
        ),
        (
            "residual block with pooling",
            [2, 4, 6, 6],
            Box::new(|rng: &mut ChaCha8Rng| -> Box<dyn Net> {
                Box::new(ResidualBlock::new("r", 4, 8, true, 0.9, rng).unwrap())
            }),
        ),
        (
            "detector",
            [2, 1, 16, 16],
            Box::new(move |rng: &mut ChaCha8Rng| -> Box<dyn Net> {
                Box::new(Whole(Detector::new(detector_cfg, rng.random()).unwrap()))
            }),
        ),
    ]
}
