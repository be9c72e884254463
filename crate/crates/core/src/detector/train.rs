//! Mini-batch Adam training with a staircase learning-rate schedule,
//! L2 weight decay and early stopping on validation accuracy.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{softmax_cross_entropy, Detector, DetectorConfig, DetectorParams};
use crate::error::{Error, Result};
use crate::{Label, Patch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_learning_rate: f64,
    pub decay_steps: u64,
    pub decay_rate: f64,
    pub batch_size: usize,
    pub l2_weight: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub early_stop_patience_epochs: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_learning_rate: 0.0005,
            decay_steps: 600,
            decay_rate: 0.85,
            batch_size: 56,
            l2_weight: 0.0001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            early_stop_patience_epochs: 3,
            max_epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.initial_learning_rate > 0.0 && self.initial_learning_rate.is_finite()) {
            return bad("initial_learning_rate must be positive");
        }
        if self.decay_steps == 0 {
            return bad("decay_steps must be positive");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("decay_rate must be in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.l2_weight >= 0.0) {
            return bad("l2_weight must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return bad("invalid Adam parameters");
        }
        if self.early_stop_patience_epochs == 0 || self.max_epochs == 0 {
            return bad("patience and max_epochs must be positive");
        }
        Ok(())
    }

    /// Staircase schedule `lr0 * rate^floor(step / decay_steps)`.
    ///
    /// The power is rounded to 15 significant digits so that decimal
    /// hyperparameters give the decimal result (0.0005 * 0.85^2 is exactly
    /// 0.00036125, not 0.00036124999999999997).
    pub fn lr_at(&self, step: u64) -> f64 {
        let k = (step / self.decay_steps) as i32;
        let raw = self.initial_learning_rate * self.decay_rate.powi(k);
        format!("{raw:.14e}").parse().unwrap_or(raw)
    }
}

/// Labeled patches stored contiguously. Labels are 0 = real, 1 = fake.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchSet {
    pub size: usize,
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
}

impl PatchSet {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            ..Default::default()
        }
    }

    pub fn push(&mut self, values: &[f64], label: Label) -> Result<()> {
        if values.len() != self.size * self.size {
            return Err(Error::Shape(format!(
                "patch has {} values, expected {}",
                values.len(),
                self.size * self.size
            )));
        }
        self.values.extend_from_slice(values);
        self.labels.push(label.is_fake() as u8);
        Ok(())
    }

    pub fn from_patches(patches: &[Patch]) -> Result<Self> {
        let size = patches.first().map_or(0, |p| p.size);
        let mut set = Self::new(size);
        for p in patches {
            let label = p
                .label
                .ok_or_else(|| Error::Data("training patch without a label".into()))?;
            set.push(&p.values, label)?;
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let l = self.size * self.size;
        &self.values[i * l..(i + 1) * l]
    }

    /// `(real, fake)` counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let fake = self.labels.iter().filter(|&&l| l == 1).count();
        (self.len() - fake, fake)
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<u8>) {
        let mut v = Vec::with_capacity(idx.len() * self.size * self.size);
        let mut l = Vec::with_capacity(idx.len());
        for &i in idx {
            v.extend_from_slice(self.patch(i));
            l.push(self.labels[i]);
        }
        (v, l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation accuracy; only a strict increase counts as an
/// improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, accuracy: f64) -> StopDecision {
        match self.best {
            Some(b) if accuracy <= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some(accuracy);
                self.best_epoch = epoch;
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.map(|b| (self.best_epoch, b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DetectorParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub fn write_training_log<W: Write>(out: W, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in log {
        w.serialize(row)?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("writing training log: {e}")))?;
    Ok(())
}

pub fn read_training_log<R: std::io::Read>(input: R) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Fraction of patches whose thresholded `P(fake)` matches the label.
pub fn accuracy(net: &Detector, set: &PatchSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Data("accuracy of an empty patch set".into()));
    }
    let p = net.predict_proba(&set.values)?;
    let hits = p
        .iter()
        .zip(&set.labels)
        .filter(|(p, &l)| (**p >= 0.5) == (l == 1))
        .count();
    Ok(hits as f64 / set.len() as f64)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(net: &mut Detector) -> Self {
        let mut m = Vec::new();
        net.visit_params(&mut |p| m.push(vec![0.0; p.value.len()]));
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Detector, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        net.visit_params(&mut |p| {
            if p.trainable {
                let (m, v) = (&mut ms[i], &mut vs[i]);
                for j in 0..p.value.len() {
                    let mut g = p.grad[j];
                    if p.decay {
                        g += cfg.l2_weight * p.value[j];
                    }
                    m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                    v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                    p.value[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.epsilon);
                }
            }
            i += 1;
        });
    }
}

fn l2_penalty(net: &mut Detector, weight: f64) -> f64 {
    let mut s = 0.0;
    net.visit_params(&mut |p| {
        if p.trainable && p.decay {
            s += p.value.iter().map(|w| w * w).sum::<f64>();
        }
    });
    0.5 * weight * s
}

/// Trains a fresh network and validates on `val` after every epoch.
pub fn train(
    det: DetectorConfig,
    train_set: &PatchSet,
    val: &PatchSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    train_with_validator(det, train_set, cfg, |_, net| accuracy(net, val))
}

/// Like [`train`] with a caller-supplied validation score per epoch
/// (called with the 1-based epoch number and the current network).
pub fn train_with_validator<F>(
    det: DetectorConfig,
    train_set: &PatchSet,
    cfg: &TrainConfig,
    mut validate: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &Detector) -> Result<f64>,
{
    cfg.validate()?;
    let (real, fake) = train_set.class_counts();
    if real == 0 || fake == 0 {
        return Err(Error::Data(format!(
            "training set needs both classes ({real} real, {fake} fake)"
        )));
    }
    if train_set.size != det.input_size {
        return Err(Error::Shape(format!(
            "patch size {} but the network expects {}",
            train_set.size, det.input_size
        )));
    }

    let mut net = Detector::new(det, cfg.seed)?;
    let mut adam = Adam::new(&mut net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience_epochs);
    let mut best: Option<DetectorParams> = None;
    let mut log = Vec::new();
    let mut step: u64 = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        let mut lr = cfg.lr_at(step);
        for batch in order.chunks(cfg.batch_size) {
            let (values, labels) = train_set.gather(batch);
            let x = net.prepare_input(&values)?;
            net.zero_grad();
            let logits = net.forward(&x, true)?;
            let (ce, grad) = softmax_cross_entropy(&logits, &labels);
            let loss = ce + l2_penalty(&mut net, cfg.l2_weight);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: step as usize,
                    loss,
                });
            }
            hits += logits
                .data
                .chunks(2)
                .zip(&labels)
                .filter(|(l, &y)| ((l[1] > l[0]) as u8) == y)
                .count();
            loss_sum += loss * batch.len() as f64;
            net.backward(&grad);
            lr = cfg.lr_at(step);
            adam.step(&mut net, cfg, lr);
            step += 1;
        }
        let snapshot = net.compact()?;
        let val_acc = validate(epoch, &snapshot)?;
        log.push(EpochLog {
            epoch,
            step,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: hits as f64 / train_set.len() as f64,
            val_acc,
        });
        log::info!(
            "epoch {epoch}: loss {:.4} train_acc {:.4} val_acc {val_acc:.4}",
            loss_sum / train_set.len() as f64,
            hits as f64 / train_set.len() as f64
        );
        match stopper.observe(epoch, val_acc) {
            StopDecision::Improved => best = Some(snapshot.params()),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, _) = stopper.best().expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: best.expect("best snapshot recorded"),
        log,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staircase_values() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.0005);
        assert_eq!(cfg.lr_at(599), 0.0005);
        assert_eq!(cfg.lr_at(600), 0.000425);
        assert_eq!(cfg.lr_at(1199), 0.000425);
        assert_eq!(cfg.lr_at(1200), 0.00036125);
    }

    #[test]
    fn early_stopping_sequence() {
        let mut s = EarlyStopping::new(3);
        let d: Vec<_> = [0.80, 0.79, 0.78, 0.77]
            .iter()
            .enumerate()
            .map(|(i, &a)| s.observe(i + 1, a))
            .collect();
        assert_eq!(
            d,
            vec![
                StopDecision::Improved,
                StopDecision::Continue,
                StopDecision::Continue,
                StopDecision::Stop
            ]
        );
        assert_eq!(s.best(), Some((1, 0.80)));
    }

    #[test]
    fn plateau_is_not_improvement() {
        let mut s = EarlyStopping::new(2);
        s.observe(1, 0.5);
        assert_eq!(s.observe(2, 0.5), StopDecision::Continue);
        assert_eq!(s.observe(3, 0.5), StopDecision::Stop);
    }

    #[test]
    fn single_class_is_rejected() {
        let mut set = PatchSet::new(32);
        set.push(&[0.0; 1024], Label::Fake).unwrap();
        let err = train(
            DetectorConfig::default(),
            &set,
            &set,
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn log_round_trip() {
        let log = vec![EpochLog {
            epoch: 1,
            step: 4,
            lr: 0.0005,
            train_loss: 0.7,
            train_acc: 0.5,
            val_acc: 0.25,
        }];
        let mut buf = Vec::new();
        write_training_log(&mut buf, &log).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,step,lr,train_loss,train_acc,val_acc"));
        assert_eq!(read_training_log(&buf[..]).unwrap(), log);
    }
}
