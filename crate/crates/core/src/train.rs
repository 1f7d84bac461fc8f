//! Optimizer, learning-rate schedule, early stopping and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{LabelImage, LossKind};
use crate::mask::{NUM_CLASSES, OUTSIDE};
use crate::networks::{Network, SliceSample};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// A validation loss must drop by more than this to count as an improvement.
pub const IMPROVEMENT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub l1_weight: f64,
    pub l2_weight: f64,
    /// Per-tensor L2 radius for kernels and biases; `None` disables the constraint.
    pub max_norm: Option<f64>,
    /// Loss multiplier for Non-LVO patients.
    pub non_lvo_multiplier: f64,
    pub loss: LossKind,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            decay_factor: 0.95,
            decay_every_epochs: 10,
            batch_size: 2,
            early_stop_patience: 25,
            max_epochs: 1000,
            l1_weight: 1e-6,
            l2_weight: 1e-5,
            max_norm: Some(2.0),
            non_lvo_multiplier: 2.0,
            loss: LossKind::focal_tversky_default(),
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("learning_rate", self.learning_rate),
            ("decay_factor", self.decay_factor),
            ("l1_weight", self.l1_weight),
            ("l2_weight", self.l2_weight),
            ("non_lvo_multiplier", self.non_lvo_multiplier),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!(
                    "{name} must be a finite nonnegative number, got {v}"
                )));
            }
        }
        if self.early_stop_patience < 1 {
            return Err(Error::config("early_stop_patience must be at least 1"));
        }
        if self.batch_size < 1 || self.decay_every_epochs < 1 {
            return Err(Error::config("batch_size and decay_every_epochs must be at least 1"));
        }
        if let Some(r) = self.max_norm {
            if !(r > 0.0) {
                return Err(Error::config(format!("max_norm must be positive, got {r}")));
            }
        }
        if let LossKind::FocalTversky { gamma, alpha, beta } = self.loss {
            if !(gamma >= 1.0) || alpha < 0.0 || beta < 0.0 {
                return Err(Error::config(
                    "focal Tversky needs gamma >= 1 and nonnegative alpha, beta",
                ));
            }
        }
        Ok(())
    }
}

/// Step decay: `lr · decay^⌊epoch / every⌋` with 0-based epochs.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.learning_rate * cfg.decay_factor.powi((epoch / cfg.decay_every_epochs) as i32)
}

/// One Adam step with bias correction. L1/L2 kernel penalties are added to
/// the gradients first; afterwards every parameter is projected back into the
/// max-norm ball.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, grads: &[Tensor<T>], cfg: &TrainConfig, lr: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.params().iter().zip(grads) {
        if p.value.dims() != g.dims() {
            return Err(Error::shape(format!(
                "gradient {:?} for parameter {} of extents {:?}",
                g.dims(),
                p.name,
                p.value.dims()
            )));
        }
    }
    let t = params.advance() as i32;
    let (b1, b2) = (T::from_f64(ADAM_BETA1), T::from_f64(ADAM_BETA2));
    let one = T::one();
    let c1 = T::from_f64(1.0 - ADAM_BETA1.powi(t));
    let c2 = T::from_f64(1.0 - ADAM_BETA2.powi(t));
    let (eps, lr) = (T::from_f64(ADAM_EPSILON), T::from_f64(lr));
    let (l1, l2x2) = (T::from_f64(cfg.l1_weight), T::from_f64(2.0 * cfg.l2_weight));
    for (p, g) in params.params_mut().iter_mut().zip(grads) {
        let penalize = p.kind == ParamKind::Kernel;
        let w = p.value.data_mut();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        for i in 0..w.len() {
            let mut gi = g.data()[i];
            if penalize {
                let s = if w[i] > T::zero() {
                    one
                } else if w[i] < T::zero() {
                    -one
                } else {
                    T::zero()
                };
                gi += l1 * s + l2x2 * w[i];
            }
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
        if let Some(r) = cfg.max_norm {
            project_max_norm(&mut p.value, r);
        }
    }
    Ok(())
}

/// Rescales `t` onto the L2 ball of radius `radius` when it lies outside.
pub fn project_max_norm<T: Scalar>(t: &mut Tensor<T>, radius: f64) {
    let n = t.data().iter().map(|&v| Scalar::to_f64(v).powi(2)).sum::<f64>().sqrt();
    if n > radius {
        let s = T::from_f64(radius / n);
        t.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}

#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            waited: 0,
        }
    }

    /// Records a validation loss; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best - IMPROVEMENT_TOLERANCE || self.best.is_infinite() {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.waited = 0;
            (true, false)
        } else {
            self.waited += 1;
            (false, self.waited >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub stopped: bool,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_loss,stopped_flag\n");
    for r in history {
        s.push_str(&format!(
            "{},{:e},{:.9},{:.9},{}\n",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.stopped as u8
        ));
    }
    s
}

pub struct Dataset<T> {
    pub train: Vec<SliceSample<T>>,
    pub validation: Vec<SliceSample<T>>,
}

pub struct TrainOutcome<T> {
    /// Parameters of the best validation epoch.
    pub params: ParamStore<T>,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Inverse class frequency over evaluable pixels, scaled so a uniformly
/// distributed target would get weight 1 everywhere. Absent classes get 1.
pub fn inverse_frequency_weights<'a>(labels: impl IntoIterator<Item = &'a LabelImage>) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for img in labels {
        for &l in &img.labels {
            if l != OUTSIDE {
                counts[l as usize] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    counts.map(|c| {
        if c == 0 {
            1.0
        } else {
            total as f64 / (NUM_CLASSES as f64 * c as f64)
        }
    })
}

/// Loss of one sample and, when `want_grad`, the gradients of every parameter.
fn sample_loss<T: Scalar>(
    net: &Network,
    params: &ParamStore<T>,
    sample: &SliceSample<T>,
    loss: &LossKind,
    dropout: Option<&mut ChaCha8Rng>,
    grad_scale: Option<f64>,
) -> Result<(f64, Option<Vec<Tensor<T>>>)> {
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, params, &sample.input, dropout)?;
    let l = tape.loss(fwd.probs, loss, &sample.target, sample.weights.as_ref())?;
    let value = Scalar::to_f64(tape.value(l).data()[0]) * sample.multiplier;
    let grads = match grad_scale {
        None => None,
        Some(scale) => {
            let mut g = tape.backward(l, T::from_f64(sample.multiplier * scale))?;
            Some(
                fwd.params
                    .iter()
                    .zip(params.params())
                    .map(|(&v, p)| g.take_or_zeros(v, &p.value))
                    .collect(),
            )
        }
    };
    Ok((value, grads))
}

/// Mean weighted loss over `samples` without dropout.
pub fn evaluate_loss<T: Scalar>(
    net: &Network,
    params: &ParamStore<T>,
    samples: &[SliceSample<T>],
    loss: &LossKind,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples to evaluate".into()));
    }
    let values: Vec<f64> = samples
        .par_iter()
        .map(|s| sample_loss(net, params, s, loss, None, None).map(|(v, _)| v))
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / samples.len() as f64)
}

/// Trains from `params` with shuffled mini-batches and early stopping on the
/// validation loss. Per-sample work runs in parallel; gradients are summed in
/// sample order, so results do not depend on the thread count.
pub fn train<T: Scalar>(
    net: &Network,
    mut params: ParamStore<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyDataset("training split has no samples".into()));
    }
    if data.validation.is_empty() {
        return Err(Error::EmptyDataset("validation split has no samples".into()));
    }
    net.check_params(&params)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best_values = params.values();
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut drawn: u64 = 0;

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let first = drawn;
            drawn += batch.len() as u64;
            let results: Vec<(f64, Option<Vec<Tensor<T>>>)> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
                    rng.set_stream(first + k as u64);
                    sample_loss(net, &params, &data.train[i], &cfg.loss, Some(&mut rng), Some(scale))
                })
                .collect::<Result<_>>()?;
            let mut batch_loss = 0.0;
            let mut sum: Option<Vec<Tensor<T>>> = None;
            for (v, g) in results {
                batch_loss += v * scale;
                let g = g.expect("gradients requested");
                match &mut sum {
                    None => sum = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch: epoch + 1,
                    batch: bi,
                    value: batch_loss,
                });
            }
            adam_step(&mut params, &sum.expect("non-empty batch"), cfg, lr)?;
            epoch_loss += batch_loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let val_loss = evaluate_loss(net, &params, &data.validation, &cfg.loss)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                epoch: epoch + 1,
                batch: batches,
                value: val_loss,
            });
        }
        let (improved, stop) = stopper.update(epoch + 1, val_loss);
        if improved {
            best_values = params.values();
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss,
            val_loss,
            stopped: stop,
        };
        log::debug!(
            "epoch {} lr {:.3e} train {:.5} val {:.5}",
            rec.epoch,
            rec.lr,
            rec.train_loss,
            rec.val_loss
        );
        on_epoch(&rec);
        history.push(rec);
        if stop {
            stopped_early = true;
            break;
        }
    }
    params.restore_values(best_values)?;
    Ok(TrainOutcome {
        params,
        history,
        best_epoch: stopper.best_epoch(),
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::WeightMap;
    use crate::networks::{build_network, Architecture, NetworkConfig};
    use crate::tensor::AxisRole;
    use rand::Rng;

    fn cfg_plain() -> TrainConfig {
        TrainConfig {
            l1_weight: 0.0,
            l2_weight: 0.0,
            max_norm: None,
            ..TrainConfig::default()
        }
    }

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(
            "w",
            ParamKind::Kernel,
            Tensor::from_vec(vec![values.len()], values.to_vec()).unwrap(),
        )
        .unwrap();
        s
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0), 0.0003);
        assert!((lr_at_epoch(&cfg, 10) - 0.000285).abs() < 1e-15);
        assert!((lr_at_epoch(&cfg, 25) - 0.00027075).abs() < 1e-15);
        assert_eq!(lr_at_epoch(&cfg, 9), 0.0003);
    }

    #[test]
    fn adam_fixed_point_and_first_step() {
        let mut s = store(&[0.5, -0.25]);
        adam_step(
            &mut s,
            &[Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap()],
            &cfg_plain(),
            1e-3,
        )
        .unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[0.5, -0.25]);

        // At t = 1 the bias-corrected update is −lr · g / (|g| + ε).
        let mut s = store(&[0.5, -0.25]);
        let g = [0.3, -2.0];
        adam_step(
            &mut s,
            &[Tensor::from_vec(vec![2], g.to_vec()).unwrap()],
            &cfg_plain(),
            1e-3,
        )
        .unwrap();
        for (k, (&w0, &gi)) in [0.5f64, -0.25].iter().zip(&g).enumerate() {
            let expected = w0 - 1e-3 * gi / (gi.abs() + 1e-8);
            assert!((s.get("w").unwrap().data()[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = store(&[0.1]);
        let (mut w, mut m, mut v) = (0.1f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g: f64 = rng.random_range(-1.0..1.0);
            adam_step(
                &mut s,
                &[Tensor::from_vec(vec![1], vec![g]).unwrap()],
                &cfg_plain(),
                0.01,
            )
            .unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((s.get("w").unwrap().data()[0] - w).abs() <= 1e-15 * w.abs().max(1.0));
        }
        assert_eq!(s.step(), 50);
    }

    #[test]
    fn max_norm_projection() {
        let mut t = Tensor::from_vec(vec![2], vec![6.0f64, 8.0]).unwrap();
        project_max_norm(&mut t, 1.0);
        assert!((t.norm() - 1.0).abs() < 1e-12);
        let mut s = store(&[6.0, 8.0]);
        let cfg = TrainConfig {
            max_norm: Some(1.0),
            ..cfg_plain()
        };
        adam_step(
            &mut s,
            &[Tensor::from_vec(vec![2], vec![0.1, 0.1]).unwrap()],
            &cfg,
            1e-3,
        )
        .unwrap();
        assert!(s.get("w").unwrap().norm() <= 1.0 + 1e-9);
    }

    #[test]
    fn adam_rejects_mismatched_gradients() {
        let mut s = store(&[1.0, 2.0]);
        let g = Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            adam_step(&mut s, &[g], &cfg_plain(), 1e-3),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn early_stopping_patience() {
        let mut es = EarlyStopping::new(25);
        for e in 1..=30 {
            let (_, stop) = es.update(e, 100.0 - e as f64);
            assert!(!stop);
        }
        let mut es = EarlyStopping::new(25);
        let mut stopped = None;
        for e in 1..=40 {
            if es.update(e, 1.0).1 {
                stopped = Some(e);
                break;
            }
        }
        assert_eq!(stopped, Some(26));
        assert_eq!(es.best_epoch(), 1);
        // Gains within the tolerance do not reset patience.
        let mut es = EarlyStopping::new(2);
        es.update(1, 1.0);
        assert!(!es.update(2, 1.0 - 5e-7).0);
    }

    #[test]
    fn class_weights_follow_inverse_frequency() {
        let img = LabelImage::new(4, 2, vec![0, 0, 0, 0, 0, 1, 1, OUTSIDE]).unwrap();
        let w = inverse_frequency_weights([&img]);
        assert!((w[0] - 7.0 / 15.0).abs() < 1e-12);
        assert!((w[1] - 7.0 / 6.0).abs() < 1e-12);
        assert_eq!(w[2], 1.0);
    }

    fn tiny_net() -> Network {
        build_network(NetworkConfig {
            input_extents: [4, 4, 3, 2],
            time_pool_schedule: vec![2],
            temporal_widths: vec![2],
            spatial_widths: vec![2, 2],
            ..NetworkConfig::default()
        })
        .unwrap()
    }

    fn tiny_sample(seed: u64) -> SliceSample<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = Tensor::new(
            vec![4, 4, 3, 2],
            vec![AxisRole::Width, AxisRole::Height, AxisRole::Depth, AxisRole::Time],
            (0..96).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let labels = (0..16)
            .map(|i| if i == 0 { OUTSIDE } else { rng.random_range(0..3) })
            .collect();
        SliceSample {
            input,
            target: LabelImage::new(4, 4, labels).unwrap(),
            weights: Some(WeightMap::uniform(16)),
            multiplier: 1.0,
        }
    }

    #[test]
    fn whole_network_gradients_match_finite_differences() {
        for arch in [Architecture::Mjnet4d, Architecture::Mjnet3dTime] {
            let net = build_network(NetworkConfig {
                architecture: arch,
                ..tiny_net().config().clone()
            })
            .unwrap();
            let params = net.init_params::<f64>(3);
            let sample = tiny_sample(4);
            let loss = LossKind::focal_tversky_default();
            let (_, grads) = sample_loss(&net, &params, &sample, &loss, None, Some(1.0)).unwrap();
            let grads = grads.unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            // A small step keeps the probe clear of activation and pooling kinks.
            let h = 1e-6;
            let mut checked = 0;
            for (pi, p) in params.params().iter().enumerate() {
                for _ in 0..3 {
                    let k = rng.random_range(0..p.value.len());
                    let eval = |delta: f64| {
                        let mut q = params.clone();
                        let mut v = p.value.clone();
                        v.data_mut()[k] += delta;
                        q.set_value(&p.name, v).unwrap();
                        sample_loss(&net, &q, &sample, &loss, None, None).unwrap().0
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = grads[pi].data()[k];
                    let err = (fd - a).abs();
                    assert!(
                        err <= 1e-5 * fd.abs().max(a.abs()) || err < 1e-9,
                        "{arch:?} {} [{k}]: {a} vs {fd}",
                        p.name
                    );
                    checked += 1;
                }
            }
            assert!(checked >= 20);
        }
    }

    #[test]
    fn training_is_deterministic_and_restores_best() {
        let net = tiny_net();
        let data = Dataset {
            train: (0..4).map(tiny_sample).collect(),
            validation: (10..12).map(tiny_sample).collect(),
        };
        let cfg = TrainConfig {
            max_epochs: 6,
            learning_rate: 1e-2,
            precision: Precision::F64,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || train(&net, net.init_params::<f64>(1), &data, &cfg, |_| {}).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 6);
        let best = a
            .history
            .iter()
            .min_by(|x, y| x.val_loss.partial_cmp(&y.val_loss).unwrap())
            .unwrap();
        assert_eq!(best.epoch, a.best_epoch);
        let restored = evaluate_loss(&net, &a.params, &data.validation, &cfg.loss).unwrap();
        assert_eq!(restored, best.val_loss);
        assert!(history_csv(&a.history).starts_with("epoch,lr,train_loss,val_loss,stopped_flag\n1,"));
    }

    #[test]
    fn training_errors() {
        let net = tiny_net();
        let empty = Dataset::<f64> {
            train: vec![],
            validation: vec![tiny_sample(1)],
        };
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&net, net.init_params(0), &empty, &cfg, |_| {}),
            Err(Error::EmptyDataset(_))
        ));
        let mut bad = tiny_sample(2);
        bad.input.data_mut()[0] = f64::NAN;
        let data = Dataset {
            train: vec![bad],
            validation: vec![tiny_sample(3)],
        };
        match train(&net, net.init_params(0), &data, &cfg, |_| {}) {
            Err(Error::NonFinite { epoch, batch, .. }) => assert_eq!((epoch, batch), (1, 0)),
            other => panic!("expected a non-finite loss error, got {:?}", other.err()),
        }
    }
}
