//! Decoupled-weight-decay Adam and the full-batch toy training loop.

use std::collections::HashMap;

use crate::data::{stack_samples, IouAccumulator, ToySegSample};
use crate::decoder::argmax_labels;
use crate::error::{Error, Result};
use crate::model::{segmentation_loss, FtnModel, Mode};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;

/// AdamW: Adam moments with weight decay applied directly to the
/// parameter rather than through the gradient. With decay 0 this is
/// exactly Adam.
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Applies one update to every parameter reached by `visit`,
    /// addressing gradients by the parameter tensors' identities.
    /// Parameters the loss did not reach are left untouched.
    pub fn apply(&mut self, grads: &Gradients<T>, visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor<T>))) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let wd = T::from_f64(self.weight_decay);
        let rc1 = T::from_f64(1.0 / bc1);
        let rc2 = T::from_f64(1.0 / bc2);

        visit(&mut |name, param| {
            let Some(grad) = grads.grad(param) else {
                return;
            };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
            let mut data = param.data().to_vec();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let m_hat = m[i] * rc1;
                let v_hat = v[i] * rc2;
                data[i] = data[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
            }
            *param = Tensor::param(data, param.shape()).expect("shape unchanged");
        });
    }
}

/// Toy training hyperparameters. The learning rate targets a few hundred
/// full-batch steps on the synthetic set, far from benchmark-scale
/// schedules; weight decay stays 0 as in segmentation fine-tuning.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            lr: 1e-3,
            weight_decay: 0.0,
            poly_power: 0.9,
        }
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub main_loss: f64,
    pub lr: f64,
}

/// Polynomial decay from `lr0` to zero over `total` steps.
pub fn poly_lr(lr0: f64, step: usize, total: usize, power: f64) -> f64 {
    let frac = 1.0 - step as f64 / total.max(1) as f64;
    lr0 * frac.max(0.0).powf(power)
}

/// Full-batch training on a fixed toy set: every step computes the loss
/// of the entire set, so the trace is strictly comparable step to step
/// (and constant when the learning rate is zero). Deterministic: no
/// randomness beyond the model seed and the dataset seed.
pub fn train_toy<T: Scalar>(
    model: &mut FtnModel<T>,
    samples: &[ToySegSample<T>],
    cfg: &TrainConfig,
) -> Result<Vec<TraceRow>> {
    let (batch, labels) = stack_samples(samples)?;
    model.set_mode(Mode::Train);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let diverged = |step: usize| Error::Diverged { step };
        let output = model
            .forward(&mut tape, &batch, None)
            .map_err(|e| match e {
                Error::NonFinite { .. } => diverged(step),
                other => other,
            })?;
        let parts = segmentation_loss(&mut tape, &output, &labels).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(step),
            other => other,
        })?;
        let loss = parts.total.item()?.to_f64();
        let main = parts.main.item()?.to_f64();
        if !loss.is_finite() {
            return Err(diverged(step));
        }
        let lr = poly_lr(cfg.lr, step, cfg.steps, cfg.poly_power);
        trace.push(TraceRow {
            step,
            loss,
            main_loss: main,
            lr,
        });
        let grads = tape.backward(&parts.total)?;
        opt.lr = lr;
        opt.apply(&grads, |f| model.visit_params(f));
    }
    model.set_mode(Mode::Infer);
    Ok(trace)
}

/// Mean IoU of the model over a sample set (inference mode).
pub fn evaluate_miou<T: Scalar>(
    model: &FtnModel<T>,
    samples: &[ToySegSample<T>],
) -> Result<f64> {
    let classes = model.config.decoder.num_classes;
    let mut acc = IouAccumulator::new(classes);
    for sample in samples {
        let img = sample.batch_image()?;
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &img, None)?;
        let pred = argmax_labels(&out.logits)?;
        acc.update(&pred, &sample.labels)?;
    }
    Ok(acc.mean_iou())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_toy_set;
    use crate::model::ModelConfig;

    #[test]
    fn zero_learning_rate_freezes_the_loss_trace() {
        let mut model: FtnModel<f32> = FtnModel::new(&ModelConfig::micro(2), 21).unwrap();
        let samples = generate_toy_set(22, 2, 32, 32, 2).unwrap();
        let cfg = TrainConfig {
            steps: 4,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let trace = train_toy(&mut model, &samples, &cfg).unwrap();
        assert_eq!(trace.len(), 4);
        for row in &trace[1..] {
            assert_eq!(row.loss, trace[0].loss);
        }
    }

    #[test]
    fn one_zero_decay_step_matches_a_closed_form_adam_step() {
        // Two-parameter model: loss = sum(p * p) with p = (3, -2).
        let p = Tensor::<f64>::param(vec![3.0, -2.0], &[2]).unwrap();
        let mut tape = Tape::new();
        let sq = tape.mul(&p, &p).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();

        let mut live = p.clone();
        let mut opt = AdamW::<f64>::new(0.01, 0.0);
        opt.apply(&grads, |f| f("p", &mut live));

        // Closed-form first Adam step: g = 2p, m_hat = g, v_hat = g^2, so
        // the update is lr * g / (|g| + eps) = lr * sign(g) (up to eps).
        for (i, &p0) in [3.0f64, -2.0].iter().enumerate() {
            let g: f64 = 2.0 * p0;
            let want = p0 - 0.01 * (g / (g.abs() + 1e-8));
            let got = live.data()[i];
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn decay_shrinks_parameters_even_without_gradient_signal() {
        // Gradient zero on one coordinate is impossible through sum(p*p)
        // at p=0; instead compare decay on/off on the same gradients.
        let p = Tensor::<f64>::param(vec![1.0, -1.0], &[2]).unwrap();
        let mut tape = Tape::new();
        let sq = tape.mul(&p, &p).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();

        let mut plain = p.clone();
        AdamW::<f64>::new(0.01, 0.0).apply(&grads, |f| f("p", &mut plain));
        let mut decayed = p.clone();
        AdamW::<f64>::new(0.01, 0.5).apply(&grads, |f| f("p", &mut decayed));
        assert!(decayed.data()[0] < plain.data()[0]);
        assert!(decayed.data()[1] > plain.data()[1]);
    }

    #[test]
    fn poly_schedule_decays_to_zero() {
        assert_eq!(poly_lr(1e-3, 0, 100, 0.9), 1e-3);
        let mid = poly_lr(1e-3, 50, 100, 0.9);
        assert!(mid < 1e-3 && mid > 0.0);
        assert_eq!(poly_lr(1e-3, 100, 100, 0.9), 0.0);
    }

    #[test]
    fn training_divergence_reports_the_step() {
        let mut model: FtnModel<f32> = FtnModel::new(&ModelConfig::micro(2), 23).unwrap();
        let samples = generate_toy_set(24, 1, 32, 32, 2).unwrap();
        let cfg = TrainConfig {
            steps: 50,
            lr: 1e8,
            ..TrainConfig::default()
        };
        match train_toy(&mut model, &samples, &cfg) {
            Err(Error::Diverged { step }) => assert!(step > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn a_few_steps_reduce_the_loss() {
        let mut model: FtnModel<f32> = FtnModel::new(&ModelConfig::micro(2), 25).unwrap();
        let samples = generate_toy_set(26, 2, 32, 32, 2).unwrap();
        let cfg = TrainConfig {
            steps: 20,
            ..TrainConfig::default()
        };
        let trace = train_toy(&mut model, &samples, &cfg).unwrap();
        assert!(trace.last().unwrap().loss < trace[0].loss);
    }
}
