//! AdamW with decoupled weight decay.

use super::{ForwardCache, Model};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f32>,
    pub second_moment: Vec<f32>,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub weight_decay: f32,
    decay_mask: Vec<bool>,
}

impl OptimizerState {
    pub const DEFAULT_LEARNING_RATE: f32 = 1e-4;
    pub const DEFAULT_WEIGHT_DECAY: f32 = 0.01;

    pub fn new(model: &Model<f32>) -> Self {
        Self::with_learning_rate(model, Self::DEFAULT_LEARNING_RATE)
    }

    pub fn with_learning_rate(model: &Model<f32>, learning_rate: f32) -> Self {
        let n = model.params.len();
        OptimizerState {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: Self::DEFAULT_WEIGHT_DECAY,
            decay_mask: model.layout.decay_mask(),
        }
    }

    pub(crate) fn restore_mask(&mut self, model: &Model<f32>) {
        self.decay_mask = model.layout.decay_mask();
    }
}

impl Model<f32> {
    /// One AdamW step. Returns the L2 norm of `grads`. Non-finite gradients
    /// are rejected before any state is touched.
    pub fn apply_gradients(&mut self, opt: &mut OptimizerState, grads: &[f32]) -> Result<f64> {
        if grads.len() != self.params.len() || opt.first_moment.len() != self.params.len() {
            return Err(Error::Shape("gradient/optimizer state does not match parameters".into()));
        }
        let mut sq = 0f64;
        for (i, &g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient entry {i} is {g}")));
            }
            sq += f64::from(g) * f64::from(g);
        }
        let t = (self.step_count + 1) as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        let (lr, b1, b2, eps, wd) = (opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon, opt.weight_decay);
        for (i, &g) in grads.iter().enumerate() {
            let m = b1 * opt.first_moment[i] + (1.0 - b1) * g;
            let v = b2 * opt.second_moment[i] + (1.0 - b2) * g * g;
            opt.first_moment[i] = m;
            opt.second_moment[i] = v;
            let mut update = (m / bc1) / ((v / bc2).sqrt() + eps);
            if opt.decay_mask[i] {
                update += wd * self.params[i];
            }
            self.params[i] -= lr * update;
        }
        self.step_count += 1;
        Ok(sq.sqrt())
    }

    /// Reverse pass for `dlogits` followed by an optimizer step.
    pub fn backward_and_update(
        &mut self,
        opt: &mut OptimizerState,
        cache: &ForwardCache<f32>,
        dlogits: &[f32],
    ) -> Result<f64> {
        if dlogits.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("logit gradient".into()));
        }
        let mut grads = vec![0f32; self.params.len()];
        self.backward(cache, dlogits, &mut grads)?;
        self.apply_gradients(opt, &grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn zero_gradient_applies_only_weight_decay() {
        let mut m = init_model(ModelConfig::micro(), 0).unwrap();
        let before = m.params.clone();
        let mut opt = OptimizerState::with_learning_rate(&m, 1e-2);
        let mask = m.layout.decay_mask();
        let norm = m.apply_gradients(&mut opt, &vec![0.0; before.len()]).unwrap();
        assert_eq!(norm, 0.0);
        for i in 0..before.len() {
            let want = if mask[i] { before[i] - 1e-2 * 0.01 * before[i] } else { before[i] };
            assert!((m.params[i] - want).abs() <= 1e-7 * want.abs().max(1.0));
        }
        assert_eq!(m.step_count, 1);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut m = init_model(ModelConfig::micro(), 0).unwrap();
        let before = m.clone();
        let mut opt = OptimizerState::new(&m);
        let mut g = vec![0.1; m.params.len()];
        g[3] = f32::NAN;
        assert!(matches!(m.apply_gradients(&mut opt, &g), Err(Error::NonFinite(_))));
        assert_eq!(m.params, before.params);
        assert_eq!(m.step_count, 0);
        assert!(opt.first_moment.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_updates_are_deterministic() {
        let m0 = init_model(ModelConfig::micro(), 1).unwrap();
        let input = [257, 10, 11];
        let prefix = [257, 97];
        let run = || {
            let mut m = m0.clone();
            let mut opt = OptimizerState::new(&m);
            let cache = m.forward(&input, &prefix, None).unwrap();
            let dl: Vec<f32> = (0..cache.logits.data.len()).map(|i| (i % 7) as f32 * 0.01).collect();
            m.backward_and_update(&mut opt, &cache, &dl).unwrap();
            m.params
        };
        assert_eq!(run(), run());
    }
}
