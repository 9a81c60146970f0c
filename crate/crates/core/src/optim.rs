//! Adam optimization over named parameter sets, with bias-corrected first
//! and second moments and checkpointable state.

use crate::error::{Error, Result};
use crate::net::ParamSet;
use crate::tensor::Tensor;

/// Moment-decay and stabilization constants of the update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig(format!(
                "moment decays must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 || !self.eps.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Per-parameter first/second moment estimates plus the shared step counter.
/// Moment tensors stay index-aligned with the parameter set they were built
/// for.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    hyper: AdamHyper,
}

impl OptimizerState {
    /// Fresh zero-moment state matching the given parameters.
    pub fn new(params: &ParamSet, hyper: AdamHyper) -> Result<OptimizerState> {
        hyper.validate()?;
        let zeros = |_: &str, t: &Tensor| Tensor::zeros(t.shape());
        Ok(OptimizerState {
            m: params.entries().iter().map(|(n, t)| zeros(n, t)).collect(),
            v: params.entries().iter().map(|(n, t)| zeros(n, t)).collect(),
            step: 0,
            hyper,
        })
    }

    /// Rebuilds a state from checkpointed parts, revalidating shapes.
    pub fn from_parts(
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        step: u64,
        hyper: AdamHyper,
    ) -> Result<OptimizerState> {
        hyper.validate()?;
        if m.len() != v.len() {
            return Err(Error::InvalidConfig(format!(
                "moment lists disagree: {} first vs {} second",
                m.len(),
                v.len()
            )));
        }
        for (a, b) in m.iter().zip(&v) {
            if a.shape() != b.shape() {
                return Err(Error::shape(format!(
                    "moment shapes disagree: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(OptimizerState { m, v, step, hyper })
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn hyper(&self) -> AdamHyper {
        self.hyper
    }

    pub fn all_finite(&self) -> bool {
        self.m
            .iter()
            .chain(&self.v)
            .all(|t| t.data().iter().all(|x| x.is_finite()))
    }
}

/// One Adam update: advances the step counter, folds the gradients into the
/// moment estimates, and moves every parameter against its bias-corrected
/// moment ratio. Gradients must be index-aligned with the parameter entries.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f32,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::InvalidConfig(format!(
            "got {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")));
    }
    for (i, g) in grads.iter().enumerate() {
        let (name, p) = &params.entries()[i];
        if g.shape() != p.shape() {
            return Err(Error::shape(format!(
                "gradient for {name}: {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if state.m[i].shape() != p.shape() {
            return Err(Error::shape(format!(
                "optimizer state for {name} does not match the parameter set"
            )));
        }
    }

    state.step += 1;
    let AdamHyper { beta1, beta2, eps } = state.hyper;
    let corr1 = 1.0 - beta1.powi(state.step as i32);
    let corr2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let p = &params.entries()[i].1;
        let g = grads[i].data();
        let mut w: Vec<f32> = p.data().to_vec();
        let mut m: Vec<f32> = state.m[i].data().to_vec();
        let mut v: Vec<f32> = state.v[i].data().to_vec();
        for j in 0..w.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        let shape = p.shape().to_vec();
        state.m[i] = Tensor::new(shape.clone(), m)?;
        state.v[i] = Tensor::new(shape.clone(), v)?;
        params.set_value(i, Tensor::new(shape, w)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(w: f32) -> ParamSet {
        let mut p = ParamSet::default();
        p.push("w", Tensor::scalar(w)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_only_advances_the_step() {
        let mut params = single_param(0.75);
        let mut state = OptimizerState::new(&params, AdamHyper::default()).unwrap();
        adam_step(&mut params, &[Tensor::scalar(0.0)], &mut state, 0.1).unwrap();
        assert_eq!(params.entries()[0].1.data(), &[0.75]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_on_quadratic_matches_hand_value() {
        // f(w) = w² at w = 1: both bias-corrected moments reduce to the raw
        // gradient at step one, so the update is lr · g/(|g| + ε) ≈ lr.
        let mut params = single_param(1.0);
        let mut state = OptimizerState::new(&params, AdamHyper::default()).unwrap();
        let g = 2.0 * params.entries()[0].1.data()[0];
        adam_step(&mut params, &[Tensor::scalar(g)], &mut state, 0.1).unwrap();
        let w = params.entries()[0].1.data()[0];
        assert!((w - 0.9).abs() < 1e-5, "w after one step: {w}");
    }

    #[test]
    fn two_hundred_steps_collapse_the_quadratic() {
        let mut params = single_param(1.0);
        let mut state = OptimizerState::new(&params, AdamHyper::default()).unwrap();
        for _ in 0..200 {
            let g = 2.0 * params.entries()[0].1.data()[0];
            adam_step(&mut params, &[Tensor::scalar(g)], &mut state, 0.1).unwrap();
        }
        let w = params.entries()[0].1.data()[0];
        assert!(w.abs() < 1e-2, "w after 200 steps: {w}");
        assert_eq!(state.step_count(), 200);
        assert!(state.all_finite());
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut params = single_param(0.3);
            let mut state = OptimizerState::new(&params, AdamHyper::default()).unwrap();
            for k in 0..50 {
                let g = (k as f32 * 0.37).sin();
                adam_step(&mut params, &[Tensor::scalar(g)], &mut state, 1e-3).unwrap();
            }
            params.entries()[0].1.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_and_count_mismatches_are_rejected() {
        let mut params = single_param(1.0);
        let mut state = OptimizerState::new(&params, AdamHyper::default()).unwrap();
        assert!(matches!(
            adam_step(&mut params, &[], &mut state, 0.1),
            Err(Error::InvalidConfig(_))
        ));
        let bad = Tensor::zeros(&[2]);
        assert!(matches!(
            adam_step(&mut params, &[bad], &mut state, 0.1),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            adam_step(&mut params, &[Tensor::scalar(1.0)], &mut state, 0.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn state_round_trips_through_parts() {
        let mut params = single_param(1.0);
        let mut state = OptimizerState::new(&params, AdamHyper::default()).unwrap();
        adam_step(&mut params, &[Tensor::scalar(0.5)], &mut state, 0.1).unwrap();
        let rebuilt = OptimizerState::from_parts(
            state.first_moments().to_vec(),
            state.second_moments().to_vec(),
            state.step_count(),
            state.hyper(),
        )
        .unwrap();
        assert_eq!(rebuilt.first_moments()[0].data(), state.first_moments()[0].data());
        assert_eq!(rebuilt.second_moments()[0].data(), state.second_moments()[0].data());
        assert_eq!(rebuilt.step_count(), 1);
        assert!(matches!(
            OptimizerState::from_parts(
                vec![Tensor::zeros(&[2])],
                vec![Tensor::zeros(&[3])],
                0,
                AdamHyper::default(),
            ),
            Err(Error::Shape(_))
        ));
    }
}
