use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Param;

/// Adam hyperparameters and step counter. Moment estimates live with each
/// parameter, so shared parameters keep a single state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(skip)]
    pub step_count: u64,
}

impl Default for OptimState {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
        }
    }
}

impl OptimState {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update on every parameter that received a
/// gradient, then clears all gradients.
pub fn adam_step(params: &[Param], state: &mut OptimState) -> Result<()> {
    state.validate()?;
    if !params.iter().any(Param::grad_ready) {
        return Err(Error::Graph(
            "optimizer step without gradients; run backward first".into(),
        ));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for p in params {
        if !p.grad_ready() {
            continue;
        }
        let mut slot = p.slot_mut();
        let slot = &mut *slot;
        let g = slot.grad.data();
        let m = slot.first_moment.data_mut();
        let v = slot.second_moment.data_mut();
        let w = slot.value.data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    for p in params {
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Mode, Tensor};
    use proptest::prelude::*;

    fn with_grad(value: f64, grad: f64) -> Param {
        let p = Param::new("p", Tensor::scalar(value));
        let mut g = Graph::new(Mode::Train, 0);
        let v = g.param(&p);
        let y = g.scale(v, grad);
        g.backward(y).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let p = with_grad(0.7, 0.0);
        let mut st = OptimState::default();
        adam_step(std::slice::from_ref(&p), &mut st).unwrap();
        assert_eq!(p.value().item(), 0.7);
        assert_eq!(st.step_count, 1);
        assert!(!p.grad_ready());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = with_grad(0.0, 1.0);
        adam_step(std::slice::from_ref(&p), &mut OptimState::default()).unwrap();
        assert!((p.value().item() + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn needs_gradients() {
        let p = Param::new("p", Tensor::scalar(1.0));
        assert!(matches!(
            adam_step(&[p], &mut OptimState::default()),
            Err(Error::Graph(_))
        ));
    }

    proptest! {
        #[test]
        fn first_step_sign(g in -100.0f64..100.0) {
            prop_assume!(g.abs() > 1e-6);
            let p = with_grad(0.0, g);
            adam_step(std::slice::from_ref(&p), &mut OptimState::default()).unwrap();
            prop_assert_eq!(p.value().item().signum(), -g.signum());
        }

        #[test]
        fn matches_scalar_reference(grads in proptest::collection::vec(-5.0f64..5.0, 1..12), w0 in -2.0f64..2.0, lr in 1e-5f64..1e-1) {
            let p = Param::new("p", Tensor::scalar(w0));
            let mut st = OptimState { lr, ..Default::default() };
            let (mut w, mut m, mut v) = (w0, 0.0f64, 0.0f64);
            for (t, &gr) in grads.iter().enumerate() {
                let mut g = Graph::new(Mode::Train, 0);
                let x = g.param(&p);
                let y = g.scale(x, gr);
                g.backward(y).unwrap();
                adam_step(std::slice::from_ref(&p), &mut st).unwrap();
                m = 0.9 * m + 0.1 * gr;
                v = 0.999 * v + 0.001 * gr * gr;
                let k = (t + 1) as i32;
                w -= lr * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
                prop_assert!((p.value().item() - w).abs() <= 1e-12);
            }
        }
    }
}
