//! AdaDelta with an additive L2 gradient term.

use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaDeltaConfig {
    pub rho: f64,
    pub epsilon: f64,
    /// Coefficient of the `l2 * theta` term added to every gradient.
    pub l2: f64,
}

impl Default for AdaDeltaConfig {
    fn default() -> Self {
        AdaDeltaConfig {
            rho: 0.95,
            epsilon: 1e-6,
            l2: 1e-5,
        }
    }
}

/// Running averages `E[g^2]` and `E[dx^2]`, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaDeltaState {
    config: AdaDeltaConfig,
    sq_grad: Vec<Tensor>,
    sq_update: Vec<Tensor>,
}

impl AdaDeltaState {
    pub fn new(store: &ParamStore, config: AdaDeltaConfig) -> Result<Self> {
        if !(config.rho > 0.0 && config.rho < 1.0) {
            return Err(Error::invalid(format!(
                "AdaDelta rho must be in (0, 1), got {}",
                config.rho
            )));
        }
        if config.epsilon.is_nan() || config.epsilon <= 0.0 || config.l2.is_nan() || config.l2 < 0.0
        {
            return Err(Error::invalid(
                "AdaDelta epsilon must be positive and l2 non-negative",
            ));
        }
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        Ok(AdaDeltaState {
            config,
            sq_grad: zeros(),
            sq_update: zeros(),
        })
    }

    pub fn config(&self) -> AdaDeltaConfig {
        self.config
    }

    pub fn sq_grad(&self) -> &[Tensor] {
        &self.sq_grad
    }

    pub fn sq_update(&self) -> &[Tensor] {
        &self.sq_update
    }

    /// Applies one update to every tensor marked as touched in `grads`.
    /// Gradients are validated before anything is modified, so a rejected
    /// step leaves the store untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != store.len() || self.sq_grad.len() != store.len() {
            return Err(Error::Dimension {
                op: "adadelta_step",
                left: vec![store.len()],
                right: vec![grads.len()],
            });
        }
        for id in store.ids() {
            let g = grads.get(id);
            if g.shape() != store.get(id).shape() {
                return Err(Error::Dimension {
                    op: "adadelta_step",
                    left: store.get(id).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }

        let AdaDeltaConfig { rho, epsilon, l2 } = self.config;
        for id in store.ids().filter(|&id| grads.is_touched(id)) {
            let i = id.index();
            let g = grads.get(id).data();
            let eg = self.sq_grad[i].data_mut();
            let edx = self.sq_update[i].data_mut();
            let theta = store.get_mut(id).data_mut();
            for k in 0..theta.len() {
                let gk = g[k] + l2 * theta[k];
                eg[k] = rho * eg[k] + (1.0 - rho) * gk * gk;
                let dx = -((edx[k] + epsilon) / (eg[k] + epsilon)).sqrt() * gk;
                edx[k] = rho * edx[k] + (1.0 - rho) * dx * dx;
                theta[k] += dx;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(vec![v])).unwrap();
        s
    }

    fn no_l2() -> AdaDeltaConfig {
        AdaDeltaConfig {
            l2: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut store = scalar_store(0.25);
        let mut st = AdaDeltaState::new(&store, no_l2()).unwrap();
        let g = Gradients::zeros_like(&store);
        for _ in 0..5 {
            st.step(&mut store, &g).unwrap();
        }
        assert_eq!(store.get(store.id("x").unwrap()).data(), &[0.25]);
    }

    #[test]
    fn first_step_magnitude() {
        // E[g^2] = 0.05, dx = -sqrt(1e-6 / (0.05 + 1e-6)) = -4.472091234e-3
        let mut store = scalar_store(0.0);
        let id = store.id("x").unwrap();
        let mut st = AdaDeltaState::new(&store, no_l2()).unwrap();
        let mut g = Gradients::zeros_like(&store);
        g.get_mut(id).data_mut()[0] = 1.0;
        st.step(&mut store, &g).unwrap();
        let dx = store.get(id).data()[0];
        assert!((dx - (-4.472091234310838e-3)).abs() < 1e-15, "{dx}");
    }

    #[test]
    fn second_identical_step_matches_hand_evaluation() {
        let mut store = scalar_store(0.0);
        let id = store.id("x").unwrap();
        let mut st = AdaDeltaState::new(&store, no_l2()).unwrap();
        let mut g = Gradients::zeros_like(&store);
        g.get_mut(id).data_mut()[0] = 1.0;
        let mut prev = 0.0;
        st.step(&mut store, &g).unwrap();
        let d1 = store.get(id).data()[0] - prev;
        prev = store.get(id).data()[0];
        st.step(&mut store, &g).unwrap();
        let d2 = store.get(id).data()[0] - prev;
        // Hand evaluation of the second step: E[g^2] = 0.0975,
        // E[dx^2] = 0.05 * d1^2, dx2 = -sqrt((E[dx^2] + eps) / (0.0975 + eps)).
        let edx = 0.05 * d1 * d1;
        let expected = -((edx + 1e-6) / (0.0975 + 1e-6f64)).sqrt();
        assert!((d2 - expected).abs() < 1e-13, "{d2} vs {expected}");
        // E[dx^2] warms up faster than E[g^2] here, so the second step is
        // slightly larger: 4.5291e-3 against 4.4721e-3.
        assert!((d2 - (-4.529062265533207e-3)).abs() < 1e-15, "{d2}");
        assert!(d2.abs() > d1.abs());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = scalar_store(1.0);
        let id = store.id("x").unwrap();
        let mut st = AdaDeltaState::new(&store, no_l2()).unwrap();
        let mut g = Gradients::zeros_like(&store);
        g.get_mut(id).data_mut()[0] = f64::NAN;
        let err = st.step(&mut store, &g).unwrap_err();
        assert!(err.to_string().contains("`x`"));
        assert_eq!(store.get(id).data(), &[1.0]);
    }

    #[test]
    fn l2_shrinks_norm_without_data_gradient() {
        let mut store = ParamStore::new();
        store
            .add("w", Tensor::vector(vec![0.08, -0.05, 0.09, -0.07]))
            .unwrap();
        let mut st = AdaDeltaState::new(&store, AdaDeltaConfig::default()).unwrap();
        let g = Gradients::zeros_like(&store);
        let mut norm = store.get(store.id("w").unwrap()).sum_squares();
        for _ in 0..10 {
            st.step(&mut store, &g).unwrap();
            let next = store.get(store.id("w").unwrap()).sum_squares();
            assert!(next < norm);
            norm = next;
        }
    }

    #[test]
    fn untouched_tensors_are_not_updated() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![0.5])).unwrap();
        let b = store.add("b", Tensor::vector(vec![0.5])).unwrap();
        let mut st = AdaDeltaState::new(&store, AdaDeltaConfig::default()).unwrap();
        let mut g = Gradients::untouched(&store);
        g.get_mut(a).data_mut()[0] = 1.0;
        st.step(&mut store, &g).unwrap();
        assert_ne!(store.get(a).data()[0], 0.5);
        assert_eq!(store.get(b).data()[0], 0.5);
        assert_eq!(st.sq_grad()[b.index()].data()[0], 0.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let store = scalar_store(0.0);
        let bad = AdaDeltaConfig {
            rho: 1.0,
            ..Default::default()
        };
        assert!(AdaDeltaState::new(&store, bad).is_err());
    }
}
