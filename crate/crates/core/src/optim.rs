//! Adam with coupled L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Variant};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant_tag: Option<Variant>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            variant_tag: None,
        }
    }
}

impl OptimConfig {
    /// Learning rate and decay used for each variant: 1e-4 with decay 1e-4,
    /// except the M1 replica, which trains at 1e-5 without decay.
    pub fn for_variant(v: Variant) -> Self {
        let base = OptimConfig {
            variant_tag: Some(v),
            ..Default::default()
        };
        match v {
            Variant::M1 => OptimConfig {
                learning_rate: 1e-5,
                weight_decay: 0.0,
                ..base
            },
            _ => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// First and second moments per parameter, in parameter-store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    fn check(&self, params: &ParamStore<T>) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer state covers {} parameters, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "optimizer moments for {} have shape {:?}, parameter has {:?}",
                    p.name,
                    m.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One Adam update from the gradients stored in `params`. A parameter
/// without a gradient is treated as having a zero gradient. Gradients are
/// checked for finiteness before anything is modified.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &OptimConfig) -> Result<()> {
    state.check(params)?;
    for p in params.iter() {
        if let Some(g) = &p.grad {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, wd, eps) = (cfg.learning_rate, cfg.weight_decay, cfg.epsilon);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = p.value.data_mut();
        let grad = p.grad.as_ref().map(|g| g.data());
        for j in 0..theta.len() {
            let th = theta[j].as_f64();
            let g = grad.map_or(0.0, |g| g[j].as_f64()) + wd * th;
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * g;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * g * g;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let step = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            if step != 0.0 {
                theta[j] = T::of(th - step);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut s = store(0.0);
        s.at_mut(0).grad = Some(Tensor::scalar(1.0));
        let mut st = AdamState::new(&s);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adam_step(&mut s, &mut st, &cfg).unwrap();
        assert!((s.at(0).value.item() + 1e-4).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::from_fn(&[5], |i| i as f32 - 2.5)).unwrap();
        s.at_mut(0).grad = Some(Tensor::zeros(&[5]));
        let before = s.at(0).value.clone();
        let mut st = AdamState::new(&s);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adam_step(&mut s, &mut st, &cfg).unwrap();
        assert_eq!(s.at(0).value, before);
        assert_eq!(st.t, 1);
        assert!(st.m[0].data().iter().chain(st.v[0].data()).all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_names_parameter() {
        let mut s = store(1.0);
        s.at_mut(0).grad = Some(Tensor::scalar(f32::NAN));
        let mut st = AdamState::new(&s);
        let msg = adam_step(&mut s, &mut st, &OptimConfig::default()).unwrap_err().to_string();
        assert!(msg.contains("theta"), "{msg}");
        assert_eq!(st.t, 0);
    }

    #[test]
    fn m1_preset() {
        let c = OptimConfig::for_variant(Variant::M1);
        assert_eq!((c.learning_rate, c.weight_decay), (1e-5, 0.0));
        let c = OptimConfig::for_variant(Variant::M3);
        assert_eq!((c.learning_rate, c.weight_decay), (1e-4, 1e-4));
    }
}
