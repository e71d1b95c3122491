use crate::error::{Error, Result};
use crate::models::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 coefficient; `2 λ w` is added to kernel gradients before the moment update.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2: 1e-5,
        }
    }
}

/// First and second moments per parameter tensor plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.values().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let kinds = params.kinds().to_vec();
        for ((p, g), kind) in params.values().iter().zip(grads).zip(&kinds) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?} ({kind:?})",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon, l2 } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let decay = if kinds[i] == ParamKind::Kernel { 2.0 * l2 } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] + decay * *w;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BackboneKind, Mode, Model, ModelSpec};

    fn store() -> ParamStore {
        let spec = ModelSpec::new(Mode::End2End2d, BackboneKind::UNet, 1, 1, 2).with_base_filters(1);
        Model::new(&spec, 0).unwrap().params().clone()
    }

    fn no_l2() -> AdamConfig {
        AdamConfig {
            l2: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store();
        let before = p.clone();
        let grads: Vec<Tensor> = p.values().iter().map(|t| Tensor::full(t.shape(), 0.3)).collect();
        let mut adam = AdamState::new(&p, no_l2());
        adam.step(&mut p, &grads, 1e-3).unwrap();
        // m̂ = g and v̂ = g², so the step is lr · g / (|g| + eps)
        let expect = 1e-3 * 0.3 / (0.3 + 1e-8);
        for (a, b) in p.values().iter().zip(before.values()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store();
        let before = p.clone();
        let grads: Vec<Tensor> = p.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut adam = AdamState::new(&p, no_l2());
        adam.step(&mut p, &grads, 1e-3).unwrap();
        assert_eq!(p.values(), before.values());
    }

    #[test]
    fn weight_decay_shrinks_kernels_only() {
        let mut p = store();
        let before = p.clone();
        let grads: Vec<Tensor> = p.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut adam = AdamState::new(&p, AdamConfig { l2: 1e-2, ..AdamConfig::default() });
        adam.step(&mut p, &grads, 1e-3).unwrap();
        for ((a, b), kind) in p.values().iter().zip(before.values()).zip(p.kinds()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                // a step of lr toward zero; tiny weights may overshoot it
                if *kind == ParamKind::Kernel && y.abs() > 1e-3 {
                    assert!(x.abs() < y.abs());
                } else if *kind != ParamKind::Kernel {
                    assert_eq!(x, y);
                }
            }
        }
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = store();
        let mut adam = AdamState::new(&p, no_l2());
        assert!(adam.step(&mut p, &[], 1e-3).is_err());
    }
}
