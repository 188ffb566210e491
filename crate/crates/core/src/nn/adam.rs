use ndarray::Zip;

use super::{DenseNet, GradientBundle};
use crate::error::{Error, Result};

/// Adam moment estimates for one [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: GradientBundle,
    second: GradientBundle,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub const DEFAULT_LEARNING_RATE: f64 = 3e-4;

    pub fn new(net: &DenseNet, learning_rate: f64) -> Self {
        Self {
            first: GradientBundle::zeros_like(net),
            second: GradientBundle::zeros_like(net),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `net` in place.
pub fn adam_step(net: &mut DenseNet, state: &mut AdamState, grads: &GradientBundle) -> Result<()> {
    grads.check_shapes(net)?;
    state.first.check_shapes(net).map_err(|_| {
        Error::ArchitectureMismatch("optimizer state belongs to another network".into())
    })?;

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);

    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for (((layer, g), m), v) in net
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first.layers)
        .zip(&mut state.second.layers)
    {
        Zip::from(&mut layer.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .and(&g.weights)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        Zip::from(&mut layer.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Dense, LayerGrad};
    use ndarray::{array, Array1, Array2};

    fn scalar_net(w: f64) -> DenseNet {
        DenseNet::from_layers(vec![Dense {
            weights: array![[w]],
            bias: array![0.0],
        }])
        .unwrap()
    }

    fn scalar_grad(g: f64) -> GradientBundle {
        GradientBundle {
            layers: vec![LayerGrad {
                weights: array![[g]],
                bias: array![0.0],
            }],
            loss: 0.0,
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = scalar_net(1.25);
        let mut state = AdamState::new(&net, 3e-4);
        adam_step(&mut net, &mut state, &scalar_grad(0.0)).unwrap();
        assert_eq!(net.to_flat(), vec![1.25, 0.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction, m̂ = g and v̂ = g², so Δ = -lr·g/(|g|+ε).
        for g in [2.0, -0.3, 1e-3] {
            let mut net = scalar_net(0.0);
            let mut state = AdamState::new(&net, 3e-4);
            adam_step(&mut net, &mut state, &scalar_grad(g)).unwrap();
            let expected = -3e-4 * g / (g.abs() + 1e-8);
            let w = net.to_flat()[0];
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        }
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut net = scalar_net(0.0);
        let mut state = AdamState::new(&net, 0.05);
        for _ in 0..1000 {
            let w = net.to_flat()[0];
            adam_step(&mut net, &mut state, &scalar_grad(w - 3.0)).unwrap();
        }
        assert!((net.to_flat()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn step_counter_increases() {
        let mut net = scalar_net(0.0);
        let mut state = AdamState::new(&net, 1e-3);
        for k in 1..=5 {
            adam_step(&mut net, &mut state, &scalar_grad(1.0)).unwrap();
            assert_eq!(state.step_count(), k);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut net = scalar_net(0.0);
        let mut state = AdamState::new(&net, 1e-3);
        let bad = GradientBundle {
            layers: vec![LayerGrad {
                weights: Array2::zeros((2, 1)),
                bias: Array1::zeros(1),
            }],
            loss: 0.0,
        };
        assert!(adam_step(&mut net, &mut state, &bad).is_err());
    }
}
