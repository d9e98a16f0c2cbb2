//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{GradSet, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates every trainable parameter of `model` with the matching entry
    /// of `grads` (visit order). Frozen parameters are not touched.
    pub fn step(&mut self, model: &mut impl ParamSet, grads: &GradSet) {
        self.t += 1;
        let c = self.config;
        let (bc1, bc2) = (1.0 - c.beta1.powi(self.t), 1.0 - c.beta2.powi(self.t));
        let mut k = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |_, p| {
            if !p.trainable {
                return;
            }
            let g = grads.grads[k].data();
            if m.len() <= k {
                m.push(vec![0.0; g.len()]);
                v.push(vec![0.0; g.len()]);
            }
            let (mk, vk) = (&mut m[k], &mut v[k]);
            for (i, x) in p.value_mut().data_mut().iter_mut().enumerate() {
                mk[i] = c.beta1 * mk[i] + (1.0 - c.beta1) * g[i];
                vk[i] = c.beta2 * vk[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (mk[i] / bc1) / ((vk[i] / bc2).sqrt() + c.eps);
                *x -= c.lr * (update + c.weight_decay * *x);
            }
            k += 1;
        });
    }
}

/// Gradients of the trainable parameters of `model`, read from the graph
/// nodes `vars` they were bound to (visit order). Missing gradients are zero.
pub fn gather_grads(g: &Graph, model: &impl ParamSet, vars: &[Var]) -> GradSet {
    let mut grads = Vec::new();
    let mut i = 0;
    model.visit_params(&mut |_, p| {
        if p.trainable {
            grads.push(g.grad(vars[i]).unwrap_or_else(|| Tensor::zeros(p.value().shape())));
        }
        i += 1;
    });
    GradSet { grads }
}

/// Mean loss and mean gradient over `items`, each evaluated independently
/// by `f` under `exec`. Summation runs in input order, so the result does
/// not depend on the execution mode.
pub fn batch_gradient<T, E, F>(exec: Exec, items: &[T], f: F) -> Result<(f64, GradSet), E>
where
    T: Sync,
    E: Send,
    F: Fn(&T) -> Result<(f64, GradSet), E> + Sync + Send,
{
    let parts = exec.try_map(items, f)?;
    let mut total = GradSet::default();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    let n = parts.len().max(1) as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Param, Phase, Role};

    struct One(Param, Param);

    impl ParamSet for One {
        fn visit_params(&self, f: &mut dyn FnMut(String, &Param)) {
            f("x".into(), &self.0);
            f("frozen".into(), &self.1);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
            f("x".into(), &mut self.0);
            f("frozen".into(), &mut self.1);
        }
    }

    fn model(x: f64) -> One {
        let mut m = One(Param::new(Tensor::scalar(x), Role::Adapter), Param::new(Tensor::scalar(5.0), Role::Base));
        m.set_phase(Phase::Adapt);
        m
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut m = model(1.0);
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.0));
        opt.step(&mut m, &GradSet { grads: vec![Tensor::scalar(0.0)] });
        assert_eq!(m.0.value().item(), 1.0);
    }

    #[test]
    fn first_step_on_square_moves_by_lr() {
        let mut m = model(1.0);
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.0));
        let x = m.0.value().item();
        opt.step(&mut m, &GradSet { grads: vec![Tensor::scalar(2.0 * x)] });
        assert!((m.0.value().item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn frozen_parameters_stay_bit_identical() {
        let mut m = model(1.0);
        let before = m.1.value().clone();
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.01));
        for _ in 0..100 {
            let x = m.0.value().item();
            opt.step(&mut m, &GradSet { grads: vec![Tensor::scalar(2.0 * x)] });
        }
        assert_eq!(m.1.value(), &before);
        assert!(m.0.value().item().abs() < 0.5);
    }
}
