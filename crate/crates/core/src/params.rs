//! Named parameter storage shared by the toy models.
//!
//! Model weight structs are generic over their slot type: `Foo<Param>` holds
//! weights, `Foo<Var>` holds the same weights bound into a [`Graph`]. Both
//! are walked by the same `visit` code, so names, optimizer state and
//! gradients always line up.

use std::sync::Arc;

use crate::numerics::{Graph, Tensor, Var};

/// Which part of a model a parameter belongs to; decides trainability per phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Pre-trained weights, frozen once fusion training starts.
    Base,
    /// Weights copied from the acoustic model; always frozen.
    Transplant,
    /// Adapter matrices and gates; the only weights fusion training updates.
    Adapter,
}

#[derive(Clone, Debug)]
pub struct Param {
    value: Arc<Tensor>,
    pub role: Role,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Tensor, role: Role) -> Self {
        Self { value: Arc::new(value), role, trainable: false }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    /// Mutable access; clones the buffer if a graph still shares it.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: Tensor) {
        self.value = Arc::new(value);
    }

    pub fn bind(&self, g: &mut Graph) -> Var {
        g.leaf(self.shared(), self.trainable)
    }
}

/// Training phase; decides which roles receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Frozen,
    Pretrain,
    Adapt,
}

impl Phase {
    pub fn trains(self, role: Role) -> bool {
        matches!((self, role), (Phase::Pretrain, Role::Base) | (Phase::Adapt, Role::Adapter))
    }
}

/// Declares a slot struct whose fields are all of the slot type `P`.
macro_rules! slots {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug)]
        pub struct $name<P> {
            $(pub $field: P,)*
        }

        impl<P> $name<P> {
            pub fn map<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> $name<Q> {
                $name { $($field: f(&self.$field),)* }
            }

            pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &P)) {
                $(f(format!("{prefix}.{}", stringify!($field)), &self.$field);)*
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
                $(f(format!("{prefix}.{}", stringify!($field)), &mut self.$field);)*
            }
        }
    };
}

pub(crate) use slots;

/// Anything that can enumerate its named parameters in a stable order.
pub trait ParamSet {
    fn visit_params(&self, f: &mut dyn FnMut(String, &Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param));

    fn set_phase(&mut self, phase: Phase) {
        self.visit_params_mut(&mut |_, p| p.trainable = phase.trains(p.role));
    }

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| {
            if p.trainable {
                n += p.value().len();
            }
        });
        n
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| out.push((name, p.value().clone())));
        out
    }
}

/// Gradients of every trainable parameter, in visit order.
#[derive(Clone, Debug, Default)]
pub struct GradSet {
    pub grads: Vec<Tensor>,
}

impl GradSet {
    pub fn add_assign(&mut self, other: &GradSet) {
        if self.grads.is_empty() {
            self.grads = other.grads.clone();
            return;
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }
}
