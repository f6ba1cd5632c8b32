//! Parameter declaration and the small building blocks shared by the encoder,
//! the adapters and the SV head.
//!
//! Model construction goes through [`ParamSink`]. [`ParamStore`] materializes
//! every declared tensor; [`ParamCounter`] only records the declarations, which
//! lets parameter accounting run on full-size presets without allocating them.

use crate::autodiff::{Tape, Var, DEFAULT_LN_EPS};
use crate::error::Result;
use crate::param::{Component, ParamId, ParamKind, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Centered uniform with half-width `sqrt(6 / (fan_in + fan_out))`.
    Xavier {
        fan_in: usize,
        fan_out: usize,
        seed: u64,
    },
    Zeros,
    Value(f64),
}

#[derive(Debug, Clone)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub component: Component,
    pub kind: ParamKind,
    pub init: Init,
}

impl ParamDecl {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize(&self) -> Tensor {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Value(v) => Tensor::filled(&self.shape, v),
            Init::Xavier {
                fan_in,
                fan_out,
                seed,
            } => {
                let hw = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut r = rng::stream(seed, &self.name, &[]);
                Tensor::with_shape(self.shape.clone(), rng::uniform_vec(&mut r, self.numel(), hw))
            }
        }
    }
}

pub trait ParamSink {
    fn declare(&mut self, decl: ParamDecl) -> ParamId;
}

impl ParamSink for ParamStore {
    fn declare(&mut self, decl: ParamDecl) -> ParamId {
        let value = decl.materialize();
        self.add(decl.name, value, decl.component, decl.kind)
    }
}

/// Records declarations without allocating tensors.
#[derive(Debug, Default)]
pub struct ParamCounter {
    pub decls: Vec<ParamDecl>,
}

impl ParamSink for ParamCounter {
    fn declare(&mut self, decl: ParamDecl) -> ParamId {
        self.decls.push(decl);
        ParamId(self.decls.len() - 1)
    }
}

/// Affine map `x · W + b` with `W: [in × out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn declare(
        sink: &mut dyn ParamSink,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        component: Component,
        seed: u64,
        zero_weight: bool,
    ) -> Self {
        let init = if zero_weight {
            Init::Zeros
        } else {
            Init::Xavier {
                fan_in,
                fan_out,
                seed,
            }
        };
        let weight = sink.declare(ParamDecl {
            name: format!("{name}.weight"),
            shape: vec![fan_in, fan_out],
            component,
            kind: ParamKind::Weight,
            init,
        });
        let bias = sink.declare(ParamDecl {
            name: format!("{name}.bias"),
            shape: vec![fan_out],
            component,
            kind: ParamKind::Bias,
            init: Init::Zeros,
        });
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

/// Layer-norm affine parameters, `gamma = 1` and `beta = 0` at init.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn declare(sink: &mut dyn ParamSink, name: &str, dim: usize, component: Component) -> Self {
        let gamma = sink.declare(ParamDecl {
            name: format!("{name}.gamma"),
            shape: vec![dim],
            component,
            kind: ParamKind::Norm,
            init: Init::Value(1.0),
        });
        let beta = sink.declare(ParamDecl {
            name: format!("{name}.beta"),
            shape: vec![dim],
            component,
            kind: ParamKind::Norm,
            init: Init::Zeros,
        });
        Norm { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, DEFAULT_LN_EPS)
    }
}
