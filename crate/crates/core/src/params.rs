//! Named parameter storage and the small layer descriptors built on it.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Which learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// The pixel encoder, the stand-in for a backbone.
    Backbone,
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F = f32> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<F>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<F = f32> {
    params: Vec<Param<F>>,
    index: BTreeMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: BTreeMap::new() }
    }

    /// Registers a parameter; names must be unique.
    pub fn insert(&mut self, name: &str, group: ParamGroup, tensor: Tensor<F>) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = self.params.len();
        self.params.push(Param { name: name.to_string(), group, tensor: tensor.with_grad() });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn get(&self, id: usize) -> &Param<F> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param<F> {
        &mut self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    /// Replaces a parameter's values by name, keeping its registered shape.
    pub fn assign(&mut self, name: &str, tensor: Tensor<F>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let p = &mut self.params[id];
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "assign",
                left: p.tensor.shape().to_vec(),
                right: tensor.shape().to_vec(),
            });
        }
        p.tensor = tensor.with_grad();
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Records every parameter as a tape leaf, in registration order.
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(&p.tensor)).collect()
    }

    /// Moves leaf gradients from `tape` into the stored tensors.
    pub fn collect_grads(&mut self, tape: &Tape<F>, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), group: p.group, tensor: p.tensor.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn linear(
        &mut self,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| F::from_f64(rng.gen_range(-bound..bound)));
        let w = self.insert(&alloc::format!("{name}.weight"), group, w);
        let b = self.insert(&alloc::format!("{name}.bias"), group, Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    pub fn layer_norm(&mut self, name: &str, group: ParamGroup, width: usize) -> Norm {
        let gain = self.insert(&alloc::format!("{name}.gain"), group, Tensor::full(&[width], F::one()));
        let bias = self.insert(&alloc::format!("{name}.bias"), group, Tensor::zeros(&[width]));
        Norm { gain, bias }
    }
}

/// Resolves parameter ids to the tape variables bound for one forward pass.
pub trait Bind {
    type Bound;
    fn bind(&self, vars: &[Var]) -> Self::Bound;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear<H = usize> {
    pub w: H,
    pub b: H,
}

impl Bind for Linear {
    type Bound = Linear<Var>;
    fn bind(&self, vars: &[Var]) -> Linear<Var> {
        Linear { w: vars[self.w], b: vars[self.b] }
    }
}

impl Linear<Var> {
    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        tape.linear(x, self.w, self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm<H = usize> {
    pub gain: H,
    pub bias: H,
}

impl Bind for Norm {
    type Bound = Norm<Var>;
    fn bind(&self, vars: &[Var]) -> Norm<Var> {
        Norm { gain: vars[self.gain], bias: vars[self.bias] }
    }
}

impl Norm<Var> {
    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias)
    }
}
