//! Named parameter storage and the small layers built on it.

use std::ops::Index;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ssm::{init_s4d, SsmParams, SsmVars};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count of every parameter whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Same names and shapes, in the same order.
    pub fn congruent<U: Real>(&self, other: &ParamStore<U>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Overwrites every tensor from `other`, which must be congruent.
    pub fn assign_from<U: Real>(&mut self, other: &ParamStore<U>) -> Result<()> {
        if !self.congruent(other) {
            return Err(Error::invalid("parameter sets are not congruent"));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            *dst = src.cast();
        }
        Ok(())
    }

    /// Records every tensor on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
        }
    }
}

/// Parameters recorded on a tape, indexable by [`ParamId`].
pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Wraps already-recorded variables, in store order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

impl<'t, T: Real> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;
    fn index(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }
}

/// How a freshly created weight matrix is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    Normal(f64),
    Zeros,
}

fn init_weight<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    init: Init,
    rng: &mut R,
) -> Tensor<T> {
    match init {
        Init::XavierUniform => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::uniform(shape, bound, rng)
        }
        Init::Normal(std) => Tensor::randn(shape, std, rng),
        Init::Zeros => Tensor::zeros(shape),
    }
}

/// `y = x·W + b`, `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            init_weight(&[fan_in, fan_out], fan_in, fan_out, init, rng),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(p[self.w], p[self.b])
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// `groups` independent linears, see [`Var::grouped_linear`].
#[derive(Clone, Copy, Debug)]
pub struct GroupedLinear {
    pub w: ParamId,
    pub b: ParamId,
    pub groups: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub shared_input: bool,
}

impl GroupedLinear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        groups: usize,
        fan_in: usize,
        fan_out: usize,
        shared_input: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            init_weight(&[groups, fan_in, fan_out], fan_in, fan_out, init, rng),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[groups, fan_out]));
        GroupedLinear {
            w,
            b,
            groups,
            fan_in,
            fan_out,
            shared_input,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.grouped_linear(p[self.w], p[self.b], self.shared_input)
    }

    pub fn num_params(&self) -> usize {
        self.groups * (self.fan_in * self.fan_out + self.fan_out)
    }
}

const SSM_FIELDS: [&str; 8] = [
    "log_neg_re_a",
    "im_a",
    "b_re",
    "b_im",
    "c_re",
    "c_im",
    "d_skip",
    "log_dt",
];

/// An S4D layer whose parameters live in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct SsmLayer {
    pub ids: [ParamId; 8],
}

impl SsmLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        state: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let p: SsmParams<T> = init_s4d(channels, state, rng)?;
        let tensors = p.tensors();
        let ids = std::array::from_fn(|i| store.add(format!("{name}.{}", SSM_FIELDS[i]), tensors[i].clone()));
        Ok(SsmLayer { ids })
    }

    pub fn vars<'t, T: Real>(&self, p: &Bound<'t, T>) -> SsmVars<'t, T> {
        SsmVars::from_array(self.ids.map(|id| p[id]))
    }

    pub fn params<T: Real>(&self, store: &ParamStore<T>) -> SsmParams<T> {
        SsmParams::from_tensors(self.ids.map(|id| store.get(id).clone()))
    }
}
