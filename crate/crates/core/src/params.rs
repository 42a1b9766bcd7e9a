//! Named learnable parameters and the per-forward binding of them onto a tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{FaultInjection, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects parameter declarations while a model is being assembled.
#[derive(Default, Debug)]
pub struct ParamRegistry {
    specs: Vec<ParamSpec>,
    prefix: Vec<String>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push_scope(name);
        let out = f(self);
        self.pop_scope();
        out
    }

    pub fn declare(&mut self, name: &str, shape: Vec<usize>, init: Init) -> ParamId {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        debug_assert!(
            self.specs.iter().all(|s| s.name != full),
            "duplicate parameter {full}"
        );
        self.specs.push(ParamSpec {
            name: full,
            shape,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// FNV-1a, used to derive a per-parameter seed from its name so that models
/// sharing parameter names also share their initial values.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    /// Materializes declared parameters. Each tensor is drawn from its own
    /// stream seeded by `(seed, name)`.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let values = specs
            .iter()
            .map(|spec| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&spec.name));
                let n = spec.numel();
                let data: Vec<T> = match spec.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::TruncNormal(std) => {
                        let dist = Normal::new(0.0, std).expect("valid std");
                        (0..n)
                            .map(|_| loop {
                                let v: f64 = dist.sample(&mut rng);
                                if v.abs() <= 2.0 * std {
                                    break T::from_f64(v);
                                }
                            })
                            .collect()
                    }
                    Init::Uniform(bound) => {
                        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                        (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                    }
                };
                Tensor::new(spec.shape.clone(), data).expect("spec shape")
            })
            .collect();
        Self {
            names: specs.iter().map(|s| s.name.clone()).collect(),
            values,
        }
    }

    pub fn from_parts(names: Vec<String>, values: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::invalid(
                "parameter names and values differ in length",
            ));
        }
        Ok(Self { names, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// One forward pass: a tape plus lazily bound parameter leaves.
pub struct Session<'p, T: Scalar> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ParamStore<T>, track_grads: bool) -> Self {
        Self::with_fault(params, track_grads, None)
    }

    pub fn with_fault(
        params: &'p ParamStore<T>,
        track_grads: bool,
        fault: Option<FaultInjection>,
    ) -> Self {
        Self {
            tape: Tape::with_fault(fault),
            params,
            bound: vec![None; params.len()],
            track_grads,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let v = self
            .tape
            .leaf(self.params.values[id.0].clone(), self.track_grads)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.tape.constant(value)
    }

    /// Gradients for every parameter in store order; unused parameters get
    /// `None`.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}
