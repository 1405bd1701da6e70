//! Named parameter storage shared by all trainable modules.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Parameters by dotted name (`backbone.block0.qkv.w`, ...). Ordered, so
/// iteration and serialisation are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ParamStore { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    /// Put every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, |_| true)
    }

    /// Bind parameters as leaves where `trainable(name)` holds, constants
    /// elsewhere.
    pub fn bind_with<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters of one [`ParamStore`] placed on a tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Bind already-created vars under the given names.
    pub fn from_vars(names: &[String], vars: &[Var<'t>]) -> Self {
        Bound {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }
}

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn trunc_normal(shape: impl Into<Vec<usize>>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = shape.into();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

pub fn uniform(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = shape.into();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Derive an independent stream seed from a base seed and a counter.
pub fn derive_seed(base: u64, counter: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = base ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
