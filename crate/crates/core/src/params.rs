//! Named parameter storage and the forward-pass context.

use brainformer_tensor::{Result as TensorResult, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
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

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every value, checking names and shapes against `self`.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                self.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Config(format!(
                    "parameter {i}: expected {} {:?}, got {name} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::randn(shape, std, &mut self.rng).expect("parameter shapes are positive")
    }

    /// Fan-in scaled normal, `std = 1/√fan_in`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.normal(shape, 1.0 / (fan_in as f64).sqrt())
    }

    /// He initialization for layers followed by ReLU.
    pub fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    /// `I + N(0, std²)`.
    pub fn near_identity(&mut self, n: usize, std: f64) -> Tensor {
        let mut t = self.normal(&[n, n], std);
        for i in 0..n {
            t.data_mut()[i * n + i] += 1.0;
        }
        t
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::zeros(shape).expect("parameter shapes are positive")
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::ones(shape).expect("parameter shapes are positive")
    }
}

/// Forward-pass context: a tape plus the tape handle of every parameter.
pub struct Ctx<'t> {
    pub tape: &'t mut Tape,
    vars: Vec<Var>,
    trace: Option<Vec<(String, Vec<usize>)>>,
}

impl<'t> Ctx<'t> {
    /// Records every parameter as a trainable leaf.
    pub fn new(tape: &'t mut Tape, params: &ParamStore) -> Self {
        let vars = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Ctx {
            tape,
            vars,
            trace: None,
        }
    }

    /// Records every parameter as a constant (inference).
    pub fn frozen(tape: &'t mut Tape, params: &ParamStore) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        Ctx {
            tape,
            vars,
            trace: None,
        }
    }

    /// Uses handles that were already recorded, one per parameter in order.
    pub fn from_vars(tape: &'t mut Tape, vars: Vec<Var>) -> Self {
        Ctx {
            tape,
            vars,
            trace: None,
        }
    }

    /// Collect `(label, shape)` pairs passed to [`Ctx::note`].
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn note(&mut self, label: impl FnOnce() -> String, v: Var) {
        if let Some(trace) = &mut self.trace {
            trace.push((label(), self.tape.shape(v).to_vec()));
        }
    }

    pub fn take_trace(&mut self) -> Vec<(String, Vec<usize>)> {
        self.trace.take().unwrap_or_default()
    }

    /// Adds a per-channel bias `[C]` to a `[C, ...]` feature map.
    pub fn add_channel_bias(&mut self, x: Var, bias: ParamId) -> TensorResult<Var> {
        let c = self.tape.shape(x)[0];
        let rank = self.tape.shape(x).len();
        let mut shape = vec![1; rank];
        shape[0] = c;
        let b = self.tape.reshape(self.p(bias), &shape)?;
        self.tape.add(x, b)
    }
}
