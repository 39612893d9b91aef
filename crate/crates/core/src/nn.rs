//! Parameter declaration and the small layer types shared by the encoder,
//! adapters and heads.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::rng::{normal, uniform};
use crate::Result;

/// Initial value of a declared parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

/// One declared parameter, recorded without allocating it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Receives parameter declarations while a model is being assembled.
///
/// [`StoreSink`] allocates and initializes into a [`ParamStore`];
/// [`ShapeInventory`] only records shapes, which is enough to enumerate
/// multi-million parameter presets without allocating them.
pub trait ParamSink {
    fn declare(&mut self, path: &str, shape: &[usize], init: Init) -> Result<ParamId>;
}

/// Allocating sink. Everything is declared frozen; the adaptation
/// strategy decides what becomes trainable.
pub struct StoreSink<'a, S: Scalar, R: rand::Rng> {
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut R,
}

impl<S: Scalar, R: rand::Rng> ParamSink for StoreSink<'_, S, R> {
    fn declare(&mut self, path: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<S> = match init {
            Init::Zeros => vec![S::zero(); n],
            Init::Ones => vec![S::one(); n],
            Init::Uniform(b) => (0..n).map(|_| S::of(uniform(self.rng, -b, b))).collect(),
            Init::Normal(sd) => (0..n).map(|_| S::of(sd * normal(self.rng))).collect(),
        };
        self.store.insert(path, Tensor::new(shape.to_vec(), data)?, false)
    }
}

/// Shape-only sink; ids index into `entries`.
#[derive(Clone, Debug, Default)]
pub struct ShapeInventory {
    pub entries: Vec<ParamSpec>,
}

impl ParamSink for ShapeInventory {
    fn declare(&mut self, path: &str, shape: &[usize], _init: Init) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.path == path) {
            return Err(crate::Error::DuplicateParam(path.to_string()));
        }
        self.entries.push(ParamSpec {
            path: path.to_string(),
            shape: shape.to_vec(),
        });
        Ok(ParamId(self.entries.len() - 1))
    }
}

impl ShapeInventory {
    pub fn numel(&self, id: ParamId) -> usize {
        self.entries[id.index()].numel()
    }

    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(ParamSpec::numel).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
}

impl Activation {
    pub fn apply<S: Scalar>(self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(crate::Error::Parse(format!("unknown activation {other}"))),
        }
    }
}

/// Fully connected layer `x·W + b` with `W: [in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform(±1/√in) weights, zero bias.
    pub fn declare(sink: &mut dyn ParamSink, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::declare_with(sink, prefix, in_dim, out_dim, Init::Uniform(bound))
    }

    pub fn declare_with(sink: &mut dyn ParamSink, prefix: &str, in_dim: usize, out_dim: usize, w_init: Init) -> Result<Self> {
        Ok(Linear {
            w: sink.declare(&format!("{prefix}.w"), &[in_dim, out_dim], w_init)?,
            b: sink.declare(&format!("{prefix}.b"), &[out_dim], Init::Zeros)?,
            in_dim,
            out_dim,
        })
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    /// `[T×in] → [T×out]`; a rank-1 input is treated as a single row.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Learnable LayerNorm scale and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl Norm {
    pub fn declare(sink: &mut dyn ParamSink, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Norm {
            gamma: sink.declare(&format!("{prefix}.gamma"), &[dim], Init::Ones)?,
            beta: sink.declare(&format!("{prefix}.beta"), &[dim], Init::Zeros)?,
            dim,
        })
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}
