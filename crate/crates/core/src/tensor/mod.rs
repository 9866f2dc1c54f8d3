//! Dense parameter storage, the conditional velocity MLP and its optimizer.
//!
//! Everything is `f64`. A [`ParamSet`] is an ordered list of named tensors whose
//! names and shapes are fully determined by its [`MlpSpec`], so two sets built
//! from the same spec can be combined element-wise (EMA, AdamW, finite
//! differences) by walking the flat storage in order.

mod grad;
mod mlp;
mod optim;

pub use grad::{finite_difference, gradient_agreement, grad, value, GradAgreement, GradTape, Node, Tape};
pub use mlp::{forward, time_embedding, Cond};
pub use optim::{AdamW, AdamWConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smooth hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    /// Derivative at pre-activation `z`, given `y = apply(z)`.
    #[inline]
    pub fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

/// Architecture of the velocity network.
///
/// The input is `[x_t, time features, one-hot prompt]`, where the one-hot block
/// has `num_prompts + 1` slots; the last slot is the null prompt used for
/// guidance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub data_dim: usize,
    pub time_embed_dim: usize,
    pub num_prompts: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn prompt_embed_dim(&self) -> usize {
        self.num_prompts + 1
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_embed_dim + self.prompt_embed_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.data_dim
    }

    /// `(fan_in, fan_out)` for every dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim();
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.output_dim()));
        dims
    }

    /// Tensor names and shapes, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.layer_dims()
            .into_iter()
            .enumerate()
            .flat_map(|(l, (fan_in, fan_out))| {
                [
                    (format!("layer{l}.weight"), vec![fan_out, fan_in]),
                    (format!("layer{l}.bias"), vec![fan_out]),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::InvalidInput("data_dim must be positive".into()));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidInput(
                "time_embed_dim must be even (sin/cos pairs)".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidInput("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// A named, shaped block of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All parameters of one network copy.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    spec: MlpSpec,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let tensors = spec
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                Tensor {
                    name,
                    shape,
                    data: vec![0.0; n],
                }
            })
            .collect();
        Self {
            spec: spec.clone(),
            tensors,
        }
    }

    /// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(spec);
        for (l, (fan_in, _)) in spec.layer_dims().into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for t in &mut params.tensors[2 * l..2 * l + 2] {
                for v in &mut t.data {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        params
    }

    /// Rebuilds a set from explicit tensors, checking them against `spec`.
    pub fn from_tensors(spec: &MlpSpec, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = spec.layout();
        if layout.len() != tensors.len() {
            return Err(Error::shape("tensor count", layout.len(), tensors.len()));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if *name != t.name || *shape != t.shape {
                return Err(Error::shape(
                    "tensor layout",
                    format!("{name}{shape:?}"),
                    format!("{}{:?}", t.name, t.shape),
                ));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::shape(&t.name, shape.iter().product::<usize>(), t.data.len()));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            tensors,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub(crate) fn weight(&self, layer: usize) -> &[f64] {
        &self.tensors[2 * layer].data
    }

    pub(crate) fn bias(&self, layer: usize) -> &[f64] {
        &self.tensors[2 * layer + 1].data
    }

    pub(crate) fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let (w, rest) = self.tensors[2 * layer..].split_at_mut(1);
        (&mut w[0].data, &mut rest[0].data)
    }

    /// Flat view in storage order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    /// Reads the `idx`-th parameter in storage order.
    pub fn get_flat(&self, idx: usize) -> f64 {
        let (t, i) = self.locate(idx);
        self.tensors[t].data[i]
    }

    pub fn set_flat(&mut self, idx: usize, value: f64) {
        let (t, i) = self.locate(idx);
        self.tensors[t].data[i] = value;
    }

    /// Tensor name and in-tensor offset for flat index `idx`.
    pub fn describe_flat(&self, idx: usize) -> (String, usize) {
        let (t, i) = self.locate(idx);
        (self.tensors[t].name.clone(), i)
    }

    fn locate(&self, mut idx: usize) -> (usize, usize) {
        for (t, tensor) in self.tensors.iter().enumerate() {
            if idx < tensor.data.len() {
                return (t, idx);
            }
            idx -= tensor.data.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn ensure_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::shape(
                "parameter set architecture",
                format!("{:?}", self.spec),
                format!("{:?}", other.spec),
            ));
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.values_mut().for_each(|v| *v = value);
    }

    /// Largest absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.spec == other.spec
            && self
                .values()
                .zip(other.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
