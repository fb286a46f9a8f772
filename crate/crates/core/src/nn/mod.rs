//! Network building blocks with explicit backward passes.
//!
//! Every layer keeps its weights in a shared [`ParamStore`] and exposes a
//! `forward` that returns a cache plus a `backward` that accumulates into a
//! gradient store of identical layout. Layers are generic over the scalar so
//! the same code runs in `f32` for training and `f64` for gradient checks.

pub mod archive;
pub mod attention;
pub mod conv;
pub mod linear;
pub mod lstm;
pub mod model;
pub mod pool;

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn, NdFloat};
use num_traits::FromPrimitive;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

pub use attention::{AttentionConfig, AttentionInternals, SelfAttention};
pub use conv::Conv2d;
pub use linear::Linear;
pub use lstm::{Lstm, LstmState};
pub use model::{EncoderConfig, ForwardOutput, HeadKind, ModelConfig, VoNet};
pub use pool::{global_average_pool, global_average_pool_backward, FeatureMap};

/// Floating point type the network can run in.
pub trait Scalar: NdFloat + FromPrimitive {
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Slope of the leaky rectifier used after every convolution.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of tensors.
///
/// Model weights, gradients and optimizer moments all use this type with the
/// same names in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<ArrayD<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: ArrayD<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<F>> {
        self.tensors.iter_mut()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.add(name, ArrayD::zeros(t.raw_dim()));
        }
        out
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(F::zero());
        }
    }

    /// Replaces a tensor, checking that the shape is unchanged.
    pub fn assign(&mut self, name: &str, tensor: ArrayD<F>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        let slot = self.get_mut(id);
        if slot.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    /// Adds `scale * other` element-wise; stores must share a layout.
    pub fn add_scaled(&mut self, other: &ParamStore<F>, scale: F) {
        debug_assert_eq!(self.names, other.names);
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.scaled_add(scale, b);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| {
                let v = x.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: F) {
        for t in &mut self.tensors {
            t.mapv_inplace(|x| x * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.add(name, t.mapv(|x| G::of(x.to_f64().unwrap_or(f64::NAN))));
        }
        out
    }
}

/// Deterministic per-parameter generator: the stream depends only on the
/// seed and the parameter name, so adding or removing a layer leaves the
/// initialization of every other layer unchanged.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

pub(crate) fn init_normal<F: Scalar>(seed: u64, name: &str, shape: &[usize], std: f64) -> ArrayD<F> {
    let mut rng = param_rng(seed, name);
    let dist = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::of(dist.sample(&mut rng)))
}

pub(crate) fn init_uniform<F: Scalar>(seed: u64, name: &str, shape: &[usize], bound: f64) -> ArrayD<F> {
    let mut rng = param_rng(seed, name);
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::of(dist.sample(&mut rng)))
}

pub(crate) fn check_finite<'a, F: Scalar>(
    layer: &str,
    values: impl IntoIterator<Item = &'a F>,
) -> Result<()> {
    let mut count = 0usize;
    for v in values {
        if !v.is_finite() {
            count += 1;
        }
    }
    if count > 0 {
        return Err(Error::numeric(layer, format!("{count} non-finite activations")));
    }
    Ok(())
}

pub(crate) fn leaky<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        x * F::of(LEAKY_SLOPE)
    }
}

/// Derivative of the leaky rectifier, evaluated from its output (the sign of
/// input and output agree).
pub(crate) fn leaky_grad<F: Scalar>(y: F) -> F {
    if y > F::zero() {
        F::one()
    } else {
        F::of(LEAKY_SLOPE)
    }
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}
