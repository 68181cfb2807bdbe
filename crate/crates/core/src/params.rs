//! Parameter naming, binding onto a tape, and seeded initialisation.
//!
//! Every parameter container is generic over its leaf type `P`: the same
//! struct holds `Tensor<T>` values at rest and `Var` handles once bound to
//! a [`Tape`]. A single `map` per container produces both, so names never
//! drift between binding, checkpoints and enumeration.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Visitor used by every container's `map`.
pub type LeafFn<'a, L, U> = dyn FnMut(&str, &L) -> U + 'a;
pub type LeafFnMut<'a, L> = dyn FnMut(&str, &mut L) + 'a;

/// Registers tensors on a tape, tracking gradients only for names that the
/// `trainable` predicate accepts.
pub struct Binder<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    trainable: &'a dyn Fn(&str) -> bool,
    bound: Vec<(String, Var)>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self {
            tape,
            trainable,
            bound: Vec::new(),
        }
    }

    pub fn bind(&mut self, name: &str, value: &Tensor<T>) -> Var {
        let v = self.tape.leaf(value.clone(), (self.trainable)(name));
        self.bound.push((name.to_string(), v));
        v
    }

    /// Names and handles of everything bound, in binding order.
    pub fn finish(self) -> Vec<(String, Var)> {
        self.bound
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Ordered name → tensor map; iteration order is the checkpoint order.
pub type NamedTensors<T = f32> = BTreeMap<String, Tensor<T>>;

/// Seeded Gaussian initialiser. Each component draws from its own stream so
/// adding a teacher never perturbs the student's initial weights.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Tensor::from_fn(shape, |_| T::from_f64(dist.sample(&mut self.rng)))
    }

    /// Fan-in scaled weight matrix `[fan_in × fan_out]`.
    pub fn matrix<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.normal(&[fan_in, fan_out], (fan_in as f64).powf(-0.5))
    }
}

/// SHA-256 over names, shapes and raw bits; used to prove frozen weights
/// did not move.
pub fn hash_tensors<'a>(items: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
