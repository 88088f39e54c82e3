//! Named parameter storage shared by a model, plus a parallel gradient
//! buffer. Layers hold `ParamId` handles; optimizers, checkpoints, and hash
//! checks walk the store in registration order.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::Scalar;

/// Child stream for one submodule's init draws. Forking at fixed points
/// keeps sibling modules' initializations independent of how many draws the
/// others consume, so optional modules or width changes in one component
/// never reshuffle the rest of the network.
pub fn fork_rng(rng: &mut ChaCha8Rng) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(rng.gen::<u64>())
}

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

struct Entry<F: Scalar> {
    name: String,
    value: ArrayD<F>,
}

/// All learnable tensors of one model, in registration order.
pub struct ParamStore<F: Scalar> {
    entries: Vec<Entry<F>>,
    index: BTreeMap<String, usize>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: BTreeMap::new() }
    }

    /// Registers a tensor under a unique name. Panics on duplicates: parameter
    /// names double as checkpoint keys.
    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// SHA-256 over all parameter values (as f64 little-endian bits) in
    /// registration order. Used for init determinism, freeze discipline, and
    /// gradient-isolation checks.
    pub fn hash_hex(&self) -> String {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            hasher.update(e.name.as_bytes());
            for v in e.value.iter() {
                hasher.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

/// Gradient buffer parallel to a [`ParamStore`].
pub struct Grads<F: Scalar> {
    slots: Vec<ArrayD<F>>,
}

impl<F: Scalar> Grads<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        let slots = store.entries.iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect();
        Self { slots }
    }

    pub fn zero(&mut self) {
        for s in &mut self.slots {
            s.fill(F::zero());
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.slots[id.0]
    }

    pub fn slot_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.slots[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ArrayD<F>> {
        self.slots.iter()
    }
}

fn uniform_sym<F: Scalar>(rng: &mut ChaCha8Rng, bound: f64, shape: &[usize]) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> =
        (0..n).map(|_| F::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product mismatch")
}

/// Kaiming-uniform weight init, bound 1/sqrt(fan_in).
pub fn init_kaiming<F: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> ArrayD<F> {
    uniform_sym(rng, 1.0 / (fan_in as f64).sqrt(), shape)
}

/// Bias init matching the torch convention: U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
pub fn init_bias<F: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> ArrayD<F> {
    uniform_sym(rng, 1.0 / (fan_in as f64).sqrt(), &[n])
}

pub fn init_zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn init_ones<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), F::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registration_and_lookup() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.register("w", init_zeros::<f64>(&[2, 3]));
        assert_eq!(ps.name(id), "w");
        assert_eq!(ps.value(id).shape(), &[2, 3]);
        assert_eq!(ps.id_by_name("w"), Some(id));
        assert_eq!(ps.num_scalars(), 6);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_name_panics() {
        let mut ps = ParamStore::<f32>::new();
        ps.register("w", init_zeros::<f32>(&[1]));
        ps.register("w", init_zeros::<f32>(&[1]));
    }

    #[test]
    fn hash_is_seed_deterministic() {
        let build = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamStore::<f32>::new();
            ps.register("a", init_kaiming::<f32>(&mut rng, &[4, 4], 4));
            ps.register("b", init_bias::<f32>(&mut rng, 4, 4));
            ps.hash_hex()
        };
        assert_eq!(build(7), build(7));
        assert_ne!(build(7), build(8));
    }
}
