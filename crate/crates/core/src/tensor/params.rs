use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Initialization rule for a freshly declared parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamInit {
    /// Normal(0, std) resampled outside ±2 std.
    TruncatedNormal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry<F: Float> {
    value: Tensor<F>,
    grad: Vec<F>,
}

/// Ordered, named parameter set with one gradient buffer per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<F: Float> {
    entries: IndexMap<String, Entry<F>>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<F: Float> ParameterStore<F> {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: IndexMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Declare a parameter. Values are drawn from the store's seeded stream in
    /// declaration order, so identical declaration sequences are reproducible.
    pub fn declare(&mut self, name: &str, shape: &[usize], init: ParamInit) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<F> = match init {
            ParamInit::Zeros => vec![F::zero(); n],
            ParamInit::Ones => vec![F::one(); n],
            ParamInit::TruncatedNormal(std) => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                (0..n)
                    .map(|_| loop {
                        let z: f64 = normal.sample(&mut self.rng);
                        if z.abs() <= 2.0 {
                            break F::of(z * std);
                        }
                    })
                    .collect()
            }
        };
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    /// Insert a parameter with explicit values.
    pub fn insert(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        let grad = vec![F::zero(); value.len()];
        self.entries.insert(name.to_string(), Entry { value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn name_at(&self, idx: usize) -> &str {
        self.entries.get_index(idx).expect("parameter index").0
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&[F]> {
        self.entries.get(name).map(|e| e.grad.as_slice())
    }

    pub fn value_at(&self, idx: usize) -> &Tensor<F> {
        &self.entries[idx].value
    }

    pub fn value_at_mut(&mut self, idx: usize) -> &mut Tensor<F> {
        &mut self.entries[idx].value
    }

    pub fn grad_at(&self, idx: usize) -> &[F] {
        &self.entries[idx].grad
    }

    pub fn grad_at_mut(&mut self, idx: usize) -> &mut [F] {
        &mut self.entries[idx].grad
    }

    /// Mutable access to (value, grad) pairs for optimizers.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>, &mut Vec<F>)> {
        self.entries
            .iter_mut()
            .map(|(k, e)| (k.as_str(), &mut e.value, &mut e.grad))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Scalar parameter count over names starting with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    /// Global L2 norm over every gradient buffer.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|e| e.grad.iter())
            .map(|g| {
                let x = g.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Copy of the store in another precision; gradients reset.
    pub fn cast<G: Float>(&self) -> ParameterStore<G> {
        let mut out = ParameterStore::new(self.seed);
        for (name, e) in &self.entries {
            out.insert(name, e.value.cast()).expect("names are unique");
        }
        out
    }

    /// Remove parameters whose names start with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    /// Values-only equality, bit for bit.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_f64().unwrap().to_bits() == y.to_f64().unwrap().to_bits())
            })
    }
}
