use rand_chacha::ChaCha8Rng;

use crate::real::Real;
use crate::rng::{normal_tensor, uniform_tensor};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// U(−bound, bound).
    Uniform(f64),
    Normal { std: f64 },
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        numel(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    /// Draws every tensor in spec order from one stream.
    pub fn init(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Self {
        let mut store = Self::new();
        for s in specs {
            let value = match s.init {
                Init::Uniform(bound) => uniform_tensor(rng, &s.shape, bound),
                Init::Normal { std } => normal_tensor(rng, &s.shape, 0.0, std),
                Init::Ones => Tensor::full(&s.shape, T::one()),
                Init::Zeros => Tensor::zeros(&s.shape),
            };
            store.push(s.name.clone(), value);
        }
        store
    }

    pub fn push(&mut self, name: String, value: Tensor<T>) {
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Scalar count over all tensors.
    pub fn total(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect() }
    }

    /// Whether names and shapes line up with `specs`.
    pub fn matches(&self, specs: &[ParamSpec]) -> bool {
        self.len() == specs.len()
            && self.iter().zip(specs).all(|((n, v), s)| n == s.name && v.shape() == s.shape.as_slice())
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}
