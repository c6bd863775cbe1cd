use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Named, ordered parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        assert_eq!(names.len(), tensors.len());
        ParamStore { names, tensors }
    }

    /// Register a tensor and return its index.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// He-normal conv kernel `[out, in, k, k]` plus zero bias. Returns `(w, b)` indices.
    pub fn add_conv<R: Rng>(&mut self, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) -> (usize, usize) {
        let fan_in = (cin * k * k) as f64;
        let w = normal_tensor(vec![cout, cin, k, k], (2.0 / fan_in).sqrt(), rng);
        let wi = self.add(format!("{name}.weight"), w);
        let bi = self.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        (wi, bi)
    }

    /// Linear layer `[out, in]` with std `gain / sqrt(in)` plus bias filled with `bias`.
    pub fn add_linear<R: Rng>(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        gain: f64,
        bias: f64,
        rng: &mut R,
    ) -> (usize, usize) {
        let w = normal_tensor(vec![cout, cin], gain / (cin as f64).sqrt(), rng);
        let wi = self.add(format!("{name}.weight"), w);
        let bi = self.add(format!("{name}.bias"), Tensor::full(vec![cout], T::lit(bias)));
        (wi, bi)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

pub fn normal_tensor<T: Scalar, R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::new(shape, data)
}
