//! Uniform named-tensor view over model parameters, used by the optimizer,
//! the gradient checker and weight serialization.

use crate::linalg::Mat;

#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl<'a> TensorRef<'a> {
    pub fn mat(name: String, m: &'a Mat) -> Self {
        Self {
            name,
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice(),
        }
    }

    pub fn vec(name: String, v: &'a [f64]) -> Self {
        Self {
            name,
            shape: vec![v.len()],
            data: v,
        }
    }
}

#[derive(Debug)]
pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

impl<'a> TensorMut<'a> {
    pub fn mat(name: String, m: &'a mut Mat) -> Self {
        Self {
            name,
            shape: vec![m.rows(), m.cols()],
            data: m.as_mut_slice(),
        }
    }

    pub fn vec(name: String, v: &'a mut [f64]) -> Self {
        Self {
            name,
            shape: vec![v.len()],
            data: v,
        }
    }
}

/// Anything made of named `f64` tensors. Both methods must list tensors in
/// the same order.
pub trait Parameters {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    fn scale_all(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Flat copy of every value, in tensor order.
    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}
