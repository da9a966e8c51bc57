//! Dense row-major `f64` tensors, layer kernels, sequential networks with
//! residual references, model persistence and a small full-precision trainer.
//!
//! Every reduction runs left to right in index order so that results are
//! bit-reproducible across runs.

mod layer;
pub(crate) mod network;
mod persist;
mod train;

pub use layer::{Activation, ActQuant, LayerCache, LayerGrads, LayerKind, LayerRecord};
pub use network::{backward, network_forward, ForwardTrace, NetworkGrads, NetworkMeta, NetworkRecord};
pub use persist::{load_dataset, load_network, save_dataset, save_network};
pub use train::{accuracy, train_toy, ToyArch, TrainOutcome, TrainSettings};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Tensor(format!("shape {shape:?} has a zero extent")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Tensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Tensor(format!("non-finite entry at flat index {i}")));
        }
        Ok(Self { shape, data })
    }

    /// Unchecked constructor for kernel outputs whose shape is correct by
    /// construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Tensor("ragged matrix rows".into()));
        }
        Self::new(vec![r, c], rows.into_iter().flatten().collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extent of the leading (batch) axis.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Number of scalars per batch element.
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Tensor(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Gathers batch rows (with repetition allowed) into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&self.data[r * n..(r + 1) * n]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::from_parts(shape, data)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let n = self.sample_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::from_parts(shape, self.data[start * n..end * n].to_vec())
    }

    /// Stacks equally shaped samples along a new leading axis.
    pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Tensor("cannot stack zero samples".into()))?;
        let mut data = Vec::with_capacity(samples.len() * first.len());
        for s in samples {
            if s.shape != first.shape {
                return Err(Error::Tensor(format!(
                    "stack shape mismatch: {:?} vs {:?}",
                    s.shape, first.shape
                )));
            }
            data.extend_from_slice(&s.data);
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::matrix(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn select_and_stack() {
        let t = Tensor::new(vec![3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let s = t.select_rows(&[2, 0, 2]);
        assert_eq!(s.shape(), &[3, 2]);
        assert_eq!(s.data(), &[4., 5., 0., 1., 4., 5.]);
        let rows = [t.slice_rows(0, 1).reshape(vec![2]).unwrap(), Tensor::vector(vec![7., 8.]).unwrap()];
        let st = Tensor::stack(&rows).unwrap();
        assert_eq!(st.data(), &[0., 1., 7., 8.]);
    }
}
