//! Dense row-major tensors and a reverse-mode differentiation tape.
//!
//! Training runs in `f32`; every kernel is generic over [`Scalar`] so the
//! finite-difference checks can run the very same code in `f64`.
//!
//! All reductions run in a fixed sequential order, so identical inputs give
//! bitwise-identical outputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::Float;

use crate::error::{bail, Result};

pub mod kernels;
pub(crate) mod tape;

pub use tape::{Tape, Var};

/// Real number type the tensor library computes in.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn real(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn real(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn real(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            bail!(Shape, "shape {shape:?} holds {numel} values, got {}", data.len());
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: S) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => bail!(Shape, "item() on a tensor of shape {:?}", self.shape),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::of(v.real())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Output shape when `a` and `b` broadcast over trailing dimensions: the
/// shorter shape must equal the trailing dimensions of the longer one.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] != *short {
        bail!(Shape, "cannot broadcast {a:?} with {b:?}");
    }
    Ok(long.to_vec())
}

/// Permutes the axes of row-major `data`; `axes[i]` names the source axis of output axis `i`.
pub(crate) fn permute_data<S: Copy>(data: &[S], shape: &[usize], axes: &[usize]) -> (Vec<S>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let offset: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn check_axes(axes: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        bail!(Shape, "permutation {axes:?} does not match rank {rank}");
    }
    for &a in axes {
        if a >= rank || seen[a] {
            bail!(Shape, "invalid permutation {axes:?}");
        }
        seen[a] = true;
    }
    Ok(())
}

pub(crate) fn describe(shape: &[usize]) -> alloc::string::String {
    format!("{shape:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(Tensor::<f32>::scalar(2.0).item().unwrap(), 2.0);
        assert!(t.item().is_err());
    }

    #[test]
    fn broadcasting_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape(&[3], &[2, 4, 3]).unwrap(), vec![2, 4, 3]);
        assert!(broadcast_shape(&[4, 3], &[4]).is_err());
    }

    #[test]
    fn permute_transposes() {
        let (d, s) = permute_data(&[1, 2, 3, 4, 5, 6], &[2, 3], &[1, 0]);
        assert_eq!(s, vec![3, 2]);
        assert_eq!(d, vec![1, 4, 2, 5, 3, 6]);
        assert!(check_axes(&[0, 0], 2).is_err());
        assert!(check_axes(&[1, 0], 2).is_ok());
    }
}
