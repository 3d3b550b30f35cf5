use std::fmt;
use std::sync::Arc;

use smallvec::SmallVec;

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::memory;

pub type Shape = SmallVec<[usize; 4]>;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Shape {
    let mut s: Shape = SmallVec::from_elem(1, shape.len());
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Shape> {
    let rank = a.len().max(b.len());
    let mut out: Shape = SmallVec::with_capacity(rank);
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out.push(match (da, db) {
            _ if da == db => da,
            (1, _) => db,
            (_, 1) => da,
            _ => return None,
        });
    }
    Some(out)
}

struct Buffer<T> {
    data: Vec<T>,
}

impl<T> Buffer<T> {
    fn new(data: Vec<T>) -> Self {
        memory::register(data.len() * std::mem::size_of::<T>());
        Buffer { data }
    }
}

impl<T> Drop for Buffer<T> {
    fn drop(&mut self) {
        memory::release(self.data.len() * std::mem::size_of::<T>());
    }
}

/// Immutable dense row-major tensor. Cloning shares the buffer.
#[derive(Clone)]
pub struct Tensor<T: Element> {
    shape: Shape,
    buf: Arc<Buffer<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Self::from_parts(SmallVec::from_slice(shape), data))
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, buf: Arc::new(Buffer::new(data)) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_parts(SmallVec::from_slice(shape), vec![v; numel(shape)])
    }

    pub fn eye(n: usize) -> Self {
        let mut v = vec![T::zero(); n * n];
        (0..n).for_each(|i| v[i * n + i] = T::one());
        Self::from_parts(SmallVec::from_slice(&[n, n]), v)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(SmallVec::new(), vec![v])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| crate::cast::<T>(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.buf.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.buf.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.buf.data.clone()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn nbytes(&self) -> usize {
        self.numel() * std::mem::size_of::<T>()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.buf.data[0]
    }

    pub fn get(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.rank());
        let st = strides(&self.shape);
        let off: usize = idx.iter().zip(st.iter()).map(|(i, s)| i * s).sum();
        self.buf.data[off]
    }

    /// Same storage viewed under another shape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor { shape: SmallVec::from_slice(shape), buf: self.buf.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.buf.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn shares_storage(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.buf, &other.buf)
    }

    /// Same shape and identical bit patterns.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_f64().unwrap().to_bits() == b.to_f64().unwrap().to_bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|x| x.is_finite())
    }

    pub fn sum_all(&self) -> T {
        self.data().iter().copied().sum()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|x| x.to_f64().unwrap()).collect()
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data().iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect(),
        )
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.data();
        write!(f, "Tensor<{}>{:?} ", T::DTYPE.name(), self.shape.as_slice())?;
        if d.len() <= 16 {
            write!(f, "{:?}", d)
        } else {
            write!(f, "[{:?}, {:?}, ... {} values]", d[0], d[1], d.len())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcasting_rules() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]).unwrap().as_slice(), &[2, 3]);
        assert_eq!(broadcast_shapes(&[2, 1, 4], &[3, 1]).unwrap().as_slice(), &[2, 3, 4]);
        assert!(broadcast_shapes(&[2, 3], &[4]).is_none());
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn buffers_are_accounted() {
        let before = memory::live_bytes();
        let t = Tensor::<f64>::zeros(&[10]);
        assert_eq!(memory::live_bytes(), before + 80);
        let view = t.reshaped(&[2, 5]).unwrap();
        assert_eq!(memory::live_bytes(), before + 80);
        drop(t);
        drop(view);
        assert_eq!(memory::live_bytes(), before);
    }
}
