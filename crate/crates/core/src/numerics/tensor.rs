//! Dense row-major tensors of 32-bit floats.
//!
//! `Tensor` is a value type: the underlying buffer is reference-counted, so
//! cloning a tensor is cheap and mutation goes through copy-on-write. Shapes
//! are plain extent lists; an empty shape is a scalar.

use std::fmt;
use std::sync::Arc;

/// Dense f32 tensor with row-major layout.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    /// Whether graphs should treat this tensor as a trainable leaf.
    pub requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and matching buffer.
    ///
    /// Panics if the element count implied by `shape` does not match
    /// `data.len()`.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} implies {} elements, buffer holds {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data: Arc::new(data), requires_grad: false }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; numel]), requires_grad: false }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]), requires_grad: false }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    /// 0-dimensional tensor holding one value.
    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![value]), requires_grad: false }
    }

    /// 1-dimensional tensor over the given values.
    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Marks the tensor as a trainable leaf (builder style).
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Returns a clone with `requires_grad` cleared; shares the buffer.
    pub fn frozen(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), requires_grad: false }
    }

    #[must_use]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[must_use]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[must_use]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Scalar tensors yield their single value.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Mutable view of the buffer; copies first if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::<Vec<f32>>::make_mut(&mut self.data).as_mut_slice()
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor { shape, data: Arc::clone(&self.data), requires_grad: self.requires_grad }
    }

    /// Elementwise map into a fresh tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    /// Euclidean norm of the whole buffer.
    pub fn l2_norm(&self) -> f32 {
        libm::sqrtf(self.data.iter().map(|&x| x * x).sum::<f32>())
    }

    /// Euclidean distance to another tensor of identical shape.
    pub fn l2_distance(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "l2_distance shape mismatch");
        let s: f32 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        libm::sqrtf(s)
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Index of the row-wise maximum over the last axis (ties break low).
    pub fn argmax_last(&self) -> Vec<usize> {
        let last = *self.shape.last().expect("argmax_last on scalar");
        self.data
            .chunks(last)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// True when both tensors hold bit-for-bit identical buffers and shapes.
    pub fn bits_equal(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(shape={:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, ", data={:?}", &self.data[..])?;
        } else {
            write!(f, ", data=[{}, {}, ...; {}]", self.data[0], self.data[1], self.numel())?;
        }
        write!(f, ")")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_buffer_must_agree() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    #[should_panic(expected = "implies")]
    fn mismatched_buffer_is_rejected() {
        let _ = Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn reshape_shares_storage() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f32).collect());
        let r = t.reshaped(vec![3, 2]);
        assert_eq!(r.data(), t.data());
    }

    #[test]
    fn copy_on_write_leaves_clones_untouched() {
        let mut a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = a.clone();
        a.data_mut()[0] = 9.0;
        assert_eq!(b.data()[0], 1.0);
        assert_eq!(a.data()[0], 9.0);
    }
}
