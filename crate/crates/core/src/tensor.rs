//! Dense row-major tensors over a float scalar. Training runs in `f32`;
//! gradient checks and numeric oracles run the same code in `f64`.

use crate::error::{Error, Result};

/// Floating point scalar the engine is generic over.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + num_traits::Float
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// A dense tensor: shape plus row-major data. The invariant
/// `data.len() == product(shape)` holds for every constructed value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let want = element_count(&shape)?;
        if want != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                want,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = element_count(&shape).expect("shape overflow");
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = element_count(&shape).expect("shape overflow");
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-1 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The four dimensions of an `[N, C, H, W]` tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::Shape(format!("expected rank-4 tensor, got {other:?}"))),
        }
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast element-wise into another scalar type via `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64_lossy()))
                .collect(),
        }
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &d in shape {
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows element count")))?;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zeros_and_full() {
        let z = Tensor::<f64>::zeros(vec![2, 2]);
        assert_eq!(z.data(), &[0.0; 4]);
        let f = Tensor::<f64>::full(vec![3], 1.5);
        assert_eq!(f.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn dims4_requires_rank_4() {
        let t = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        assert_eq!(t.dims4().unwrap(), (1, 2, 4, 4));
        let t3 = Tensor::<f32>::zeros(vec![2, 4, 4]);
        assert!(t3.dims4().is_err());
    }

    #[test]
    fn item_requires_single_element() {
        assert_eq!(Tensor::scalar(7.0f64).item().unwrap(), 7.0);
        assert!(Tensor::<f64>::zeros(vec![2]).item().is_err());
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let t = Tensor::<f32>::new(vec![3], vec![1.25, -0.5, 3.0]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(t, back);
    }

    #[test]
    fn all_finite_detects_nan() {
        let mut t = Tensor::<f32>::zeros(vec![2]);
        assert!(t.all_finite());
        t.data_mut()[1] = f32::NAN;
        assert!(!t.all_finite());
    }
}
