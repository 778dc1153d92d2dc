use crate::element::Element;
use crate::error::{Error, Result};

/// Dense N-dimensional array, row-major, innermost axis last.
///
/// Image data uses the axis order `[batch, channel, height, width]`;
/// vectors are rank 1. Every public constructor and kernel enforces the
/// contract that all elements are finite.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, {:?}, ...]", self.data[0], self.data[1])
        }
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape(op, "rank-0 shapes are not supported"));
    }
    let mut numel = 1usize;
    for &e in shape {
        if e == 0 {
            return Err(Error::shape(op, format!("zero extent in shape {shape:?}")));
        }
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| Error::shape(op, format!("shape {shape:?} overflows usize")))?;
    }
    Ok(numel)
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        let numel = check_shape("zeros", shape).expect("invalid shape for zeros");
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Tensor<T> {
        let numel = check_shape("full", shape).expect("invalid shape for full");
        assert!(value.is_finite(), "full: non-finite fill value");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-1 tensor with a single element; used for scalar losses and gains.
    pub fn scalar(value: T) -> Tensor<T> {
        Tensor::full(&[1], value)
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        let numel = check_shape("from_vec", shape)?;
        if data.len() != numel {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} wants {numel} elements, got {}", data.len()),
            ));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data,
        };
        t.ensure_finite("from_vec")?;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape(
                "item",
                format!("expected a single element, shape is {:?}", self.shape),
            ))
        }
    }

    /// Same data, new shape (element count must match).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel = check_shape("reshaped", shape)?;
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshaped",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [a, b, c, d] => Ok((*a, *b, *c, *d)),
            other => Err(Error::shape(op, format!("expected rank 4, got {other:?}"))),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [a, b, c] => Ok((*a, *b, *c)),
            other => Err(Error::shape(op, format!("expected rank 3, got {other:?}"))),
        }
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::non_finite(context))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Convert between element types (f32 <-> f64).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// Internal constructor for kernels that build valid buffers directly.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f32>::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Tensor::from_vec(&[2], vec![1.0f32, f32::NAN]).is_err());
        assert!(Tensor::from_vec(&[2], vec![1.0f32, f32::INFINITY]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let r = t.reshaped(&[4]).unwrap();
        assert_eq!(r.shape(), &[4]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[3]).is_err());
    }
}
