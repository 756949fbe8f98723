use crate::scalar::Scalar;

use super::DiffError;

/// Dense row-major array. The graph ops work on rank-2 tensors; other ranks
/// only pass through storage and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self, DiffError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(DiffError::Length {
                got: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Column vector `[n, 1]`.
    pub fn column(values: Vec<F>) -> Self {
        Self {
            shape: vec![values.len(), 1],
            data: values,
        }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self, DiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(DiffError::shape("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), DiffError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(DiffError::shape(
                "dims2",
                format!("expected rank 2, got {other:?}"),
            )),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| G::from_f64(Scalar::to_f64(v)))
                .collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self, DiffError> {
        let (r, c) = self.dims2()?;
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, DiffError> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(DiffError::shape(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data,
        })
    }

    pub fn zip(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self, DiffError> {
        if self.shape != other.shape {
            return Err(DiffError::shape(
                "zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid_value<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_result() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn transpose_round_trips() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(Tensor::new(&[2, 2], vec![1.0_f64; 3]).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid_value(800.0_f64), 1.0);
        assert_eq!(sigmoid_value(-800.0_f64), 0.0);
        assert!((sigmoid_value(0.0_f64) - 0.5).abs() < 1e-15);
    }
}
