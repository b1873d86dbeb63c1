use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::serde_bits;

/// Dense row-major array with shape metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    #[serde(with = "serde_bits")]
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(mean + std * z)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Views the tensor as a matrix whose columns are the last axis.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.split_last() {
            None => (1, 1),
            Some((&c, lead)) => (lead.iter().product(), c),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected a 2-d tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        let (_, cols) = self.rows_cols();
        self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, cols) = self.rows_cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · otherᵀ` where `self` is `r × k` (leading axes flattened) and `other` is `m × k`.
    ///
    /// The result keeps the leading axes of `self` and replaces the last with `m`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (r, k) = self.rows_cols();
        let (m, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt inner dims {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("non-scalar") = m;
        let mut out = Tensor::zeros(&shape);
        T::gemm(
            r,
            k,
            m,
            T::one(),
            &self.data,
            k,
            1,
            &other.data,
            1,
            k,
            T::zero(),
            &mut out.data,
            m,
            1,
        );
        Ok(out)
    }

    /// `selfᵀ · other` with both operands viewed as `rows × cols` over their leading axes.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let (r, p) = self.rows_cols();
        let (r2, q) = other.rows_cols();
        if r != r2 {
            return Err(Error::shape(format!(
                "matmul_tn row counts {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[p, q]);
        T::gemm(
            p,
            r,
            q,
            T::one(),
            &self.data,
            1,
            p,
            &other.data,
            q,
            1,
            T::zero(),
            &mut out.data,
            q,
            1,
        );
        Ok(out)
    }

    /// `self · other` where `self` is `r × k` (leading axes flattened) and `other` is `k × m`.
    pub fn matmul_nn(&self, other: &Self) -> Result<Self> {
        let (r, k) = self.rows_cols();
        let (k2, m) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nn inner dims {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().expect("non-scalar") = m;
        let mut out = Tensor::zeros(&shape);
        T::gemm(
            r,
            k,
            m,
            T::one(),
            &self.data,
            k,
            1,
            &other.data,
            m,
            1,
            T::zero(),
            &mut out.data,
            m,
            1,
        );
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], r: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * m];
        for i in 0..r {
            for j in 0..m {
                for p in 0..k {
                    out[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        out
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn matmul_variants_agree_with_loops() {
        let a: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect(); // 3x5
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.11).cos()).collect(); // 5x4
        let expect = naive(&a, &b, 3, 5, 4);

        let ta = Tensor::from_vec(&[3, 5], a.clone()).unwrap();
        let tb = Tensor::from_vec(&[5, 4], b.clone()).unwrap();
        let nn = ta.matmul_nn(&tb).unwrap();
        let nt = ta
            .matmul_nt(&Tensor::from_vec(&[4, 5], transpose(&b, 5, 4)).unwrap())
            .unwrap();
        let tn = Tensor::from_vec(&[5, 3], transpose(&a, 3, 5))
            .unwrap()
            .matmul_tn(&tb)
            .unwrap();
        for got in [nn, nt, tn] {
            assert_eq!(got.shape(), &[3, 4]);
            for (g, e) in got.data().iter().zip(&expect) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_checks() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        assert!(a.matmul_nt(&b).is_err());
        assert!(a.clone().reshape(&[3, 2]).is_ok());
        assert!(a.reshape(&[4]).is_err());
    }

    #[test]
    fn leading_axes_are_flattened() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let w = Tensor::<f64>::from_fn(&[5, 4], |i| (i % 3) as f64);
        let y = x.matmul_nt(&w).unwrap();
        assert_eq!(y.shape(), &[2, 3, 5]);
        let flat = x.clone().reshape(&[6, 4]).unwrap().matmul_nt(&w).unwrap();
        assert_eq!(flat.data(), y.data());
    }
}
