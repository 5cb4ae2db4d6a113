use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dims must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without validation. Callers guarantee `data.len()` matches.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape("add", other)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.check_same_shape("sub", other)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose needs a matrix, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// FNV-1a over the raw bit patterns; equal checksums mean bitwise-equal contents.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::data::fnv1a_64(&[]);
        for d in &self.shape {
            h = fnv_extend(h, &(*d as u64).to_le_bytes());
        }
        for x in &self.data {
            h = fnv_extend(h, &x.to_bits().to_le_bytes());
        }
        h
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}

fn fnv_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(crate::data::FNV_PRIME);
    }
    h
}

/// Population standard deviation over every entry.
pub fn population_std(t: &Tensor) -> Result<f64> {
    if t.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let mean = t.mean();
    let var = t.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t.len() as f64;
    Ok(var.sqrt())
}

/// Population standard deviation of a raw slice; errors on an empty slice.
pub fn population_std_of(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyTensor);
    }
    population_std(&Tensor::from_vec(values.to_vec()))
}

/// Sum of absolute elementwise differences.
pub fn l1_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape("l1_diff", b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum())
}

/// Plain (untracked) matrix product over the last axis of `a` and a 2-D `b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.shape.len() != 2 || a.cols() != b.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.shape[1]);
    let mut out = vec![0.0; m * n];
    super::kernels::gemm(m, k, n, &a.data, (k, 1), &b.data, (n, 1), &mut out, false);
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, out))
}
