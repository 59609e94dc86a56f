//! Dense row-major `f64` tensors and named parameter collections.
//!
//! [`Tensor`] is a plain value: once built it is never mutated while it
//! takes part in a [`Tape`](crate::tape::Tape). Differentiation state lives
//! on the tape, not in the tensor.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {:?} holds {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Self { shape, data }
    }

    /// Standard normal samples.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(self.shape.clone()))
        }
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::invalid("dims2", format!("expected 2-D tensor, got {:?}", self.shape))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[self.shape.len() - 1] + c]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self + s * other`, elementwise.
    pub fn axpy(&self, s: f64, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "axpy", |a, b| a + s * b)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        Ok(Tensor::from_parts(vec![m, n], kernels::mm(&self.data, &rhs.data, m, k, n)))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        Ok(Tensor::from_parts(vec![c, r], kernels::transpose(&self.data, r, c)))
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Raw row-major kernels shared by tensor methods and tape backward rules.
pub(crate) mod kernels {
    /// `a (m×k) · b (k×n)`.
    pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        out
    }

    /// `a (m×k) · bᵀ` where `b` is stored `n×k`.
    pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `aᵀ · b` where `a` is stored `m×k` and `b` is `m×n`; result `k×n`.
    pub fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        out
    }

    pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        out
    }
}

/// Named, deterministically ordered parameter collection.
///
/// Paths are dot-separated (`encoder.fc.weight`). Iteration follows
/// lexicographic path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::DuplicateParam(path));
        }
        self.entries.insert(path, value);
        Ok(())
    }

    /// Replace the value stored under an existing path, keeping its shape.
    pub fn set(&mut self, path: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("ParamSet::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Entries whose path starts with `prefix.`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        let dotted = format!("{prefix}.");
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(&dotted))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// All-zero set with the same paths and shapes.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
        assert_eq!(Tensor::scalar(3.0).item().unwrap(), 3.0);
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
    }

    #[test]
    fn kernels_agree() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let ab = kernels::mm(&a, &b, 2, 3, 2);
        let bt = kernels::transpose(&b, 3, 2);
        assert_eq!(kernels::mm_nt(&a, &bt, 2, 3, 2), ab);
        let at = kernels::transpose(&a, 2, 3);
        assert_eq!(kernels::mm_tn(&at, &b, 3, 2, 2), ab);
    }

    #[test]
    fn param_set_is_ordered_and_counted() {
        let mut ps = ParamSet::new();
        ps.insert("b.w", Tensor::zeros(vec![2, 3])).unwrap();
        ps.insert("a.w", Tensor::zeros(vec![4])).unwrap();
        assert!(ps.insert("a.w", Tensor::zeros(vec![1])).is_err());
        let names: Vec<_> = ps.names().cloned().collect();
        assert_eq!(names, vec!["a.w", "b.w"]);
        assert_eq!(ps.total_count(), 10);
        assert_eq!(ps.subset("b").len(), 1);
        assert!(ps.set("a.w", Tensor::zeros(vec![5])).is_err());
    }
}
