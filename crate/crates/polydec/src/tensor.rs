//! Dense real tensors with explicit dimensions.
//!
//! One global index convention is used everywhere: storage is column-major
//! (first index fastest), `vec(a·bᵀ) = b ⊗ a`, and the first-mode unfolding
//! has row `i` equal to `vec` of slice `i`. Every layout-sensitive routine in
//! the crate relies on this triple being consistent.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Order-N real tensor with explicit dimensions, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> DenseTensor<T> {
    /// All-zero tensor with the given dimensions.
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    /// Build from column-major data; the length must match the dimensions.
    pub fn from_data(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::DimensionMismatch(format!(
                "data length {} does not match dims {:?} (expect {})",
                data.len(),
                dims,
                len
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Build by evaluating `f` at every multi-index.
    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let mut t = Self::zeros(dims);
        let mut idx = vec![0usize; dims.len()];
        for slot in t.data.iter_mut() {
            *slot = f(&idx);
            Self::advance(&mut idx, dims);
        }
        t
    }

    fn advance(idx: &mut [usize], dims: &[usize]) {
        for (i, d) in idx.iter_mut().zip(dims) {
            *i += 1;
            if *i < *d {
                return;
            }
            *i = 0;
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Column-major vectorization (the storage itself).
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    fn linear(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut lin = 0usize;
        let mut stride = 1usize;
        for (i, d) in idx.iter().zip(&self.dims) {
            debug_assert!(i < d, "index {} out of bound {}", i, d);
            lin += i * stride;
            stride *= d;
        }
        lin
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.linear(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let lin = self.linear(idx);
        self.data[lin] = value;
    }

    /// Frobenius norm.
    pub fn norm(&self) -> T {
        self.norm_squared().sqrt()
    }

    /// Squared Frobenius norm.
    pub fn norm_squared(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x * x)
    }

    /// Entrywise difference `self − other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch(format!(
                "tensor dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Self {
            dims: self.dims.clone(),
            data,
        })
    }

    /// Relative Frobenius distance `‖self − other‖ / ‖self‖` (absolute when
    /// `self` is the zero tensor).
    pub fn relative_distance(&self, other: &Self) -> Result<T> {
        let diff = self.sub(other)?.norm();
        let scale = self.norm();
        Ok(if scale > T::zero() {
            diff / scale
        } else {
            diff
        })
    }

    /// Reinterpret the tensor with new dimensions of equal total length.
    /// Column-major order means the data is untouched.
    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::from_data(dims, self.data.clone())
    }

    /// Mode-`mode` product with `m` (shape J × I_mode): every mode fiber is
    /// replaced by `m · fiber`, so the result has extent J in slot `mode`.
    pub fn mode_n_product(&self, m: &DMatrix<T>, mode: usize) -> Result<Self> {
        if mode >= self.dims.len() {
            return Err(Error::ModeOutOfRange {
                mode,
                order: self.dims.len(),
            });
        }
        let i_n = self.dims[mode];
        if m.ncols() != i_n {
            return Err(Error::DimensionMismatch(format!(
                "mode-{} product: matrix is {}x{} but mode extent is {}",
                mode,
                m.nrows(),
                m.ncols(),
                i_n
            )));
        }
        let j = m.nrows();
        let before: usize = self.dims[..mode].iter().product();
        let after: usize = self.dims[mode + 1..].iter().product();

        let mut out_dims = self.dims.clone();
        out_dims[mode] = j;
        let mut out = Self::zeros(&out_dims);

        let in_block = before * i_n;
        let out_block = before * j;
        for a in 0..after {
            for row in 0..j {
                for b in 0..before {
                    let mut acc = T::zero();
                    for i in 0..i_n {
                        acc += self.data[a * in_block + i * before + b] * m[(row, i)];
                    }
                    out.data[a * out_block + row * before + b] = acc;
                }
            }
        }
        Ok(out)
    }

    /// Mode-`mode` contraction with a vector; the mode is summed out.
    pub fn mode_n_vec(&self, v: &DVector<T>, mode: usize) -> Result<Self> {
        let m = DMatrix::from_fn(1, v.len(), |_, i| v[i]);
        let mut out = self.mode_n_product(&m, mode)?;
        out.dims.remove(mode);
        Ok(out)
    }

    /// First-mode unfolding: the I₁ × (I₂⋯I_N) matrix whose row `i` is
    /// `vec` of slice `i`.
    pub fn unfold_mode1(&self) -> Result<DMatrix<T>> {
        if self.dims.len() < 2 {
            return Err(Error::ModeOutOfRange {
                mode: 1,
                order: self.dims.len(),
            });
        }
        let rows = self.dims[0];
        let cols: usize = self.dims[1..].iter().product();
        Ok(DMatrix::from_fn(rows, cols, |i, c| self.data[i + rows * c]))
    }

    /// Inverse of [`Self::unfold_mode1`]: rebuild an order-N tensor from its
    /// first-mode unfolding.
    pub fn fold_mode1(m: &DMatrix<T>, dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || m.nrows() != dims[0] {
            return Err(Error::DimensionMismatch(format!(
                "fold: matrix has {} rows, dims {:?}",
                m.nrows(),
                dims
            )));
        }
        let rest: usize = dims[1..].iter().product();
        if m.ncols() != rest {
            return Err(Error::DimensionMismatch(format!(
                "fold: matrix has {} cols, dims {:?} need {}",
                m.ncols(),
                dims,
                rest
            )));
        }
        let rows = dims[0];
        let mut data = vec![T::zero(); rows * rest];
        for c in 0..rest {
            for i in 0..rows {
                data[i + rows * c] = m[(i, c)];
            }
        }
        Self::from_data(dims, data)
    }

    /// Rank-one tensor `λ · v₁ ∘ v₂ ∘ … ∘ v_N`.
    pub fn rank_one(weight: T, vectors: &[DVector<T>]) -> Self {
        let dims: Vec<usize> = vectors.iter().map(|v| v.len()).collect();
        let mut t = Self::zeros(&dims);
        let mut idx = vec![0usize; dims.len()];
        for slot in t.data.iter_mut() {
            let mut prod = weight;
            for (v, &i) in vectors.iter().zip(&idx) {
                prod *= v[i];
            }
            *slot = prod;
            Self::advance(&mut idx, &dims);
        }
        t
    }
}

/// Kronecker product of two vectors: `(a ⊗ b)[i·|b| + j] = a[i]·b[j]`.
pub fn kron_vec<T: Scalar>(a: &DVector<T>, b: &DVector<T>) -> DVector<T> {
    let mut out = DVector::zeros(a.len() * b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[i * b.len() + j] = a[i] * b[j];
        }
    }
    out
}

/// `k`-fold Kronecker power of a vector; `k = 0` gives the scalar `[1]`.
pub fn kron_power<T: Scalar>(v: &DVector<T>, k: usize) -> DVector<T> {
    let mut out = DVector::from_element(1, T::one());
    for _ in 0..k {
        out = kron_vec(&out, v);
    }
    out
}
