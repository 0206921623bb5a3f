//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! [`Tensor`] is a plain value: a row-major array with an explicit shape.
//! Differentiation happens on a [`Graph`], which records every operation
//! applied to its [`Var`] handles and replays them backwards on
//! [`Graph::backward`]. Training runs on `f32`; gradient checks and the
//! rigidity verifier run on `f64`. All network code is generic over
//! [`Real`] so the same model can be instantiated in either precision.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use graph::{Activation, Graph, Reduction, Var};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type usable by the engine.
pub trait Real:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// `c = a * b + beta * c` for row-major `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
    /// Transposition is expressed with the stride pairs `(row, col)`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n, "gemm output too small");
                if k > 0 {
                    let a_last = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
                    let b_last = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
                    assert!((a_last as usize) < a.len(), "gemm lhs out of bounds");
                    assert!((b_last as usize) < b.len(), "gemm rhs out of bounds");
                }
                // SAFETY: the extents above were checked against the slices
                // and all strides are non-negative.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn of(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major array. Every stored value is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} must be non-empty with positive extents"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Shape consistency is
    /// still asserted.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![T::zero(); n])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// Converts `f64` rows into a `[rows, cols]` tensor.
    pub fn from_rows<const C: usize>(rows: &[[f64; C]]) -> Result<Self> {
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| T::of(v)))
            .collect();
        Self::new(vec![rows.len(), C], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Number of rows when viewed as `[numel / channels, channels]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.channels()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.channels();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Element type conversion (e.g. an `f32` checkpoint into an `f64` model).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major `[rows, cols]` table of indices into some reference array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexTable {
    rows: usize,
    cols: usize,
    data: Vec<usize>,
}

impl IndexTable {
    pub fn new(rows: usize, cols: usize, data: Vec<usize>) -> Result<Self> {
        if rows * cols != data.len() || cols == 0 {
            return Err(Error::Dimension(format!(
                "index table {rows}x{cols} given {} entries",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged index table".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// `rows x cols` table whose row `i` repeats `i`.
    pub fn repeat_self(rows: usize, cols: usize) -> Self {
        let data = (0..rows).flat_map(|i| std::iter::repeat_n(i, cols)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn max_index(&self) -> Option<usize> {
        self.data.iter().copied().max()
    }

    /// Keeps the listed columns, in order.
    pub fn select_cols(&self, cols: &[usize]) -> Result<Self> {
        if cols.is_empty() || cols.iter().any(|&c| c >= self.cols) {
            return Err(Error::Index(format!(
                "column selection {cols:?} invalid for width {}",
                self.cols
            )));
        }
        let data = (0..self.rows)
            .flat_map(|i| cols.iter().map(move |&c| self.data[i * self.cols + c]))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: cols.len(),
            data,
        })
    }
}
