//! Dense row-major matrices and the GEMM kernel behind every matrix product.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{shape_err, Result};
use crate::par::{self, Exec};

/// Output rows handled per GEMM task. Fixed so that the split never depends
/// on the thread count.
const GEMM_ROW_BLOCK: usize = 32;

/// Floating-point element type. Models train in `f32`; gradient checks run
/// the same code in `f64`.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    fn of(x: f64) -> Self;
    fn to_f64_lossy(self) -> f64;

    /// `C = alpha * A * B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for Mat<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mat[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Mat { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("ragged rows"));
        }
        Ok(Mat { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn scalar(v: T) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    /// The single value of a 1x1 matrix.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat { rows: idx.len(), cols: self.cols, data }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.to_f64_lossy())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(Exec::default(), self, false, other, false)
    }
}

/// Dimensions of `op(a)` where `op` optionally transposes.
fn op_dims<T>(m: &Mat<T>, t: bool) -> (usize, usize) {
    if t {
        (m.cols, m.rows)
    } else {
        (m.rows, m.cols)
    }
}

/// `op(a) @ op(b)` as a fresh matrix.
pub fn matmul<T: Real>(exec: Exec, a: &Mat<T>, ta: bool, b: &Mat<T>, tb: bool) -> Result<Mat<T>> {
    let (m, k) = op_dims(a, ta);
    let (k2, n) = op_dims(b, tb);
    if k != k2 {
        return Err(shape_err(format!(
            "matmul {m}x{k} by {k2}x{n} (transposes {ta}/{tb})"
        )));
    }
    let mut c = Mat::zeros(m, n);
    gemm_into(exec, a, ta, b, tb, T::zero(), &mut c);
    Ok(c)
}

/// `c = op(a) @ op(b) + beta * c`. Shapes must already agree.
pub fn gemm_into<T: Real>(exec: Exec, a: &Mat<T>, ta: bool, b: &Mat<T>, tb: bool, beta: T, c: &mut Mat<T>) {
    let (m, k) = op_dims(a, ta);
    let (_, n) = op_dims(b, tb);
    debug_assert_eq!(c.shape(), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1isize, a.cols as isize) } else { (a.cols as isize, 1isize) };
    let (rsb, csb) = if tb { (1isize, b.cols as isize) } else { (b.cols as isize, 1isize) };
    let a_ptr = a.data.as_ptr() as usize;
    let b_ptr = b.data.as_ptr() as usize;
    par::for_each_chunk_mut(exec, &mut c.data, GEMM_ROW_BLOCK * n, |ci, chunk| {
        let row0 = ci * GEMM_ROW_BLOCK;
        let rows = chunk.len() / n;
        // SAFETY: row block `row0..row0+rows` of op(a) lies inside `a`, `b` is
        // read-only and each task owns a disjoint slice of `c`.
        unsafe {
            let a_base = (a_ptr as *const T).offset(row0 as isize * rsa);
            T::gemm_raw(
                rows,
                k,
                n,
                T::one(),
                a_base,
                rsa,
                csa,
                b_ptr as *const T,
                rsb,
                csb,
                beta,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}
