//! Dense row-major matrices and the scalar trait the engine is generic over.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub trait Real:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// `C = alpha * A B + beta * C` on strided views.
    ///
    /// # Safety
    /// All pointers must be valid for the extents implied by the dimensions
    /// and strides.
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Real for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided read-only matrix view into a flat buffer.
#[derive(Debug, Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    /// Column block `[c0, c0 + n)` of a row-major view.
    pub fn col_block(self, c0: usize, n: usize) -> Self {
        assert!(c0 + n <= self.cols);
        Self {
            offset: self.offset + c0 * self.cs,
            cols: n,
            ..self
        }
    }

    pub fn row_block(self, r0: usize, n: usize) -> Self {
        assert!(r0 + n <= self.rows);
        Self {
            offset: self.offset + r0 * self.rs,
            rows: n,
            ..self
        }
    }

    fn last_index(&self) -> Option<usize> {
        (self.rows > 0 && self.cols > 0).then(|| self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs)
    }
}

/// Strided mutable destination.
#[derive(Debug)]
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn col_block(self, c0: usize, n: usize) -> Self {
        assert!(c0 + n <= self.cols);
        Self {
            offset: self.offset + c0 * self.cs,
            cols: n,
            ..self
        }
    }

    pub fn row_block(self, r0: usize, n: usize) -> Self {
        assert!(r0 + n <= self.rows);
        Self {
            offset: self.offset + r0 * self.rs,
            rows: n,
            ..self
        }
    }
}

/// `c = alpha * a b + beta * c`.
pub fn gemm<T: Real>(alpha: T, a: View<T>, b: View<T>, beta: T, c: ViewMut<T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output dimensions");
    if let Some(i) = a.last_index() {
        assert!(i < a.data.len());
    }
    if let Some(i) = b.last_index() {
        assert!(i < b.data.len());
    }
    if c.rows > 0 && c.cols > 0 {
        assert!(c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs < c.data.len());
    } else {
        return;
    }
    // SAFETY: extents checked above; `c` is exclusively borrowed.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn full(rows: usize, cols: usize, v: T) -> Self {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn scalar(v: T) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn from_f64(rows: usize, cols: usize, v: &[f64]) -> Self {
        Self::new(rows, cols, v.iter().map(|x| T::of(*x)).collect())
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

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn view(&self) -> View<'_, T> {
        View {
            data: &self.data,
            offset: 0,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols,
            cs: 1,
        }
    }

    pub fn view_mut(&mut self) -> ViewMut<'_, T> {
        ViewMut {
            rows: self.rows,
            cols: self.cols,
            rs: self.cols,
            cs: 1,
            offset: 0,
            data: &mut self.data,
        }
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar");
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::new(
            self.rows,
            self.cols,
            self.data.iter().map(|x| U::of(x.to_f64().unwrap())).collect(),
        )
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap()).collect()
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|x| *x * *x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
