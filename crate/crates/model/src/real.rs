//! Scalar abstraction over `f32` (training) and `f64` (verification).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Name used in checkpoint headers.
    const DTYPE: &'static str;
    const BYTES: usize;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `C ← α·A·B + β·C` on strided row/column views.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing
    /// `m×k`, `k×n` and `m×n` views.
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
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided matrix view: base offset, row stride, column stride.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(off: usize, rs: usize) -> Self {
        Self { off, rs, cs: 1 }
    }

    /// Transposed view of a row-major block.
    pub fn t(off: usize, rs: usize) -> Self {
        Self { off, rs: 1, cs: rs }
    }
}

/// Bounds check for an `r×c` view inside a buffer of length `len`.
fn fits(v: View, r: usize, c: usize, len: usize) -> bool {
    r == 0 || c == 0 || v.off + (r - 1) * v.rs + (c - 1) * v.cs < len
}

/// `C ← α·A·B + β·C` with `A: m×k`, `B: k×n`, `C: m×n` given as views into
/// separate buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    assert!(fits(av, m, k, a.len()) && fits(bv, k, n, b.len()) && fits(cv, m, n, c.len()));
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the views were bounds-checked above and `c` is borrowed mutably
    // while `a` and `b` are shared, so the three buffers cannot alias.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
/// Tanh-approximate GELU, written as `x·σ(2y)` with `y = k(x + c·x³)` so one
/// `exp` replaces the `tanh`.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let y = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
    x / (T::one() + (-(y + y)).exp())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let y = k * (x + c * x * x * x);
    let s = T::one() / (T::one() + (-(y + y)).exp());
    s + (x + x) * s * (T::one() - s) * k * (T::one() + T::of(3.0) * c * x * x)
}
