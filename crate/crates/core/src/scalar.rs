//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Storage type tag written into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Real scalar the networks and geometry kernels are generic over.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from a literal; never fails for finite input.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Larger of two values, ignoring a NaN operand. Generic code uses this
    /// instead of `Float::max` because some wide float types implement the
    /// latter by comparing bit patterns, which is wrong for negatives.
    fn maxv(self, other: Self) -> Self {
        if self >= other || other.is_nan() {
            self
        } else {
            other
        }
    }

    /// Smaller of two values, ignoring a NaN operand.
    fn minv(self, other: Self) -> Self {
        if self <= other || other.is_nan() {
            self
        } else {
            other
        }
    }

    /// Overwrites row-major `c[m×n]` with `a · b`, where entry `(i, p)` of
    /// `a` sits at `a[i·sa.0 + p·sa.1]` and entry `(p, j)` of `b` at
    /// `b[p·sb.0 + j·sb.1]`. The result of a row depends only on that row of
    /// `a`, never on `m` or on where the row sits.
    fn gemm(dims: [usize; 3], a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), c: &mut [Self]) {
        let [m, k, n] = dims;
        check_gemm(dims, a.len(), sa, b.len(), sb, c.len());
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            row.fill(Self::zero());
            for p in 0..k {
                let av = a[i * sa.0 + p * sa.1];
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[p * sb.0 + j * sb.1];
                }
            }
        }
    }
}

/// Panics unless every index a [`Scalar::gemm`] call touches is in bounds.
fn check_gemm(dims: [usize; 3], a_len: usize, sa: (usize, usize), b_len: usize, sb: (usize, usize), c_len: usize) {
    let [m, k, n] = dims;
    assert!(c_len >= m * n, "gemm output too short");
    if m * k * n > 0 {
        assert!((m - 1) * sa.0 + (k - 1) * sa.1 < a_len, "gemm left operand too short");
        assert!((k - 1) * sb.0 + (n - 1) * sb.1 < b_len, "gemm right operand too short");
    }
}

macro_rules! blas_gemm {
    ($kernel:path) => {
        fn gemm(dims: [usize; 3], a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), c: &mut [Self]) {
            let [m, k, n] = dims;
            check_gemm(dims, a.len(), sa, b.len(), sb, c.len());
            if m == 0 || n == 0 {
                return;
            }
            if k == 0 {
                c[..m * n].fill(0.0);
                return;
            }
            // SAFETY: check_gemm bounds every index the kernel reads or writes.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    sa.0 as isize,
                    sa.1 as isize,
                    b.as_ptr(),
                    sb.0 as isize,
                    sb.1 as isize,
                    0.0,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                )
            }
        }
    };
}

/// Scalars that checkpoints can store.
pub trait Storable: Scalar {
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from exactly `DTYPE.size_of()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    blas_gemm!(matrixmultiply::sgemm);
}

impl Storable for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    blas_gemm!(matrixmultiply::dgemm);
}

impl Storable for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Quad precision (113-bit significand), used as a low-noise reference when
/// checking gradients by finite differences. Not storable.
pub type Quad = f128::f128;

impl Scalar for Quad {
    fn lit(v: f64) -> Self {
        f128::f128::from(v)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

/// Precision mode selected at run time: `Fast` runs in `f32`, `Test` in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Fast,
    Test,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::Fast => DType::F32,
            Precision::Test => DType::F64,
        }
    }
}
