//! Row-major matrix products. Every output row is computed from its own
//! operands in a fixed order, so results do not depend on the thread count
//! or on the position of a row within the matrix.

use rayon::prelude::*;

use crate::scalar::Scalar;

const PAR_THRESHOLD: usize = 1 << 16;

/// `c[m×n] = lhs · rhs` with `lhs` entry `(i, p)` at `a[i·sa.0 + p·sa.1]`,
/// split into row groups across workers when the product is large.
fn product<T: Scalar>(dims: [usize; 3], a: &[T], sa: (usize, usize), b: &[T], sb: (usize, usize)) -> Vec<T> {
    let [m, k, n] = dims;
    let mut c = vec![T::zero(); m * n];
    let threads = rayon::current_num_threads();
    if m * k * n >= PAR_THRESHOLD && threads > 1 && m > 1 && n > 0 {
        let per = m.div_ceil(threads);
        c.par_chunks_mut(per * n).enumerate().for_each(|(g, chunk)| {
            let rows = chunk.len() / n;
            T::gemm([rows, k, n], &a[g * per * sa.0..], sa, b, sb, chunk);
        });
    } else {
        T::gemm(dims, a, sa, b, sb, &mut c);
    }
    c
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    product([m, k, n], a, (k, 1), b, (n, 1))
}

/// `aᵀ · b` for `a[m×k]`, `b[m×n]`, giving `k×n`.
pub fn matmul_at_b<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    product([k, m, n], a, (1, k), b, (n, 1))
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`, giving `m×n`.
pub fn matmul_a_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    product([m, k, n], a, (k, 1), b, (1, k))
}
