//! Contractions and prefix operations. Reduction order is fixed
//! (sequential, left to right per lane) so results are bit-stable per dtype.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Inclusive prefix sum along `axis`. out[i] = sum_{j<=i} x[j].
pub fn cumsum<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let rank = x.rank();
    if axis >= rank {
        return Err(Error::AxisOutOfRange { axis, rank });
    }
    let dims = x.dims();
    let n = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();

    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        let base = o * n * inner;
        for i in 1..n {
            for j in 0..inner {
                let prev = data[base + (i - 1) * inner + j];
                data[base + i * inner + j] += prev;
            }
        }
    }
    Ok(out)
}

/// In-place prefix sum over a flat lane; the scalar-sequence form the
/// coefficient kernels use.
pub fn cumsum_slice<T: Scalar>(x: &mut [T]) {
    for i in 1..x.len() {
        let prev = x[i - 1];
        x[i] += prev;
    }
}

/// Chunkwise log-sum-exp prefix: out[i] = log sum_{j<=i} exp(log_c[j]).
///
/// Works on the masked C x C broadcast with per-row max subtraction, so
/// entries anywhere in [-1e4, 1e4] neither overflow nor underflow and -inf
/// sentinels pass through (an all-sentinel prefix stays -inf).
///
/// `chunk_index` shifts the global positions used for the causal mask; for
/// equal-length chunks the mask reduces to j <= i regardless, and the
/// parameter only documents which chunk the lane came from.
pub fn log_cumsum_exp_tril<T: Scalar>(log_c: &[T], chunk_index: usize) -> Vec<T> {
    let c = log_c.len();
    let offset = chunk_index * c;
    let mut out = vec![T::NEG_INFINITY; c];
    for i in 0..c {
        // Row max over the masked prefix.
        let mut row_max = T::NEG_INFINITY;
        for j in 0..c {
            if offset + i >= offset + j && log_c[j] > row_max {
                row_max = log_c[j];
            }
        }
        if row_max == T::NEG_INFINITY {
            // Whole prefix is -inf; exp-sum would be 0/0 under the shift.
            out[i] = T::NEG_INFINITY;
            continue;
        }
        let mut sum = T::ZERO;
        for j in 0..=i {
            sum += (log_c[j] - row_max).exp();
        }
        out[i] = sum.ln() + row_max;
    }
    out
}

/// Inverse of a unit lower triangular matrix by forward substitution,
/// column by column. The inverse is unit lower triangular as well.
pub fn unit_lower_tri_inverse<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = a.dims();
    if dims.len() != 2 || dims[0] != dims[1] {
        return Err(Error::ShapeMismatch(format!(
            "unit_lower_tri_inverse expects a square matrix, got {:?}",
            dims
        )));
    }
    let c = dims[0];
    let ad = a.data();
    for i in 0..c {
        if ad[i * c + i] != T::ONE {
            return Err(Error::Precondition(format!(
                "diagonal entry ({i},{i}) is {} (unit lower triangular required)",
                ad[i * c + i]
            )));
        }
    }

    let mut inv = vec![T::ZERO; c * c];
    for j in 0..c {
        inv[j * c + j] = T::ONE;
        for i in (j + 1)..c {
            // x[i][j] = -sum_{k=j..i-1} a[i][k] * x[k][j]
            let mut acc = T::ZERO;
            for k in j..i {
                acc += ad[i * c + k] * inv[k * c + j];
            }
            inv[i * c + j] = -acc;
        }
    }
    Tensor::from_vec(&[c, c], inv)
}

/// Plain 2-D matrix product.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ad, bd) = (a.dims(), b.dims());
    if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
        return Err(Error::ShapeMismatch(format!(
            "matmul {:?} x {:?}",
            ad, bd
        )));
    }
    let (m, k, n) = (ad[0], ad[1], bd[1]);
    let mut out = vec![T::ZERO; m * n];
    matmul_into(a.data(), b.data(), m, k, n, &mut out);
    Tensor::from_vec(&[m, n], out)
}

/// out[m,n] = a[m,k] * b[k,n] on raw row-major slices; i-k-j loop order.
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(T::ZERO);
    for i in 0..m {
        for l in 0..k {
            let aik = a[i * k + l];
            if aik == T::ZERO {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]: accumulating transpose-product used by the
/// chunk state updates.
pub fn matmul_tn_accum<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let ali = arow[i];
            if ali == T::ZERO {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += ali * brow[j];
            }
        }
    }
}

/// Element-wise product of same-shaped tensors.
pub fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "hadamard {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::from_vec(a.dims(), data)
}

/// 2-D transpose.
pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = a.dims();
    if dims.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "transpose expects a matrix, got {:?}",
            dims
        )));
    }
    let (m, n) = (dims[0], dims[1]);
    let ad = a.data();
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out)
}

/// sqrt(sum of squares) over the whole buffer.
pub fn frobenius_norm<T: Scalar>(a: &Tensor<T>) -> T {
    frobenius_norm_slice(a.data())
}

pub fn frobenius_norm_slice<T: Scalar>(a: &[T]) -> T {
    let mut acc = T::ZERO;
    for &x in a {
        acc += x * x;
    }
    acc.sqrt()
}
