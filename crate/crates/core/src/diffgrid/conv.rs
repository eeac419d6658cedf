//! 1D convolution kernels on channel-major `[C, N]` buffers.
//!
//! Convolutions are lowered to a matrix product through an im2col buffer
//! whose row `c * K + k` holds `x[c, j * stride - pad + k]` for output `j`.

use crate::error::{Error, Result};

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths are checked against m, k and n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output length of a convolution with left padding `pad` and symmetric right padding.
pub fn conv_out_len(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) fn im2col(
    x: &[f64],
    channels: usize,
    n: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; channels * kernel * out_len];
    for c in 0..channels {
        let src = &x[c * n..(c + 1) * n];
        for k in 0..kernel {
            let row = &mut cols[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
            for (j, slot) in row.iter_mut().enumerate() {
                let idx = (j * stride + k) as isize - pad as isize;
                if idx >= 0 && (idx as usize) < n {
                    *slot = src[idx as usize];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto a `[C, N]` buffer.
pub(crate) fn col2im(
    cols: &[f64],
    channels: usize,
    n: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
) -> Vec<f64> {
    let mut x = vec![0.0; channels * n];
    for c in 0..channels {
        let dst = &mut x[c * n..(c + 1) * n];
        for k in 0..kernel {
            let row = &cols[(c * kernel + k) * out_len..(c * kernel + k + 1) * out_len];
            for (j, &v) in row.iter().enumerate() {
                let idx = (j * stride + k) as isize - pad as isize;
                if idx >= 0 && (idx as usize) < n {
                    dst[idx as usize] += v;
                }
            }
        }
    }
    x
}

/// Padding mode for the single-channel helpers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Only positions where the kernel fits entirely.
    Valid,
    /// Output length `ceil(N / stride)`, kernel centred (left pad `(K - 1) / 2`).
    Same,
}

/// Single-channel cross-correlation `y[j] = sum_k kernel[k] x[j * stride + k - pad]`.
pub fn conv1d(signal: &[f64], kernel: &[f64], stride: usize, padding: Padding) -> Result<Vec<f64>> {
    let (n, k) = (signal.len(), kernel.len());
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "kernel length {k} incompatible with signal length {n}"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let (pad, out_len) = match padding {
        Padding::Valid => (0, (n - k) / stride + 1),
        Padding::Same => ((k - 1) / 2, n.div_ceil(stride)),
    };
    let cols = im2col(signal, 1, n, k, stride, pad, out_len);
    let mut out = vec![0.0; out_len];
    gemm(1, k, out_len, kernel, false, &cols, false, &mut out, 0.0);
    Ok(out)
}

/// Single-channel transposed convolution: the adjoint of [`conv1d`] with the
/// same kernel, stride and left padding, producing `out_len` samples.
pub fn conv_transpose1d(
    signal: &[f64],
    kernel: &[f64],
    stride: usize,
    pad: usize,
    out_len: usize,
) -> Result<Vec<f64>> {
    let k = kernel.len();
    if k == 0 || stride == 0 {
        return Err(Error::invalid("kernel and stride must be nonempty"));
    }
    let n = signal.len();
    let mut cols = vec![0.0; k * n];
    gemm(k, 1, n, kernel, true, signal, false, &mut cols, 0.0);
    Ok(col2im(&cols, 1, out_len, k, stride, pad, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn valid_hand_example() {
        assert_eq!(
            conv1d(&[1.0, 2.0, 3.0], &[1.0, 1.0], 1, Padding::Valid).unwrap(),
            vec![3.0, 5.0]
        );
    }

    #[test]
    fn identity_and_zero_kernels() {
        let x = [0.5, -1.0, 2.0, 7.0];
        assert_eq!(conv1d(&x, &[1.0], 1, Padding::Same).unwrap(), x.to_vec());
        assert_eq!(
            conv1d(&x, &[0.0; 3], 1, Padding::Same).unwrap(),
            vec![0.0; 4]
        );
    }

    #[test]
    fn shape_errors() {
        assert!(conv1d(&[1.0], &[1.0, 1.0], 1, Padding::Valid).is_err());
        assert!(conv1d(&[1.0, 2.0], &[1.0], 0, Padding::Valid).is_err());
    }

    #[test]
    fn stride_two_same_halves_length() {
        let x: Vec<f64> = (0..8).map(f64::from).collect();
        let y = conv1d(&x, &[1.0, 1.0, 1.0, 1.0, 1.0], 2, Padding::Same).unwrap();
        // y[j] sums x[2j-2 ..= 2j+2] clipped to the signal.
        assert_eq!(y, vec![3.0, 10.0, 20.0, 22.0]);
    }

    #[test]
    fn transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
        let g: Vec<f64> = (0..8).map(|_| rng.random::<f64>() - 0.5).collect();
        let w: Vec<f64> = (0..5).map(|_| rng.random::<f64>() - 0.5).collect();
        let y = conv1d(&x, &w, 2, Padding::Same).unwrap();
        let xt = conv_transpose1d(&g, &w, 2, 2, 16).unwrap();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
