//! Raw numeric kernels shared by forward and backward passes.

/// Strided matrix view: element (i, j) lives at `offset + i * rs + j * cs`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f32],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f32], cols: usize) -> Self {
        View { data, rs: cols as isize, cs: 1 }
    }

    /// Transposed view of a row-major (rows x cols) matrix.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        View { data, rs: 1, cs: cols as isize }
    }
}

/// `out (m x n) = beta * out + a (m x k) * b (k x n)`, `out` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View, b: View, out: &mut [f32], beta: f32) {
    debug_assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut out[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: callers pass slices covering every (i, j) index reachable
    // through the given strides; `out` has at least m*n elements.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape`, the flat index into an operand of shape
/// `src` broadcast against it.
#[cfg(test)]
pub(crate) fn broadcast_index(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        let o = i + rank - src.len();
        if src[i] != 1 {
            eff[o] = src_strides[i];
        }
    }
    let mut idx = vec![0usize; n];
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for slot in idx.iter_mut() {
        *slot = flat;
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += eff[d];
            if counter[d] < out_shape[d] {
                break;
            }
            flat -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

fn effective_strides(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        if src[i] != 1 {
            eff[i + rank - src.len()] = src_strides[i];
        }
    }
    eff
}

/// Visits `out_shape` one innermost row at a time, passing the row's flat
/// offset in the output and in each broadcast operand together with the
/// operands' step along the row (0 when broadcast, 1 otherwise).
pub(crate) fn broadcast_rows(
    out_shape: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let rank = out_shape.len();
    let n: usize = out_shape.iter().product();
    if n == 0 {
        return;
    }
    let (ea, eb) = (effective_strides(a, out_shape), effective_strides(b, out_shape));
    let row = out_shape[rank - 1];
    let (sa, sb) = (ea[rank - 1], eb[rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut out = 0;
    while out < n {
        f(out, oa, sa, ob, sb, row);
        out += row;
        for d in (0..rank - 1).rev() {
            counter[d] += 1;
            oa += ea[d];
            ob += eb[d];
            if counter[d] < out_shape[d] {
                break;
            }
            oa -= ea[d] * counter[d];
            ob -= eb[d] * counter[d];
            counter[d] = 0;
        }
    }
}

/// Permutation of flat indices produced by swapping two axes: `out[i] = src[perm[i]]`.
pub(crate) fn transpose_index(shape: &[usize], d0: usize, d1: usize) -> (Vec<usize>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    let mut src_strides = strides(shape);
    src_strides.swap(d0, d1);
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut perm = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        perm.push(flat);
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            flat -= src_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    (out_shape, perm)
}

/// Fill columns of `cols` (cin*kw rows of stride `ld`) from one batch item
/// `x` (cin x len); `cols` starts at this item's first column.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    x: &[f32],
    cin: usize,
    len: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    lout: usize,
    ld: usize,
    cols: &mut [f32],
) {
    for c in 0..cin {
        let src = &x[c * len..(c + 1) * len];
        for j in 0..kw {
            let row = &mut cols[(c * kw + j) * ld..(c * kw + j) * ld + lout];
            let (lo, hi) = valid_range(len, j, stride, pad, lout);
            row[..lo].fill(0.0);
            row[hi..].fill(0.0);
            if stride == 1 {
                row[lo..hi].copy_from_slice(&src[lo + j - pad..hi + j - pad]);
            } else {
                for o in lo..hi {
                    row[o] = src[o * stride + j - pad];
                }
            }
        }
    }
}

/// Output positions `o` in `lo..hi` whose tap `j` lands inside the input.
fn valid_range(len: usize, j: usize, stride: usize, pad: usize, lout: usize) -> (usize, usize) {
    let lo = if pad > j { (pad - j).div_ceil(stride) } else { 0 };
    let hi = if len + pad <= j { 0 } else { ((len + pad - j - 1) / stride + 1).min(lout) };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f32],
    cin: usize,
    len: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    lout: usize,
    ld: usize,
    dx: &mut [f32],
) {
    for c in 0..cin {
        let dst = &mut dx[c * len..(c + 1) * len];
        for j in 0..kw {
            let row = &cols[(c * kw + j) * ld..(c * kw + j) * ld + lout];
            let (lo, hi) = valid_range(len, j, stride, pad, lout);
            for o in lo..hi {
                dst[o * stride + j - pad] += row[o];
            }
        }
    }
}

/// Two-tap weights for endpoint-aligned linear resampling from `lin` to `lout`
/// samples. `lout == 1` averages all inputs and is reported as `None`.
pub(crate) fn interp_taps(lin: usize, lout: usize) -> Option<Vec<(usize, usize, f32, f32)>> {
    if lout == 1 {
        return None;
    }
    let taps = (0..lout)
        .map(|i| {
            if lin == 1 {
                return (0, 0, 1.0, 0.0);
            }
            let pos = (i * (lin - 1)) as f64 / (lout - 1) as f64;
            let i0 = (pos.floor() as usize).min(lin - 1);
            let frac = pos - i0 as f64;
            if i0 == lin - 1 || frac == 0.0 {
                (i0, i0, 1.0, 0.0)
            } else {
                (i0, i0 + 1, (1.0 - frac) as f32, frac as f32)
            }
        })
        .collect();
    Some(taps)
}

/// Rational tanh approximation, accurate to a few ulp in f32.
pub(crate) fn tanh(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    if x.abs() < 4e-4 {
        return x;
    }
    if x.abs() >= CLAMP {
        return x.signum();
    }
    let x2 = x * x;
    let mut p = x2 * -2.760_768_5e-16 + 2.000_187_9e-13;
    p = x2 * p + -8.604_671_5e-11;
    p = x2 * p + 5.122_297e-8;
    p = x2 * p + 1.485_722_4e-5;
    p = x2 * p + 6.372_619_3e-4;
    p = x2 * p + 4.893_524_6e-3;
    p *= x;
    let mut q = x2 * 1.198_258_4e-6 + 1.185_347_1e-4;
    q = x2 * q + 2.268_434_6e-3;
    q = x2 * q + 4.893_525e-3;
    p / q
}

pub(crate) fn gelu(x: f32) -> f32 {
    const K: f32 = 0.797_884_6; // sqrt(2/pi)
    let inner = K * (x + 0.044_715 * x * x * x);
    0.5 * x * (1.0 + tanh(inner))
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    const K: f32 = 0.797_884_6;
    let x2 = x * x;
    let inner = K * (x + 0.044_715 * x2 * x);
    let t = tanh(inner);
    let dinner = K * (1.0 + 3.0 * 0.044_715 * x2);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}
