//! Slice-level kernels shared by the tape ops.

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Layout { rs: cols, cs: 1 }
    }

    /// A row-major `[rows, cols]` buffer read as its transpose.
    pub fn transposed(cols: usize) -> Self {
        Layout { rs: 1, cs: cols }
    }
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, l: Layout| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * l.rs + (cols - 1) * l.cs + 1
        }
    };
    assert!(a.len() >= last(m, k, la), "gemm: lhs buffer too small");
    assert!(b.len() >= last(k, n, lb), "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    // SAFETY: bounds of every operand were checked above against the strides
    // handed to the kernel; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Copies `src` (viewed as `[a, x, m, y, z]`) into `dst` laid out as
/// `[a, y, m, x, z]`, swapping the `x` and `y` axes.
pub(crate) fn swap_axes(src: &[f64], dst: &mut [f64], dims: [usize; 5]) {
    let [a, x, m, y, z] = dims;
    for ia in 0..a {
        for ix in 0..x {
            for im in 0..m {
                for iy in 0..y {
                    let s = ((((ia * x + ix) * m + im) * y) + iy) * z;
                    let d = ((((ia * y + iy) * m + im) * x) + ix) * z;
                    dst[d..d + z].copy_from_slice(&src[s..s + z]);
                }
            }
        }
    }
}

/// Numerically stable softmax along the middle axis of `[outer, len, inner]`.
pub(crate) fn softmax_axis(x: &[f64], y: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[idx(j)]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                y[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                y[idx(j)] /= sum;
            }
        }
    }
}

/// Softmax of one contiguous row; returns `log Σ exp(x)`.
pub(crate) fn softmax_row(x: &[f64], y: &mut [f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (yi, xi) in y.iter_mut().zip(x) {
        let e = (xi - max).exp();
        *yi = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for yi in y.iter_mut() {
        *yi *= inv;
    }
    max + sum.ln()
}

/// `log Σ exp(row)` computed with max subtraction.
pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Rotary angle table `[seq, half]` for interleaved pairs `(2i, 2i+1)`.
pub(crate) fn rope_table(seq: usize, d_head: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = d_head / 2;
    let mut cos = Vec::with_capacity(seq * half);
    let mut sin = Vec::with_capacity(seq * half);
    for pos in 0..seq {
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / d_head as f64);
            let angle = pos as f64 * freq;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

/// Applies the rotation (or its inverse when `inverse`) to `[.., seq, d_head]`.
pub(crate) fn rope_apply(
    x: &[f64],
    y: &mut [f64],
    seq: usize,
    d_head: usize,
    cos: &[f64],
    sin: &[f64],
    inverse: bool,
) {
    let half = d_head / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    for (row_idx, (xr, yr)) in x.chunks(d_head).zip(y.chunks_mut(d_head)).enumerate() {
        let pos = row_idx % seq;
        for i in 0..half {
            let c = cos[pos * half + i];
            let s = sign * sin[pos * half + i];
            let (x0, x1) = (xr[2 * i], xr[2 * i + 1]);
            yr[2 * i] = x0 * c - x1 * s;
            yr[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}
