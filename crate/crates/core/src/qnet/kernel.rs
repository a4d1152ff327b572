//! Dense-layer kernels.
//!
//! Every output element is accumulated as `b + x0*w0 + x1*w1 + ...` in input
//! order, whatever the tiling or the instruction set picked at runtime, so a
//! row's result never depends on the batch it was evaluated in or on the CPU.

use num_traits::Float;

const ROWS: usize = 4;

/// Scalar types the network can be instantiated with.
pub trait Scalar: Float + Default + Send + Sync + std::fmt::Debug + 'static {
    const BYTES: u8;

    /// `out[r][o] = act(b[o] + sum_i x[r][i] * w[i][o])` for `n` rows, with
    /// `w` stored input-major (`n_in x n_out`).
    fn dense(x: &[Self], n: usize, w: &[Self], b: &[Self], relu: bool, out: &mut [Self]) {
        dense_generic::<Self, 8>(x, n, w, b, relu, out);
    }

    fn to_le(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
}

impl Scalar for f64 {
    const BYTES: u8 = 8;

    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl Scalar for f32 {
    const BYTES: u8 = 4;

    fn dense(x: &[f32], n: usize, w: &[f32], b: &[f32], relu: bool, out: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                // SAFETY: the feature was just detected on this CPU.
                return unsafe { dense_avx512(x, n, w, b, relu, out) };
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: as above.
                return unsafe { dense_avx2(x, n, w, b, relu, out) };
            }
        }
        dense_generic::<f32, 8>(x, n, w, b, relu, out);
    }

    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn dense_avx512(x: &[f32], n: usize, w: &[f32], b: &[f32], relu: bool, out: &mut [f32]) {
    dense_generic::<f32, 64>(x, n, w, b, relu, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dense_avx2(x: &[f32], n: usize, w: &[f32], b: &[f32], relu: bool, out: &mut [f32]) {
    dense_generic::<f32, 16>(x, n, w, b, relu, out);
}

#[inline(always)]
fn dense_generic<T: Float, const COLS: usize>(x: &[T], n: usize, w: &[T], b: &[T], relu: bool, out: &mut [T]) {
    let n_out = b.len();
    let n_in = w.len() / n_out.max(1);
    debug_assert_eq!(x.len(), n * n_in);
    debug_assert_eq!(out.len(), n * n_out);
    let mut r = 0;
    while r + ROWS <= n {
        tile::<T, ROWS, COLS>(x, r, n_in, w, b, relu, out);
        r += ROWS;
    }
    while r < n {
        tile::<T, 1, COLS>(x, r, n_in, w, b, relu, out);
        r += 1;
    }
}

#[inline(always)]
fn tile<T: Float, const R: usize, const COLS: usize>(
    x: &[T],
    r0: usize,
    n_in: usize,
    w: &[T],
    b: &[T],
    relu: bool,
    out: &mut [T],
) {
    let n_out = b.len();
    let xs: [&[T]; R] = std::array::from_fn(|k| &x[(r0 + k) * n_in..(r0 + k + 1) * n_in]);
    let mut c = 0;
    while c + COLS <= n_out {
        let bias: &[T; COLS] = b[c..c + COLS].try_into().unwrap();
        let mut acc = [*bias; R];
        for i in 0..n_in {
            let wi: &[T; COLS] = w[i * n_out + c..i * n_out + c + COLS].try_into().unwrap();
            for k in 0..R {
                let xv = xs[k][i];
                for j in 0..COLS {
                    acc[k][j] = acc[k][j] + xv * wi[j];
                }
            }
        }
        for (k, a) in acc.iter().enumerate() {
            let o = &mut out[(r0 + k) * n_out + c..(r0 + k) * n_out + c + COLS];
            for (dst, &v) in o.iter_mut().zip(a) {
                *dst = if relu { v.max(T::zero()) } else { v };
            }
        }
        c += COLS;
    }
    for col in c..n_out {
        for (k, xr) in xs.iter().enumerate() {
            let mut s = b[col];
            for (i, &xv) in xr.iter().enumerate() {
                s = s + xv * w[i * n_out + col];
            }
            out[(r0 + k) * n_out + col] = if relu { s.max(T::zero()) } else { s };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], n: usize, w: &[f64], b: &[f64], relu: bool) -> Vec<f64> {
        let no = b.len();
        let ni = w.len() / no;
        let mut out = vec![0.0; n * no];
        for r in 0..n {
            for o in 0..no {
                let mut s = b[o];
                for i in 0..ni {
                    s += x[r * ni + i] * w[i * no + o];
                }
                out[r * no + o] = if relu { s.max(0.0) } else { s };
            }
        }
        out
    }

    type Kernel = fn(&[f32], usize, &[f32], &[f32], bool, &mut [f32]);

    fn run(k: Kernel, x: &[f32], n: usize, w: &[f32], b: &[f32], relu: bool) -> Vec<f32> {
        let mut out = vec![0.0; n * b.len()];
        k(x, n, w, b, relu, &mut out);
        out
    }

    #[test]
    fn matches_naive_bitwise() {
        let mut s = crate::rng::KeyedStream::new(1, "kernel");
        for &(n, ni, no) in &[(1, 3, 1), (7, 32, 128), (5, 17, 33), (9, 128, 1), (6, 40, 256)] {
            let mut u = || s.next_f64() * 2.0 - 1.0;
            let x: Vec<f64> = (0..n * ni).map(|_| u()).collect();
            let w: Vec<f64> = (0..ni * no).map(|_| u()).collect();
            let b: Vec<f64> = (0..no).map(|_| u()).collect();
            for relu in [false, true] {
                let mut out = vec![0.0; n * no];
                f64::dense(&x, n, &w, &b, relu, &mut out);
                assert_eq!(out, naive(&x, n, &w, &b, relu));

                let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
                let wf: Vec<f32> = w.iter().map(|&v| v as f32).collect();
                let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
                let mut fast = vec![0.0f32; n * no];
                f32::dense(&xf, n, &wf, &bf, relu, &mut fast);
                for portable in [
                    run(dense_generic::<f32, 8>, &xf, n, &wf, &bf, relu),
                    run(dense_generic::<f32, 16>, &xf, n, &wf, &bf, relu),
                    run(dense_generic::<f32, 64>, &xf, n, &wf, &bf, relu),
                ] {
                    assert_eq!(fast, portable);
                }
            }
        }
    }
}
