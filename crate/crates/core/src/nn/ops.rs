//! Per-sample kernels shared by the layer engine and the graph runtime.

/// Output extent of a sliding window; `None` when the window does not fit.
pub fn window_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        Some(ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            kernel,
            stride,
            pad,
            out_h: window_out(in_h, kernel, stride, pad)?,
            out_w: window_out(in_w, kernel, stride, pad)?,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let l = g.col_cols();
    let mut cols = vec![0.0f32; g.col_rows() * l];
    for c in 0..g.in_c {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &x[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let l = g.col_cols();
    let mut x = vec![0.0f32; g.in_c * g.in_h * g.in_w];
    for c in 0..g.in_c {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = (c * g.in_h + iy as usize) * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            x[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// C = alpha·A·B + beta·C for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    debug_assert!(c.len() >= (m - 1) * rsc + n || m == 0);
    // SAFETY: all slices cover the strided extents implied by m, k, n and the
    // given strides; callers construct strides from the slice shapes.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Convolution of one sample. Weight layout is (out_c, in_c, k, k).
pub fn conv2d_forward(x: &[f32], weight: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let cols = im2col(x, g);
    let (kk, l) = (g.col_rows(), g.col_cols());
    let mut y = vec![0.0f32; g.out_c * l];
    if let Some(b) = bias {
        for (o, row) in y.chunks_mut(l).enumerate() {
            row.fill(b[o]);
        }
    }
    gemm(g.out_c, kk, l, weight, kk, 1, &cols, l, 1, 1.0, &mut y, l);
    y
}

/// Gradients of one sample: (dx, dweight, dbias). Parameter gradients are
/// skipped when `param_grads` is false.
pub fn conv2d_backward(
    x: &[f32],
    dy: &[f32],
    weight: &[f32],
    g: &ConvGeom,
    param_grads: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (kk, l) = (g.col_rows(), g.col_cols());
    let mut dw = Vec::new();
    let mut db = Vec::new();
    if param_grads {
        let cols = im2col(x, g);
        dw = vec![0.0f32; g.out_c * kk];
        // dW = dY · colsᵀ
        gemm(g.out_c, l, kk, dy, l, 1, &cols, 1, l, 0.0, &mut dw, kk);
        db = dy.chunks(l).map(|r| r.iter().sum()).collect();
    }
    let mut dcols = vec![0.0f32; kk * l];
    // dcols = Wᵀ · dY
    gemm(kk, g.out_c, l, weight, 1, kk, dy, l, 1, 0.0, &mut dcols, l);
    (col2im(&dcols, g), dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(c: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        Some(PoolGeom {
            c,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: window_out(in_h, kernel, stride, pad)?,
            out_w: window_out(in_w, kernel, stride, pad)?,
        })
    }
}

/// Max pooling with implicit -inf padding. Returns outputs and the flat input
/// index of each maximum.
pub fn maxpool_forward(x: &[f32], g: &PoolGeom) -> (Vec<f32>, Vec<u32>) {
    let n = g.c * g.out_h * g.out_w;
    let mut y = vec![f32::NEG_INFINITY; n];
    let mut arg = vec![0u32; n];
    for c in 0..g.c {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = (c * g.out_h + oy) * g.out_w + ox;
                for ki in 0..g.kernel {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kj in 0..g.kernel {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let idx = (c * g.in_h + iy as usize) * g.in_w + ix as usize;
                        if x[idx] > y[o] {
                            y[o] = x[idx];
                            arg[o] = idx as u32;
                        }
                    }
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward(dy: &[f32], arg: &[u32], in_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0; in_len];
    for (&g, &i) in dy.iter().zip(arg) {
        dx[i as usize] += g;
    }
    dx
}

fn bin(i: usize, n_out: usize, n_in: usize) -> (usize, usize) {
    let start = i * n_in / n_out;
    let end = ((i + 1) * n_in).div_ceil(n_out);
    (start, end)
}

/// Adaptive average pooling to (out_h, out_w).
pub fn adaptive_avg_forward(x: &[f32], c: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut y = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for oy in 0..out_h {
            let (y0, y1) = bin(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1) = bin(ox, out_w, w);
                let mut s = 0.0f32;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        s += x[(ch * h + iy) * w + ix];
                    }
                }
                y[(ch * out_h + oy) * out_w + ox] = s / ((y1 - y0) * (x1 - x0)) as f32;
            }
        }
    }
    y
}

pub fn adaptive_avg_backward(dy: &[f32], c: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..out_h {
            let (y0, y1) = bin(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1) = bin(ox, out_w, w);
                let g = dy[(ch * out_h + oy) * out_w + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        dx[(ch * h + iy) * w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}

/// y = x·Wᵀ + b for a batch; W is (out, in).
pub fn linear_forward(x: &[f32], n: usize, weight: &[f32], bias: &[f32], in_f: usize, out_f: usize) -> Vec<f32> {
    let mut y = Vec::with_capacity(n * out_f);
    for _ in 0..n {
        y.extend_from_slice(bias);
    }
    gemm(n, in_f, out_f, x, in_f, 1, weight, 1, in_f, 1.0, &mut y, out_f);
    y
}

/// Returns (dx, dW, db).
pub fn linear_backward(
    x: &[f32],
    dy: &[f32],
    n: usize,
    weight: &[f32],
    in_f: usize,
    out_f: usize,
    param_grads: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0; n * in_f];
    gemm(n, out_f, in_f, dy, out_f, 1, weight, in_f, 1, 0.0, &mut dx, in_f);
    if !param_grads {
        return (dx, Vec::new(), Vec::new());
    }
    let mut dw = vec![0.0; out_f * in_f];
    gemm(out_f, n, in_f, dy, 1, out_f, x, in_f, 1, 0.0, &mut dw, in_f);
    let mut db = vec![0.0; out_f];
    for row in dy.chunks(out_f) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (dx, dw, db)
}

/// Row-wise softmax in f64 for numerical headroom.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn naive_conv(x: &[f32], w: &[f32], b: &[f32], g: &ConvGeom) -> Vec<f32> {
        let mut y = vec![0.0; g.out_c * g.out_h * g.out_w];
        for o in 0..g.out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut s = b[o] as f64;
                    for c in 0..g.in_c {
                        for ki in 0..g.kernel {
                            for kj in 0..g.kernel {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                    s += (x[(c * g.in_h + iy as usize) * g.in_w + ix as usize]
                                        * w[((o * g.in_c + c) * g.kernel + ki) * g.kernel + kj])
                                        as f64;
                                }
                            }
                        }
                    }
                    y[(o * g.out_h + oy) * g.out_w + ox] = s as f32;
                }
            }
        }
        y
    }

    fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for (k, s, p) in [(3, 1, 1), (5, 2, 2), (1, 1, 0), (3, 2, 0)] {
            let g = ConvGeom::new(2, 7, 6, 3, k, s, p).unwrap();
            let x = rand_vec(2 * 7 * 6, &mut rng);
            let w = rand_vec(3 * 2 * k * k, &mut rng);
            let b = rand_vec(3, &mut rng);
            let fast = conv2d_forward(&x, &w, Some(&b), &g);
            let slow = naive_conv(&x, &w, &b, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let g = ConvGeom::new(2, 5, 5, 2, 3, 2, 1).unwrap();
        let x = rand_vec(50, &mut rng);
        let w = rand_vec(36, &mut rng);
        let b = vec![0.0; 2];
        let r = rand_vec(g.out_c * g.out_h * g.out_w, &mut rng);
        // loss = Σ r ⊙ y
        let loss = |x: &[f32], w: &[f32]| -> f64 {
            naive_conv(x, w, &b, &g)
                .iter()
                .zip(&r)
                .map(|(y, r)| (*y as f64) * (*r as f64))
                .sum()
        };
        let (dx, dw, db) = conv2d_backward(&x, &r, &w, &g, true);
        let eps = 1e-2f32;
        for i in [0, 7, 23, 49] {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * eps as f64);
            assert!((fd - dx[i] as f64).abs() < 1e-3, "dx[{i}]");
        }
        for i in [0, 11, 35] {
            let mut wp = w.clone();
            wp[i] += eps;
            let mut wm = w.clone();
            wm[i] -= eps;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * eps as f64);
            assert!((fd - dw[i] as f64).abs() < 1e-3, "dw[{i}]");
        }
        let l = g.out_h * g.out_w;
        assert!((db[1] - r[l..].iter().sum::<f32>()).abs() < 1e-6);
    }

    #[test]
    fn maxpool_with_padding() {
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let g = PoolGeom::new(1, 4, 4, 3, 2, 1).unwrap();
        let (y, arg) = maxpool_forward(&x, &g);
        assert_eq!(y, vec![5.0, 7.0, 13.0, 15.0]);
        let dx = maxpool_backward(&[1.0; 4], &arg, 16);
        assert_eq!(dx[5], 1.0);
        assert_eq!(dx.iter().sum::<f32>(), 4.0);
    }

    #[test]
    fn adaptive_pool_bins() {
        let x: Vec<f32> = (0..25).map(|v| v as f32).collect();
        let y = adaptive_avg_forward(&x, 1, 5, 5, 2, 2);
        // bins [0,3) and [2,5)
        assert_eq!(
            y[0],
            (0..3)
                .flat_map(|r| (0..3).map(move |c| (r * 5 + c) as f32))
                .sum::<f32>()
                / 9.0
        );
        let dx = adaptive_avg_backward(&[1.0; 4], 1, 5, 5, 2, 2);
        assert!((dx.iter().sum::<f32>() - 4.0).abs() < 1e-6);
        assert!((dx[12] - 4.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn linear_round_trip_shapes() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let w = vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5];
        let y = linear_forward(&x, 2, &w, &[0.0, 1.0], 3, 2);
        assert_eq!(y, vec![-2.0, 4.0, -2.0, 8.5]);
        let (dx, dw, db) = linear_backward(&x, &[1.0, 0.0, 0.0, 1.0], 2, &w, 3, 2, true);
        assert_eq!(dx, vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        assert_eq!(dw, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(db, vec![1.0, 1.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - 0.5).abs() < 1e-12);
    }
}
