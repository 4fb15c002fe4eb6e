//! Forward/backward kernels on raw buffers. These carry no graph state and
//! are reused by the tape ops and by gradient-free inference paths.

use crate::error::{ensure, Result, SfeError};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [b, cin, h, wd] = *x else {
            return Err(SfeError::shape(format!("conv2d input must be rank 4, got {x:?}")));
        };
        let [cout, wcin, kh, kw] = *w else {
            return Err(SfeError::shape(format!("conv2d kernel must be rank 4, got {w:?}")));
        };
        ensure!(stride >= 1, SfeError::config("conv2d stride must be >= 1"));
        ensure!(
            wcin == cin,
            SfeError::shape(format!("conv2d kernel expects {wcin} input channels, input has {cin}"))
        );
        ensure!(
            kh >= 1 && kw >= 1 && kh <= h + 2 * pad && kw <= wd + 2 * pad,
            SfeError::shape(format!(
                "kernel {kh}x{kw} does not fit input {h}x{wd} with padding {pad}"
            ))
        );
        Ok(ConvGeometry {
            batch: b,
            in_channels: cin,
            height: h,
            width: wd,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= w { T::zero() } else { src[jj as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= h {
                        continue;
                    }
                    let drow = &mut plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for oj in 0..ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < w {
                            drow[jj as usize] = drow[jj as usize] + src[oi * ow + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation with zero padding (im2col + GEMM per sample).
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_sz = g.in_channels * g.height * g.width;
    let out_sz = g.out_channels * ncols;
    let mut out = vec![T::zero(); g.batch * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ncols] };
    for b in 0..g.batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        T::gemm(
            g.out_channels, rows, ncols, T::one(), w, rows as isize, 1, src, ncols as isize, 1,
            T::zero(), ob, ncols as isize, 1,
        );
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_exact_mut(ncols).enumerate() {
                let bv = bias[co];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`; each is computed only when requested.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_sz = g.in_channels * g.height * g.width;
    let out_sz = g.out_channels * ncols;
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * in_sz]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.out_channels * rows]);
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.out_channels];
        for b in 0..g.batch {
            for (co, chunk) in dy[b * out_sz..(b + 1) * out_sz].chunks_exact(ncols).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum::<T>();
            }
        }
        db
    });
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * ncols }];
    let mut dcols = vec![T::zero(); if need_dx && !pointwise { rows * ncols } else { 0 }];
    for b in 0..g.batch {
        let dyb = &dy[b * out_sz..(b + 1) * out_sz];
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            // dw += dy_b (Cout×P) · cols_bᵀ (P×rows)
            T::gemm(
                g.out_channels, ncols, rows, T::one(), dyb, ncols as isize, 1, src, 1,
                ncols as isize, T::one(), dw, rows as isize, 1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
            if pointwise {
                T::gemm(
                    rows, g.out_channels, ncols, T::one(), w, 1, rows as isize, dyb,
                    ncols as isize, 1, T::zero(), dxb, ncols as isize, 1,
                );
            } else {
                // dcols = wᵀ (rows×Cout) · dy_b (Cout×P)
                T::gemm(
                    rows, g.out_channels, ncols, T::one(), w, 1, rows as isize, dyb,
                    ncols as isize, 1, T::zero(), &mut dcols, ncols as isize, 1,
                );
                col2im_add(g, &dcols, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Per-channel batch statistics over `(B, H, W)`: biased mean and variance.
pub fn channel_stats<T: Scalar>(x: &[T], b: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let m = T::from_f64((b * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for n in 0..b {
            s = s + x[(n * c + ch) * hw..(n * c + ch + 1) * hw].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut ss = T::zero();
        for n in 0..b {
            for &v in &x[(n * c + ch) * hw..(n * c + ch + 1) * hw] {
                let d = v - mu;
                ss = ss + d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = ss / m;
    }
    (mean, var)
}

/// Numerically stable softmax over the rows of a `[rows, d]` buffer.
pub fn softmax_rows<T: Scalar>(z: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); z.len()];
    for (src, dst) in z.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mx = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - mx).exp();
            s = s + *o;
        }
        dst.iter_mut().for_each(|o| *o = *o / s);
    }
    out
}

/// Row-wise `log Σ exp`.
pub fn logsumexp_rows<T: Scalar>(z: &[T], d: usize) -> Vec<T> {
    z.chunks_exact(d)
        .map(|row| {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln()
        })
        .collect()
}

pub fn softmax<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = z.dims2()?;
    ensure!(d >= 1, SfeError::shape("softmax over an empty axis"));
    Tensor::new(z.shape().to_vec(), softmax_rows(z.data(), d))
}

/// Check that every row of `p` is a probability vector.
pub fn check_distribution<T: Scalar>(p: &[T], d: usize, tol: f64) -> Result<()> {
    for (r, row) in p.chunks_exact(d).enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        ensure!(
            (s - 1.0).abs() <= tol && row.iter().all(|v| v.as_f64() >= 0.0),
            SfeError::numeric(format!("row {r} is not a probability vector (sum {s})"))
        );
    }
    Ok(())
}

pub fn global_avg_pool<T: Scalar>(x: &[T], bc: usize, hw: usize) -> Vec<T> {
    let inv = T::from_f64(1.0 / hw as f64);
    x.chunks_exact(hw).take(bc).map(|p| p.iter().copied().sum::<T>() * inv).collect()
}

/// `y = x Wᵀ + b` for `x: [rows, d_in]`, `w: [d_out, d_in]`.
pub fn linear_forward<T: Scalar>(
    x: &[T],
    rows: usize,
    d_in: usize,
    w: &[T],
    d_out: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut y = vec![T::zero(); rows * d_out];
    T::gemm(
        rows, d_in, d_out, T::one(), x, d_in as isize, 1, w, 1, d_in as isize, T::zero(), &mut y,
        d_out as isize, 1,
    );
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(d_out) {
            row.iter_mut().zip(b).for_each(|(v, &bv)| *v = *v + bv);
        }
    }
    y
}
