//! Forward/backward kernels for the 4-d (NCHW) operations.

use super::tensor::{gemm, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: ConvGeometry, cols: &mut [T]) {
    let (ho, wo) = g.output_size(h, w);
    let k = g.kernel;
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, g: ConvGeometry, dx: &mut [T]) {
    let (ho, wo) = g.output_size(h, w);
    let k = g.kernel;
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &s) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Tensor<T> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let cout = weight.dim(0);
    assert_eq!(weight.dim(1), c, "conv2d: input channel mismatch");
    let (ho, wo) = g.output_size(h, w);
    let kk = c * g.kernel * g.kernel;
    let plane = ho * wo;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * plane]
    };
    for b in 0..n {
        let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
        let ob = &mut out.data_mut()[b * cout * plane..(b + 1) * cout * plane];
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(plane).enumerate() {
                row.fill(bias.data()[co]);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, c, h, w, g, &mut cols);
            &cols
        };
        gemm(cout, kk, plane, weight.data(), false, src, false, ob, bias.is_some());
    }
    out
}

/// Returns (dx, dweight, dbias).
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeometry,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let cout = weight.dim(0);
    let (ho, wo) = (grad_out.dim(2), grad_out.dim(3));
    let kk = c * g.kernel * g.kernel;
    let plane = ho * wo;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * plane]
    };
    let mut dcols = vec![T::zero(); kk * plane];
    for b in 0..n {
        let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
        let gb = &grad_out.data()[b * cout * plane..(b + 1) * cout * plane];
        for (co, row) in gb.chunks(plane).enumerate() {
            db.data_mut()[co] += row.iter().copied().sum::<T>();
        }
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, c, h, w, g, &mut cols);
            &cols
        };
        gemm(cout, plane, kk, gb, false, src, true, dw.data_mut(), true);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[b * c * h * w..(b + 1) * c * h * w];
            if g.is_pointwise() {
                gemm(kk, cout, plane, weight.data(), true, gb, false, dxb, true);
            } else {
                gemm(kk, cout, plane, weight.data(), true, gb, false, &mut dcols, false);
                col2im(&dcols, c, h, w, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Per-(batch, group) statistics saved for the backward pass.
#[derive(Debug, Clone)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
) -> (Tensor<T>, GroupStats) {
    let (n, c) = (x.dim(0), x.dim(1));
    let hw: usize = x.shape()[2..].iter().product();
    assert_eq!(c % groups, 0, "group_norm: channels not divisible by groups");
    let cpg = c / groups;
    let block = cpg * hw;
    let mut out = Tensor::zeros(x.shape());
    let mut stats = GroupStats {
        mean: Vec::with_capacity(n * groups),
        rstd: Vec::with_capacity(n * groups),
    };
    for b in 0..n {
        for gi in 0..groups {
            let off = (b * c + gi * cpg) * hw;
            let xs = &x.data()[off..off + block];
            let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / block as f64;
            let var = xs
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / block as f64;
            let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            stats.mean.push(mean);
            stats.rstd.push(rstd);
            let (m, r) = (T::from_f64(mean), T::from_f64(rstd));
            let os = &mut out.data_mut()[off..off + block];
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                for i in cc * hw..(cc + 1) * hw {
                    os[i] = (xs[i] - m) * r * ga + be;
                }
            }
        }
    }
    (out, stats)
}

/// Returns (dx, dgamma, dbeta).
pub fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &GroupStats,
    groups: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c) = (x.dim(0), x.dim(1));
    let hw: usize = x.shape()[2..].iter().product();
    let cpg = c / groups;
    let block = cpg * hw;
    let inv_block = 1.0 / block as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut xhat = vec![0.0f64; block];
    let mut dxhat = vec![0.0f64; block];
    for b in 0..n {
        for gi in 0..groups {
            let si = b * groups + gi;
            let (mean, rstd) = (stats.mean[si], stats.rstd[si]);
            let off = (b * c + gi * cpg) * hw;
            let xs = &x.data()[off..off + block];
            let gs = &grad_out.data()[off..off + block];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let ga = gamma.data()[ch].as_f64();
                for i in cc * hw..(cc + 1) * hw {
                    let xh = (xs[i].as_f64() - mean) * rstd;
                    let gy = gs[i].as_f64();
                    xhat[i] = xh;
                    dgamma[ch] += gy * xh;
                    dbeta[ch] += gy;
                    let d = gy * ga;
                    dxhat[i] = d;
                    sum_dxhat += d;
                    sum_dxhat_xhat += d * xh;
                }
            }
            let mean_d = sum_dxhat * inv_block;
            let mean_dx = sum_dxhat_xhat * inv_block;
            let ds = &mut dx.data_mut()[off..off + block];
            for i in 0..block {
                ds[i] = T::from_f64(rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx));
            }
        }
    }
    let to_t = |v: Vec<f64>| Tensor::from_vec(&[c], v.into_iter().map(T::from_f64).collect());
    (dx, to_t(dgamma), to_t(dbeta))
}

pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of nearest-neighbour ×2 upsampling: sums each 2×2 block.
pub fn sum_pool2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..ho {
            for xx in 0..wo {
                let i = (p * h + 2 * y) * w + 2 * xx;
                dst[(p * ho + y) * wo + xx] = src[i] + src[i + 1] + src[i + w] + src[i + w + 1];
            }
        }
    }
    out
}

pub fn avg_pool2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    sum_pool2x(x).scale(T::from_f64(0.25))
}

/// Orthonormal single-level Haar analysis per channel.
///
/// `[N, C, H, W] -> [N, 4C, H/2, W/2]`, bands of input channel `c` at output
/// channels `4c..4c+4` in the order LL, LH, HL, HH.
pub fn haar_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    assert!(h % 2 == 0 && w % 2 == 0, "haar: dims must be even");
    let (ho, wo) = (h / 2, w / 2);
    let half = T::from_f64(0.5);
    let mut out = Tensor::zeros(&[n, 4 * c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    let band = ho * wo;
    for p in 0..n * c {
        let base = p * 4 * band;
        for y in 0..ho {
            for xx in 0..wo {
                let i = (p * h + 2 * y) * w + 2 * xx;
                let (a, b, cc, d) = (src[i], src[i + 1], src[i + w], src[i + w + 1]);
                let o = y * wo + xx;
                dst[base + o] = (a + b + cc + d) * half;
                dst[base + band + o] = (a + b - cc - d) * half;
                dst[base + 2 * band + o] = (a - b + cc - d) * half;
                dst[base + 3 * band + o] = (a - b - cc + d) * half;
            }
        }
    }
    out
}

/// Inverse of [`haar_forward`]: `[N, 4C, h, w] -> [N, C, 2h, 2w]`.
pub fn haar_inverse<T: Scalar>(bands: &Tensor<T>) -> Tensor<T> {
    let (n, c4, ho, wo) = (bands.dim(0), bands.dim(1), bands.dim(2), bands.dim(3));
    assert_eq!(c4 % 4, 0, "haar_inverse: channel count must be a multiple of 4");
    let c = c4 / 4;
    let (h, w) = (2 * ho, 2 * wo);
    let half = T::from_f64(0.5);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let src = bands.data();
    let dst = out.data_mut();
    let band = ho * wo;
    for p in 0..n * c {
        let base = p * 4 * band;
        for y in 0..ho {
            for xx in 0..wo {
                let o = y * wo + xx;
                let ll = src[base + o];
                let lh = src[base + band + o];
                let hl = src[base + 2 * band + o];
                let hh = src[base + 3 * band + o];
                let i = (p * h + 2 * y) * w + 2 * xx;
                dst[i] = (ll + hl + lh + hh) * half;
                dst[i + 1] = (ll - hl + lh - hh) * half;
                dst[i + w] = (ll + hl - lh - hh) * half;
                dst[i + w + 1] = (ll - hl - lh + hh) * half;
            }
        }
    }
    out
}

/// Batched `op(a) · op(b)` over 3-d tensors.
pub fn batched_matmul<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Tensor<T> {
    let batch = a.dim(0);
    assert_eq!(b.dim(0), batch, "matmul batch mismatch");
    let (m, k) = if ta { (a.dim(2), a.dim(1)) } else { (a.dim(1), a.dim(2)) };
    let (kb, n) = if tb { (b.dim(2), b.dim(1)) } else { (b.dim(1), b.dim(2)) };
    assert_eq!(k, kb, "matmul inner dimension mismatch");
    let mut out = Tensor::zeros(&[batch, m, n]);
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            ta,
            &b.data()[i * k * n..(i + 1) * k * n],
            tb,
            &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    out
}

/// Softmax over the last axis.
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let last = *x.shape().last().expect("softmax on a scalar");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(last) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeometry) -> Tensor<f64> {
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let cout = w.dim(0);
        let (ho, wo) = g.output_size(h, wd);
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((co * c + ci) * g.kernel + ky) * g.kernel + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 7 % 13) as f64 - 6.0) * scale).collect())
    }

    #[test]
    fn conv_matches_direct_loop() {
        for g in [
            ConvGeometry { kernel: 3, stride: 1, pad: 1 },
            ConvGeometry { kernel: 3, stride: 2, pad: 1 },
            ConvGeometry { kernel: 1, stride: 1, pad: 0 },
        ] {
            let x = ramp(&[2, 3, 6, 6], 0.1);
            let w = ramp(&[4, 3, g.kernel, g.kernel], 0.05);
            let got = conv2d_forward(&x, &w, None, g);
            let want = naive_conv(&x, &w, g);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn haar_inverse_undoes_forward() {
        let x = ramp(&[1, 2, 4, 6], 0.3);
        let back = haar_inverse(&haar_forward(&x));
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax_last(&ramp(&[2, 3, 5], 1.0));
        for row in s.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
