//! Convolution, pooling and resampling kernels.
//!
//! All kernels are plain functions over [`Tensor`] buffers; the tape in
//! `autodiff` wires them into forward/backward pairs. Work is split across
//! threads only along independent output planes, so results are bitwise
//! identical for any thread count.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Output spatial size of a correlation with the given geometry.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of the transposed (fractionally strided) operation.
pub fn conv_transpose_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// 2-D cross-correlation. `x` is `[N,Ci,H,W]`, `weight` is `[Co,Ci,kh,kw]`,
/// `bias` (optional) is `[Co]`.
pub fn conv2d_fwd(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, ci, h, w) = x.nchw()?;
    let (co, wci, kh, kw) = weight.nchw()?;
    if wci != ci {
        return Err(Error::shape(weight.shape(), &[co, ci, kh, kw]));
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::shape(&[co], b.shape()));
        }
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(x.shape(), &[n, ci, kh, kw]));
    }
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);

    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let xs = x.data();
    let ws = weight.data();
    let plane = ho * wo;

    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, y_plane)| {
            let ni = idx / co;
            let coi = idx % co;
            if let Some(b) = bias {
                let bv = b.data()[coi];
                y_plane.iter_mut().for_each(|v| *v = bv);
            }
            for cii in 0..ci {
                let x_plane = &xs[(ni * ci + cii) * h * w..(ni * ci + cii + 1) * h * w];
                let w_base = ((coi * ci) + cii) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = ws[w_base + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        accumulate_corr(
                            y_plane, x_plane, wv, h, w, ho, wo, ky, kx, stride, pad,
                        );
                    }
                }
            }
        });
    Ok(out)
}

/// y[oy,ox] += wv * x[oy*s+ky-pad, ox*s+kx-pad] over the valid range.
#[inline]
fn accumulate_corr(
    y: &mut [f64],
    x: &[f64],
    wv: f64,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
) {
    let (oy_lo, oy_hi) = valid_out_range(h, ho, ky, stride, pad);
    let (ox_lo, ox_hi) = valid_out_range(w, wo, kx, stride, pad);
    if oy_lo >= oy_hi || ox_lo >= ox_hi {
        return;
    }
    if stride == 1 {
        let dx = kx as isize - pad as isize;
        for oy in oy_lo..oy_hi {
            let iy = (oy as isize + ky as isize - pad as isize) as usize;
            let y_row = &mut y[oy * wo + ox_lo..oy * wo + ox_hi];
            let x_off = (iy * w) as isize + ox_lo as isize + dx;
            let x_row = &x[x_off as usize..x_off as usize + (ox_hi - ox_lo)];
            for (yv, xv) in y_row.iter_mut().zip(x_row) {
                *yv += wv * xv;
            }
        }
    } else {
        for oy in oy_lo..oy_hi {
            let iy = oy * stride + ky - pad;
            for ox in ox_lo..ox_hi {
                let ix = ox * stride + kx - pad;
                y[oy * wo + ox] += wv * x[iy * w + ix];
            }
        }
    }
}

/// Output indices o with 0 <= o*stride + k - pad < input, clamped to [0, out).
#[inline]
fn valid_out_range(input: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let s = stride as isize;
    let shift = k as isize - pad as isize;
    let lo = (-shift + s - 1).div_euclid(s).max(0) as usize;
    let hi = ((input as isize - shift + s - 1).div_euclid(s)).max(0) as usize;
    (lo.min(out), hi.min(out))
}

/// Gradient of `conv2d_fwd` w.r.t. its input.
pub fn conv2d_bwd_input(
    dy: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    h_in: usize,
    w_in: usize,
) -> Result<Tensor> {
    let (n, co, ho, wo) = dy.nchw()?;
    let (wco, ci, kh, kw) = weight.nchw()?;
    if wco != co {
        return Err(Error::shape(weight.shape(), &[co, ci, kh, kw]));
    }
    let mut dx = Tensor::zeros(&[n, ci, h_in, w_in]);
    let dys = dy.data();
    let ws = weight.data();
    let plane = h_in * w_in;

    dx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dx_plane)| {
            let ni = idx / ci;
            let cii = idx % ci;
            for coi in 0..co {
                let dy_plane = &dys[(ni * co + coi) * ho * wo..(ni * co + coi + 1) * ho * wo];
                let w_base = ((coi * ci) + cii) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = ws[w_base + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        scatter_corr(
                            dx_plane, dy_plane, wv, h_in, w_in, ho, wo, ky, kx, stride, pad,
                        );
                    }
                }
            }
        });
    Ok(dx)
}

/// dx[oy*s+ky-pad, ox*s+kx-pad] += wv * dy[oy,ox] over the valid range.
#[inline]
fn scatter_corr(
    dx: &mut [f64],
    dy: &[f64],
    wv: f64,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
) {
    let (oy_lo, oy_hi) = valid_out_range(h, ho, ky, stride, pad);
    let (ox_lo, ox_hi) = valid_out_range(w, wo, kx, stride, pad);
    if oy_lo >= oy_hi || ox_lo >= ox_hi {
        return;
    }
    if stride == 1 {
        let dxo = kx as isize - pad as isize;
        for oy in oy_lo..oy_hi {
            let iy = (oy as isize + ky as isize - pad as isize) as usize;
            let dy_row = &dy[oy * wo + ox_lo..oy * wo + ox_hi];
            let x_off = (iy * w) as isize + ox_lo as isize + dxo;
            let dx_row = &mut dx[x_off as usize..x_off as usize + (ox_hi - ox_lo)];
            for (xv, yv) in dx_row.iter_mut().zip(dy_row) {
                *xv += wv * yv;
            }
        }
    } else {
        for oy in oy_lo..oy_hi {
            let iy = oy * stride + ky - pad;
            for ox in ox_lo..ox_hi {
                let ix = ox * stride + kx - pad;
                dx[iy * w + ix] += wv * dy[oy * wo + ox];
            }
        }
    }
}

/// Gradient of `conv2d_fwd` w.r.t. the weight.
pub fn conv2d_bwd_weight(
    x: &Tensor,
    dy: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, ci, h, w) = x.nchw()?;
    let (dn, co, ho, wo) = dy.nchw()?;
    if dn != n {
        return Err(Error::shape(&[n], &[dn]));
    }
    let mut dw = Tensor::zeros(&[co, ci, kh, kw]);
    let xs = x.data();
    let dys = dy.data();
    let per_co = ci * kh * kw;

    dw.data_mut()
        .par_chunks_mut(per_co)
        .enumerate()
        .for_each(|(coi, dw_co)| {
            for ni in 0..n {
                let dy_plane = &dys[(ni * co + coi) * ho * wo..(ni * co + coi + 1) * ho * wo];
                for cii in 0..ci {
                    let x_plane = &xs[(ni * ci + cii) * h * w..(ni * ci + cii + 1) * h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let (oy_lo, oy_hi) = valid_out_range(h, ho, ky, stride, pad);
                            let (ox_lo, ox_hi) = valid_out_range(w, wo, kx, stride, pad);
                            if oy_lo >= oy_hi || ox_lo >= ox_hi {
                                continue;
                            }
                            let mut acc = 0.0;
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - pad;
                                if stride == 1 {
                                    let ix0 = ox_lo + kx - pad;
                                    let dy_row = &dy_plane[oy * wo + ox_lo..oy * wo + ox_hi];
                                    let x_row = &x_plane[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
                                    for (a, b) in dy_row.iter().zip(x_row) {
                                        acc += a * b;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        let ix = ox * stride + kx - pad;
                                        acc += dy_plane[oy * wo + ox] * x_plane[iy * w + ix];
                                    }
                                }
                            }
                            dw_co[cii * kh * kw + ky * kw + kx] += acc;
                        }
                    }
                }
            }
        });
    Ok(dw)
}

/// Gradient of a per-output-channel bias: sum of dy over batch and space.
pub fn conv2d_bwd_bias(dy: &Tensor) -> Result<Tensor> {
    let (n, co, ho, wo) = dy.nchw()?;
    let mut db = Tensor::zeros(&[co]);
    let dys = dy.data();
    for ni in 0..n {
        for coi in 0..co {
            let plane = &dys[(ni * co + coi) * ho * wo..(ni * co + coi + 1) * ho * wo];
            db.data_mut()[coi] += plane.iter().sum::<f64>();
        }
    }
    Ok(db)
}

/// Transposed convolution. `x` is `[N,Ci,H,W]`, `weight` is `[Ci,Co,kh,kw]`.
///
/// Forward is the adjoint of `conv2d_fwd`, so it reuses the input-gradient
/// kernel; the shared index arithmetic keeps the pair exactly adjoint.
pub fn conv_transpose2d_fwd(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (_, ci, h, w) = x.nchw()?;
    let (wci, co, kh, kw) = weight.nchw()?;
    if wci != ci {
        return Err(Error::shape(weight.shape(), &[ci, co, kh, kw]));
    }
    let ho = conv_transpose_out_dim(h, kh, stride, pad);
    let wo = conv_transpose_out_dim(w, kw, stride, pad);
    let mut y = conv2d_bwd_input(x, weight, stride, pad, ho, wo)?;
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::shape(&[co], b.shape()));
        }
        let (n, _, _, _) = y.nchw()?;
        let data = y.data_mut();
        for ni in 0..n {
            for coi in 0..co {
                let bv = b.data()[coi];
                let base = (ni * co + coi) * ho * wo;
                data[base..base + ho * wo].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(y)
}

/// 2x2 average pooling with stride 2; spatial dims must be even.
pub fn avg_pool2_fwd(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(x.shape(), &[n, c, h / 2 * 2, w / 2 * 2]));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let xs = x.data();
    let ys = y.data_mut();
    for p in 0..n * c {
        let xp = &xs[p * h * w..(p + 1) * h * w];
        let yp = &mut ys[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = 2 * oy * w + 2 * ox;
                yp[oy * wo + ox] = 0.25 * (xp[i] + xp[i + 1] + xp[i + w] + xp[i + w + 1]);
            }
        }
    }
    Ok(y)
}

pub fn avg_pool2_bwd(dy: &Tensor) -> Result<Tensor> {
    let (n, c, ho, wo) = dy.nchw()?;
    let (h, w) = (ho * 2, wo * 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dys = dy.data();
    let dxs = dx.data_mut();
    for p in 0..n * c {
        let dyp = &dys[p * ho * wo..(p + 1) * ho * wo];
        let dxp = &mut dxs[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = 0.25 * dyp[oy * wo + ox];
                let i = 2 * oy * w + 2 * ox;
                dxp[i] = g;
                dxp[i + 1] = g;
                dxp[i + w] = g;
                dxp[i + w + 1] = g;
            }
        }
    }
    Ok(dx)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_fwd(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.nchw()?;
    let (ho, wo) = (h * 2, w * 2);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let xs = x.data();
    let ys = y.data_mut();
    for p in 0..n * c {
        let xp = &xs[p * h * w..(p + 1) * h * w];
        let yp = &mut ys[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let iy = oy / 2;
            for ox in 0..wo {
                yp[oy * wo + ox] = xp[iy * w + ox / 2];
            }
        }
    }
    Ok(y)
}

pub fn upsample2_bwd(dy: &Tensor) -> Result<Tensor> {
    let (n, c, ho, wo) = dy.nchw()?;
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dys = dy.data();
    let dxs = dx.data_mut();
    for p in 0..n * c {
        let dyp = &dys[p * ho * wo..(p + 1) * ho * wo];
        let dxp = &mut dxs[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            let iy = oy / 2;
            for ox in 0..wo {
                dxp[iy * w + ox / 2] += dyp[oy * wo + ox];
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 is the identity.
        let x = t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let y = conv2d_fwd(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_known_3x3() {
        // Hand-computed 3x3 box filter on a 3x3 ramp, pad 1.
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t(&[1, 1, 3, 3], &[1.0; 9]);
        let y = conv2d_fwd(&x, &w, None, 1, 1).unwrap();
        // center = sum of all = 45; corner (0,0) = 1+2+4+5 = 12
        assert_eq!(y.data()[4], 45.0);
        assert_eq!(y.data()[0], 12.0);
        assert_eq!(y.data()[8], 5. + 6. + 8. + 9.);
    }

    #[test]
    fn conv_stride2_shapes() {
        let x = Tensor::zeros(&[2, 3, 8, 12]);
        let w = Tensor::zeros(&[5, 3, 3, 3]);
        let y = conv2d_fwd(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4, 6]);
    }

    #[test]
    fn conv_adjoint_identity() {
        // <conv(x), y> == <x, conv_bwd_input(y)> for random-ish tensors:
        // the fwd/bwd pair must be exact adjoints.
        let mut rng = crate::rng::stream(3);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0), (2, 0)] {
            let x = Tensor::randn(&[2, 3, 6, 8], &mut rng);
            let w = Tensor::randn(&[4, 3, 3, 3], &mut rng);
            let y = conv2d_fwd(&x, &w, None, stride, pad).unwrap();
            let g = Tensor::randn(y.shape(), &mut rng);
            let dx = conv2d_bwd_input(&g, &w, stride, pad, 6, 8).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0),
                "adjoint mismatch at stride={stride} pad={pad}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn transpose_conv_matches_manual_scatter() {
        let mut rng = crate::rng::stream(5);
        let x = Tensor::randn(&[1, 2, 3, 4], &mut rng);
        let w = Tensor::randn(&[2, 3, 3, 3], &mut rng); // [Ci,Co,kh,kw]
        let y = conv_transpose2d_fwd(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 5, 7]);
        // brute-force scatter oracle
        let mut oracle = Tensor::zeros(&[1, 3, 5, 7]);
        for ci in 0..2 {
            for iy in 0..3 {
                for ix in 0..4 {
                    let xv = x.data()[(ci * 3 + iy) * 4 + ix];
                    for co in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let oy = (iy * 2 + ky) as isize - 1;
                                let ox = (ix * 2 + kx) as isize - 1;
                                if oy < 0 || ox < 0 || oy >= 5 || ox >= 7 {
                                    continue;
                                }
                                let wv = w.data()[((ci * 3 + co) * 3 + ky) * 3 + kx];
                                oracle.data_mut()[(co * 5 + oy as usize) * 7 + ox as usize] +=
                                    xv * wv;
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in y.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_and_upsample_shapes_and_values() {
        let x = t(&[1, 1, 2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let p = avg_pool2_fwd(&x).unwrap();
        assert_eq!(p.shape(), &[1, 1, 1, 2]);
        assert_eq!(p.data(), &[(1. + 2. + 5. + 6.) / 4., (3. + 4. + 7. + 8.) / 4.]);
        let u = upsample2_fwd(&p).unwrap();
        assert_eq!(u.shape(), &[1, 1, 2, 4]);
        assert_eq!(u.data()[0], p.data()[0]);
        assert_eq!(u.data()[3], p.data()[1]);
    }

    #[test]
    fn weight_grad_matches_bruteforce() {
        let mut rng = crate::rng::stream(11);
        let x = Tensor::randn(&[2, 2, 4, 5], &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], &mut rng);
        let y = conv2d_fwd(&x, &w, None, 1, 1).unwrap();
        let dy = Tensor::randn(y.shape(), &mut rng);
        let dw = conv2d_bwd_weight(&x, &dy, 3, 3, 1, 1).unwrap();
        // FD oracle on a few weight entries
        for &flat in &[0usize, 7, 20, 35, 53] {
            let h = 1e-6;
            let mut wp = w.clone();
            wp.data_mut()[flat] += h;
            let mut wm = w.clone();
            wm.data_mut()[flat] -= h;
            let lp: f64 = conv2d_fwd(&x, &wp, None, 1, 1)
                .unwrap()
                .data()
                .iter()
                .zip(dy.data())
                .map(|(a, b)| a * b)
                .sum();
            let lm: f64 = conv2d_fwd(&x, &wm, None, 1, 1)
                .unwrap()
                .data()
                .iter()
                .zip(dy.data())
                .map(|(a, b)| a * b)
                .sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (dw.data()[flat] - fd).abs() < 1e-6 * fd.abs().max(1.0),
                "dw[{flat}]={} fd={}",
                dw.data()[flat],
                fd
            );
        }
    }
}
