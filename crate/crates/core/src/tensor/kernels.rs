//! Inner-loop kernels for the tensor ops that dominate runtime.
//!
//! Parallel splits always assign each output element to exactly one thread
//! and keep every accumulation in a fixed sequential order, so results do
//! not depend on thread count.

use rayon::prelude::*;

/// Work threshold (multiply-adds) below which parallelism is not worth it.
const PAR_THRESHOLD: usize = 1 << 15;

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    let row = |c_row: &mut [f64], i: usize| {
        c_row.fill(0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += a_ip * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| row(c_row, i));
    } else {
        for (i, c_row) in out.chunks_mut(n).enumerate() {
            row(c_row, i);
        }
    }
}

/// dA[m,k] += g[m,n] * B^T, dB[k,n] += A^T * g.
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    m: usize,
    k: usize,
    n: usize,
    da: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(da) = da {
        // da[i,p] += sum_j g[i,j] * b[p,j]
        for i in 0..m {
            let g_row = &g[i * n..(i + 1) * n];
            let da_row = &mut da[i * k..(i + 1) * k];
            for (p, dv) in da_row.iter_mut().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                let mut s = 0.0;
                for (gv, bv) in g_row.iter().zip(b_row) {
                    s += gv * bv;
                }
                *dv += s;
            }
        }
    }
    if let Some(db) = db {
        // db[p,j] += sum_i a[i,p] * g[i,j]
        for i in 0..m {
            let g_row = &g[i * n..(i + 1) * n];
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &a_ip) in a_row.iter().enumerate() {
                if a_ip == 0.0 {
                    continue;
                }
                let db_row = &mut db[p * n..(p + 1) * n];
                for (dv, gv) in db_row.iter_mut().zip(g_row) {
                    *dv += a_ip * gv;
                }
            }
        }
    }
}

pub struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn out_extent(inp: usize, k: usize, pad: usize, stride: usize) -> usize {
        (inp + 2 * pad - k) / stride + 1
    }
}

/// Cross-correlation with zero padding. x:[n,ci,h,w], kern:[co,ci,k,k],
/// out:[n,co,oh,ow].
pub fn conv2d(x: &[f64], kern: &[f64], d: &ConvDims, out: &mut [f64]) {
    let plane_in = d.h * d.w;
    let plane_out = d.oh * d.ow;
    let work = d.n * d.co * plane_out * d.ci * d.k * d.k;
    let one_plane = |buf: &mut [f64], n_idx: usize, co: usize| {
        buf.fill(0.0);
        let x_img = &x[n_idx * d.ci * plane_in..(n_idx + 1) * d.ci * plane_in];
        for ci in 0..d.ci {
            let x_plane = &x_img[ci * plane_in..(ci + 1) * plane_in];
            let k_base = ((co * d.ci) + ci) * d.k * d.k;
            for kh in 0..d.k {
                for kw in 0..d.k {
                    let wv = kern[k_base + kh * d.k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    accumulate_shifted(buf, x_plane, d, kh, kw, wv);
                }
            }
        }
    };
    if work >= PAR_THRESHOLD && d.n * d.co > 1 {
        out.par_chunks_mut(plane_out).enumerate().for_each(|(idx, buf)| {
            one_plane(buf, idx / d.co, idx % d.co);
        });
    } else {
        for (idx, buf) in out.chunks_mut(plane_out).enumerate() {
            one_plane(buf, idx / d.co, idx % d.co);
        }
    }
}

/// out[oh,ow] += wv * x[oh*stride - pad + kh, ow*stride - pad + kw] over the
/// valid region.
#[inline]
fn accumulate_shifted(out: &mut [f64], x: &[f64], d: &ConvDims, kh: usize, kw: usize, wv: f64) {
    for oh in 0..d.oh {
        let ih = (oh * d.stride + kh) as isize - d.pad as isize;
        if ih < 0 || ih >= d.h as isize {
            continue;
        }
        let x_row = &x[(ih as usize) * d.w..(ih as usize + 1) * d.w];
        let o_row = &mut out[oh * d.ow..(oh + 1) * d.ow];
        // iw = ow*stride - pad + kw must lie in [0, w)
        let shift = kw as isize - d.pad as isize;
        if d.stride == 1 {
            let ow_lo = (-shift).max(0) as usize;
            let ow_hi = ((d.w as isize - shift).min(d.ow as isize)).max(0) as usize;
            if ow_lo >= ow_hi {
                continue;
            }
            let src = &x_row[(ow_lo as isize + shift) as usize..(ow_hi as isize + shift) as usize];
            for (o, &xv) in o_row[ow_lo..ow_hi].iter_mut().zip(src) {
                *o += wv * xv;
            }
        } else {
            for (ow, o) in o_row.iter_mut().enumerate() {
                let iw = (ow * d.stride) as isize + shift;
                if iw >= 0 && iw < d.w as isize {
                    *o += wv * x[(ih as usize) * d.w + iw as usize];
                }
            }
        }
    }
}

/// Gradients for conv2d. Each of dx, dk may independently be skipped.
pub fn conv2d_backward(
    x: &[f64],
    kern: &[f64],
    g: &[f64],
    d: &ConvDims,
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    let plane_in = d.h * d.w;
    let plane_out = d.oh * d.ow;
    if let Some(dx) = dx {
        let img_in = d.ci * plane_in;
        let one_image = |dst: &mut [f64], n_idx: usize| {
            for co in 0..d.co {
                let g_plane = &g[(n_idx * d.co + co) * plane_out..][..plane_out];
                for ci in 0..d.ci {
                    let dx_plane = &mut dst[ci * plane_in..(ci + 1) * plane_in];
                    let k_base = ((co * d.ci) + ci) * d.k * d.k;
                    for kh in 0..d.k {
                        for kw in 0..d.k {
                            let wv = kern[k_base + kh * d.k + kw];
                            if wv == 0.0 {
                                continue;
                            }
                            scatter_shifted(dx_plane, g_plane, d, kh, kw, wv);
                        }
                    }
                }
            }
        };
        if d.n > 1 && d.n * d.co * plane_out * d.ci >= PAR_THRESHOLD {
            dx.par_chunks_mut(img_in).enumerate().for_each(|(n_idx, dst)| one_image(dst, n_idx));
        } else {
            for (n_idx, dst) in dx.chunks_mut(img_in).enumerate() {
                one_image(dst, n_idx);
            }
        }
    }
    if let Some(dk) = dk {
        let k_sz = d.ci * d.k * d.k;
        let one_filter = |dst: &mut [f64], co: usize| {
            for n_idx in 0..d.n {
                let g_plane = &g[(n_idx * d.co + co) * plane_out..][..plane_out];
                for ci in 0..d.ci {
                    let x_plane = &x[(n_idx * d.ci + ci) * plane_in..][..plane_in];
                    for kh in 0..d.k {
                        for kw in 0..d.k {
                            dst[ci * d.k * d.k + kh * d.k + kw] +=
                                correlate_shifted(g_plane, x_plane, d, kh, kw);
                        }
                    }
                }
            }
        };
        if d.co > 1 && d.n * d.co * plane_out * k_sz >= PAR_THRESHOLD {
            dk.par_chunks_mut(k_sz).enumerate().for_each(|(co, dst)| one_filter(dst, co));
        } else {
            for (co, dst) in dk.chunks_mut(k_sz).enumerate() {
                one_filter(dst, co);
            }
        }
    }
}

/// dx[ih,iw] += wv * g[oh,ow] for ih = oh*stride - pad + kh (transpose of
/// accumulate_shifted).
#[inline]
fn scatter_shifted(dx: &mut [f64], g: &[f64], d: &ConvDims, kh: usize, kw: usize, wv: f64) {
    for oh in 0..d.oh {
        let ih = (oh * d.stride + kh) as isize - d.pad as isize;
        if ih < 0 || ih >= d.h as isize {
            continue;
        }
        let g_row = &g[oh * d.ow..(oh + 1) * d.ow];
        let shift = kw as isize - d.pad as isize;
        if d.stride == 1 {
            let ow_lo = (-shift).max(0) as usize;
            let ow_hi = ((d.w as isize - shift).min(d.ow as isize)).max(0) as usize;
            if ow_lo >= ow_hi {
                continue;
            }
            let dst =
                &mut dx[(ih as usize) * d.w + (ow_lo as isize + shift) as usize..][..ow_hi - ow_lo];
            for (o, &gv) in dst.iter_mut().zip(&g_row[ow_lo..ow_hi]) {
                *o += wv * gv;
            }
        } else {
            for (ow, &gv) in g_row.iter().enumerate() {
                let iw = (ow * d.stride) as isize + shift;
                if iw >= 0 && iw < d.w as isize {
                    dx[(ih as usize) * d.w + iw as usize] += wv * gv;
                }
            }
        }
    }
}

/// sum over (oh,ow) of g[oh,ow] * x[oh*stride-pad+kh, ow*stride-pad+kw].
#[inline]
fn correlate_shifted(g: &[f64], x: &[f64], d: &ConvDims, kh: usize, kw: usize) -> f64 {
    let mut acc = 0.0;
    for oh in 0..d.oh {
        let ih = (oh * d.stride + kh) as isize - d.pad as isize;
        if ih < 0 || ih >= d.h as isize {
            continue;
        }
        let g_row = &g[oh * d.ow..(oh + 1) * d.ow];
        let x_row = &x[(ih as usize) * d.w..(ih as usize + 1) * d.w];
        let shift = kw as isize - d.pad as isize;
        if d.stride == 1 {
            let ow_lo = (-shift).max(0) as usize;
            let ow_hi = ((d.w as isize - shift).min(d.ow as isize)).max(0) as usize;
            for ow in ow_lo..ow_hi {
                acc += g_row[ow] * x_row[(ow as isize + shift) as usize];
            }
        } else {
            for (ow, &gv) in g_row.iter().enumerate() {
                let iw = (ow * d.stride) as isize + shift;
                if iw >= 0 && iw < d.w as isize {
                    acc += gv * x_row[iw as usize];
                }
            }
        }
    }
    acc
}

/// Transposed convolution, kernel 2x2, stride 2: x:[n,ci,h,w],
/// kern:[ci,co,2,2], out:[n,co,2h,2w].
pub fn tconv2d(x: &[f64], kern: &[f64], n: usize, ci: usize, co: usize, h: usize, w: usize, out: &mut [f64]) {
    let plane_in = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let plane_out = oh * ow;
    let one_plane = |buf: &mut [f64], n_idx: usize, c_out: usize| {
        buf.fill(0.0);
        for c_in in 0..ci {
            let x_plane = &x[(n_idx * ci + c_in) * plane_in..][..plane_in];
            let k_base = (c_in * co + c_out) * 4;
            for dh in 0..2 {
                for dw in 0..2 {
                    let wv = kern[k_base + dh * 2 + dw];
                    if wv == 0.0 {
                        continue;
                    }
                    for ih in 0..h {
                        let o_row = &mut buf[(2 * ih + dh) * ow..][..ow];
                        let x_row = &x_plane[ih * w..(ih + 1) * w];
                        for (iw, &xv) in x_row.iter().enumerate() {
                            o_row[2 * iw + dw] += wv * xv;
                        }
                    }
                }
            }
        }
    };
    if n * co * plane_out * ci >= PAR_THRESHOLD && n * co > 1 {
        out.par_chunks_mut(plane_out).enumerate().for_each(|(idx, buf)| {
            one_plane(buf, idx / co, idx % co);
        });
    } else {
        for (idx, buf) in out.chunks_mut(plane_out).enumerate() {
            one_plane(buf, idx / co, idx % co);
        }
    }
}

pub fn tconv2d_backward(
    x: &[f64],
    kern: &[f64],
    g: &[f64],
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    let plane_in = h * w;
    let ow = 2 * w;
    let plane_out = 4 * plane_in;
    if let Some(dx) = dx {
        let img_in = ci * plane_in;
        let one_image = |dst: &mut [f64], n_idx: usize| {
            for c_in in 0..ci {
                let dx_plane = &mut dst[c_in * plane_in..(c_in + 1) * plane_in];
                for c_out in 0..co {
                    let g_plane = &g[(n_idx * co + c_out) * plane_out..][..plane_out];
                    let k_base = (c_in * co + c_out) * 4;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            let wv = kern[k_base + dh * 2 + dw];
                            if wv == 0.0 {
                                continue;
                            }
                            for ih in 0..h {
                                let g_row = &g_plane[(2 * ih + dh) * ow..][..ow];
                                let d_row = &mut dx_plane[ih * w..(ih + 1) * w];
                                for (iw, dv) in d_row.iter_mut().enumerate() {
                                    *dv += wv * g_row[2 * iw + dw];
                                }
                            }
                        }
                    }
                }
            }
        };
        if n > 1 && n * co * plane_out >= PAR_THRESHOLD {
            dx.par_chunks_mut(img_in).enumerate().for_each(|(n_idx, dst)| one_image(dst, n_idx));
        } else {
            for (n_idx, dst) in dx.chunks_mut(img_in).enumerate() {
                one_image(dst, n_idx);
            }
        }
    }
    if let Some(dk) = dk {
        // dk[ci,co,dh,dw] = sum_{n,ih,iw} x[n,ci,ih,iw] * g[n,co,2ih+dh,2iw+dw]
        for (flat, dv) in dk.iter_mut().enumerate() {
            let dw = flat % 2;
            let dh = (flat / 2) % 2;
            let c_out = (flat / 4) % co;
            let c_in = flat / (4 * co);
            let mut acc = 0.0;
            for n_idx in 0..n {
                let x_plane = &x[(n_idx * ci + c_in) * plane_in..][..plane_in];
                let g_plane = &g[(n_idx * co + c_out) * plane_out..][..plane_out];
                for ih in 0..h {
                    let x_row = &x_plane[ih * w..(ih + 1) * w];
                    let g_row = &g_plane[(2 * ih + dh) * ow..][..ow];
                    for (iw, &xv) in x_row.iter().enumerate() {
                        acc += xv * g_row[2 * iw + dw];
                    }
                }
            }
            *dv += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Reference conv via direct index arithmetic (no shifted-slice tricks).
    fn conv_ref(x: &[f64], k: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.n * d.co * d.oh * d.ow];
        for n in 0..d.n {
            for co in 0..d.co {
                for oh in 0..d.oh {
                    for ow in 0..d.ow {
                        let mut acc = 0.0;
                        for ci in 0..d.ci {
                            for kh in 0..d.k {
                                for kw in 0..d.k {
                                    let ih = (oh * d.stride + kh) as isize - d.pad as isize;
                                    let iw = (ow * d.stride + kw) as isize - d.pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < d.h && (iw as usize) < d.w {
                                        acc += x[((n * d.ci + ci) * d.h + ih as usize) * d.w
                                            + iw as usize]
                                            * k[((co * d.ci + ci) * d.k + kh) * d.k + kw];
                                    }
                                }
                            }
                        }
                        out[((n * d.co + co) * d.oh + oh) * d.ow + ow] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference() {
        let mut rng = Rng::new(21);
        for &(h, w, k, pad, stride) in
            &[(5usize, 7usize, 3usize, 1usize, 1usize), (8, 8, 3, 1, 2), (4, 4, 1, 0, 1), (6, 5, 3, 0, 1)]
        {
            let (n, ci, co) = (2, 3, 4);
            let d = ConvDims {
                n,
                ci,
                h,
                w,
                co,
                k,
                pad,
                stride,
                oh: ConvDims::out_extent(h, k, pad, stride),
                ow: ConvDims::out_extent(w, k, pad, stride),
            };
            let x: Vec<f64> = (0..n * ci * h * w).map(|_| rng.range(-1.0, 1.0)).collect();
            let kern: Vec<f64> = (0..co * ci * k * k).map(|_| rng.range(-1.0, 1.0)).collect();
            let mut out = vec![0.0; n * co * d.oh * d.ow];
            conv2d(&x, &kern, &d, &mut out);
            let want = conv_ref(&x, &kern, &d);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tconv_adjoint_of_strided_conv() {
        // <tconv(x), y> == <x, conv_s2(y)> with the matching kernel layout.
        let mut rng = Rng::new(22);
        let (n, ci, co, h, w) = (1, 3, 2, 4, 5);
        let x: Vec<f64> = (0..n * ci * h * w).map(|_| rng.range(-1.0, 1.0)).collect();
        let kern: Vec<f64> = (0..ci * co * 4).map(|_| rng.range(-1.0, 1.0)).collect();
        let y: Vec<f64> = (0..n * co * 4 * h * w).map(|_| rng.range(-1.0, 1.0)).collect();

        let mut up = vec![0.0; n * co * 4 * h * w];
        tconv2d(&x, &kern, n, ci, co, h, w, &mut up);
        let lhs: f64 = up.iter().zip(&y).map(|(a, b)| a * b).sum();

        // The tconv kernel [ci,co,2,2] reads directly as a conv kernel
        // [co_out=ci, ci_in=co, 2, 2] for the adjoint stride-2 convolution.
        let kc = kern.clone();
        let d = ConvDims {
            n,
            ci: co,
            h: 2 * h,
            w: 2 * w,
            co: ci,
            k: 2,
            pad: 0,
            stride: 2,
            oh: h,
            ow: w,
        };
        let mut down = vec![0.0; n * ci * h * w];
        conv2d(&y, &kc, &d, &mut down);
        let rhs: f64 = down.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "lhs {lhs} rhs {rhs}");
    }

    #[test]
    fn matmul_hand_case() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }
}
