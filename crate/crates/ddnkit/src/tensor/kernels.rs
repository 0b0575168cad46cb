//! Raw numeric loops behind the tape ops.
//!
//! Every kernel writes each output element from exactly one thread and
//! accumulates in a fixed serial order inside that thread, so results are
//! bit-identical regardless of how rayon schedules the chunks.

use rayon::prelude::*;

use super::Shape;

/// Below this output size the rayon dispatch overhead outweighs the work.
const PAR_THRESHOLD: usize = 16 * 1024;

#[inline]
fn span(limit: usize, pad: usize, k_off: usize, stride: usize, out_len: usize) -> (usize, usize) {
    // Valid output range for one kernel offset: 0 <= o*stride - pad + k_off < limit.
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let hi_excl = (limit + pad).saturating_sub(k_off).div_ceil(stride);
    (lo.min(out_len), hi_excl.min(out_len))
}

/// Fused 3x3 same-padding stencil: one pass per input channel, nine taps.
/// `weights` is the 3x3 kernel in row-major order.
fn add_conv3x3_same(x_chan: &[f64], h: usize, w: usize, weights: &[f64; 9], out_plane: &mut [f64]) {
    for oy in 0..h {
        let up = oy.checked_sub(1).map(|y| &x_chan[y * w..(y + 1) * w]);
        let mid = &x_chan[oy * w..(oy + 1) * w];
        let down = if oy + 1 < h {
            Some(&x_chan[(oy + 1) * w..(oy + 2) * w])
        } else {
            None
        };
        let o_row = &mut out_plane[oy * w..(oy + 1) * w];
        match (up, down) {
            (Some(up), Some(down)) if w >= 2 => {
                let [w0, w1, w2, w3, w4, w5, w6, w7, w8] = *weights;
                // interior columns: all nine taps in one pass
                for i in 0..w - 2 {
                    o_row[i + 1] += w0 * up[i]
                        + w1 * up[i + 1]
                        + w2 * up[i + 2]
                        + w3 * mid[i]
                        + w4 * mid[i + 1]
                        + w5 * mid[i + 2]
                        + w6 * down[i]
                        + w7 * down[i + 1]
                        + w8 * down[i + 2];
                }
                // left / right columns miss one tap column
                o_row[0] += w1 * up[0] + w2 * up[1] + w4 * mid[0] + w5 * mid[1] + w7 * down[0]
                    + w8 * down[1];
                o_row[w - 1] += w0 * up[w - 2]
                    + w1 * up[w - 1]
                    + w3 * mid[w - 2]
                    + w4 * mid[w - 1]
                    + w6 * down[w - 2]
                    + w7 * down[w - 1];
            }
            _ => {
                // border rows (and 1-wide maps): per-tap scalar fallback
                for (ky, row) in [(0usize, up), (1, Some(mid)), (2, down)] {
                    let Some(row) = row else { continue };
                    for kx in 0..3usize {
                        let wv = weights[ky * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let lo = 1usize.saturating_sub(kx);
                        let hi = (w + 1).saturating_sub(kx).min(w);
                        for ox in lo..hi {
                            o_row[ox] += wv * row[ox + kx - 1];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward_one(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    ws: Shape,
    bias: f64,
    stride: usize,
    padding: usize,
    co: usize,
    out_plane: &mut [f64],
    oh: usize,
    ow: usize,
) {
    let (ih, iw) = (xs.h, xs.w);
    let k = ws.h;
    out_plane.fill(bias);
    if stride == 1 && k == 3 && padding == 1 {
        for ci in 0..ws.c {
            let x_chan = &x[ci * ih * iw..(ci + 1) * ih * iw];
            let w_chan = &w[(co * ws.c + ci) * 9..(co * ws.c + ci + 1) * 9];
            let weights: &[f64; 9] = w_chan.try_into().expect("3x3 kernel");
            add_conv3x3_same(x_chan, ih, iw, weights, out_plane);
        }
        return;
    }
    for ci in 0..ws.c {
        let x_chan = &x[ci * ih * iw..(ci + 1) * ih * iw];
        let w_chan = &w[(co * ws.c + ci) * k * k..(co * ws.c + ci + 1) * k * k];
        for ky in 0..k {
            let (oy_lo, oy_hi) = span(ih, padding, ky, stride, oh);
            for kx in 0..k {
                let wv = w_chan[ky * k + kx];
                if wv == 0.0 {
                    continue;
                }
                let (ox_lo, ox_hi) = span(iw, padding, kx, stride, ow);
                for oy in oy_lo..oy_hi {
                    let y = oy * stride + ky - padding;
                    let x_row = &x_chan[y * iw..(y + 1) * iw];
                    let o_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let off = ox_lo + kx - padding;
                        let src = &x_row[off..off + (ox_hi - ox_lo)];
                        let dst = &mut o_row[ox_lo..ox_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            o_row[ox] += wv * x_row[ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    x: &[f64],
    xs: Shape,
    w: &[f64],
    ws: Shape,
    b: &[f64],
    stride: usize,
    padding: usize,
    out: &mut [f64],
    os: Shape,
) {
    let plane = os.h * os.w;
    let job = |(idx, out_plane): (usize, &mut [f64])| {
        let n = idx / os.c;
        let co = idx % os.c;
        conv2d_forward_one(
            &x[n * xs.c * xs.h * xs.w..(n + 1) * xs.c * xs.h * xs.w],
            xs,
            w,
            ws,
            b[co],
            stride,
            padding,
            co,
            out_plane,
            os.h,
            os.w,
        );
    };
    if out.len() >= PAR_THRESHOLD && os.n * os.c > 1 {
        out.par_chunks_mut(plane).enumerate().for_each(job);
    } else {
        out.chunks_mut(plane).enumerate().for_each(job);
    }
}

fn conv2d_backward_data_one(
    dout: &[f64],
    os: Shape,
    w: &[f64],
    ws: Shape,
    stride: usize,
    padding: usize,
    ci: usize,
    dx_plane: &mut [f64],
    ih: usize,
    iw: usize,
) {
    let k = ws.h;
    let (oh, ow) = (os.h, os.w);
    if stride == 1 && k == 3 && padding == 1 {
        // dIn = correlation of dOut with the 180°-rotated kernel
        for co in 0..os.c {
            let g_chan = &dout[co * oh * ow..(co + 1) * oh * ow];
            let w_chan = &w[(co * ws.c + ci) * 9..(co * ws.c + ci + 1) * 9];
            let flipped: [f64; 9] = std::array::from_fn(|i| w_chan[8 - i]);
            add_conv3x3_same(g_chan, oh, ow, &flipped, dx_plane);
        }
        return;
    }
    for co in 0..os.c {
        let g_chan = &dout[co * oh * ow..(co + 1) * oh * ow];
        let w_chan = &w[(co * ws.c + ci) * k * k..(co * ws.c + ci + 1) * k * k];
        for ky in 0..k {
            let (oy_lo, oy_hi) = span(ih, padding, ky, stride, oh);
            for kx in 0..k {
                let wv = w_chan[ky * k + kx];
                if wv == 0.0 {
                    continue;
                }
                let (ox_lo, ox_hi) = span(iw, padding, kx, stride, ow);
                for oy in oy_lo..oy_hi {
                    let y = oy * stride + ky - padding;
                    let g_row = &g_chan[oy * ow..(oy + 1) * ow];
                    let dx_row = &mut dx_plane[y * iw..(y + 1) * iw];
                    if stride == 1 {
                        let off = ox_lo + kx - padding;
                        let dst = &mut dx_row[off..off + (ox_hi - ox_lo)];
                        let src = &g_row[ox_lo..ox_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            dx_row[ox * stride + kx - padding] += wv * g_row[ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward_data(
    dout: &[f64],
    os: Shape,
    w: &[f64],
    ws: Shape,
    stride: usize,
    padding: usize,
    dx: &mut [f64],
    xs: Shape,
) {
    let plane = xs.h * xs.w;
    let job = |(idx, dx_plane): (usize, &mut [f64])| {
        let n = idx / xs.c;
        let ci = idx % xs.c;
        conv2d_backward_data_one(
            &dout[n * os.c * os.h * os.w..(n + 1) * os.c * os.h * os.w],
            os,
            w,
            ws,
            stride,
            padding,
            ci,
            dx_plane,
            xs.h,
            xs.w,
        );
    };
    if dx.len() >= PAR_THRESHOLD && xs.n * xs.c > 1 {
        dx.par_chunks_mut(plane).enumerate().for_each(job);
    } else {
        dx.chunks_mut(plane).enumerate().for_each(job);
    }
}

/// 3x3 same-padding filter gradient for one (n, co, ci): per kernel row,
/// three tap accumulators over one fused pass of each gradient row.
fn conv3x3_filter_accumulate(
    x_chan: &[f64],
    g_chan: &[f64],
    h: usize,
    w: usize,
    dw: &mut [f64],
) {
    for ky in 0..3usize {
        let oy_lo = 1usize.saturating_sub(ky);
        let oy_hi = (h + 1).saturating_sub(ky).min(h);
        let (mut a0, mut a1, mut a2) = (0.0f64, 0.0f64, 0.0f64);
        for oy in oy_lo..oy_hi {
            let y = oy + ky - 1;
            let g_row = &g_chan[oy * w..(oy + 1) * w];
            let x_row = &x_chan[y * w..(y + 1) * w];
            if w >= 2 {
                for i in 0..w - 2 {
                    let g = g_row[i + 1];
                    a0 += g * x_row[i];
                    a1 += g * x_row[i + 1];
                    a2 += g * x_row[i + 2];
                }
                a1 += g_row[0] * x_row[0];
                a2 += g_row[0] * x_row[1];
                a0 += g_row[w - 1] * x_row[w - 2];
                a1 += g_row[w - 1] * x_row[w - 1];
            } else {
                a1 += g_row[0] * x_row[0];
            }
        }
        dw[ky * 3] += a0;
        dw[ky * 3 + 1] += a1;
        dw[ky * 3 + 2] += a2;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_filter_one(
    co: usize,
    dw_co: &mut [f64],
    db_co: &mut f64,
    x: &[f64],
    xs: Shape,
    dout: &[f64],
    os: Shape,
    stride: usize,
    padding: usize,
    ws: Shape,
) {
    let k = ws.h;
    let (ih, iw) = (xs.h, xs.w);
    let (oh, ow) = (os.h, os.w);
    if stride == 1 && k == 3 && padding == 1 {
        for n in 0..os.n {
            let g_chan = &dout[(n * os.c + co) * oh * ow..(n * os.c + co + 1) * oh * ow];
            *db_co += g_chan.iter().sum::<f64>();
            for ci in 0..ws.c {
                let x_chan = &x[(n * xs.c + ci) * ih * iw..(n * xs.c + ci + 1) * ih * iw];
                conv3x3_filter_accumulate(
                    x_chan,
                    g_chan,
                    oh,
                    ow,
                    &mut dw_co[ci * 9..(ci + 1) * 9],
                );
            }
        }
        return;
    }
    for n in 0..os.n {
        let g_chan = &dout[(n * os.c + co) * oh * ow..(n * os.c + co + 1) * oh * ow];
        *db_co += g_chan.iter().sum::<f64>();
        for ci in 0..ws.c {
            let x_chan = &x[(n * xs.c + ci) * ih * iw..(n * xs.c + ci + 1) * ih * iw];
            for ky in 0..k {
                let (oy_lo, oy_hi) = span(ih, padding, ky, stride, oh);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = span(iw, padding, kx, stride, ow);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let y = oy * stride + ky - padding;
                        let g_row = &g_chan[oy * ow..(oy + 1) * ow];
                        let x_row = &x_chan[y * iw..(y + 1) * iw];
                        if stride == 1 {
                            let off = ox_lo + kx - padding;
                            let xr = &x_row[off..off + (ox_hi - ox_lo)];
                            let gr = &g_row[ox_lo..ox_hi];
                            acc += gr.iter().zip(xr).map(|(g, v)| g * v).sum::<f64>();
                        } else {
                            for ox in ox_lo..ox_hi {
                                acc += g_row[ox] * x_row[ox * stride + kx - padding];
                            }
                        }
                    }
                    dw_co[ci * k * k + ky * k + kx] += acc;
                }
            }
        }
    }
}

pub fn conv2d_backward_filter(
    x: &[f64],
    xs: Shape,
    dout: &[f64],
    os: Shape,
    stride: usize,
    padding: usize,
    dw: &mut [f64],
    ws: Shape,
    db: &mut [f64],
) {
    let per_co = ws.c * ws.h * ws.w;
    if dout.len() >= PAR_THRESHOLD && ws.n > 1 {
        dw.par_chunks_mut(per_co)
            .zip(db.par_iter_mut())
            .enumerate()
            .for_each(|(co, (dw_co, db_co))| {
                conv2d_backward_filter_one(co, dw_co, db_co, x, xs, dout, os, stride, padding, ws);
            });
    } else {
        for (co, (dw_co, db_co)) in dw.chunks_mut(per_co).zip(db.iter_mut()).enumerate() {
            conv2d_backward_filter_one(co, dw_co, db_co, x, xs, dout, os, stride, padding, ws);
        }
    }
}

/// Interpolation source indices and fraction for one output axis at scale 2,
/// align_corners = false.
pub fn bilinear_axis(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let base = src.floor();
            let f = src - base;
            let i0 = (base.max(0.0) as usize).min(in_len - 1);
            let i1 = ((base as isize + 1).max(0) as usize).min(in_len - 1);
            (i0, i1, f)
        })
        .collect()
}

pub fn upsample2x_forward(x: &[f64], xs: Shape, out: &mut [f64], os: Shape) {
    let ys = bilinear_axis(os.h, xs.h);
    let xs_ax = bilinear_axis(os.w, xs.w);
    let in_plane = xs.h * xs.w;
    let out_plane = os.h * os.w;
    let job = |(idx, plane): (usize, &mut [f64])| {
        let src = &x[idx * in_plane..(idx + 1) * in_plane];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &src[y0 * xs.w..(y0 + 1) * xs.w];
            let r1 = &src[y1 * xs.w..(y1 + 1) * xs.w];
            let dst = &mut plane[oy * os.w..(oy + 1) * os.w];
            for (ox, &(x0, x1, fx)) in xs_ax.iter().enumerate() {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                dst[ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    };
    if out.len() >= PAR_THRESHOLD && os.n * os.c > 1 {
        out.par_chunks_mut(out_plane).enumerate().for_each(job);
    } else {
        out.chunks_mut(out_plane).enumerate().for_each(job);
    }
}

pub fn upsample2x_backward(dout: &[f64], os: Shape, dx: &mut [f64], xs: Shape) {
    let ys = bilinear_axis(os.h, xs.h);
    let xs_ax = bilinear_axis(os.w, xs.w);
    let in_plane = xs.h * xs.w;
    let out_plane = os.h * os.w;
    let job = |(idx, dst): (usize, &mut [f64])| {
        let gplane = &dout[idx * out_plane..(idx + 1) * out_plane];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let g_row = &gplane[oy * os.w..(oy + 1) * os.w];
            for (ox, &(x0, x1, fx)) in xs_ax.iter().enumerate() {
                let g = g_row[ox];
                dst[y0 * xs.w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * xs.w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * xs.w + x0] += g * fy * (1.0 - fx);
                dst[y1 * xs.w + x1] += g * fy * fx;
            }
        }
    };
    if dx.len() >= PAR_THRESHOLD && xs.n * xs.c > 1 {
        dx.par_chunks_mut(in_plane).enumerate().for_each(job);
    } else {
        dx.chunks_mut(in_plane).enumerate().for_each(job);
    }
}

/// Per-channel batch-norm statistics, parallel over channels.
pub fn bn_moments(x: &[f64], xs: Shape) -> (Vec<f64>, Vec<f64>) {
    let c = xs.c;
    let plane = xs.h * xs.w;
    let m = (xs.n * plane) as f64;
    let per_channel = |ch: usize| -> (f64, f64) {
        let (mut s, mut q) = (0.0, 0.0);
        for n in 0..xs.n {
            let base = (n * c + ch) * plane;
            for &v in &x[base..base + plane] {
                s += v;
                q += v * v;
            }
        }
        (s, q)
    };
    let sums: Vec<(f64, f64)> = if x.len() >= PAR_THRESHOLD && c > 1 {
        (0..c).into_par_iter().map(per_channel).collect()
    } else {
        (0..c).map(per_channel).collect()
    };
    let mean: Vec<f64> = sums.iter().map(|(s, _)| s / m).collect();
    let var: Vec<f64> = sums
        .iter()
        .zip(&mean)
        .map(|((_, q), mu)| (q / m - mu * mu).max(0.0))
        .collect();
    (mean, var)
}

/// y = (x - mean) * inv_std * gamma + beta, parallel over (n, c) planes.
pub fn bn_normalize(
    x: &[f64],
    xs: Shape,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
) {
    let plane = xs.h * xs.w;
    let job = |(idx, dst): (usize, &mut [f64])| {
        let ch = idx % xs.c;
        let src = &x[idx * plane..(idx + 1) * plane];
        let (mu, is, gv, bv) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mu) * is * gv + bv;
        }
    };
    if out.len() >= PAR_THRESHOLD && xs.n * xs.c > 1 {
        out.par_chunks_mut(plane).enumerate().for_each(job);
    } else {
        out.chunks_mut(plane).enumerate().for_each(job);
    }
}

/// Per-channel reductions of (Σ dy, Σ dy·xhat), parallel over channels.
pub fn bn_backward_sums(
    x: &[f64],
    dout: &[f64],
    xs: Shape,
    mean: &[f64],
    inv_std: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let c = xs.c;
    let plane = xs.h * xs.w;
    let per_channel = |ch: usize| -> (f64, f64) {
        let (mut sd, mut sdx) = (0.0, 0.0);
        let (mu, is) = (mean[ch], inv_std[ch]);
        for n in 0..xs.n {
            let base = (n * c + ch) * plane;
            for i in base..base + plane {
                let xhat = (x[i] - mu) * is;
                sd += dout[i];
                sdx += dout[i] * xhat;
            }
        }
        (sd, sdx)
    };
    let sums: Vec<(f64, f64)> = if x.len() >= PAR_THRESHOLD && c > 1 {
        (0..c).into_par_iter().map(per_channel).collect()
    } else {
        (0..c).map(per_channel).collect()
    };
    (
        sums.iter().map(|(a, _)| *a).collect(),
        sums.iter().map(|(_, b)| *b).collect(),
    )
}

/// Train-mode input gradient, parallel over (n, c) planes.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward_dx_train(
    x: &[f64],
    dout: &[f64],
    xs: Shape,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    sum_dy: &[f64],
    sum_dy_xhat: &[f64],
    dx: &mut [f64],
) {
    let plane = xs.h * xs.w;
    let m = (xs.n * plane) as f64;
    let job = |(idx, dst): (usize, &mut [f64])| {
        let ch = idx % xs.c;
        let base = idx * plane;
        let (mu, is, g) = (mean[ch], inv_std[ch], gamma[ch]);
        let k1 = g * is;
        let k2 = sum_dy[ch] / m;
        let k3 = sum_dy_xhat[ch] / m;
        for (off, d) in dst.iter_mut().enumerate() {
            let i = base + off;
            let xhat = (x[i] - mu) * is;
            *d += k1 * (dout[i] - k2 - xhat * k3);
        }
    };
    if dx.len() >= PAR_THRESHOLD && xs.n * xs.c > 1 {
        dx.par_chunks_mut(plane).enumerate().for_each(job);
    } else {
        dx.chunks_mut(plane).enumerate().for_each(job);
    }
}
