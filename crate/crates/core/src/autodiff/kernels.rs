//! Dense kernels behind the convolutional tape ops.
//!
//! Layout is NCHW row-major throughout. Inner loops run over the contiguous
//! width axis as slice zips so the optimizer can vectorize them; the stride-2
//! paths fall back to strided indexing.

/// dst += a * src, elementwise.
#[inline]
pub fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Output spatial size of a convolution along one axis.
#[inline]
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < kernel {
        return None;
    }
    Some((span - kernel) / stride + 1)
}

/// Range of output positions whose input index `o * stride + k - pad` lands in
/// [0, input). Returns (o_lo, o_hi_exclusive).
#[inline]
fn valid_out_range(input: usize, out: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi_in = input + pad;
    if hi_in <= k {
        return (0, 0);
    }
    let hi = ((hi_in - 1 - k) / stride + 1).min(out);
    (lo.min(hi), hi)
}

/// Direct 2D cross-correlation. x: [n, cin, h, w], k: [cout, cin, kh, kw],
/// out: [n, cout, oh, ow], zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    k: &[f64],
    out: &mut [f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) {
    let x_plane = h * w;
    let o_plane = oh * ow;
    for ni in 0..n {
        for co in 0..cout {
            let out_base = (ni * cout + co) * o_plane;
            for ci in 0..cin {
                let x_base = (ni * cin + ci) * x_plane;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wgt = k[((co * cin + ci) * kh + khi) * kw + kwi];
                        if wgt == 0.0 {
                            continue;
                        }
                        let (lo, hi) = valid_out_range(w, ow, stride, pad, kwi);
                        if lo >= hi {
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = ohi * stride + khi;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let x_row = x_base + (ih - pad) * w;
                            let o_row = out_base + ohi * ow;
                            let iw0 = lo * stride + kwi - pad;
                            if stride == 1 {
                                axpy(
                                    &mut out[o_row + lo..o_row + hi],
                                    &x[x_row + iw0..x_row + iw0 + (hi - lo)],
                                    wgt,
                                );
                            } else {
                                let src = &x[x_row + iw0..];
                                for (j, d) in out[o_row + lo..o_row + hi].iter_mut().enumerate() {
                                    *d += wgt * src[j * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `conv2d_forward`. Either gradient may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    grad_out: &[f64],
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
    (n, cin, h, w): (usize, usize, usize, usize),
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) {
    let x_plane = h * w;
    let o_plane = oh * ow;
    let mut dx = dx;
    let mut dk = dk;
    for ni in 0..n {
        for co in 0..cout {
            let g_base = (ni * cout + co) * o_plane;
            for ci in 0..cin {
                let x_base = (ni * cin + ci) * x_plane;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let k_idx = ((co * cin + ci) * kh + khi) * kw + kwi;
                        let wgt = k[k_idx];
                        let (lo, hi) = valid_out_range(w, ow, stride, pad, kwi);
                        if lo >= hi {
                            continue;
                        }
                        let mut k_acc = 0.0;
                        for ohi in 0..oh {
                            let ih = ohi * stride + khi;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let x_row = x_base + (ih - pad) * w;
                            let g_row = g_base + ohi * ow;
                            let iw0 = lo * stride + kwi - pad;
                            let g_slice = &grad_out[g_row + lo..g_row + hi];
                            if stride == 1 {
                                let xs = x_row + iw0..x_row + iw0 + (hi - lo);
                                if let Some(dx) = dx.as_deref_mut() {
                                    axpy(&mut dx[xs.clone()], g_slice, wgt);
                                }
                                if dk.is_some() {
                                    k_acc += dot(g_slice, &x[xs]);
                                }
                            } else {
                                for (j, &g) in g_slice.iter().enumerate() {
                                    let xi = x_row + iw0 + j * stride;
                                    if let Some(dx) = dx.as_deref_mut() {
                                        dx[xi] += wgt * g;
                                    }
                                    if dk.is_some() {
                                        k_acc += g * x[xi];
                                    }
                                }
                            }
                        }
                        if let Some(dk) = dk.as_deref_mut() {
                            dk[k_idx] += k_acc;
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel mean and biased variance over the (n, h, w) axes.
pub fn channel_moments(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut sum = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            sum += x[base..base + plane].iter().sum::<f64>();
        }
        mean[ci] = sum / m;
    }
    for ci in 0..c {
        let mu = mean[ci];
        let mut sq = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            sq += x[base..base + plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        var[ci] = sq / m;
    }
    (mean, var)
}

/// y = gamma * (x - mean) * invstd + beta, per channel.
pub fn bn_normalize(
    x: &[f64],
    out: &mut [f64],
    (n, c, h, w): (usize, usize, usize, usize),
    mean: &[f64],
    invstd: &[f64],
    gamma: &[f64],
    beta: &[f64],
) {
    let plane = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let (mu, is, ga, be) = (mean[ci], invstd[ci], gamma[ci], beta[ci]);
            let a = ga * is;
            let b = be - a * mu;
            for v in out[base..base + plane].iter_mut().zip(&x[base..base + plane]) {
                *v.0 = a * v.1 + b;
            }
        }
    }
}

/// Backward through train-mode batch norm, where mean and variance are
/// functions of x. Standard result:
///   dx = gamma * invstd * (g - mean(g) - xhat * mean(g * xhat))
#[allow(clippy::too_many_arguments)]
pub fn bn_backward_train(
    x: &[f64],
    grad_out: &[f64],
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
    (n, c, h, w): (usize, usize, usize, usize),
    mean: &[f64],
    invstd: &[f64],
    gamma: &[f64],
) {
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut dx = dx;
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    for ci in 0..c {
        let (mu, is) = (mean[ci], invstd[ci]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0; // sum of g * xhat
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for (g, xv) in grad_out[base..base + plane].iter().zip(&x[base..base + plane]) {
                sum_g += g;
                sum_gx += g * (xv - mu) * is;
            }
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            dg[ci] += sum_gx;
        }
        if let Some(db) = dbeta.as_deref_mut() {
            db[ci] += sum_g;
        }
        if let Some(dx) = dx.as_deref_mut() {
            let scale = gamma[ci] * is;
            let mg = sum_g / m;
            let mgx = sum_gx / m;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for ((d, g), xv) in dx[base..base + plane]
                    .iter_mut()
                    .zip(&grad_out[base..base + plane])
                    .zip(&x[base..base + plane])
                {
                    let xhat = (xv - mu) * is;
                    *d += scale * (g - mg - xhat * mgx);
                }
            }
        }
    }
}

/// Backward through eval-mode batch norm, where the statistics are constants.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward_eval(
    x: &[f64],
    grad_out: &[f64],
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
    (n, c, h, w): (usize, usize, usize, usize),
    mean: &[f64],
    invstd: &[f64],
    gamma: &[f64],
) {
    let plane = h * w;
    let mut dx = dx;
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    for ci in 0..c {
        let (mu, is) = (mean[ci], invstd[ci]);
        let scale = gamma[ci] * is;
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            let gs = &grad_out[base..base + plane];
            let xs = &x[base..base + plane];
            if let Some(dx) = dx.as_deref_mut() {
                axpy(&mut dx[base..base + plane], gs, scale);
            }
            for (g, xv) in gs.iter().zip(xs) {
                sum_g += g;
                sum_gx += g * (xv - mu) * is;
            }
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            dg[ci] += sum_gx;
        }
        if let Some(db) = dbeta.as_deref_mut() {
            db[ci] += sum_g;
        }
    }
}
