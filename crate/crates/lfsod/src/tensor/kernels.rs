//! Raw numeric kernels behind the tape ops.
//!
//! Pure functions over flat row-major `f64` buffers. Shape validation happens
//! at the tape layer; kernels assume consistent arguments. Every loop runs in
//! a fixed order so results are bit-reproducible.

/// Output extent of a (possibly dilated) convolution along one dimension.
/// `None` when the padded input is smaller than the kernel span.
pub(crate) fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    let padded = input + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// 2D cross-correlation. `x` is `[C_in, H, W]`, `w` is `[C_out, C_in, Kh, Kw]`,
/// output `[C_out, Ho, Wo]` with `out_hw = [Ho, Wo]`. No bias.
pub(crate) fn conv2d_fwd(
    x: &[f64],
    xs: [usize; 3],
    w: &[f64],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
    dil: usize,
    out_hw: [usize; 2],
) -> Vec<f64> {
    let [ci_n, h, wd] = xs;
    let [co_n, _, kh, kw] = ws;
    let [oh_n, ow_n] = out_hw;
    let mut y = vec![0.0; co_n * oh_n * ow_n];
    for co in 0..co_n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let mut acc = 0.0;
                for ci in 0..ci_n {
                    let xbase = ci * h * wd;
                    let wbase = (co * ci_n + ci) * kh * kw;
                    for u in 0..kh {
                        let iy = (oh * stride + u * dil) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let ix = (ow * stride + v * dil) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += x[xbase + iy as usize * wd + ix as usize] * w[wbase + u * kw + v];
                        }
                    }
                }
                y[(co * oh_n + oh) * ow_n + ow] = acc;
            }
        }
    }
    y
}

/// Gradients of [`conv2d_fwd`] w.r.t. input and kernel.
pub(crate) fn conv2d_bwd(
    x: &[f64],
    xs: [usize; 3],
    w: &[f64],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
    dil: usize,
    out_hw: [usize; 2],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let [ci_n, h, wd] = xs;
    let [co_n, _, kh, kw] = ws;
    let [oh_n, ow_n] = out_hw;
    let mut gx = vec![0.0; ci_n * h * wd];
    let mut gw = vec![0.0; co_n * ci_n * kh * kw];
    for co in 0..co_n {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let g = gy[(co * oh_n + oh) * ow_n + ow];
                for ci in 0..ci_n {
                    let xbase = ci * h * wd;
                    let wbase = (co * ci_n + ci) * kh * kw;
                    for u in 0..kh {
                        let iy = (oh * stride + u * dil) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let ix = (ow * stride + v * dil) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = xbase + iy as usize * wd + ix as usize;
                            let wi = wbase + u * kw + v;
                            gx[xi] += g * w[wi];
                            gw[wi] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// 3D cross-correlation over a `[C_in, T, H, W]` volume with kernel
/// `[C_out, C_in, Kt, Kh, Kw]`. Strides and pads are (temporal, spatial);
/// the spatial value applies to both H and W.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_fwd(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 5],
    stride: (usize, usize),
    pad: (usize, usize),
    out_thw: [usize; 3],
) -> Vec<f64> {
    let [ci_n, t, h, wd] = xs;
    let [co_n, _, kt, kh, kw] = ws;
    let [ot_n, oh_n, ow_n] = out_thw;
    let (st, ss) = stride;
    let (pt, ps) = pad;
    let mut y = vec![0.0; co_n * ot_n * oh_n * ow_n];
    for co in 0..co_n {
        for ot in 0..ot_n {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    let mut acc = 0.0;
                    for ci in 0..ci_n {
                        for q in 0..kt {
                            let it = (ot * st + q) as isize - pt as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for u in 0..kh {
                                let iy = (oh * ss + u) as isize - ps as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for v in 0..kw {
                                    let ix = (ow * ss + v) as isize - ps as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((ci * t + it as usize) * h + iy as usize) * wd + ix as usize;
                                    let wi = (((co * ci_n + ci) * kt + q) * kh + u) * kw + v;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    y[((co * ot_n + ot) * oh_n + oh) * ow_n + ow] = acc;
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_bwd(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 5],
    stride: (usize, usize),
    pad: (usize, usize),
    out_thw: [usize; 3],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let [ci_n, t, h, wd] = xs;
    let [co_n, _, kt, kh, kw] = ws;
    let [ot_n, oh_n, ow_n] = out_thw;
    let (st, ss) = stride;
    let (pt, ps) = pad;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for co in 0..co_n {
        for ot in 0..ot_n {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    let g = gy[((co * ot_n + ot) * oh_n + oh) * ow_n + ow];
                    for ci in 0..ci_n {
                        for q in 0..kt {
                            let it = (ot * st + q) as isize - pt as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for u in 0..kh {
                                let iy = (oh * ss + u) as isize - ps as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for v in 0..kw {
                                    let ix = (ow * ss + v) as isize - ps as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((ci * t + it as usize) * h + iy as usize) * wd + ix as usize;
                                    let wi = (((co * ci_n + ci) * kt + q) * kh + u) * kw + v;
                                    gx[xi] += g * w[wi];
                                    gw[wi] += g * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Transposed 2D convolution (the adjoint of a stride-`s` convolution).
/// `x` is `[C_a, H, W]`, `w` is `[C_a, C_b, Kh, Kw]`, output
/// `[C_b, s*(H-1)+Kh-2p, s*(W-1)+Kw-2p]`.
pub(crate) fn convt2d_fwd(
    x: &[f64],
    xs: [usize; 3],
    w: &[f64],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
    out_hw: [usize; 2],
) -> Vec<f64> {
    let [ca_n, h, wd] = xs;
    let [_, cb_n, kh, kw] = ws;
    let [oh_n, ow_n] = out_hw;
    let mut y = vec![0.0; cb_n * oh_n * ow_n];
    for ca in 0..ca_n {
        for iy in 0..h {
            for ix in 0..wd {
                let xv = x[(ca * h + iy) * wd + ix];
                for cb in 0..cb_n {
                    let wbase = (ca * cb_n + cb) * kh * kw;
                    for u in 0..kh {
                        let oy = (iy * stride + u) as isize - pad as isize;
                        if oy < 0 || oy >= oh_n as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let ox = (ix * stride + v) as isize - pad as isize;
                            if ox < 0 || ox >= ow_n as isize {
                                continue;
                            }
                            y[(cb * oh_n + oy as usize) * ow_n + ox as usize] += xv * w[wbase + u * kw + v];
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn convt2d_bwd(
    x: &[f64],
    xs: [usize; 3],
    w: &[f64],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
    out_hw: [usize; 2],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let [ca_n, h, wd] = xs;
    let [_, cb_n, kh, kw] = ws;
    let [oh_n, ow_n] = out_hw;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for ca in 0..ca_n {
        for iy in 0..h {
            for ix in 0..wd {
                let xi = (ca * h + iy) * wd + ix;
                for cb in 0..cb_n {
                    let wbase = (ca * cb_n + cb) * kh * kw;
                    for u in 0..kh {
                        let oy = (iy * stride + u) as isize - pad as isize;
                        if oy < 0 || oy >= oh_n as isize {
                            continue;
                        }
                        for v in 0..kw {
                            let ox = (ix * stride + v) as isize - pad as isize;
                            if ox < 0 || ox >= ow_n as isize {
                                continue;
                            }
                            let g = gy[(cb * oh_n + oy as usize) * ow_n + ox as usize];
                            gx[xi] += g * w[wbase + u * kw + v];
                            gw[wbase + u * kw + v] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Interpolation coefficients for 2x bilinear upsampling with half-pixel
/// centers: output index `o` samples source position `(o + 0.5)/2 - 0.5`,
/// clamped at the borders. Returns the two source indices and the weight of
/// the second one.
pub(crate) fn up2x_lerp(o: usize, n: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) / 2.0 - 0.5;
    let f = s.floor();
    let i0 = f as isize;
    let t = s - f;
    let a = i0.clamp(0, n as isize - 1) as usize;
    let b = (i0 + 1).clamp(0, n as isize - 1) as usize;
    (a, b, t)
}

pub(crate) fn up2x_bilinear_fwd(x: &[f64], xs: [usize; 3]) -> Vec<f64> {
    let [c_n, h, w] = xs;
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; c_n * oh * ow];
    for c in 0..c_n {
        for oy in 0..oh {
            let (y0, y1, ty) = up2x_lerp(oy, h);
            for ox in 0..ow {
                let (x0, x1, tx) = up2x_lerp(ox, w);
                let base = c * h * w;
                let v = (1.0 - ty) * (1.0 - tx) * x[base + y0 * w + x0]
                    + (1.0 - ty) * tx * x[base + y0 * w + x1]
                    + ty * (1.0 - tx) * x[base + y1 * w + x0]
                    + ty * tx * x[base + y1 * w + x1];
                y[(c * oh + oy) * ow + ox] = v;
            }
        }
    }
    y
}

pub(crate) fn up2x_bilinear_bwd(xs: [usize; 3], gy: &[f64]) -> Vec<f64> {
    let [c_n, h, w] = xs;
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![0.0; c_n * h * w];
    for c in 0..c_n {
        for oy in 0..oh {
            let (y0, y1, ty) = up2x_lerp(oy, h);
            for ox in 0..ow {
                let (x0, x1, tx) = up2x_lerp(ox, w);
                let g = gy[(c * oh + oy) * ow + ox];
                let base = c * h * w;
                gx[base + y0 * w + x0] += (1.0 - ty) * (1.0 - tx) * g;
                gx[base + y0 * w + x1] += (1.0 - ty) * tx * g;
                gx[base + y1 * w + x0] += ty * (1.0 - tx) * g;
                gx[base + y1 * w + x1] += ty * tx * g;
            }
        }
    }
    gx
}

/// Splits a shape around `axis` into (outer, axis length, inner) strides for
/// line-wise reductions and softmax.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

/// Numerically stable softmax along one axis (max-shifted exponentials).
pub(crate) fn softmax_fwd(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..n {
                m = m.max(x[at(k)]);
            }
            let mut z = 0.0;
            for k in 0..n {
                let e = (x[at(k)] - m).exp();
                y[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                y[at(k)] /= z;
            }
        }
    }
    y
}

/// Softmax gradient: `gx = s * (gy - <gy, s>)` per line.
pub(crate) fn softmax_bwd(s: &[f64], shape: &[usize], axis: usize, gy: &[f64]) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut gx = vec![0.0; s.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let mut dot = 0.0;
            for k in 0..n {
                dot += gy[at(k)] * s[at(k)];
            }
            for k in 0..n {
                gx[at(k)] = s[at(k)] * (gy[at(k)] - dot);
            }
        }
    }
    gx
}

/// Row-major index permutation: returns `y` with `y[p(i)] = x[i]` where `p`
/// maps multi-indices through `perm` (`out_axis k = in_axis perm[k]`).
pub(crate) fn permute_fwd(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        out_strides[d] = out_strides[d + 1] * out_shape[d + 1];
    }
    let mut y = vec![0.0; x.len()];
    let mut idx = vec![0usize; rank];
    for (flat, &v) in x.iter().enumerate() {
        let mut rem = flat;
        for d in 0..rank {
            idx[d] = rem / in_strides[d];
            rem %= in_strides[d];
        }
        let mut of = 0;
        for k in 0..rank {
            of += idx[perm[k]] * out_strides[k];
        }
        y[of] = v;
    }
    y
}
