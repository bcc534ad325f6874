//! Scalar compute kernels behind the tape ops.
//!
//! Every reduction uses a fixed association order (four running partial sums,
//! then a fixed combine), so results are bit-identical from run to run while
//! still auto-vectorizing well. Layout contracts: images are `(H, W, C)`
//! row-major, convolution weights are `(Cout, KH, KW, Cin)`, matrices are
//! row-major `(rows, cols)`.

/// Inner product with a fixed reduction tree.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let mut acc = [0.0f64; 4];
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..n {
        s += a[j] * b[j];
    }
    s
}

/// `y += alpha * x`, elementwise.
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// Row-major matrix product `(m, k) x (k, n) -> (m, n)`, accumulated into `out`.
pub(crate) fn matmul_fwd(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy(a[i * k + kk], &b[kk * n..(kk + 1) * n], out_row);
        }
    }
}

/// Gradients of the matrix product w.r.t. both operands.
pub(crate) fn matmul_bwd(
    a: &[f64],
    m: usize,
    k: usize,
    b: &[f64],
    n: usize,
    g: &[f64],
    da: &mut [f64],
    db: &mut [f64],
) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            da[i * k + kk] += dot(g_row, &b[kk * n..(kk + 1) * n]);
            axpy(a[i * k + kk], g_row, &mut db[kk * n..(kk + 1) * n]);
        }
    }
}

/// Output spatial size of a convolution with kernel `k`, padding `k / 2`,
/// and the given stride.
#[inline]
pub(crate) fn conv_out_size(input: usize, k: usize, stride: usize) -> usize {
    (input + 2 * (k / 2) - k) / stride + 1
}

/// 2D convolution over an `(H, W, Cin)` image with SAME-style padding `k / 2`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_fwd(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    wgt: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    bias: &[f64],
    out: &mut [f64],
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let (oh, ow) = (conv_out_size(h, kh, stride), conv_out_size(w, kw, stride));
    debug_assert_eq!(out.len(), oh * ow * cout);
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * cout;
            for oc in 0..cout {
                let mut acc = bias[oc];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xoff = (iy as usize * w + ix as usize) * cin;
                        let woff = ((oc * kh + ky) * kw + kx) * cin;
                        acc += dot(&x[xoff..xoff + cin], &wgt[woff..woff + cin]);
                    }
                }
                out[obase + oc] = acc;
            }
        }
    }
}

/// Gradients of [`conv2d_fwd`] w.r.t. input, weights, and bias.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_bwd(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    wgt: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    g: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let (oh, ow) = (conv_out_size(h, kh, stride), conv_out_size(w, kw, stride));
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * cout;
            for oc in 0..cout {
                let go = g[obase + oc];
                db[oc] += go;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xoff = (iy as usize * w + ix as usize) * cin;
                        let woff = ((oc * kh + ky) * kw + kx) * cin;
                        axpy(go, &wgt[woff..woff + cin], &mut dx[xoff..xoff + cin]);
                        axpy(go, &x[xoff..xoff + cin], &mut dw[woff..woff + cin]);
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Nearest-neighbor 2x upsample of an `(H, W, C)` image.
pub(crate) fn upsample2x_fwd(x: &[f64], h: usize, w: usize, c: usize, out: &mut [f64]) {
    let ow = 2 * w;
    for y in 0..h {
        for xcol in 0..w {
            let src = &x[(y * w + xcol) * c..(y * w + xcol + 1) * c];
            for dy in 0..2 {
                for dx in 0..2 {
                    let obase = ((2 * y + dy) * ow + 2 * xcol + dx) * c;
                    out[obase..obase + c].copy_from_slice(src);
                }
            }
        }
    }
}

pub(crate) fn upsample2x_bwd(g: &[f64], h: usize, w: usize, c: usize, dx_out: &mut [f64]) {
    let ow = 2 * w;
    for y in 0..h {
        for xcol in 0..w {
            let dst = &mut dx_out[(y * w + xcol) * c..(y * w + xcol + 1) * c];
            for dy in 0..2 {
                for dxi in 0..2 {
                    let gbase = ((2 * y + dy) * ow + 2 * xcol + dxi) * c;
                    for ch in 0..c {
                        dst[ch] += g[gbase + ch];
                    }
                }
            }
        }
    }
}

/// Per-sample compositing weights for `r` rays of `n` samples each.
///
/// With transmittance weighting, `w_i = T_i - T_{i+1}` where
/// `T_1 = 1` and `T_{i+1} = T_i * exp(-sigma_i * delta_i)`; the telescoping
/// form keeps `sum(w) = 1 - T_final <= 1`. Without it, `w_i` is the local
/// opacity `1 - exp(-sigma_i * delta_i)` alone.
pub(crate) fn transmittance_weights_fwd(
    sigma: &[f64],
    deltas: &[f64],
    r: usize,
    n: usize,
    with_transmittance: bool,
    out: &mut [f64],
) {
    for ray in 0..r {
        let s = &sigma[ray * n..(ray + 1) * n];
        let d = &deltas[ray * n..(ray + 1) * n];
        let o = &mut out[ray * n..(ray + 1) * n];
        let mut t = 1.0f64;
        for i in 0..n {
            let e = (-s[i].max(0.0) * d[i]).exp();
            if with_transmittance {
                let t_next = t * e;
                o[i] = t - t_next;
                t = t_next;
            } else {
                o[i] = 1.0 - e;
            }
        }
    }
}

/// Gradient of [`transmittance_weights_fwd`] w.r.t. `sigma`.
///
/// For `w_i = T_i (1 - e_i)` with `e_i = exp(-sigma_i delta_i)`, sample `i`
/// affects its own weight through `e_i` and every later weight through the
/// transmittance product:
/// `d w_i / d sigma_i = delta_i T_i e_i` and
/// `d w_k / d sigma_i = -delta_i w_k` for `k > i`.
/// A right-to-left suffix sum of `g_k w_k` makes the whole ray O(n).
pub(crate) fn transmittance_weights_bwd(
    sigma: &[f64],
    deltas: &[f64],
    r: usize,
    n: usize,
    with_transmittance: bool,
    g: &[f64],
    dsigma: &mut [f64],
) {
    for ray in 0..r {
        let s = &sigma[ray * n..(ray + 1) * n];
        let d = &deltas[ray * n..(ray + 1) * n];
        let gr = &g[ray * n..(ray + 1) * n];
        let ds = &mut dsigma[ray * n..(ray + 1) * n];
        if with_transmittance {
            // Forward sweep for T_i, then a reverse sweep accumulating the
            // suffix sum of g_k * w_k.
            let mut trans = vec![0.0f64; n + 1];
            trans[0] = 1.0;
            for i in 0..n {
                trans[i + 1] = trans[i] * (-s[i].max(0.0) * d[i]).exp();
            }
            let mut suffix = 0.0f64;
            for i in (0..n).rev() {
                let w_i = trans[i] - trans[i + 1];
                // sigma is clamped at zero in the forward pass; the clamp
                // kills the gradient on the negative side.
                let active = if s[i] > 0.0 { 1.0 } else { 0.0 };
                ds[i] += active * d[i] * (gr[i] * trans[i + 1] - suffix);
                suffix += gr[i] * w_i;
            }
        } else {
            for i in 0..n {
                let active = if s[i] > 0.0 { 1.0 } else { 0.0 };
                let e = (-s[i].max(0.0) * d[i]).exp();
                ds[i] += active * gr[i] * d[i] * e;
            }
        }
    }
}
