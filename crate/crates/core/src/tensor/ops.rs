//! Forward and backward kernels on dynamic-dimension f64 arrays.
//!
//! These are plain functions with no graph bookkeeping; the tape in
//! [`super::tape`] records which ones ran and replays their adjoints.
//! Layout conventions: feature maps are `[C, D, H, W]`, convolution
//! weights `[Cout, Cin, k, k, k]`, biases `[Cout]`. Everything is f64 so
//! finite-difference gradient checks are meaningful at step 1e-4.

use ndarray::{ArrayD, IxDyn};

use crate::error::{IguaneError, Result};

// ======================================================================
// 3D convolution
// ======================================================================

/// Output spatial size for one axis.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return Err(IguaneError::Shape(format!(
            "conv3d: input extent {n} with pad {pad} smaller than kernel {k}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn conv_dims(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> Result<([usize; 4], [usize; 5], [usize; 4])> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 5 {
        return Err(IguaneError::Shape(format!(
            "conv3d expects x [C,D,H,W] and w [Co,Ci,k,k,k], got {xs:?} and {ws:?}"
        )));
    }
    if ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(IguaneError::Shape(format!(
            "conv3d kernels must be cubic, got {:?}",
            &ws[2..5]
        )));
    }
    if xs[0] != ws[1] {
        return Err(IguaneError::Shape(format!(
            "conv3d: input has {} channels but weight expects {}",
            xs[0], ws[1]
        )));
    }
    if stride == 0 {
        return Err(IguaneError::Shape("conv3d: stride must be >= 1".into()));
    }
    let k = ws[2];
    let od = conv_out_len(xs[1], k, stride, pad)?;
    let oh = conv_out_len(xs[2], k, stride, pad)?;
    let ow = conv_out_len(xs[3], k, stride, pad)?;
    Ok((
        [xs[0], xs[1], xs[2], xs[3]],
        [ws[0], ws[1], ws[2], ws[3], ws[4]],
        [ws[0], od, oh, ow],
    ))
}

/// Zero-pads the spatial axes of `[C,D,H,W]` by `pad` on each side,
/// returning a flat standard-layout buffer plus padded dims.
fn pad_input(x: &ArrayD<f64>, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let s = x.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let (pd, ph, pw) = (d + 2 * pad, h + 2 * pad, w + 2 * pad);
    let mut buf = vec![0.0; c * pd * ph * pw];
    let xsl = x.as_slice().expect("standard layout");
    for ci in 0..c {
        for ix in 0..d {
            for iy in 0..h {
                let src = ((ci * d + ix) * h + iy) * w;
                let dst = ((ci * pd + ix + pad) * ph + iy + pad) * pw + pad;
                buf[dst..dst + w].copy_from_slice(&xsl[src..src + w]);
            }
        }
    }
    (buf, [c, pd, ph, pw])
}

/// Direct 3D cross-correlation with symmetric zero padding.
pub fn conv3d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: Option<&ArrayD<f64>>,
    stride: usize,
    pad: usize,
) -> Result<ArrayD<f64>> {
    let (_, wdims, odims) = conv_dims(x, w, stride, pad)?;
    let [co_n, ci_n, k, _, _] = wdims;
    let [_, od, oh, ow] = odims;
    if let Some(b) = b {
        if b.shape() != [co_n] {
            return Err(IguaneError::Shape(format!(
                "conv3d bias shape {:?} does not match {co_n} output channels",
                b.shape()
            )));
        }
    }
    let (xp, pdims) = pad_input(x, pad);
    let [_, pd, ph, pw] = pdims;
    let wsl = w.as_slice().expect("standard layout");
    let mut out = vec![0.0; co_n * od * oh * ow];

    for co in 0..co_n {
        let obase = co * od * oh * ow;
        for ci in 0..ci_n {
            for kx in 0..k {
                for ky in 0..k {
                    for kz in 0..k {
                        let wv = wsl[(((co * ci_n + ci) * k + kx) * k + ky) * k + kz];
                        for ox in 0..od {
                            let ix = ox * stride + kx;
                            for oy in 0..oh {
                                let iy = oy * stride + ky;
                                let orow = obase + (ox * oh + oy) * ow;
                                let irow = ((ci * pd + ix) * ph + iy) * pw + kz;
                                if stride == 1 {
                                    let xr = &xp[irow..irow + ow];
                                    let or = &mut out[orow..orow + ow];
                                    for z in 0..ow {
                                        or[z] += wv * xr[z];
                                    }
                                } else {
                                    for oz in 0..ow {
                                        out[orow + oz] += wv * xp[irow + oz * stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            let bv = b.as_slice().unwrap()[co];
            for v in &mut out[obase..obase + od * oh * ow] {
                *v += bv;
            }
        }
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[co_n, od, oh, ow]), out).unwrap())
}

/// Gradients of [`conv3d_forward`]; `gx`/`gw` are only computed when the
/// corresponding flag is set (discriminator updates on detached inputs
/// skip `gx`).
pub struct Conv3dGrads {
    pub gx: Option<ArrayD<f64>>,
    pub gw: Option<ArrayD<f64>>,
    pub gb: Option<ArrayD<f64>>,
}

pub fn conv3d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    gout: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gw: bool,
    need_gb: bool,
) -> Result<Conv3dGrads> {
    let (xdims, wdims, odims) = conv_dims(x, w, stride, pad)?;
    let [co_n, ci_n, k, _, _] = wdims;
    let [_, od, oh, ow] = odims;
    if gout.shape() != odims {
        return Err(IguaneError::Shape(format!(
            "conv3d backward: upstream grad shape {:?} != output shape {odims:?}",
            gout.shape()
        )));
    }
    let g = gout.as_slice().expect("standard layout");
    let wsl = w.as_slice().expect("standard layout");

    let gb = if need_gb {
        let mut gb = vec![0.0; co_n];
        for co in 0..co_n {
            let obase = co * od * oh * ow;
            gb[co] = g[obase..obase + od * oh * ow].iter().sum();
        }
        Some(ArrayD::from_shape_vec(IxDyn(&[co_n]), gb).unwrap())
    } else {
        None
    };

    let mut gw = if need_gw {
        Some(vec![0.0; co_n * ci_n * k * k * k])
    } else {
        None
    };
    let mut gxp = if need_gx { Some(Vec::new()) } else { None };

    let (xp, pdims) = pad_input(x, pad);
    let [_, pd, ph, pw] = pdims;
    if let Some(b) = gxp.as_mut() {
        b.resize(xp.len(), 0.0);
    }

    for co in 0..co_n {
        let obase = co * od * oh * ow;
        for ci in 0..ci_n {
            for kx in 0..k {
                for ky in 0..k {
                    for kz in 0..k {
                        let widx = (((co * ci_n + ci) * k + kx) * k + ky) * k + kz;
                        let wv = wsl[widx];
                        let mut wacc = 0.0;
                        for ox in 0..od {
                            let ix = ox * stride + kx;
                            for oy in 0..oh {
                                let iy = oy * stride + ky;
                                let orow = obase + (ox * oh + oy) * ow;
                                let irow = ((ci * pd + ix) * ph + iy) * pw + kz;
                                let gr = &g[orow..orow + ow];
                                if need_gw {
                                    if stride == 1 {
                                        let xr = &xp[irow..irow + ow];
                                        for z in 0..ow {
                                            wacc += gr[z] * xr[z];
                                        }
                                    } else {
                                        for (oz, gv) in gr.iter().enumerate() {
                                            wacc += gv * xp[irow + oz * stride];
                                        }
                                    }
                                }
                                if let Some(gxp) = gxp.as_mut() {
                                    if stride == 1 {
                                        let xr = &mut gxp[irow..irow + ow];
                                        for z in 0..ow {
                                            xr[z] += wv * gr[z];
                                        }
                                    } else {
                                        for (oz, gv) in gr.iter().enumerate() {
                                            gxp[irow + oz * stride] += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] = wacc;
                        }
                    }
                }
            }
        }
    }

    let gx = gxp.map(|gxp| {
        // Crop the padding back off.
        let [c, d, h, wd] = xdims;
        let mut out = vec![0.0; c * d * h * wd];
        for ci in 0..c {
            for ix in 0..d {
                for iy in 0..h {
                    let dst = ((ci * d + ix) * h + iy) * wd;
                    let src = ((ci * pd + ix + pad) * ph + iy + pad) * pw + pad;
                    out[dst..dst + wd].copy_from_slice(&gxp[src..src + wd]);
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&xdims), out).unwrap()
    });
    let gw = gw.map(|v| ArrayD::from_shape_vec(IxDyn(&wdims), v).unwrap());
    Ok(Conv3dGrads { gx, gw, gb })
}

// ======================================================================
// Instance normalization with mean absolute deviation
// ======================================================================

/// Per-channel statistics saved by the forward pass.
#[derive(Debug, Clone)]
pub struct InstNormCtx {
    pub mean: Vec<f64>,
    pub mad: Vec<f64>,
}

/// Normalizes each channel to `(x - mean) / (mad + eps)`, where `mad` is
/// the mean absolute deviation from the channel mean, then applies the
/// learned per-channel affine `gamma * u + beta`.
pub fn instnorm_forward(
    x: &ArrayD<f64>,
    gamma: &ArrayD<f64>,
    beta: &ArrayD<f64>,
    eps: f64,
) -> Result<(ArrayD<f64>, InstNormCtx)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(IguaneError::Shape(format!(
            "instance norm expects [C,D,H,W], got {s:?}"
        )));
    }
    let c = s[0];
    let n = s[1] * s[2] * s[3];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(IguaneError::Shape(format!(
            "instance norm affine shapes {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    let xs = x.as_slice().expect("standard layout");
    let gs = gamma.as_slice().unwrap();
    let bs = beta.as_slice().unwrap();
    let mut out = vec![0.0; xs.len()];
    let mut mean = vec![0.0; c];
    let mut mad = vec![0.0; c];
    for ci in 0..c {
        let xr = &xs[ci * n..(ci + 1) * n];
        let m: f64 = xr.iter().sum::<f64>() / n as f64;
        let md: f64 = xr.iter().map(|&v| (v - m).abs()).sum::<f64>() / n as f64;
        mean[ci] = m;
        mad[ci] = md;
        let sdev = md + eps;
        let or = &mut out[ci * n..(ci + 1) * n];
        for (o, &v) in or.iter_mut().zip(xr.iter()) {
            *o = gs[ci] * (v - m) / sdev + bs[ci];
        }
    }
    Ok((
        ArrayD::from_shape_vec(IxDyn(s), out).unwrap(),
        InstNormCtx { mean, mad },
    ))
}

pub fn instnorm_backward(
    x: &ArrayD<f64>,
    gamma: &ArrayD<f64>,
    ctx: &InstNormCtx,
    gout: &ArrayD<f64>,
    eps: f64,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let s = x.shape();
    let c = s[0];
    let n = s[1] * s[2] * s[3];
    let xs = x.as_slice().unwrap();
    let gs = gamma.as_slice().unwrap();
    let go = gout.as_slice().unwrap();
    let mut gx = vec![0.0; xs.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for ci in 0..c {
        let xr = &xs[ci * n..(ci + 1) * n];
        let gr = &go[ci * n..(ci + 1) * n];
        let m = ctx.mean[ci];
        let sd = ctx.mad[ci] + eps;
        // Affine grads use the normalized value u = (x - m)/sd.
        let mut gg = 0.0;
        let mut gb = 0.0;
        // t = sum_j (gamma * g_j) * a_j with a = x - m
        let mut t = 0.0;
        for (&xv, &gv) in xr.iter().zip(gr.iter()) {
            let a = xv - m;
            gg += gv * (a / sd);
            gb += gv;
            t += gs[ci] * gv * a;
        }
        ggamma[ci] = gg;
        gbeta[ci] = gb;
        // dL/da_j = h_j/sd - t*sign(a_j)/(n*sd^2), h = gamma*g;
        // then subtract the channel mean of dL/da (mean term of a = x - m).
        let gxr = &mut gx[ci * n..(ci + 1) * n];
        let mut acc = 0.0;
        for ((gxv, &xv), &gv) in gxr.iter_mut().zip(xr.iter()).zip(gr.iter()) {
            let a = xv - m;
            let da = gs[ci] * gv / sd - t * sign(a) / (n as f64 * sd * sd);
            *gxv = da;
            acc += da;
        }
        let mean_da = acc / n as f64;
        for gxv in gxr.iter_mut() {
            *gxv -= mean_da;
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(s), gx).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[c]), ggamma).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[c]), gbeta).unwrap(),
    )
}

// ======================================================================
// Trilinear upsampling (scale factor 2)
// ======================================================================

/// Per-axis interpolation taps for doubling an axis of length `n`
/// (half-pixel convention): output index o reads from input coordinate
/// (o + 0.5)/2 - 0.5, clamped at the borders.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    let mut taps = Vec::with_capacity(2 * n);
    for o in 0..2 * n {
        let c = (o as f64 + 0.5) / 2.0 - 0.5;
        let c = c.clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let w1 = c - i0 as f64;
        taps.push((i0, i1, w1));
    }
    taps
}

pub fn upsample2x_forward(x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(IguaneError::Shape(format!(
            "upsample expects [C,D,H,W], got {s:?}"
        )));
    }
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let (td, th, tw) = (upsample_taps(d), upsample_taps(h), upsample_taps(w));
    let xs = x.as_slice().unwrap();
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0.0; c * od * oh * ow];
    for ci in 0..c {
        let xb = ci * d * h * w;
        for (ox, &(x0, x1, wx)) in td.iter().enumerate() {
            for (oy, &(y0, y1, wy)) in th.iter().enumerate() {
                let orow = ((ci * od + ox) * oh + oy) * ow;
                let r00 = xb + (x0 * h + y0) * w;
                let r01 = xb + (x0 * h + y1) * w;
                let r10 = xb + (x1 * h + y0) * w;
                let r11 = xb + (x1 * h + y1) * w;
                for (oz, &(z0, z1, wz)) in tw.iter().enumerate() {
                    let lerp = |row: usize| -> f64 {
                        xs[row + z0] * (1.0 - wz) + xs[row + z1] * wz
                    };
                    let v0 = lerp(r00) * (1.0 - wy) + lerp(r01) * wy;
                    let v1 = lerp(r10) * (1.0 - wy) + lerp(r11) * wy;
                    out[orow + oz] = v0 * (1.0 - wx) + v1 * wx;
                }
            }
        }
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[c, od, oh, ow]), out).unwrap())
}

pub fn upsample2x_backward(in_shape: &[usize], gout: &ArrayD<f64>) -> ArrayD<f64> {
    let (c, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (td, th, tw) = (upsample_taps(d), upsample_taps(h), upsample_taps(w));
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let g = gout.as_slice().unwrap();
    let mut gx = vec![0.0; c * d * h * w];
    for ci in 0..c {
        let xb = ci * d * h * w;
        for (ox, &(x0, x1, wx)) in td.iter().enumerate() {
            for (oy, &(y0, y1, wy)) in th.iter().enumerate() {
                let orow = ((ci * od + ox) * oh + oy) * ow;
                for (oz, &(z0, z1, wz)) in tw.iter().enumerate() {
                    let gv = g[orow + oz];
                    for (ix, wxv) in [(x0, 1.0 - wx), (x1, wx)] {
                        for (iy, wyv) in [(y0, 1.0 - wy), (y1, wy)] {
                            let row = xb + (ix * h + iy) * w;
                            gx[row + z0] += gv * wxv * wyv * (1.0 - wz);
                            gx[row + z1] += gv * wxv * wyv * wz;
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c, d, h, w]), gx).unwrap()
}

// ======================================================================
// Dense layer
// ======================================================================

/// `y = W x + b` with x `[n]`, W `[m,n]`, b `[m]`.
pub fn dense_forward(x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || b.shape() != [ws[0]] {
        return Err(IguaneError::Shape(format!(
            "dense: incompatible shapes x {xs:?}, w {ws:?}, b {:?}",
            b.shape()
        )));
    }
    let (m, n) = (ws[0], ws[1]);
    let xv = x.as_slice().unwrap();
    let wv = w.as_slice().unwrap();
    let bv = b.as_slice().unwrap();
    let mut y = vec![0.0; m];
    for i in 0..m {
        let row = &wv[i * n..(i + 1) * n];
        y[i] = bv[i] + row.iter().zip(xv.iter()).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[m]), y).unwrap())
}

pub fn dense_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    gout: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let xv = x.as_slice().unwrap();
    let wv = w.as_slice().unwrap();
    let g = gout.as_slice().unwrap();
    let mut gx = vec![0.0; n];
    let mut gw = vec![0.0; m * n];
    for i in 0..m {
        let gi = g[i];
        let row = &wv[i * n..(i + 1) * n];
        let grow = &mut gw[i * n..(i + 1) * n];
        for j in 0..n {
            gx[j] += gi * row[j];
            grow[j] = gi * xv[j];
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(&[n]), gx).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&[m, n]), gw).unwrap(),
        gout.clone(),
    )
}

// ======================================================================
// Elementwise and reduction helpers
// ======================================================================

pub fn leaky_relu_forward(x: &ArrayD<f64>, slope: f64) -> ArrayD<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &ArrayD<f64>, gout: &ArrayD<f64>, slope: f64) -> ArrayD<f64> {
    let mut g = gout.clone();
    g.zip_mut_with(x, |gv, &xv| {
        if xv <= 0.0 {
            *gv *= slope;
        }
    });
    g
}

/// Mean over all elements, as a length-1 array.
pub fn mean_all(x: &ArrayD<f64>) -> ArrayD<f64> {
    let n = x.len() as f64;
    ArrayD::from_shape_vec(IxDyn(&[1]), vec![x.iter().sum::<f64>() / n]).unwrap()
}

/// Mean of each channel of `[C,D,H,W]`, as `[C]`.
pub fn channel_mean_forward(x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(IguaneError::Shape(format!(
            "channel mean expects [C,D,H,W], got {s:?}"
        )));
    }
    let (c, n) = (s[0], s[1] * s[2] * s[3]);
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0; c];
    for ci in 0..c {
        out[ci] = xs[ci * n..(ci + 1) * n].iter().sum::<f64>() / n as f64;
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[c]), out).unwrap())
}

pub fn channel_mean_backward(in_shape: &[usize], gout: &ArrayD<f64>) -> ArrayD<f64> {
    let (c, n) = (in_shape[0], in_shape[1] * in_shape[2] * in_shape[3]);
    let g = gout.as_slice().unwrap();
    let mut gx = vec![0.0; c * n];
    for ci in 0..c {
        let gv = g[ci] / n as f64;
        for v in &mut gx[ci * n..(ci + 1) * n] {
            *v = gv;
        }
    }
    ArrayD::from_shape_vec(IxDyn(in_shape), gx).unwrap()
}

pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
