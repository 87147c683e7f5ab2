//! Fused capsule kernels with hand-written backward passes.
//!
//! Capsule tensors are laid out `[B, N, D, H, W]` with each pose stored as a
//! row-major `s x s` matrix (`d = row * s + col`). Because `D` precedes the
//! spatial axes, row `k` of every pose in a channel is a contiguous block of
//! `s * H * W` values, which lets pose products run as plane-wise axpy loops.

use crate::error::{dim_err, Result};
use crate::tensor::linalg::gemm;
use crate::tensor::{Tensor, Var};

/// `out[r, :] += sum_k t[r, k] * x[k, :]` where rows hold `len` values.
#[inline]
fn rows_mul_acc(s: usize, t: &[f64], x: &[f64], len: usize, out: &mut [f64]) {
    for r in 0..s {
        let orow = &mut out[r * len..(r + 1) * len];
        for k in 0..s {
            let a = t[r * s + k];
            if a == 0.0 {
                continue;
            }
            for (o, &v) in orow.iter_mut().zip(&x[k * len..(k + 1) * len]) {
                *o += a * v;
            }
        }
    }
}

/// `dx[k, :] += sum_r t[r, k] * dy[r, :]`.
#[inline]
fn rows_mul_t_acc(s: usize, t: &[f64], dy: &[f64], len: usize, dx: &mut [f64]) {
    for k in 0..s {
        let xrow = &mut dx[k * len..(k + 1) * len];
        for r in 0..s {
            let a = t[r * s + k];
            if a == 0.0 {
                continue;
            }
            for (o, &v) in xrow.iter_mut().zip(&dy[r * len..(r + 1) * len]) {
                *o += a * v;
            }
        }
    }
}

/// `dt[r, k] += <dy[r, :], x[k, :]>`.
#[inline]
fn rows_outer_acc(s: usize, dy: &[f64], x: &[f64], len: usize, dt: &mut [f64]) {
    for r in 0..s {
        let yrow = &dy[r * len..(r + 1) * len];
        for k in 0..s {
            let xrow = &x[k * len..(k + 1) * len];
            dt[r * s + k] += yrow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

fn pose_side(d: usize) -> Result<usize> {
    let s = (d as f64).sqrt().round() as usize;
    if s * s != d || s == 0 {
        return Err(dim_err!("capsule dimension {d} is not a perfect square"));
    }
    Ok(s)
}

fn rank5(x: &Tensor, what: &str) -> Result<[usize; 5]> {
    x.shape()
        .try_into()
        .map_err(|_| dim_err!("{what}: expected a [B, N, D, H, W] capsule tensor, got {:?}", x.shape()))
}

fn out_extent(input: usize, kernel: usize, stride: usize, what: &str) -> Result<usize> {
    if kernel > input || stride == 0 {
        return Err(dim_err!("{what}: kernel {kernel} with stride {stride} does not fit input extent {input}"));
    }
    Ok((input - kernel) / stride + 1)
}

/// Copies the strided `ho x wo` window at offset `(kh, kw)` of every plane in
/// `src` (planes of `h x w`) into contiguous planes of `dst`.
#[allow(clippy::too_many_arguments)]
fn gather_window(src: &[f64], planes: usize, h: usize, w: usize, kh: usize, kw: usize, st: usize, ho: usize, wo: usize, dst: &mut [f64]) {
    for q in 0..planes {
        let sp = &src[q * h * w..(q + 1) * h * w];
        let dp = &mut dst[q * ho * wo..(q + 1) * ho * wo];
        for i in 0..ho {
            let row = (i * st + kh) * w + kw;
            for j in 0..wo {
                dp[i * wo + j] = sp[row + j * st];
            }
        }
    }
}

/// Inverse of [`gather_window`]: accumulates contiguous planes back into the
/// strided window.
#[allow(clippy::too_many_arguments)]
fn scatter_window(src: &[f64], planes: usize, h: usize, w: usize, kh: usize, kw: usize, st: usize, ho: usize, wo: usize, dst: &mut [f64]) {
    for q in 0..planes {
        let sp = &src[q * ho * wo..(q + 1) * ho * wo];
        let dp = &mut dst[q * h * w..(q + 1) * h * w];
        for i in 0..ho {
            let row = (i * st + kh) * w + kw;
            for j in 0..wo {
                dp[row + j * st] += sp[i * wo + j];
            }
        }
    }
}

/// Depthwise capsule convolution: for every channel `n`,
/// `p[b, n, :, i, j] = sum_{kh, kw} T[n, kh, kw] * c[b, n, :, i*st + kh, j*st + kw]`
/// where each term is a pose-matrix product. `transform` is `[N, K, K, s, s]`.
pub fn depthwise_pose_conv<'g>(c: Var<'g>, transform: Var<'g>, stride: usize) -> Result<Var<'g>> {
    let x = c.value();
    let t = transform.value();
    let [b, n, d, h, w] = rank5(&x, "depthwise capsule convolution")?;
    let s = pose_side(d)?;
    let k = match t.shape() {
        &[tn, k1, k2, s1, s2] if tn == n && k1 == k2 && s1 == s && s2 == s => k1,
        other => {
            return Err(dim_err!(
                "depthwise capsule convolution: transform shape {other:?} does not match input {:?} (expected [{n}, K, K, {s}, {s}])",
                x.shape()
            ))
        }
    };
    let ho = out_extent(h, k, stride, "depthwise capsule convolution")?;
    let wo = out_extent(w, k, stride, "depthwise capsule convolution")?;
    let (hw, ohw) = (h * w, ho * wo);
    let mut out = vec![0.0; b * n * d * ohw];
    let mut win = vec![0.0; d * ohw];
    for bn in 0..b * n {
        let ch = bn % n;
        let src = &x.data()[bn * d * hw..(bn + 1) * d * hw];
        let dst = &mut out[bn * d * ohw..(bn + 1) * d * ohw];
        for kh in 0..k {
            for kw in 0..k {
                gather_window(src, d, h, w, kh, kw, stride, ho, wo, &mut win);
                let tm = &t.data()[((ch * k + kh) * k + kw) * d..][..d];
                rows_mul_acc(s, tm, &win, s * ohw, dst);
            }
        }
    }
    let out = Tensor::new(&[b, n, d, ho, wo], out)?;
    Ok(c.graph().record(&[c, transform], out, move |ctx| {
        let (x, t, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let mut gx = ctx.needs(0).then(|| vec![0.0; x.len()]);
        let mut gt = ctx.needs(1).then(|| vec![0.0; t.len()]);
        let mut win = vec![0.0; d * ohw];
        let mut dwin = vec![0.0; d * ohw];
        for bn in 0..b * n {
            let ch = bn % n;
            let src = &x[bn * d * hw..(bn + 1) * d * hw];
            let dy = &g[bn * d * ohw..(bn + 1) * d * ohw];
            for kh in 0..k {
                for kw in 0..k {
                    let toff = ((ch * k + kh) * k + kw) * d;
                    if let Some(gt) = gt.as_mut() {
                        gather_window(src, d, h, w, kh, kw, stride, ho, wo, &mut win);
                        rows_outer_acc(s, dy, &win, s * ohw, &mut gt[toff..toff + d]);
                    }
                    if let Some(gx) = gx.as_mut() {
                        dwin.iter_mut().for_each(|v| *v = 0.0);
                        rows_mul_t_acc(s, &t[toff..toff + d], dy, s * ohw, &mut dwin);
                        scatter_window(&dwin, d, h, w, kh, kw, stride, ho, wo, &mut gx[bn * d * hw..(bn + 1) * d * hw]);
                    }
                }
            }
        }
        vec![
            gx.map(|v| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), v)),
            gt.map(|v| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), v)),
        ]
    }))
}

/// Pointwise channel mixing: `out[b, m] = sum_n weights[m, n] * p[b, n] (+ bias[m])`,
/// applied identically to every pose entry and position.
pub fn pointwise_mix<'g>(p: Var<'g>, weights: Var<'g>, bias: Option<Var<'g>>) -> Result<Var<'g>> {
    let x = p.value();
    let wt = weights.value();
    let [b, n, d, h, w] = rank5(&x, "pointwise capsule mixing")?;
    let m = match wt.shape() {
        &[m, wn] if wn == n => m,
        other => return Err(dim_err!("pointwise capsule mixing: weights {other:?} do not take {n} input channels")),
    };
    let bvals = bias.map(|v| v.value());
    if let Some(bv) = &bvals {
        if bv.shape() != [m] {
            return Err(dim_err!("pointwise capsule mixing: bias {:?} does not match {m} output channels", bv.shape()));
        }
    }
    let l = d * h * w;
    let mut out = vec![0.0; b * m * l];
    for bi in 0..b {
        let ob = &mut out[bi * m * l..(bi + 1) * m * l];
        if let Some(bv) = &bvals {
            for (mi, chunk) in ob.chunks_mut(l).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv.data()[mi]);
            }
        }
        gemm(m, n, l, wt.data(), false, &x.data()[bi * n * l..(bi + 1) * n * l], false, 1.0, ob);
    }
    let out = Tensor::new(&[b, m, d, h, w], out)?;
    let mut parents = vec![p, weights];
    parents.extend(bias);
    Ok(p.graph().record(&parents, out, move |ctx| {
        let (x, wt, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let gx = ctx.needs(0).then(|| {
            let mut gx = vec![0.0; x.len()];
            for bi in 0..b {
                gemm(n, m, l, wt, true, &g[bi * m * l..(bi + 1) * m * l], false, 0.0, &mut gx[bi * n * l..(bi + 1) * n * l]);
            }
            Tensor::from_parts(ctx.inputs[0].shape().to_vec(), gx)
        });
        let gw = ctx.needs(1).then(|| {
            let mut gw = vec![0.0; m * n];
            for bi in 0..b {
                gemm(m, l, n, &g[bi * m * l..(bi + 1) * m * l], false, &x[bi * n * l..(bi + 1) * n * l], true, 1.0, &mut gw);
            }
            Tensor::from_parts(vec![m, n], gw)
        });
        let mut grads = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs(2).then(|| {
                let mut gb = vec![0.0; m];
                for (row, chunk) in g.chunks(l).enumerate() {
                    gb[row % m] += chunk.iter().sum::<f64>();
                }
                Tensor::from_parts(vec![m], gb)
            }));
        }
        grads
    }))
}

/// Votes for the global capsules: `v[b, g, n, :, pos] = T[g, n] * p[b, n, :, pos]`.
///
/// `p` is `[B, N, D, H, W]`, `transform` is `[G, N, s, s]`; the result is laid
/// out `[B, G, N, D, H*W]`.
pub fn global_votes<'g>(p: Var<'g>, transform: Var<'g>) -> Result<Var<'g>> {
    let x = p.value();
    let t = transform.value();
    let [b, n, d, h, w] = rank5(&x, "global votes")?;
    let s = pose_side(d)?;
    let gcount = match t.shape() {
        &[gc, tn, s1, s2] if tn == n && s1 == s && s2 == s => gc,
        other => {
            return Err(dim_err!(
                "global votes: transform shape {other:?} does not match capsules {:?} (expected [G, {n}, {s}, {s}])",
                x.shape()
            ))
        }
    };
    let pp = h * w;
    let blk = d * pp;
    let mut out = vec![0.0; b * gcount * n * blk];
    for bi in 0..b {
        for gi in 0..gcount {
            for ni in 0..n {
                let src = &x.data()[(bi * n + ni) * blk..][..blk];
                let tm = &t.data()[(gi * n + ni) * d..][..d];
                let dst = &mut out[((bi * gcount + gi) * n + ni) * blk..][..blk];
                rows_mul_acc(s, tm, src, s * pp, dst);
            }
        }
    }
    let out = Tensor::new(&[b, gcount, n, d, pp], out)?;
    Ok(p.graph().record(&[p, transform], out, move |ctx| {
        let (x, t, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let mut gx = ctx.needs(0).then(|| vec![0.0; x.len()]);
        let mut gt = ctx.needs(1).then(|| vec![0.0; t.len()]);
        for bi in 0..b {
            for gi in 0..gcount {
                for ni in 0..n {
                    let dy = &g[((bi * gcount + gi) * n + ni) * blk..][..blk];
                    let toff = (gi * n + ni) * d;
                    let xoff = (bi * n + ni) * blk;
                    if let Some(gx) = gx.as_mut() {
                        rows_mul_t_acc(s, &t[toff..toff + d], dy, s * pp, &mut gx[xoff..xoff + blk]);
                    }
                    if let Some(gt) = gt.as_mut() {
                        rows_outer_acc(s, dy, &x[xoff..xoff + blk], s * pp, &mut gt[toff..toff + d]);
                    }
                }
            }
        }
        vec![
            gx.map(|v| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), v)),
            gt.map(|v| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), v)),
        ]
    }))
}

/// Patch-wise votes for layer-to-layer routing.
///
/// Every input capsule inside the `K x K` window of an output position votes
/// for every output channel:
/// `v[b, o, (kh*K + kw)*C_in + c, :, pos] = T[kh, kw, c, o] * x[b, c, :, i*st + kh, j*st + kw]`.
/// `transform` is `[K, K, C_in, C_out, s, s]`; the result is
/// `[B, C_out, K*K*C_in, D, H_out*W_out]`.
pub fn patch_votes<'g>(c: Var<'g>, transform: Var<'g>, stride: usize) -> Result<Var<'g>> {
    let x = c.value();
    let t = transform.value();
    let [b, cin, d, h, w] = rank5(&x, "patch votes")?;
    let s = pose_side(d)?;
    let (k, cout) = match t.shape() {
        &[k1, k2, tc, co, s1, s2] if k1 == k2 && tc == cin && s1 == s && s2 == s => (k1, co),
        other => {
            return Err(dim_err!(
                "patch votes: transform shape {other:?} does not match capsules {:?} (expected [K, K, {cin}, C_out, {s}, {s}])",
                x.shape()
            ))
        }
    };
    let ho = out_extent(h, k, stride, "patch votes")?;
    let wo = out_extent(w, k, stride, "patch votes")?;
    let (hw, ohw) = (h * w, ho * wo);
    let sites = k * k * cin;
    let blk = d * ohw;
    let mut out = vec![0.0; b * cout * sites * blk];
    let mut win = vec![0.0; blk];
    for bi in 0..b {
        for kh in 0..k {
            for kw in 0..k {
                for ci in 0..cin {
                    let src = &x.data()[(bi * cin + ci) * d * hw..][..d * hw];
                    gather_window(src, d, h, w, kh, kw, stride, ho, wo, &mut win);
                    let site = (kh * k + kw) * cin + ci;
                    for co in 0..cout {
                        let tm = &t.data()[(((kh * k + kw) * cin + ci) * cout + co) * d..][..d];
                        let dst = &mut out[((bi * cout + co) * sites + site) * blk..][..blk];
                        rows_mul_acc(s, tm, &win, s * ohw, dst);
                    }
                }
            }
        }
    }
    let out = Tensor::new(&[b, cout, sites, d, ohw], out)?;
    Ok(c.graph().record(&[c, transform], out, move |ctx| {
        let (x, t, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let mut gx = ctx.needs(0).then(|| vec![0.0; x.len()]);
        let mut gt = ctx.needs(1).then(|| vec![0.0; t.len()]);
        let mut win = vec![0.0; blk];
        let mut dwin = vec![0.0; blk];
        for bi in 0..b {
            for kh in 0..k {
                for kw in 0..k {
                    for ci in 0..cin {
                        let xoff = (bi * cin + ci) * d * hw;
                        if gt.is_some() {
                            gather_window(&x[xoff..xoff + d * hw], d, h, w, kh, kw, stride, ho, wo, &mut win);
                        }
                        dwin.iter_mut().for_each(|v| *v = 0.0);
                        let site = (kh * k + kw) * cin + ci;
                        for co in 0..cout {
                            let toff = (((kh * k + kw) * cin + ci) * cout + co) * d;
                            let dy = &g[((bi * cout + co) * sites + site) * blk..][..blk];
                            if let Some(gt) = gt.as_mut() {
                                rows_outer_acc(s, dy, &win, s * ohw, &mut gt[toff..toff + d]);
                            }
                            if gx.is_some() {
                                rows_mul_t_acc(s, &t[toff..toff + d], dy, s * ohw, &mut dwin);
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            scatter_window(&dwin, d, h, w, kh, kw, stride, ho, wo, &mut gx[xoff..xoff + d * hw]);
                        }
                    }
                }
            }
        }
        vec![
            gx.map(|v| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), v)),
            gt.map(|v| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), v)),
        ]
    }))
}
