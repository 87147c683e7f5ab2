use super::linalg::gemm;
use super::{Tensor, Var};
use crate::error::{dim_err, Result};

/// Per-channel mean and variance tracked by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average toward `batch`.
    pub fn update(&mut self, batch: &BatchNormStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn direct(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.cin {
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (ci * self.k + kh) * self.k + kw;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + kh) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let xx = (ox * self.stride + kw) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] = if y >= 0
                                && (y as usize) < self.h
                                && xx >= 0
                                && (xx as usize) < self.w
                            {
                                x[(ci * self.h + y as usize) * self.w + xx as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.cin {
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (ci * self.k + kh) * self.k + kw;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + kh) as isize - self.pad as isize;
                        if y < 0 || y as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let xx = (ox * self.stride + kw) as isize - self.pad as isize;
                            if xx < 0 || xx as usize >= self.w {
                                continue;
                            }
                            gx[(ci * self.h + y as usize) * self.w + xx as usize] += src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    /// 2-D cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin, K, K]`.
    pub fn conv2d(self, kernel: Var<'g>, bias: Option<Var<'g>>, stride: usize, padding: usize) -> Result<Var<'g>> {
        let x = self.value();
        let wt = kernel.value();
        let (xs, ks) = (x.shape(), wt.shape());
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] || ks[2] != ks[3] {
            return Err(dim_err!("conv2d: input {xs:?} incompatible with kernel {ks:?}"));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d: stride must be at least 1"));
        }
        let k = ks[2];
        if k > xs[2] + 2 * padding || k > xs[3] + 2 * padding {
            return Err(dim_err!(
                "conv2d: kernel {k}x{k} larger than padded input {}x{}",
                xs[2] + 2 * padding,
                xs[3] + 2 * padding
            ));
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            k,
            stride,
            pad: padding,
            ho: (xs[2] + 2 * padding - k) / stride + 1,
            wo: (xs[3] + 2 * padding - k) / stride + 1,
        };
        if let Some(b) = bias {
            if b.value().shape() != [geom.cout] {
                return Err(dim_err!("conv2d: bias shape {:?} for {} output channels", b.shape(), geom.cout));
            }
        }
        let p = geom.positions();
        let in_item = geom.cin * geom.h * geom.w;
        let out_item = geom.cout * p;
        let mut out = vec![0.0; geom.batch * out_item];
        let mut cols = if geom.direct() { Vec::new() } else { vec![0.0; geom.col_rows() * p] };
        for b in 0..geom.batch {
            let xb = &x.data()[b * in_item..(b + 1) * in_item];
            let src: &[f64] = if geom.direct() {
                xb
            } else {
                geom.im2col(xb, &mut cols);
                &cols
            };
            let ob = &mut out[b * out_item..(b + 1) * out_item];
            if let Some(bv) = bias {
                let bias_val = bv.value();
                for (co, chunk) in ob.chunks_mut(p).enumerate() {
                    chunk.fill(bias_val.data()[co]);
                }
            }
            gemm(geom.cout, geom.col_rows(), p, wt.data(), false, src, false, 1.0, ob);
        }
        let out = Tensor::from_parts(vec![geom.batch, geom.cout, geom.ho, geom.wo], out);
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        Ok(self.graph().record(&parents, out, move |ctx| {
            let (x, wt, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut gx = ctx.needs(0).then(|| vec![0.0; x.len()]);
            let mut gw = ctx.needs(1).then(|| vec![0.0; wt.len()]);
            let mut cols = if geom.direct() { Vec::new() } else { vec![0.0; geom.col_rows() * p] };
            let mut gcols = vec![0.0; if geom.direct() { 0 } else { geom.col_rows() * p }];
            for b in 0..geom.batch {
                let gb = &g[b * out_item..(b + 1) * out_item];
                if let Some(gw) = gw.as_mut() {
                    let xb = &x[b * in_item..(b + 1) * in_item];
                    let src: &[f64] = if geom.direct() {
                        xb
                    } else {
                        geom.im2col(xb, &mut cols);
                        &cols
                    };
                    gemm(geom.cout, p, geom.col_rows(), gb, false, src, true, 1.0, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let gxb = &mut gx[b * in_item..(b + 1) * in_item];
                    if geom.direct() {
                        gemm(geom.col_rows(), geom.cout, p, wt, true, gb, false, 1.0, gxb);
                    } else {
                        gemm(geom.col_rows(), geom.cout, p, wt, true, gb, false, 0.0, &mut gcols);
                        geom.col2im(&gcols, gxb);
                    }
                }
            }
            let mut grads = vec![
                gx.map(|d| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d)),
                gw.map(|d| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), d)),
            ];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs(2).then(|| {
                    let mut gbias = vec![0.0; geom.cout];
                    for b in 0..geom.batch {
                        for (co, acc) in gbias.iter_mut().enumerate() {
                            let off = b * out_item + co * p;
                            *acc += g[off..off + p].iter().sum::<f64>();
                        }
                    }
                    Tensor::from_parts(vec![geom.cout], gbias)
                }));
            }
            grads
        }))
    }

    /// Batch normalization over axis 1 using the statistics of this batch.
    /// Returns the normalized output and the batch statistics (variance
    /// unbiased) for updating running estimates.
    pub fn batch_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<(Var<'g>, BatchNormStats)> {
        let x = self.value();
        let (c, per) = bn_layout(x.shape(), &gamma, &beta)?;
        let batch = x.shape()[0];
        let m = (batch * per) as f64;
        let (gm, bt) = (gamma.value(), beta.value());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * per;
                mean[ch] += x.data()[off..off + per].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * per;
                var[ch] += x.data()[off..off + per].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * per;
                for i in off..off + per {
                    xhat[i] = (x.data()[i] - mean[ch]) * inv_std[ch];
                    out[i] = gm.data()[ch] * xhat[i] + bt.data()[ch];
                }
            }
        }
        let unbiased = if m > 1.0 { var.iter().map(|v| v * m / (m - 1.0)).collect() } else { var.clone() };
        let stats = BatchNormStats { mean, var: unbiased };
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let node = self.graph().record(&[self, gamma, beta], out, move |ctx| {
            let (g, gm) = (ctx.grad.data(), ctx.inputs[1].data());
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for b in 0..batch {
                for ch in 0..c {
                    let off = (b * c + ch) * per;
                    for i in off..off + per {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            let gx = ctx.needs(0).then(|| {
                let mut gx = vec![0.0; g.len()];
                for b in 0..batch {
                    for ch in 0..c {
                        let off = (b * c + ch) * per;
                        let k = gm[ch] * inv_std[ch] / m;
                        for i in off..off + per {
                            gx[i] = k * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                        }
                    }
                }
                Tensor::from_parts(ctx.inputs[0].shape().to_vec(), gx)
            });
            vec![
                gx,
                ctx.needs(1).then(|| Tensor::from_parts(vec![c], sum_gx)),
                ctx.needs(2).then(|| Tensor::from_parts(vec![c], sum_g)),
            ]
        });
        Ok((node, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_fixed(self, gamma: Var<'g>, beta: Var<'g>, stats: &BatchNormStats, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let (c, per) = bn_layout(x.shape(), &gamma, &beta)?;
        let batch = x.shape()[0];
        let (gm, bt) = (gamma.value(), beta.value());
        let mean = stats.mean.clone();
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; x.len()];
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * per;
                for i in off..off + per {
                    out[i] = gm.data()[ch] * (x.data()[i] - mean[ch]) * inv_std[ch] + bt.data()[ch];
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.graph().record(&[self, gamma, beta], out, move |ctx| {
            let (x, gm, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut gx = vec![0.0; g.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for b in 0..batch {
                for ch in 0..c {
                    let off = (b * c + ch) * per;
                    for i in off..off + per {
                        gx[i] = g[i] * gm[ch] * inv_std[ch];
                        ggamma[ch] += g[i] * (x[i] - mean[ch]) * inv_std[ch];
                        gbeta[ch] += g[i];
                    }
                }
            }
            vec![
                ctx.needs(0).then(|| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), gx)),
                ctx.needs(1).then(|| Tensor::from_parts(vec![c], ggamma)),
                ctx.needs(2).then(|| Tensor::from_parts(vec![c], gbeta)),
            ]
        }))
    }
}

fn bn_layout(shape: &[usize], gamma: &Var<'_>, beta: &Var<'_>) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(dim_err!("batch_norm: input {shape:?} needs a channel axis"));
    }
    let c = shape[1];
    if gamma.value().shape() != [c] || beta.value().shape() != [c] {
        return Err(dim_err!(
            "batch_norm: affine shapes {:?}/{:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok((c, shape[2..].iter().product()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_size_arithmetic() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 28, 28]));
        let k = g.constant(Tensor::zeros(&[4, 1, 5, 5]));
        assert_eq!(x.conv2d(k, None, 2, 0).unwrap().shape(), vec![1, 4, 12, 12]);
        let x = g.constant(Tensor::zeros(&[1, 1, 32, 32]));
        assert_eq!(x.conv2d(k, None, 2, 0).unwrap().shape(), vec![1, 4, 14, 14]);
    }

    #[test]
    fn pointwise_kernel_is_per_pixel_linear_map() {
        let g = Graph::new();
        let xt = Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f64 * 0.3).sin());
        let kt = Tensor::from_fn(&[2, 3, 1, 1], |i| i as f64 - 2.0);
        let y = g.constant(xt.clone()).conv2d(g.constant(kt.clone()), None, 1, 0).unwrap().value();
        assert_eq!(y.shape(), &[2, 2, 4, 5]);
        for b in 0..2 {
            for co in 0..2 {
                for i in 0..4 {
                    for j in 0..5 {
                        let want: f64 = (0..3).map(|ci| kt.at(&[co, ci, 0, 0]) * xt.at(&[b, ci, i, j])).sum();
                        assert!((y.at(&[b, co, i, j]) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn matches_explicit_window_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xt = Tensor::rand_uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let kt = Tensor::rand_uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let g = Graph::new();
        let y = g.constant(xt.clone()).conv2d(g.constant(kt.clone()), None, 1, 0).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        for i in 0..2 {
            for j in 0..2 {
                let mut want = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        want += xt.at(&[0, 0, i + a, j + b]) * kt.at(&[0, 0, a, b]);
                    }
                }
                assert!((y.at(&[0, 0, i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(x.conv2d(k, None, 1, 0), Err(crate::Error::Dimension(_))));
        assert!(x.conv2d(k, None, 1, 1).is_ok());
    }

    #[test]
    fn batch_norm_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[8, 3, 5, 5], |i| {
            let ch = (i / 25) % 3;
            (ch as f64 + 1.0) * 3.0 + (ch as f64 + 0.5) * rand::Rng::gen_range(&mut rng, -1.0..1.0)
        }));
        let (y, stats) = x
            .batch_norm(g.constant(Tensor::ones(&[3])), g.constant(Tensor::zeros(&[3])), 1e-5)
            .unwrap();
        let y = y.value();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..8)
                .flat_map(|b| (0..25).map(move |p| (b, p)))
                .map(|(b, p)| y.data()[(b * 3 + ch) * 25 + p])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
            assert!(stats.mean[ch] > 0.0);
        }
    }
}
