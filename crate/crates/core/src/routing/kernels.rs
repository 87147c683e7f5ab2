//! Fused routing kernels on a shared layout.
//!
//! Votes are `v[B, M, S, D, P]`: `M` receiving capsules, `S` voting sites,
//! `D` pose entries and `P` positions. Receiving capsules are
//! `g[B, M, D, G]` where `G` is either 1 (one capsule pools every site and
//! position, as for the global capsules) or `P` (one capsule per position, as
//! in patch-wise routing). Per-vote quantities such as scores, distances and
//! coefficients are `[B, M, S, P]`.
//!
//! A "site group" is the set of `(s, p)` pairs feeding one receiving capsule:
//! all of `S x P` when `G == 1`, or `S` at a fixed `p` when `G == P`.

use crate::error::{dim_err, Result};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Layout {
    pub b: usize,
    pub m: usize,
    pub s: usize,
    pub d: usize,
    pub p: usize,
    pub groups: usize,
}

impl Layout {
    pub fn of_votes(v: &Tensor) -> Result<Self> {
        match *v.shape() {
            [b, m, s, d, p] => Ok(Self { b, m, s, d, p, groups: 1 }),
            _ => Err(dim_err!("votes must be [B, M, S, D, P], got {:?}", v.shape())),
        }
    }

    pub fn with_globals(v: &Tensor, g: &Tensor) -> Result<Self> {
        let mut l = Self::of_votes(v)?;
        match *g.shape() {
            [gb, gm, gd, gp] if gb == l.b && gm == l.m && gd == l.d && (gp == 1 || gp == l.p) => {
                l.groups = gp;
                Ok(l)
            }
            _ => Err(dim_err!(
                "receiving capsules {:?} do not match votes {:?} (expected [{}, {}, {}, 1 or {}])",
                g.shape(),
                v.shape(),
                l.b,
                l.m,
                l.d,
                l.p
            )),
        }
    }

    pub fn with_sites(v: &Tensor, x: &Tensor, groups: usize) -> Result<Self> {
        let mut l = Self::of_votes(v)?;
        if x.shape() != l.site_shape() {
            return Err(dim_err!("per-vote tensor {:?} does not match votes {:?}", x.shape(), v.shape()));
        }
        if groups != 1 && groups != l.p {
            return Err(dim_err!("group count {groups} must be 1 or {}", l.p));
        }
        l.groups = groups;
        Ok(l)
    }

    pub fn site_shape(&self) -> [usize; 4] {
        [self.b, self.m, self.s, self.p]
    }

    pub fn global_shape(&self) -> [usize; 4] {
        [self.b, self.m, self.d, self.groups]
    }

    #[inline]
    pub fn group_of(&self, p: usize) -> usize {
        if self.groups == 1 {
            0
        } else {
            p
        }
    }

    #[inline]
    pub fn vote_at(&self, bm: usize, s: usize, d: usize) -> usize {
        ((bm * self.s + s) * self.d + d) * self.p
    }

    #[inline]
    pub fn site_at(&self, bm: usize, s: usize) -> usize {
        (bm * self.s + s) * self.p
    }

    #[inline]
    pub fn global_at(&self, bm: usize, d: usize) -> usize {
        (bm * self.d + d) * self.groups
    }
}

/// Per-vote agreement with the receiving capsule:
/// `a[b, m, s, p] = <v[b, m, s, :, p], g[b, m, :, group(p)]>`.
pub fn agreement_scores<'g>(v: Var<'g>, g: Var<'g>) -> Result<Var<'g>> {
    let (vt, gt) = (v.value(), g.value());
    let l = Layout::with_globals(&vt, &gt)?;
    let (vd, gd) = (vt.data(), gt.data());
    let mut out = vec![0.0; l.b * l.m * l.s * l.p];
    for bm in 0..l.b * l.m {
        for s in 0..l.s {
            let a = &mut out[l.site_at(bm, s)..][..l.p];
            for d in 0..l.d {
                let vr = &vd[l.vote_at(bm, s, d)..][..l.p];
                let gr = &gd[l.global_at(bm, d)..][..l.groups];
                for p in 0..l.p {
                    a[p] += vr[p] * gr[l.group_of(p)];
                }
            }
        }
    }
    let out = Tensor::new(&l.site_shape(), out)?;
    Ok(v.graph().record(&[v, g], out, move |ctx| {
        let (vd, gd, da) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let mut gv = ctx.needs(0).then(|| vec![0.0; vd.len()]);
        let mut gg = ctx.needs(1).then(|| vec![0.0; gd.len()]);
        for bm in 0..l.b * l.m {
            for s in 0..l.s {
                let dar = &da[l.site_at(bm, s)..][..l.p];
                for d in 0..l.d {
                    let vo = l.vote_at(bm, s, d);
                    let go = l.global_at(bm, d);
                    for p in 0..l.p {
                        let q = l.group_of(p);
                        if let Some(gv) = gv.as_mut() {
                            gv[vo + p] = dar[p] * gd[go + q];
                        }
                        if let Some(gg) = gg.as_mut() {
                            gg[go + q] += dar[p] * vd[vo + p];
                        }
                    }
                }
            }
        }
        vec![
            gv.map(|x| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), x)),
            gg.map(|x| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), x)),
        ]
    }))
}

/// Euclidean distance of every vote to its receiving capsule, clamped below
/// at `floor`. Clamped entries carry no gradient.
pub fn vote_distances<'g>(v: Var<'g>, g: Var<'g>, floor: f64) -> Result<Var<'g>> {
    let (vt, gt) = (v.value(), g.value());
    let l = Layout::with_globals(&vt, &gt)?;
    let (vd, gd) = (vt.data(), gt.data());
    let mut sq = vec![0.0; l.b * l.m * l.s * l.p];
    for bm in 0..l.b * l.m {
        for s in 0..l.s {
            let acc = &mut sq[l.site_at(bm, s)..][..l.p];
            for d in 0..l.d {
                let vr = &vd[l.vote_at(bm, s, d)..][..l.p];
                let gr = &gd[l.global_at(bm, d)..][..l.groups];
                for p in 0..l.p {
                    let e = vr[p] - gr[l.group_of(p)];
                    acc[p] += e * e;
                }
            }
        }
    }
    let raw: Vec<f64> = sq.iter().map(|x| x.sqrt()).collect();
    let out = Tensor::new(&l.site_shape(), raw.iter().map(|&e| e.max(floor)).collect())?;
    Ok(v.graph().record(&[v, g], out, move |ctx| {
        let (vd, gd, dd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let mut gv = ctx.needs(0).then(|| vec![0.0; vd.len()]);
        let mut gg = ctx.needs(1).then(|| vec![0.0; gd.len()]);
        for bm in 0..l.b * l.m {
            for s in 0..l.s {
                let so = l.site_at(bm, s);
                for d in 0..l.d {
                    let vo = l.vote_at(bm, s, d);
                    let go = l.global_at(bm, d);
                    for p in 0..l.p {
                        let e = raw[so + p];
                        if e <= floor {
                            continue;
                        }
                        let q = l.group_of(p);
                        let t = dd[so + p] * (vd[vo + p] - gd[go + q]) / e;
                        if let Some(gv) = gv.as_mut() {
                            gv[vo + p] = t;
                        }
                        if let Some(gg) = gg.as_mut() {
                            gg[go + q] -= t;
                        }
                    }
                }
            }
        }
        vec![
            gv.map(|x| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), x)),
            gg.map(|x| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), x)),
        ]
    }))
}

/// Divides `x[B, M, S, P]` by its sum over each site group.
pub fn normalize_sites(x: Var<'_>, groups: usize) -> Result<Var<'_>> {
    let xt = x.value();
    let [b, m, s, p] = *xt.shape() else {
        return Err(dim_err!("site tensor must be [B, M, S, P], got {:?}", xt.shape()));
    };
    if groups != 1 && groups != p {
        return Err(dim_err!("group count {groups} must be 1 or {p}"));
    }
    let group_of = move |q: usize| if groups == 1 { 0 } else { q };
    let xd = xt.data();
    let mut sums = vec![0.0; b * m * groups];
    for bm in 0..b * m {
        for si in 0..s {
            for q in 0..p {
                sums[bm * groups + group_of(q)] += xd[(bm * s + si) * p + q];
            }
        }
    }
    let mut out = vec![0.0; xd.len()];
    for bm in 0..b * m {
        for si in 0..s {
            for q in 0..p {
                let at = (bm * s + si) * p + q;
                out[at] = xd[at] / sums[bm * groups + group_of(q)];
            }
        }
    }
    let out = Tensor::new(xt.shape(), out)?;
    Ok(x.graph().record(&[x], out, move |ctx| {
        let (y, g) = (ctx.output.data(), ctx.grad.data());
        let mut dots = vec![0.0; b * m * groups];
        for bm in 0..b * m {
            for si in 0..s {
                for q in 0..p {
                    let at = (bm * s + si) * p + q;
                    dots[bm * groups + group_of(q)] += g[at] * y[at];
                }
            }
        }
        let mut gx = vec![0.0; y.len()];
        for bm in 0..b * m {
            for si in 0..s {
                for q in 0..p {
                    let at = (bm * s + si) * p + q;
                    let k = bm * groups + group_of(q);
                    gx[at] = (g[at] - dots[k]) / sums[k];
                }
            }
        }
        vec![Some(Tensor::from_parts(ctx.output.shape().to_vec(), gx))]
    }))
}

/// Coefficient-weighted vote sum per receiving capsule:
/// `g[b, m, :, q] = sum_{(s, p) in group q} r[b, m, s, p] * v[b, m, s, :, p]`.
pub fn weighted_sum<'g>(v: Var<'g>, r: Var<'g>, groups: usize) -> Result<Var<'g>> {
    let (vt, rt) = (v.value(), r.value());
    let l = Layout::with_sites(&vt, &rt, groups)?;
    let (vd, rd) = (vt.data(), rt.data());
    let mut out = vec![0.0; l.b * l.m * l.d * l.groups];
    for bm in 0..l.b * l.m {
        for s in 0..l.s {
            let rr = &rd[l.site_at(bm, s)..][..l.p];
            for d in 0..l.d {
                let vr = &vd[l.vote_at(bm, s, d)..][..l.p];
                let go = l.global_at(bm, d);
                for p in 0..l.p {
                    out[go + l.group_of(p)] += rr[p] * vr[p];
                }
            }
        }
    }
    let out = Tensor::new(&l.global_shape(), out)?;
    Ok(v.graph().record(&[v, r], out, move |ctx| {
        let (vd, rd, dg) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let mut gv = ctx.needs(0).then(|| vec![0.0; vd.len()]);
        let mut gr = ctx.needs(1).then(|| vec![0.0; rd.len()]);
        for bm in 0..l.b * l.m {
            for s in 0..l.s {
                let so = l.site_at(bm, s);
                for d in 0..l.d {
                    let vo = l.vote_at(bm, s, d);
                    let go = l.global_at(bm, d);
                    for p in 0..l.p {
                        let up = dg[go + l.group_of(p)];
                        if let Some(gv) = gv.as_mut() {
                            gv[vo + p] = up * rd[so + p];
                        }
                        if let Some(gr) = gr.as_mut() {
                            gr[so + p] += up * vd[vo + p];
                        }
                    }
                }
            }
        }
        vec![
            gv.map(|x| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), x)),
            gr.map(|x| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), x)),
        ]
    }))
}

/// Coefficient-weighted squared spread of the votes around each receiving
/// capsule: `sigma2[b, m, q] = sum_{(s, p) in q} r * ||v[b, m, s, :, p] - g[b, m, :, q]||^2`.
pub fn cluster_spread<'g>(v: Var<'g>, r: Var<'g>, g: Var<'g>) -> Result<Var<'g>> {
    let (vt, rt, gt) = (v.value(), r.value(), g.value());
    let l = Layout::with_globals(&vt, &gt)?;
    Layout::with_sites(&vt, &rt, l.groups)?;
    let (vd, rd, gd) = (vt.data(), rt.data(), gt.data());
    let mut out = vec![0.0; l.b * l.m * l.groups];
    for bm in 0..l.b * l.m {
        for s in 0..l.s {
            let rr = &rd[l.site_at(bm, s)..][..l.p];
            for d in 0..l.d {
                let vr = &vd[l.vote_at(bm, s, d)..][..l.p];
                let go = l.global_at(bm, d);
                for p in 0..l.p {
                    let q = l.group_of(p);
                    let e = vr[p] - gd[go + q];
                    out[bm * l.groups + q] += rr[p] * e * e;
                }
            }
        }
    }
    let out = Tensor::new(&[l.b, l.m, l.groups], out)?;
    Ok(v.graph().record(&[v, r, g], out, move |ctx| {
        let (vd, rd, gd, dsig) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data(), ctx.grad.data());
        let mut gv = ctx.needs(0).then(|| vec![0.0; vd.len()]);
        let mut gr = ctx.needs(1).then(|| vec![0.0; rd.len()]);
        let mut gg = ctx.needs(2).then(|| vec![0.0; gd.len()]);
        for bm in 0..l.b * l.m {
            for s in 0..l.s {
                let so = l.site_at(bm, s);
                for d in 0..l.d {
                    let vo = l.vote_at(bm, s, d);
                    let go = l.global_at(bm, d);
                    for p in 0..l.p {
                        let q = l.group_of(p);
                        let up = dsig[bm * l.groups + q];
                        let e = vd[vo + p] - gd[go + q];
                        if let Some(gr) = gr.as_mut() {
                            gr[so + p] += up * e * e;
                        }
                        let t = 2.0 * up * rd[so + p] * e;
                        if let Some(gv) = gv.as_mut() {
                            gv[vo + p] = t;
                        }
                        if let Some(gg) = gg.as_mut() {
                            gg[go + q] -= t;
                        }
                    }
                }
            }
        }
        vec![
            gv.map(|x| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), x)),
            gr.map(|x| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), x)),
            gg.map(|x| Tensor::from_parts(ctx.inputs[2].shape().to_vec(), x)),
        ]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradcheckConfig};
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
        Tensor::rand_uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn passes(params: &[Tensor], loss: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>) {
        let n: usize = params.iter().map(Tensor::len).sum();
        let cfg = GradcheckConfig { samples: n, ..Default::default() };
        let report = check_gradients(params, loss, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(report.passed(), "max rel error {:e}", report.max_rel_error());
    }

    #[test]
    fn shape_checks() {
        let g = Graph::new();
        let v = g.constant(Tensor::zeros(&[1, 2, 3, 4, 5]));
        assert!(agreement_scores(v, g.constant(Tensor::zeros(&[1, 2, 4, 1]))).is_ok());
        assert!(agreement_scores(v, g.constant(Tensor::zeros(&[1, 2, 4, 5]))).is_ok());
        assert!(agreement_scores(v, g.constant(Tensor::zeros(&[1, 2, 4, 3]))).is_err());
        assert!(agreement_scores(v, g.constant(Tensor::zeros(&[1, 3, 4, 1]))).is_err());
        assert!(weighted_sum(v, g.constant(Tensor::zeros(&[1, 2, 3, 4])), 1).is_err());
        assert!(normalize_sites(g.constant(Tensor::ones(&[1, 2, 3, 5])), 2).is_err());
    }

    #[test]
    fn pooled_kernels_gradients() {
        let v = rand_tensor(&[2, 3, 2, 4, 3], -1.0, 1.0, 1);
        let gl = rand_tensor(&[2, 3, 4, 1], -1.0, 1.0, 2);
        let r = rand_tensor(&[2, 3, 2, 3], 0.1, 1.0, 3);
        let w_site = rand_tensor(&[2, 3, 2, 3], -1.0, 1.0, 4);
        let w_glob = rand_tensor(&[2, 3, 4, 1], -1.0, 1.0, 5);
        let w_sig = rand_tensor(&[2, 3, 1], -1.0, 1.0, 6);
        let ws = w_site.clone();
        passes(&[v.clone(), gl.clone()], move |g, x| Ok(agreement_scores(x[0], x[1])?.mul(g.constant(ws.clone()))?.sum()));
        let ws = w_site.clone();
        passes(&[v.clone(), gl.clone()], move |g, x| Ok(vote_distances(x[0], x[1], 1e-9)?.mul(g.constant(ws.clone()))?.sum()));
        let ws = w_site.clone();
        passes(&[r.clone()], move |g, x| Ok(normalize_sites(x[0], 1)?.mul(g.constant(ws.clone()))?.sum()));
        passes(&[v.clone(), r.clone()], move |g, x| Ok(weighted_sum(x[0], x[1], 1)?.mul(g.constant(w_glob.clone()))?.sum()));
        passes(&[v, r, gl], move |g, x| Ok(cluster_spread(x[0], x[1], x[2])?.mul(g.constant(w_sig.clone()))?.sum()));
    }

    #[test]
    fn per_position_kernels_gradients() {
        let v = rand_tensor(&[1, 2, 3, 4, 2], -1.0, 1.0, 11);
        let gl = rand_tensor(&[1, 2, 4, 2], -1.0, 1.0, 12);
        let r = rand_tensor(&[1, 2, 3, 2], 0.1, 1.0, 13);
        let w_site = rand_tensor(&[1, 2, 3, 2], -1.0, 1.0, 14);
        let w_glob = rand_tensor(&[1, 2, 4, 2], -1.0, 1.0, 15);
        let w_sig = rand_tensor(&[1, 2, 2], -1.0, 1.0, 16);
        let ws = w_site.clone();
        passes(&[v.clone(), gl.clone()], move |g, x| Ok(agreement_scores(x[0], x[1])?.mul(g.constant(ws.clone()))?.sum()));
        let ws = w_site.clone();
        passes(&[v.clone(), gl.clone()], move |g, x| Ok(vote_distances(x[0], x[1], 1e-9)?.mul(g.constant(ws.clone()))?.sum()));
        let ws = w_site.clone();
        passes(&[r.clone()], move |g, x| Ok(normalize_sites(x[0], 2)?.mul(g.constant(ws.clone()))?.sum()));
        passes(&[v.clone(), r.clone()], move |g, x| Ok(weighted_sum(x[0], x[1], 2)?.mul(g.constant(w_glob.clone()))?.sum()));
        passes(&[v, r, gl], move |g, x| Ok(cluster_spread(x[0], x[1], x[2])?.mul(g.constant(w_sig.clone()))?.sum()));
    }

    #[test]
    fn clamped_distance_has_zero_gradient() {
        let g = Graph::new();
        let v = g.param(Tensor::new(&[1, 1, 1, 2, 1], vec![0.5, -0.5]).unwrap());
        let c = g.param(Tensor::new(&[1, 1, 2, 1], vec![0.5, -0.5]).unwrap());
        let d = vote_distances(v, c, 1e-9).unwrap();
        assert_eq!(d.value().item(), 1e-9);
        let grads = g.backward(d.sum()).unwrap();
        assert!(grads.wrt(v).data().iter().all(|&x| x == 0.0));
        assert!(grads.wrt(c).data().iter().all(|&x| x == 0.0));
    }
}
