//! Generic differentiable ops on [`Var`].

use super::linalg::{pose_mul_acc, pose_mul_nt_acc, pose_mul_tn_acc};
use super::{split_axis, strides_of, BackwardCtx, Tensor, Var};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

impl<'g> Var<'g> {
    fn unary<F, D>(self, f: F, df: D) -> Var<'g>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let x = self.value();
        let out = x.map(f);
        self.graph().record(&[self], out, move |ctx: &BackwardCtx<'_>| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            let data = ctx
                .grad
                .data()
                .iter()
                .zip(x.iter().zip(y))
                .map(|(g, (&xi, &yi))| g * df(xi, yi))
                .collect();
            vec![Some(Tensor::from_parts(ctx.output.shape().to_vec(), data))]
        })
    }

    /// Elementwise binary op. `other` must either match `self`'s shape or
    /// equal a trailing suffix of it, in which case it is broadcast.
    fn binary(self, other: Var<'g>, op: Binary) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let ashape = a.shape();
        let bshape = b.shape();
        if bshape.len() > ashape.len() || ashape[ashape.len() - bshape.len()..] != *bshape {
            return Err(dim_err!(
                "{}: shape {:?} cannot be broadcast against {:?}",
                op.name(),
                bshape,
                ashape
            ));
        }
        let nb = b.len().max(1);
        let out: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = b.data()[i % nb];
                match op {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let out = Tensor::from_parts(ashape.to_vec(), out);
        Ok(self.graph().record(&[self, other], out, move |ctx| {
            let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let ga = ctx.needs(0).then(|| {
                let data = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| match op {
                        Binary::Add | Binary::Sub => gi,
                        Binary::Mul => gi * b[i % nb],
                        Binary::Div => gi / b[i % nb],
                    })
                    .collect();
                Tensor::from_parts(ctx.inputs[0].shape().to_vec(), data)
            });
            let gb = ctx.needs(1).then(|| {
                let mut acc = vec![0.0; b.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let j = i % nb;
                    acc[j] += match op {
                        Binary::Add => gi,
                        Binary::Sub => -gi,
                        Binary::Mul => gi * a[i],
                        Binary::Div => -gi * a[i] / (b[j] * b[j]),
                    };
                }
                Tensor::from_parts(ctx.inputs[1].shape().to_vec(), acc)
            });
            vec![ga, gb]
        }))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Binary::Div)
    }

    pub fn neg(self) -> Var<'g> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn recip(self) -> Var<'g> {
        self.unary(|x| 1.0 / x, |_, y| -y * y)
    }

    pub fn powf(self, p: f64) -> Var<'g> {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    /// `max(x, lo)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(self, lo: f64) -> Var<'g> {
        self.unary(move |x| x.max(lo), move |x, _| if x >= lo { 1.0 } else { 0.0 })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let out = Tensor::scalar(x.sum());
        self.graph().record(&[self], out, |ctx| {
            let g = ctx.grad.item();
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.graph().record(&[self], Tensor::from_parts(shape, out), move |ctx| {
            let g = ctx.grad.data();
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    gx[(o * n + k) * inner..(o * n + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), gx))]
        }))
    }

    /// Softmax along `axis`, computed after subtracting the per-slice maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let out = softmax_tensor(&x, axis);
        let (outer, n, inner) = split_axis(x.shape(), axis);
        Ok(self.graph().record(&[self], out, move |ctx| {
            let (y, g) = (ctx.output.data(), ctx.grad.data());
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..n {
                        gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(ctx.output.shape().to_vec(), gx))]
        }))
    }

    /// Euclidean norm along `axis`, removing it. The gradient at a zero
    /// slice is defined as zero.
    pub fn l2_norm(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let ss: f64 = (0..n).map(|k| x.data()[(o * n + k) * inner + i].powi(2)).sum();
                out[o * inner + i] = ss.sqrt();
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.graph().record(&[self], Tensor::from_parts(shape, out), move |ctx| {
            let (x, norm, g) = (ctx.inputs[0].data(), ctx.output.data(), ctx.grad.data());
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let nrm = norm[o * inner + i];
                    if nrm == 0.0 {
                        continue;
                    }
                    let scale = g[o * inner + i] / nrm;
                    for k in 0..n {
                        let at = (o * n + k) * inner + i;
                        gx[at] = scale * x[at];
                    }
                }
            }
            vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), gx))]
        }))
    }

    /// `x / (1 + ||x||)` over `axis`; output norms lie in `[0, 1)`.
    pub fn squash(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; x.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let nrm = (0..n).map(|k| x.data()[at(k)].powi(2)).sum::<f64>().sqrt();
                norms[o * inner + i] = nrm;
                for k in 0..n {
                    out[at(k)] = x.data()[at(k)] / (1.0 + nrm);
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.graph().record(&[self], out, move |ctx| {
            let (x, g) = (ctx.inputs[0].data(), ctx.grad.data());
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let nrm = norms[o * inner + i];
                    let denom = 1.0 + nrm;
                    let coupling = if nrm > 0.0 {
                        (0..n).map(|k| g[at(k)] * x[at(k)]).sum::<f64>() / (nrm * denom * denom)
                    } else {
                        0.0
                    };
                    for k in 0..n {
                        gx[at(k)] = g[at(k)] / denom - coupling * x[at(k)];
                    }
                }
            }
            vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), gx))]
        }))
    }

    /// `x / sum(x)` along `axis` (shape preserved).
    pub fn normalize_axis(self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis(x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; x.len()];
        let mut sums = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let s: f64 = (0..n).map(|k| x.data()[at(k)]).sum();
                sums[o * inner + i] = s;
                for k in 0..n {
                    out[at(k)] = x.data()[at(k)] / s;
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.graph().record(&[self], out, move |ctx| {
            let (y, g) = (ctx.output.data(), ctx.grad.data());
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                    let s = sums[o * inner + i];
                    for k in 0..n {
                        gx[at(k)] = (g[at(k)] - dot) / s;
                    }
                }
            }
            vec![Some(Tensor::from_parts(ctx.output.shape().to_vec(), gx))]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        Ok(self.graph().record(&[self], out, |ctx| {
            let g = ctx.grad.data().to_vec();
            vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), g))]
        }))
    }

    /// Batched product of square trailing blocks, `[..., s, s] x [..., s, s]`.
    /// Leading dimensions broadcast with the usual size-1 rule.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let plan = MatmulPlan::new(a.shape(), b.shape())?;
        let s = plan.side;
        let block = s * s;
        let mut out = vec![0.0; plan.count * block];
        for (k, (ia, ib)) in plan.pairs().enumerate() {
            pose_mul_acc(
                s,
                &a.data()[ia * block..(ia + 1) * block],
                &b.data()[ib * block..(ib + 1) * block],
                &mut out[k * block..(k + 1) * block],
            );
        }
        let out = Tensor::from_parts(plan.out_shape.clone(), out);
        Ok(self.graph().record(&[self, other], out, move |ctx| {
            let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut ga = ctx.needs(0).then(|| vec![0.0; a.len()]);
            let mut gb = ctx.needs(1).then(|| vec![0.0; b.len()]);
            for (k, (ia, ib)) in plan.pairs().enumerate() {
                let gk = &g[k * block..(k + 1) * block];
                if let Some(ga) = ga.as_mut() {
                    pose_mul_nt_acc(s, gk, &b[ib * block..(ib + 1) * block], &mut ga[ia * block..(ia + 1) * block]);
                }
                if let Some(gb) = gb.as_mut() {
                    pose_mul_tn_acc(s, &a[ia * block..(ia + 1) * block], gk, &mut gb[ib * block..(ib + 1) * block]);
                }
            }
            vec![
                ga.map(|d| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d)),
                gb.map(|d| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), d)),
            ]
        }))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_tensor(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x.data()[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (x.data()[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[at(k)] /= total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

/// Index bookkeeping for broadcast batched matmul.
struct MatmulPlan {
    side: usize,
    count: usize,
    out_shape: Vec<usize>,
    lead: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || dim_err!("matmul: incompatible shapes {a:?} and {b:?}");
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let side = a[a.len() - 1];
        if a[a.len() - 2] != side || b[b.len() - 2] != side || b[b.len() - 1] != side {
            return Err(mismatch());
        }
        let (la, lb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let rank = la.len().max(lb.len());
        let pad = |l: &[usize]| {
            let mut v = vec![1; rank - l.len()];
            v.extend_from_slice(l);
            v
        };
        let (pa, pb) = (pad(la), pad(lb));
        let mut lead = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            lead.push(match (x, y) {
                _ if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(mismatch()),
            });
        }
        let broadcast_strides = |p: &[usize]| {
            let st = strides_of(p);
            p.iter().zip(st).map(|(&e, s)| if e == 1 { 0 } else { s }).collect::<Vec<_>>()
        };
        let mut out_shape = lead.clone();
        out_shape.extend([side, side]);
        Ok(Self {
            side,
            count: lead.iter().product(),
            out_shape,
            a_strides: broadcast_strides(&pa),
            b_strides: broadcast_strides(&pb),
            lead,
        })
    }

    fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let lead_strides = strides_of(&self.lead);
        (0..self.count).map(move |k| {
            let (mut ia, mut ib, mut rem) = (0, 0, k);
            for (d, &st) in lead_strides.iter().enumerate() {
                let ix = rem / st;
                rem %= st;
                ia += ix * self.a_strides[d];
                ib += ix * self.b_strides[d];
            }
            (ia, ib)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_product() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn identity_product_is_noop() {
        let g = Graph::new();
        let x = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.7).sin());
        let eye = g.constant(Tensor::identity_stack(1, 4).reshape(&[4, 4]).unwrap());
        let xv = g.constant(x.clone());
        assert_eq!(*eye.matmul(xv).unwrap().value(), x);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3, 3]));
        let b = g.constant(Tensor::zeros(&[2, 4, 4]));
        let msg = a.matmul(b).err().unwrap().to_string();
        assert!(msg.contains("[2, 3, 3]") && msg.contains("[2, 4, 4]"), "{msg}");
        let c = g.constant(Tensor::zeros(&[3, 4, 4]));
        assert!(b.matmul(c).is_err());
    }

    #[test]
    fn matmul_broadcasts_leading_dims() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[3, 2, 2], |i| (i % 5) as f64));
        assert_eq!(a.matmul(b).unwrap().shape(), vec![2, 3, 2, 2]);
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::new();
        let y = g.constant(Tensor::from_vec(vec![0.0, 0.0])).softmax(0).unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5]);
        let y = g.constant(Tensor::from_vec(vec![0.0, 3f64.ln()])).softmax(0).unwrap();
        assert!((y.value().data()[0] - 0.25).abs() < 1e-15);
        assert!((y.value().data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let g = Graph::new();
        let big = g.constant(Tensor::from_vec(vec![1000.0, 1000.0])).softmax(0).unwrap();
        assert_eq!(big.value().data(), &[0.5, 0.5]);
        // shifted-input oracle
        let x = [1000.0, 998.5, 1001.25];
        let shifted: Vec<f64> = x.iter().map(|v| v - 1000.0).collect();
        let e: Vec<f64> = shifted.iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let y = g.constant(Tensor::from_vec(x.to_vec())).softmax(0).unwrap();
        for (a, b) in y.value().data().iter().zip(e.iter().map(|v| v / z)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn norm_and_sigmoid_examples() {
        let g = Graph::new();
        let n = g.constant(Tensor::from_vec(vec![3.0, 4.0])).l2_norm(0).unwrap();
        assert_eq!(n.value().item(), 5.0);
        assert_eq!(g.constant(Tensor::scalar(0.0)).sigmoid().value().item(), 0.5);
    }

    #[test]
    fn l2_norm_gradient_at_zero_is_zero() {
        let g = Graph::new();
        let x = g.param(Tensor::zeros(&[4]));
        let y = x.l2_norm(0).unwrap().sum();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0; 4]);
    }

    #[test]
    fn squash_examples() {
        let g = Graph::new();
        let zero = g.constant(Tensor::zeros(&[16])).squash(0).unwrap();
        assert!(zero.value().data().iter().all(|&v| v == 0.0));
        let unit = g.constant(Tensor::from_fn(&[16], |i| if i == 3 { 1.0 } else { 0.0 }));
        let n = unit.squash(0).unwrap().l2_norm(0).unwrap().value().item();
        assert!((n - 0.5).abs() < 1e-15);
        let three = g.constant(Tensor::from_vec(vec![0.0, 3.0, 0.0, 0.0])).squash(0).unwrap();
        assert!((three.l2_norm(0).unwrap().value().item() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn broadcast_add_of_trailing_suffix() {
        let g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let y = a.add(b).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let grads = g.backward(y.sum()).unwrap();
        assert_eq!(grads.wrt(b).data(), &[2.0, 2.0, 2.0]);
        assert!(b.add(a).is_err());
    }
}
