//! Scalar-loop oracles and random instances shared by the integration tests.

#![allow(dead_code)]

use capsnet::caps::{glocap_votes, locapblock_forward, CapsuleTensor, LocapParams, RoutingMethod};
use capsnet::objectives::{activation_fuzzy, spread_loss, ActivationParams};
use capsnet::routing::{attention_coefficients, cluster_spread, fuzzy_coefficients, update_globals, FuzzyConfig};
use capsnet::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

pub fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, 0.05, 1.0, rng)
}

/// `max |a - b| / max |b|`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// `s x s` row-major product.
fn matmul(s: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; s * s];
    for r in 0..s {
        for c in 0..s {
            for k in 0..s {
                out[r * s + c] += a[r * s + k] * b[k * s + c];
            }
        }
    }
    out
}

fn side(d: usize) -> usize {
    let s = (d as f64).sqrt().round() as usize;
    assert_eq!(s * s, d);
    s
}

/// Pose of capsule `[b, n, :, i, j]` of a `[B, N, D, H, W]` tensor.
fn pose(t: &Tensor, b: usize, n: usize, i: usize, j: usize) -> Vec<f64> {
    let d = t.shape()[2];
    (0..d).map(|k| t.at(&[b, n, k, i, j])).collect()
}

fn squash_vec(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in x {
        *v /= 1.0 + n;
    }
}

pub struct LocapCase {
    pub c: Tensor,
    pub transform: Tensor,
    pub weights: Tensor,
    pub stride: usize,
}

pub fn locap_case(rng: &mut ChaCha8Rng) -> LocapCase {
    let b = rng.gen_range(1..3);
    let n = rng.gen_range(1..4);
    let k = rng.gen_range(1..4);
    let stride = rng.gen_range(1..3);
    let h = k + rng.gen_range(0..4);
    let w = k + rng.gen_range(0..4);
    let m = rng.gen_range(1..4);
    let s = rng.gen_range(1..4);
    LocapCase {
        c: uniform(&[b, n, s * s, h, w], rng),
        transform: uniform(&[n, k, k, s, s], rng),
        weights: uniform(&[m, n], rng),
        stride,
    }
}

/// Library locapblock: `(p, next)` values.
pub fn locap_lib(case: &LocapCase, squash: bool) -> (Tensor, Tensor) {
    let g = Graph::inference();
    let block = LocapParams {
        transform: g.constant(case.transform.clone()),
        weights: g.constant(case.weights.clone()),
        bias: None,
        stride: case.stride,
    };
    let c = CapsuleTensor::new(g.constant(case.c.clone())).unwrap();
    let (p, next) = locapblock_forward(c, &block, squash).unwrap();
    (p.var().value().as_ref().clone(), next.var().value().as_ref().clone())
}

/// Loop oracle: `p[b,n,:,i,j] = sum_{kh,kw} T[n,kh,kw] c[b,n,:,i*st+kh,j*st+kw]`,
/// `next[b,o,:,i,j] = sum_n W[o,n] p[b,n,:,i,j]`, squashed per capsule.
pub fn locap_oracle(case: &LocapCase, squash: bool) -> (Tensor, Tensor) {
    let [b, n, d, h, w] = <[usize; 5]>::try_from(case.c.shape()).unwrap();
    let k = case.transform.shape()[1];
    let s = side(d);
    let st = case.stride;
    let (ho, wo) = ((h - k) / st + 1, (w - k) / st + 1);
    let m = case.weights.shape()[0];
    let mut p = Tensor::zeros(&[b, n, d, ho, wo]);
    for bi in 0..b {
        for ni in 0..n {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = vec![0.0; d];
                    for kh in 0..k {
                        for kw in 0..k {
                            let t: Vec<f64> = (0..d).map(|e| case.transform.at(&[ni, kh, kw, e / s, e % s])).collect();
                            let prod = matmul(s, &t, &pose(&case.c, bi, ni, i * st + kh, j * st + kw));
                            for e in 0..d {
                                acc[e] += prod[e];
                            }
                        }
                    }
                    for e in 0..d {
                        p.set(&[bi, ni, e, i, j], acc[e]);
                    }
                }
            }
        }
    }
    let mut next = Tensor::zeros(&[b, m, d, ho, wo]);
    for bi in 0..b {
        for o in 0..m {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = vec![0.0; d];
                    for ni in 0..n {
                        for (e, a) in acc.iter_mut().enumerate() {
                            *a += case.weights.at(&[o, ni]) * p.at(&[bi, ni, e, i, j]);
                        }
                    }
                    if squash {
                        squash_vec(&mut acc);
                    }
                    for e in 0..d {
                        next.set(&[bi, o, e, i, j], acc[e]);
                    }
                }
            }
        }
    }
    (p, next)
}

pub fn votes_lib(p: &Tensor, transform: &Tensor) -> Tensor {
    let g = Graph::inference();
    let p = CapsuleTensor::new(g.constant(p.clone())).unwrap();
    glocap_votes(p, g.constant(transform.clone())).unwrap().value().as_ref().clone()
}

/// `v[b, m, n, :, i*W + j] = T[m, n] * p[b, n, :, i, j]`.
pub fn votes_oracle(p: &Tensor, transform: &Tensor) -> Tensor {
    let [b, n, d, h, w] = <[usize; 5]>::try_from(p.shape()).unwrap();
    let m = transform.shape()[0];
    let s = side(d);
    let mut v = Tensor::zeros(&[b, m, n, d, h * w]);
    for bi in 0..b {
        for mi in 0..m {
            for ni in 0..n {
                let t: Vec<f64> = (0..d).map(|e| transform.at(&[mi, ni, e / s, e % s])).collect();
                for i in 0..h {
                    for j in 0..w {
                        let prod = matmul(s, &t, &pose(p, bi, ni, i, j));
                        for e in 0..d {
                            v.set(&[bi, mi, ni, e, i * w + j], prod[e]);
                        }
                    }
                }
            }
        }
    }
    v
}

/// Random votes `[B, M, S, D, P]`, coefficients `[B, M, S, P]` and centres
/// `[B, M, D, G]` with `G` either 1 or `P`.
pub struct RouteCase {
    pub v: Tensor,
    pub r: Tensor,
    pub g: Tensor,
    pub groups: usize,
}

pub fn route_case(rng: &mut ChaCha8Rng, min_classes: usize) -> RouteCase {
    let b = rng.gen_range(1..3);
    let m = rng.gen_range(min_classes..5);
    let s = rng.gen_range(1..5);
    let d = [1, 4, 9][rng.gen_range(0..3)];
    let p = rng.gen_range(1..4);
    let groups = if rng.gen_bool(0.5) { 1 } else { p };
    RouteCase {
        v: uniform(&[b, m, s, d, p], rng),
        r: positive(&[b, m, s, p], rng),
        g: uniform(&[b, m, d, groups], rng),
        groups,
    }
}

pub fn update_lib(case: &RouteCase, method: RoutingMethod) -> (Tensor, Tensor) {
    let g = Graph::inference();
    let (raw, out) = update_globals(g.constant(case.v.clone()), g.constant(case.r.clone()), case.groups, method).unwrap();
    (raw.value().as_ref().clone(), out.value().as_ref().clone())
}

fn group_of(p: usize, groups: usize) -> usize {
    if groups == 1 {
        0
    } else {
        p
    }
}

/// Attention: `raw = sum (r / sum_sites r) v`, `g = squash(raw)`.
/// Fuzzy: `raw = g = sum r v`.
pub fn update_oracle(case: &RouteCase, method: RoutingMethod) -> (Tensor, Tensor) {
    let [b, m, s, d, p] = <[usize; 5]>::try_from(case.v.shape()).unwrap();
    let gs = case.groups;
    let mut raw = Tensor::zeros(&[b, m, d, gs]);
    let mut out = Tensor::zeros(&[b, m, d, gs]);
    for bi in 0..b {
        for mi in 0..m {
            for grp in 0..gs {
                let sites: Vec<(usize, usize)> = (0..s)
                    .flat_map(|si| (0..p).map(move |pi| (si, pi)))
                    .filter(|&(_, pi)| group_of(pi, gs) == grp)
                    .collect();
                let total: f64 = sites.iter().map(|&(si, pi)| case.r.at(&[bi, mi, si, pi])).sum();
                let mut acc = vec![0.0; d];
                for &(si, pi) in &sites {
                    let mut w = case.r.at(&[bi, mi, si, pi]);
                    if method == RoutingMethod::Attention {
                        w /= total;
                    }
                    for (e, a) in acc.iter_mut().enumerate() {
                        *a += w * case.v.at(&[bi, mi, si, e, pi]);
                    }
                }
                for e in 0..d {
                    raw.set(&[bi, mi, e, grp], acc[e]);
                }
                if method == RoutingMethod::Attention {
                    squash_vec(&mut acc);
                }
                for e in 0..d {
                    out.set(&[bi, mi, e, grp], acc[e]);
                }
            }
        }
    }
    (raw, out)
}

pub fn spread_lib(case: &RouteCase) -> Tensor {
    let g = Graph::inference();
    cluster_spread(g.constant(case.v.clone()), g.constant(case.r.clone()), g.constant(case.g.clone()))
        .unwrap()
        .value()
        .as_ref()
        .clone()
}

/// `sigma2[b, m, grp] = sum_{sites in grp} r * ||v - g||^2`.
pub fn spread_oracle(case: &RouteCase) -> Tensor {
    let [b, m, s, d, p] = <[usize; 5]>::try_from(case.v.shape()).unwrap();
    let gs = case.groups;
    let mut out = Tensor::zeros(&[b, m, gs]);
    for bi in 0..b {
        for mi in 0..m {
            for si in 0..s {
                for pi in 0..p {
                    let grp = group_of(pi, gs);
                    let dist2: f64 = (0..d)
                        .map(|e| (case.v.at(&[bi, mi, si, e, pi]) - case.g.at(&[bi, mi, e, grp])).powi(2))
                        .sum();
                    let cur = out.at(&[bi, mi, grp]);
                    out.set(&[bi, mi, grp], cur + case.r.at(&[bi, mi, si, pi]) * dist2);
                }
            }
        }
    }
    out
}

/// Random `[B, M]` probabilities, targets and a margin.
pub fn loss_case(rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>, f64) {
    let b = rng.gen_range(1..5);
    let m = rng.gen_range(2..11);
    let prob = Tensor::rand_uniform(&[b, m], 0.0, 1.0, rng);
    let targets = (0..b).map(|_| rng.gen_range(0..m)).collect();
    (prob, targets, rng.gen_range(0.05..0.95))
}

pub fn loss_lib(prob: &Tensor, targets: &[usize], margin: f64) -> f64 {
    let g = Graph::inference();
    spread_loss(g.constant(prob.clone()), targets, margin).unwrap().value().item()
}

/// `mean_b sum_{m != t} max(0, margin - (p_t - p_m))^2`.
pub fn loss_oracle(prob: &Tensor, targets: &[usize], margin: f64) -> f64 {
    let [b, m] = <[usize; 2]>::try_from(prob.shape()).unwrap();
    let mut total = 0.0;
    for bi in 0..b {
        let t = targets[bi];
        for mi in 0..m {
            if mi != t {
                let gap = margin - (prob.at(&[bi, t]) - prob.at(&[bi, mi]));
                if gap > 0.0 {
                    total += gap * gap;
                }
            }
        }
    }
    total / b as f64
}

/// Routing-coefficient values of the library.
pub fn attention_lib(v: &Tensor, g: &Tensor) -> Tensor {
    let graph = Graph::inference();
    attention_coefficients(graph.constant(v.clone()), graph.constant(g.clone()))
        .unwrap()
        .value()
        .as_ref()
        .clone()
}

pub fn fuzzy_lib(v: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let graph = Graph::inference();
    let (f, r) = fuzzy_coefficients(graph.constant(v.clone()), graph.constant(g.clone()), &FuzzyConfig::default()).unwrap();
    (f.value().as_ref().clone(), r.value().as_ref().clone())
}

pub fn fuzzy_activation_lib(case: &RouteCase, beta: &Tensor) -> (Tensor, Tensor) {
    let graph = Graph::inference();
    let (s2, prob) = activation_fuzzy(
        graph.constant(case.v.clone()),
        graph.constant(case.r.clone()),
        graph.constant(case.g.clone()),
        graph.constant(beta.clone()),
        &ActivationParams::default(),
    )
    .unwrap();
    (s2.value().as_ref().clone(), prob.value().as_ref().clone())
}

/// Sums of `t` (`[B, M, S, P]`) over axis 1 at every `(b, s, p)`.
pub fn class_sums(t: &Tensor) -> Vec<f64> {
    let [b, m, s, p] = <[usize; 4]>::try_from(t.shape()).unwrap();
    let mut out = Vec::new();
    for bi in 0..b {
        for si in 0..s {
            for pi in 0..p {
                out.push((0..m).map(|mi| t.at(&[bi, mi, si, pi])).sum());
            }
        }
    }
    out
}

/// Sums of `t` (`[B, M, S, P]`) over the sites of each group.
pub fn site_sums(t: &Tensor, groups: usize) -> Vec<f64> {
    let [b, m, s, p] = <[usize; 4]>::try_from(t.shape()).unwrap();
    let mut out = Vec::new();
    for bi in 0..b {
        for mi in 0..m {
            for grp in 0..groups {
                let mut acc = 0.0;
                for si in 0..s {
                    for pi in (0..p).filter(|&pi| group_of(pi, groups) == grp) {
                        acc += t.at(&[bi, mi, si, pi]);
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}
