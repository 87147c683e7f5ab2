//! Routing by agreement between votes and receiving capsules.
//!
//! Two coefficient rules are provided. Attention scores each vote by its dot
//! product with the receiving capsule and normalizes over receiving capsules
//! with a softmax. Fuzzy routing assigns fuzzy c-means memberships from vote
//! distances, then normalizes `membership^m_f` over the voting sites of each
//! receiving capsule.
//!
//! Two schedules use them. Shortcut routing sends the pre-voted capsules of
//! every local block straight to the class capsules; sequential routing
//! routes patch-wise between consecutive layers.

pub mod kernels;

pub use kernels::{agreement_scores, cluster_spread, normalize_sites, vote_distances, weighted_sum};

use serde::{Deserialize, Serialize};

use crate::caps::{glocap_votes, locapblock_forward, patch_votes, CapsuleTensor, LocapParams, RoutingMethod};
use crate::error::{config_err, contract_err, Result};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuzzyConfig {
    /// Fuzzy degree `m_f`; must exceed 1.
    pub degree: f64,
    /// Distances are clamped below at this value.
    pub distance_floor: f64,
}

impl Default for FuzzyConfig {
    fn default() -> Self {
        Self {
            degree: 2.0,
            distance_floor: 1e-9,
        }
    }
}

impl FuzzyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.degree > 1.0 && self.degree.is_finite()) {
            return Err(config_err!("fuzzy degree must be a finite value above 1, got {}", self.degree));
        }
        if !(self.distance_floor > 0.0) {
            return Err(config_err!("distance floor must be positive, got {}", self.distance_floor));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouteConfig {
    pub method: RoutingMethod,
    pub iterations: usize,
    pub fuzzy: FuzzyConfig,
}

/// The routing quantities of one block after its last iteration.
#[derive(Clone, Copy, Debug)]
pub struct RoutingState<'g> {
    /// `[B, M, S, D, P]`.
    pub votes: Var<'g>,
    /// `[B, M, S, P]`: softmax-over-`M` attention weights, or site-normalized
    /// fuzzy coefficients.
    pub coefficients: Var<'g>,
    /// Fuzzy memberships `[B, M, S, P]` (normalized over `M`); fuzzy mode only.
    pub memberships: Option<Var<'g>>,
    /// `[B, M, D, G]` receiving capsules after the last update (squashed in
    /// attention mode).
    pub globals: Var<'g>,
    /// The same capsules before squash.
    pub raw_globals: Var<'g>,
    pub method: RoutingMethod,
    pub iterations: usize,
}

impl RoutingState<'_> {
    pub fn groups(&self) -> usize {
        self.globals.shape()[3]
    }
}

/// Attention weights `r[B, M, S, P] = softmax_M(<v, g>)`.
pub fn attention_coefficients<'g>(v: Var<'g>, g: Var<'g>) -> Result<Var<'g>> {
    agreement_scores(v, g)?.softmax(1)
}

/// Fuzzy memberships `f` (summing to one over `M` at every vote) and routing
/// coefficients `r = f^m_f` normalized over each receiving capsule's sites.
pub fn fuzzy_coefficients<'g>(v: Var<'g>, g: Var<'g>, cfg: &FuzzyConfig) -> Result<(Var<'g>, Var<'g>)> {
    cfg.validate()?;
    let m = v.shape().get(1).copied().unwrap_or(0);
    if m < 2 {
        return Err(config_err!("fuzzy routing needs at least two receiving capsules, got {m}"));
    }
    let groups = g.shape().get(3).copied().unwrap_or(1);
    let d = vote_distances(v, g, cfg.distance_floor)?;
    let f = d.powf(-2.0 / (cfg.degree - 1.0)).normalize_axis(1)?;
    let r = normalize_sites(f.powf(cfg.degree), groups)?;
    Ok((f, r))
}

/// Recomputes the receiving capsules from votes and coefficients. Returns the
/// raw weighted sum and the capsules used downstream (squashed in attention
/// mode, where coefficients are first rescaled into a convex combination).
pub fn update_globals<'g>(v: Var<'g>, r: Var<'g>, groups: usize, method: RoutingMethod) -> Result<(Var<'g>, Var<'g>)> {
    match method {
        RoutingMethod::Attention => {
            let raw = weighted_sum(v, normalize_sites(r, groups)?, groups)?;
            Ok((raw, raw.squash(2)?))
        }
        RoutingMethod::Fuzzy => {
            let g = weighted_sum(v, r, groups)?;
            Ok((g, g))
        }
    }
}

fn coefficients<'g>(v: Var<'g>, g: Var<'g>, cfg: &RouteConfig) -> Result<(Option<Var<'g>>, Var<'g>)> {
    match cfg.method {
        RoutingMethod::Attention => Ok((None, attention_coefficients(v, g)?)),
        RoutingMethod::Fuzzy => {
            let (f, r) = fuzzy_coefficients(v, g, &cfg.fuzzy)?;
            Ok((Some(f), r))
        }
    }
}

/// Runs `cfg.iterations` rounds of {coefficients, update} starting from
/// `globals`. With zero iterations the capsules are returned unchanged and
/// the coefficients describe the starting point.
pub fn route<'g>(votes: Var<'g>, globals: Var<'g>, raw_globals: Var<'g>, cfg: &RouteConfig) -> Result<RoutingState<'g>> {
    let groups = globals.shape().get(3).copied().unwrap_or(1);
    let (mut g, mut raw) = (globals, raw_globals);
    let mut last = None;
    for _ in 0..cfg.iterations {
        let (f, r) = coefficients(votes, g, cfg)?;
        (raw, g) = update_globals(votes, r, groups, cfg.method)?;
        last = Some((f, r));
    }
    let (memberships, coefficients) = match last {
        Some(fr) => fr,
        None => coefficients(votes, g, cfg)?,
    };
    Ok(RoutingState {
        votes,
        coefficients,
        memberships,
        globals: g,
        raw_globals: raw,
        method: cfg.method,
        iterations: cfg.iterations,
    })
}

/// Result of either routing schedule.
#[derive(Clone, Debug)]
pub struct RouteOutput<'g> {
    /// `[B, M, D]` class capsules (squashed in attention mode).
    pub globals: Var<'g>,
    /// `[B, M, D]` class capsules before squash.
    pub raw_globals: Var<'g>,
    /// One state per routed block, in depth order.
    pub states: Vec<RoutingState<'g>>,
}

impl<'g> RouteOutput<'g> {
    pub fn last_state(&self) -> &RoutingState<'g> {
        self.states.last().expect("routing always runs at least one block")
    }
}

fn squash_if(x: Var<'_>, on: bool, axis: usize) -> Result<Var<'_>> {
    if on {
        x.squash(axis)
    } else {
        Ok(x)
    }
}

/// Shortcut routing.
///
/// The local blocks are evaluated front to back; the last one collapses to
/// `1 x 1` and its output is the first prediction of the class capsules.
/// Then, for every block in depth order, the block's pre-voted capsules vote
/// for the class capsules (with that block's own transforms) and
/// `cfg.iterations` routing rounds refine them.
pub fn shortcut_route<'g>(
    blocks: &[LocapParams<'g>],
    global_transforms: &[Var<'g>],
    primary: CapsuleTensor<'g>,
    cfg: &RouteConfig,
) -> Result<RouteOutput<'g>> {
    if blocks.is_empty() || blocks.len() != global_transforms.len() {
        return Err(contract_err!(
            "shortcut routing needs one global transform per local block ({} blocks, {} transforms)",
            blocks.len(),
            global_transforms.len()
        ));
    }
    let squash = cfg.method == RoutingMethod::Attention;
    let mut c = primary;
    let mut pre_voted = Vec::with_capacity(blocks.len());
    for (i, block) in blocks.iter().enumerate() {
        let last = i + 1 == blocks.len();
        let (p, next) = locapblock_forward(c, block, squash && !last)?;
        pre_voted.push(p);
        c = next;
    }
    let [b, m, d, h, w] = c.dims();
    if h != 1 || w != 1 {
        return Err(contract_err!("the last local block must reduce to 1x1, got {h}x{w}"));
    }
    let mut raw = c.var().reshape(&[b, m, d, 1])?;
    let mut g = squash_if(raw, squash, 2)?;
    let mut states = Vec::with_capacity(blocks.len());
    for (p, &t) in pre_voted.into_iter().zip(global_transforms) {
        let votes = glocap_votes(p, t)?;
        let state = route(votes, g, raw, cfg)?;
        (g, raw) = (state.globals, state.raw_globals);
        states.push(state);
    }
    Ok(RouteOutput {
        globals: g.reshape(&[b, m, d])?,
        raw_globals: raw.reshape(&[b, m, d])?,
        states,
    })
}

/// Trainable part of one patch-wise routed layer.
#[derive(Clone, Copy, Debug)]
pub struct PatchParams<'g> {
    /// `[K, K, C_in, C_out, s, s]`.
    pub transform: Var<'g>,
    pub stride: usize,
}

/// Sequential (layer-to-layer) routing.
///
/// Each layer's output capsule at a position starts as the plain mean of the
/// votes from its `K x K x C_in` window and is refined by `cfg.iterations`
/// rounds restricted to that window. The last layer must reduce to `1 x 1`.
pub fn sequential_route<'g>(layers: &[PatchParams<'g>], primary: CapsuleTensor<'g>, cfg: &RouteConfig) -> Result<RouteOutput<'g>> {
    if layers.is_empty() {
        return Err(contract_err!("sequential routing needs at least one layer"));
    }
    let squash = cfg.method == RoutingMethod::Attention;
    let graph = primary.var().graph();
    let mut c = primary;
    let mut states = Vec::with_capacity(layers.len());
    for layer in layers {
        let votes = patch_votes(c.var(), layer.transform, layer.stride)?;
        let [b, m, s, d, p] = *votes.value().shape() else { unreachable!("patch votes are rank 5") };
        let uniform = graph.constant(Tensor::full(&[b, m, s, p], 1.0 / s as f64));
        let raw = weighted_sum(votes, uniform, p)?;
        let g = squash_if(raw, squash, 2)?;
        let state = route(votes, g, raw, cfg)?;
        let k = layer.transform.shape()[0];
        let ho = (c.height() - k) / layer.stride + 1;
        let wo = (c.width() - k) / layer.stride + 1;
        c = CapsuleTensor::new(state.globals.reshape(&[b, m, d, ho, wo])?)?;
        states.push(state);
    }
    let [b, m, d, h, w] = c.dims();
    if h != 1 || w != 1 {
        return Err(contract_err!("the last routed layer must reduce to 1x1, got {h}x{w}"));
    }
    let last = states.last().expect("non-empty");
    Ok(RouteOutput {
        globals: last.globals.reshape(&[b, m, d])?,
        raw_globals: last.raw_globals.reshape(&[b, m, d])?,
        states,
    })
}
