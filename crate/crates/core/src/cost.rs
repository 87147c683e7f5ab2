//! Analytic accounting: parameter counts, voting-tensor volumes, the
//! shortcut-to-sequential voting ratio and per-iteration routing FLOPs.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use num_rational::Ratio;
use serde::Serialize;

use crate::caps::{ArchitectureSpec, RoutingMethod};
use crate::error::{contract_err, Error, Result};

/// Routing procedures with a known per-iteration cost per voting scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopMethod {
    Attention,
    Fuzzy,
    /// EM routing, for comparison only.
    EmReference,
}

impl FlopMethod {
    pub const ALL: [FlopMethod; 3] = [FlopMethod::Attention, FlopMethod::Fuzzy, FlopMethod::EmReference];

    pub fn per_vote(self) -> u64 {
        match self {
            FlopMethod::Attention => 4,
            FlopMethod::Fuzzy => 7,
            FlopMethod::EmReference => 10,
        }
    }
}

impl From<RoutingMethod> for FlopMethod {
    fn from(m: RoutingMethod) -> Self {
        match m {
            RoutingMethod::Attention => FlopMethod::Attention,
            RoutingMethod::Fuzzy => FlopMethod::Fuzzy,
        }
    }
}

impl fmt::Display for FlopMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlopMethod::Attention => "attention",
            FlopMethod::Fuzzy => "fuzzy",
            FlopMethod::EmReference => "em_reference",
        })
    }
}

impl FromStr for FlopMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "attention" => Ok(FlopMethod::Attention),
            "fuzzy" => Ok(FlopMethod::Fuzzy),
            "em" | "em_reference" => Ok(FlopMethod::EmReference),
            other => Err(contract_err!("unknown routing method {other:?} for FLOP accounting")),
        }
    }
}

/// FLOPs of one routing iteration over a voting tensor of `q` scalars.
pub fn routing_flops(q: u64, method: FlopMethod) -> u64 {
    method.per_vote() * q
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VotingMode {
    Shortcut,
    Sequential,
}

/// Dimensions entering the voting volume of capsule layer `depth` (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct DepthDims {
    classes: u64,
    kernel: u64,
    c_in: u64,
    c_out: u64,
    height: u64,
    width: u64,
    dim: u64,
}

fn depth_dims(depth: usize, spec: &ArchitectureSpec) -> Result<DepthDims> {
    let layers = spec.capsule_layers();
    if depth == 0 || depth > layers.len() {
        return Err(contract_err!("depth {depth} is not a capsule layer (valid: 1..={})", layers.len()));
    }
    let trace = spec.shape_trace()?;
    // trace: input, Conv1, PrimaryCaps, capsule layers...
    let input = trace[depth + 1];
    let output = trace[depth + 2];
    let layer = layers[depth - 1];
    Ok(DepthDims {
        classes: spec.num_classes() as u64,
        kernel: layer.kernel as u64,
        c_in: input.channels as u64,
        c_out: layer.channels as u64,
        height: output.height as u64,
        width: output.width as u64,
        dim: spec.capsule_dim as u64,
    })
}

/// Number of scalars in the voting tensor of capsule layer `depth` (1-based).
///
/// Shortcut: `C_out * C_in * H * W * D` with `C_out` the number of global
/// capsules. Sequential: `K * K * C'_out * C'_in * W' * H' * D`.
pub fn voting_volume(depth: usize, spec: &ArchitectureSpec, mode: VotingMode) -> Result<u64> {
    let d = depth_dims(depth, spec)?;
    Ok(match mode {
        VotingMode::Shortcut => d.classes * d.c_in * d.height * d.width * d.dim,
        VotingMode::Sequential => d.kernel * d.kernel * d.c_out * d.c_in * d.width * d.height * d.dim,
    })
}

/// `C_out / (K * K * C'_out)` at capsule layer `depth`.
pub fn voting_ratio(depth: usize, spec: &ArchitectureSpec) -> Result<Ratio<u64>> {
    let d = depth_dims(depth, spec)?;
    Ok(Ratio::new(d.classes, d.kernel * d.kernel * d.c_out))
}

/// One line of the parameter audit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamLine {
    pub layer: String,
    pub count: usize,
}

/// Per-layer trainable scalar counts: convolution kernels and biases, the
/// two affine parameters per normalized channel, pose transforms, pointwise
/// weights (and biases when enabled), global transforms and thresholds.
pub fn param_breakdown(spec: &ArchitectureSpec) -> Vec<ParamLine> {
    let line = |layer: String, count: usize| ParamLine { layer, count };
    let d = spec.capsule_dim;
    let c1 = spec.conv1();
    let prim = spec.primary();
    let prim_out = prim.channels * d;
    let mut out = vec![
        line("Conv1".into(), c1.channels * spec.input_channels * c1.kernel * c1.kernel + c1.channels),
        line("Conv1 batch norm".into(), 2 * c1.channels),
        line("PrimaryCaps".into(), prim_out * c1.channels * prim.kernel * prim.kernel + prim_out),
        line("PrimaryCaps batch norm".into(), 2 * prim_out),
    ];
    let classes = spec.num_classes();
    let mut c_in = prim.channels;
    for layer in spec.capsule_layers() {
        let k2 = layer.kernel * layer.kernel;
        if spec.shortcut {
            out.push(line(format!("{} depthwise", layer.kind), c_in * k2 * d));
            let bias = if spec.pointwise_bias { layer.channels } else { 0 };
            out.push(line(format!("{} pointwise", layer.kind), layer.channels * c_in + bias));
            out.push(line(format!("{} global transforms", layer.kind), classes * c_in * d));
        } else {
            out.push(line(format!("{} patch transforms", layer.kind), k2 * c_in * layer.channels * d));
        }
        c_in = layer.channels;
    }
    if spec.routing == RoutingMethod::Fuzzy {
        out.push(line("activation thresholds".into(), classes));
    }
    out
}

pub fn count_params(spec: &ArchitectureSpec) -> usize {
    param_breakdown(spec).iter().map(|l| l.count).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthCost {
    pub depth: usize,
    pub layer: String,
    pub shortcut_volume: u64,
    pub sequential_volume: u64,
    /// `C_out / (K^2 C'_out)` in lowest terms.
    pub r_voting: String,
    pub r_voting_value: f64,
    /// Whether `r_voting` equals the quotient of the two volumes exactly.
    pub ratio_matches_volumes: bool,
    /// FLOPs of one routing iteration over this depth's voting tensor in the
    /// report's mode.
    pub routing_flops: BTreeMap<FlopMethod, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub architecture: String,
    pub shortcut: bool,
    pub routing: RoutingMethod,
    pub iterations: usize,
    pub param_count: usize,
    pub params: Vec<ParamLine>,
    pub depths: Vec<DepthCost>,
    /// Per-iteration FLOP ratios between routing methods.
    pub flop_ratios: BTreeMap<String, f64>,
}

fn ratio_string(r: Ratio<u64>) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

impl CostReport {
    pub fn new(spec: &ArchitectureSpec) -> Result<Self> {
        spec.validate()?;
        let mode = if spec.shortcut { VotingMode::Shortcut } else { VotingMode::Sequential };
        let mut depths = Vec::new();
        for (i, layer) in spec.capsule_layers().iter().enumerate() {
            let depth = i + 1;
            let shortcut_volume = voting_volume(depth, spec, VotingMode::Shortcut)?;
            let sequential_volume = voting_volume(depth, spec, VotingMode::Sequential)?;
            let ratio = voting_ratio(depth, spec)?;
            let q = match mode {
                VotingMode::Shortcut => shortcut_volume,
                VotingMode::Sequential => sequential_volume,
            };
            depths.push(DepthCost {
                depth,
                layer: layer.kind.to_string(),
                shortcut_volume,
                sequential_volume,
                r_voting: ratio_string(ratio),
                r_voting_value: *ratio.numer() as f64 / *ratio.denom() as f64,
                ratio_matches_volumes: ratio == Ratio::new(shortcut_volume, sequential_volume),
                routing_flops: FlopMethod::ALL.iter().map(|&m| (m, routing_flops(q, m))).collect(),
            });
        }
        let per = |m: FlopMethod| m.per_vote() as f64;
        let flop_ratios = [
            ("fuzzy_over_attention", per(FlopMethod::Fuzzy) / per(FlopMethod::Attention)),
            ("em_over_fuzzy", per(FlopMethod::EmReference) / per(FlopMethod::Fuzzy)),
            ("em_over_attention", per(FlopMethod::EmReference) / per(FlopMethod::Attention)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Ok(Self {
            architecture: spec.layer_string(),
            shortcut: spec.shortcut,
            routing: spec.routing,
            iterations: spec.iterations,
            param_count: count_params(spec),
            params: param_breakdown(spec),
            depths,
            flop_ratios,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }

    /// Plain-text table. With `compare`, `other` is the report of the same
    /// layers in the opposite routing schedule.
    pub fn render_table(&self, other: Option<&CostReport>) -> String {
        let mut s = String::new();
        let mode = |shortcut: bool| if shortcut { "shortcut" } else { "sequential" };
        let _ = writeln!(s, "architecture: {}", self.architecture);
        let _ = writeln!(s, "routing: {} ({} iterations)", self.routing, self.iterations);
        let _ = writeln!(s);
        let _ = writeln!(s, "parameters ({})", mode(self.shortcut));
        for line in &self.params {
            let _ = writeln!(s, "  {:<34} {:>9}", line.layer, line.count);
        }
        let _ = writeln!(s, "  {:<34} {:>9}", "total", self.param_count);
        if let Some(o) = other {
            let _ = writeln!(s, "  {:<34} {:>9}", format!("total ({})", mode(o.shortcut)), o.param_count);
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<6} {:<10} {:>12} {:>12} {:>8} {:>10} {:>14} {:>14} {:>14}",
            "depth", "layer", "Q shortcut", "Q sequential", "r_voting", "", "attention", "fuzzy", "em_reference"
        );
        for d in &self.depths {
            let _ = writeln!(
                s,
                "{:<6} {:<10} {:>12} {:>12} {:>8} {:>10.6} {:>14} {:>14} {:>14}",
                d.depth,
                d.layer,
                d.shortcut_volume,
                d.sequential_volume,
                d.r_voting,
                d.r_voting_value,
                d.routing_flops[&FlopMethod::Attention],
                d.routing_flops[&FlopMethod::Fuzzy],
                d.routing_flops[&FlopMethod::EmReference],
            );
        }
        let _ = writeln!(s, "(routing FLOPs per iteration over the {} voting tensor)", mode(self.shortcut));
        let _ = writeln!(s);
        for (k, v) in &self.flop_ratios {
            let _ = writeln!(s, "{k}: {v:.4}");
        }
        s
    }
}
