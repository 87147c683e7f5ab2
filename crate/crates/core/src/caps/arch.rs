//! Architecture descriptions in the `Name: (channels, kernel, stride)` layer
//! notation, plus the routing flags that complete a model description.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

pub const BASELINE_LAYERS: &str =
    "Conv1: (64, 5, 2) - PrimaryCaps: (8, 1, 1) - Capsconv1: (16, 3, 2) - Capsconv2: (16, 3, 1) - Classcaps: (10, 3, 1)";
pub const EXPANDED_LAYERS: &str =
    "Conv1: (64, 5, 2) - PrimaryCaps: (32, 1, 1) - Capsconv1: (32, 3, 2) - Capsconv2: (32, 3, 1) - Classcaps: (10, 3, 1)";
/// 4x4 inputs, two classes; small enough for exhaustive gradient checks.
pub const TINY_LAYERS: &str =
    "Conv1: (4, 1, 1) - PrimaryCaps: (2, 1, 1) - Capsconv1: (2, 2, 1) - Capsconv2: (2, 2, 1) - Classcaps: (2, 2, 1)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMethod {
    Attention,
    Fuzzy,
}

impl fmt::Display for RoutingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingMethod::Attention => "attention",
            RoutingMethod::Fuzzy => "fuzzy",
        })
    }
}

impl FromStr for RoutingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "attention" => Ok(RoutingMethod::Attention),
            "fuzzy" => Ok(RoutingMethod::Fuzzy),
            other => Err(config_err!("unknown routing method {other:?} (expected attention or fuzzy)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv1,
    PrimaryCaps,
    CapsConv(u32),
    ClassCaps,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::Conv1 => f.write_str("Conv1"),
            LayerKind::PrimaryCaps => f.write_str("PrimaryCaps"),
            LayerKind::CapsConv(k) => write!(f, "Capsconv{k}"),
            LayerKind::ClassCaps => f.write_str("Classcaps"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDesc {
    pub kind: LayerKind,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl fmt::Display for LayerDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: ({}, {}, {})", self.kind, self.channels, self.kernel, self.stride)
    }
}

/// Parses a layer string such as
/// `Conv1: (64, 5, 2) – PrimaryCaps (8, 1, 1) – Capsconv1 (16, 3, 2) – ...`.
///
/// Segments are separated by `–` or `-`; the colon after a name is optional
/// and names are case-insensitive.
pub fn parse_layers(s: &str) -> Result<Vec<LayerDesc>> {
    let mut layers = Vec::new();
    for raw in s.split(['–', '-']) {
        let seg = raw.trim();
        if seg.is_empty() {
            return Err(config_err!("empty layer segment in {s:?}"));
        }
        layers.push(parse_segment(seg)?);
    }
    Ok(layers)
}

fn parse_segment(seg: &str) -> Result<LayerDesc> {
    let bad = || config_err!("malformed layer segment {seg:?}; expected `Name: (channels, kernel, stride)`");
    let open = seg.find('(').ok_or_else(bad)?;
    if !seg.ends_with(')') {
        return Err(bad());
    }
    let name = seg[..open].trim().trim_end_matches(':').trim();
    let kind = parse_kind(name)?;
    let nums: Vec<usize> = seg[open + 1..seg.len() - 1]
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    let [channels, kernel, stride] = nums[..] else {
        return Err(bad());
    };
    if channels == 0 || kernel == 0 || stride == 0 {
        return Err(config_err!("layer {seg:?}: channels, kernel and stride must all be positive"));
    }
    Ok(LayerDesc {
        kind,
        channels,
        kernel,
        stride,
    })
}

fn parse_kind(name: &str) -> Result<LayerKind> {
    let lower = name.to_ascii_lowercase();
    match lower.as_str() {
        "conv1" => Ok(LayerKind::Conv1),
        "primarycaps" => Ok(LayerKind::PrimaryCaps),
        "classcaps" => Ok(LayerKind::ClassCaps),
        _ => lower
            .strip_prefix("capsconv")
            .and_then(|k| k.parse::<u32>().ok())
            .map(LayerKind::CapsConv)
            .ok_or_else(|| config_err!("unknown layer name {name:?}")),
    }
}

/// Spatial extent and channel count after one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub kind: Option<LayerKind>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for LayerShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            Some(k) => write!(f, "{k} {}x{}x{}", self.channels, self.height, self.width),
            None => write!(f, "input {}x{}x{}", self.channels, self.height, self.width),
        }
    }
}

/// A complete, validated model description.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureSpec {
    pub layers: Vec<LayerDesc>,
    pub input_size: usize,
    pub input_channels: usize,
    /// Scalars per capsule pose; must be a perfect square.
    pub capsule_dim: usize,
    pub shortcut: bool,
    pub routing: RoutingMethod,
    pub iterations: usize,
    pub dropout: f64,
    pub pointwise_bias: bool,
}

impl ArchitectureSpec {
    pub fn from_layers(layers: &str) -> Result<Self> {
        let spec = Self::from_layers_unchecked(layers)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn baseline() -> Self {
        Self::from_layers(BASELINE_LAYERS).expect("baseline preset is valid")
    }

    pub fn expanded() -> Self {
        Self::from_layers(EXPANDED_LAYERS).expect("expanded preset is valid")
    }

    pub fn tiny() -> Self {
        let mut spec = Self::from_layers_unchecked(TINY_LAYERS).expect("tiny preset parses");
        spec.input_size = 4;
        spec.dropout = 0.0;
        spec.validate().expect("tiny preset is valid");
        spec
    }

    /// `baseline`, `expanded` or `tiny`.
    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Self::baseline()),
            "expanded" => Ok(Self::expanded()),
            "tiny" => Ok(Self::tiny()),
            other => Err(config_err!("unknown architecture preset {other:?} (expected baseline, expanded or tiny)")),
        }
    }

    pub fn with_routing(mut self, routing: RoutingMethod) -> Self {
        self.routing = routing;
        self
    }

    pub fn with_shortcut(mut self, shortcut: bool) -> Self {
        self.shortcut = shortcut;
        self
    }

    pub fn pose_side(&self) -> usize {
        (self.capsule_dim as f64).sqrt().round() as usize
    }

    pub fn conv1(&self) -> &LayerDesc {
        &self.layers[0]
    }

    pub fn primary(&self) -> &LayerDesc {
        &self.layers[1]
    }

    /// Capsule convolution layers in depth order, ending with Classcaps.
    pub fn capsule_layers(&self) -> &[LayerDesc] {
        &self.layers[2..]
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.channels).unwrap_or(0)
    }

    /// One glocapblock per capsule convolution layer.
    pub fn num_glocapblocks(&self) -> usize {
        self.capsule_layers().len()
    }

    pub fn layer_string(&self) -> String {
        self.layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(" - ")
    }

    pub fn validate(&self) -> Result<()> {
        let kinds: Vec<LayerKind> = self.layers.iter().map(|l| l.kind).collect();
        let count = |pred: fn(&LayerKind) -> bool| kinds.iter().filter(|k| pred(k)).count();
        if count(|k| *k == LayerKind::Conv1) != 1 || kinds.first() != Some(&LayerKind::Conv1) {
            return Err(config_err!("architecture needs exactly one Conv1, as the first layer"));
        }
        if count(|k| *k == LayerKind::PrimaryCaps) != 1 || kinds.get(1) != Some(&LayerKind::PrimaryCaps) {
            return Err(config_err!("architecture needs exactly one PrimaryCaps, directly after Conv1"));
        }
        if count(|k| *k == LayerKind::ClassCaps) != 1 || kinds.last() != Some(&LayerKind::ClassCaps) {
            return Err(config_err!("architecture needs exactly one Classcaps, as the last layer"));
        }
        if count(|k| matches!(k, LayerKind::CapsConv(_))) < 1 {
            return Err(config_err!("architecture needs at least one Capsconv layer"));
        }
        let side = self.pose_side();
        if side * side != self.capsule_dim || side == 0 {
            return Err(config_err!("capsule dimension {} is not a perfect square", self.capsule_dim));
        }
        if side > 8 {
            return Err(config_err!("pose matrices larger than 8x8 are not supported"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout probability {} outside [0, 1)", self.dropout));
        }
        if self.routing == RoutingMethod::Fuzzy && self.num_classes() < 2 {
            return Err(config_err!("fuzzy routing needs at least two global capsules"));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(config_err!("input extent must be positive"));
        }
        self.shape_trace().map(|_| ())
    }

    /// Per-layer output shapes, starting with the input image. Fails when a
    /// kernel does not fit or the class layer does not reduce to 1x1.
    pub fn shape_trace(&self) -> Result<Vec<LayerShape>> {
        let mut trace = vec![LayerShape {
            kind: None,
            channels: self.input_channels,
            height: self.input_size,
            width: self.input_size,
        }];
        let listing = |trace: &[LayerShape]| trace.iter().map(ToString::to_string).collect::<Vec<_>>().join(" -> ");
        for layer in &self.layers {
            let prev = *trace.last().expect("trace starts non-empty");
            if layer.kernel > prev.height || layer.kernel > prev.width {
                return Err(config_err!(
                    "{layer}: kernel does not fit the {}x{} input; shapes so far: {}",
                    prev.height,
                    prev.width,
                    listing(&trace)
                ));
            }
            trace.push(LayerShape {
                kind: Some(layer.kind),
                channels: layer.channels,
                height: (prev.height - layer.kernel) / layer.stride + 1,
                width: (prev.width - layer.kernel) / layer.stride + 1,
            });
        }
        let last = trace.last().expect("non-empty");
        if last.height != 1 || last.width != 1 {
            return Err(config_err!(
                "Classcaps must reduce the feature map to 1x1 but yields {}x{}; shapes: {}",
                last.height,
                last.width,
                listing(&trace)
            ));
        }
        Ok(trace)
    }

    /// Resizes the Classcaps kernel so the map collapses to 1x1 for the
    /// current input size.
    pub fn fit_class_kernel(&mut self) -> Result<()> {
        let last = self.layers.len() - 1;
        let mut side = self.input_size;
        for layer in &self.layers[..last] {
            if layer.kernel > side {
                return Err(config_err!("{layer}: kernel does not fit a {side}x{side} input"));
            }
            side = (side - layer.kernel) / layer.stride + 1;
        }
        self.layers[last].kernel = side;
        self.layers[last].stride = 1;
        self.validate()
    }
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} | input={} channels={} capsule_dim={} shortcut={} routing={} iterations={} dropout={} pointwise_bias={}",
            self.layer_string(),
            self.input_size,
            self.input_channels,
            self.capsule_dim,
            self.shortcut,
            self.routing,
            self.iterations,
            self.dropout,
            self.pointwise_bias
        )
    }
}

impl FromStr for ArchitectureSpec {
    type Err = Error;

    /// Inverse of `Display`.
    fn from_str(s: &str) -> Result<Self> {
        let (layers, flags) = s.split_once('|').ok_or_else(|| config_err!("architecture string lacks flags: {s:?}"))?;
        let mut spec = Self::from_layers_unchecked(layers)?;
        for kv in flags.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| config_err!("malformed flag {kv:?}"))?;
            let num = || v.parse::<usize>().map_err(|_| config_err!("flag {k} has bad value {v:?}"));
            let flag = || v.parse::<bool>().map_err(|_| config_err!("flag {k} has bad value {v:?}"));
            match k {
                "input" => spec.input_size = num()?,
                "channels" => spec.input_channels = num()?,
                "capsule_dim" => spec.capsule_dim = num()?,
                "shortcut" => spec.shortcut = flag()?,
                "routing" => spec.routing = v.parse()?,
                "iterations" => spec.iterations = num()?,
                "dropout" => spec.dropout = v.parse().map_err(|_| config_err!("flag dropout has bad value {v:?}"))?,
                "pointwise_bias" => spec.pointwise_bias = flag()?,
                other => return Err(config_err!("unknown architecture flag {other:?}")),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl ArchitectureSpec {
    pub(crate) fn from_layers_unchecked(layers: &str) -> Result<Self> {
        Ok(Self {
            layers: parse_layers(layers)?,
            input_size: 28,
            input_channels: 1,
            capsule_dim: 16,
            shortcut: true,
            routing: RoutingMethod::Fuzzy,
            iterations: 2,
            dropout: 0.2,
            pointwise_bias: false,
        })
    }
}
