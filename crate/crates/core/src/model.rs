//! Full network: backbone, primary capsules, capsule layers, routing and
//! class activations, with its parameters stored by name.

use rand::{Rng, RngCore};

use crate::caps::{
    backbone_forward, capsule_dropout, make_primary_capsules, ArchitectureSpec, BnMode, ConvBn, LocapParams, RoutingMethod,
};
use crate::error::{contract_err, dim_err, Result};
use crate::objectives::{activation_attention, activation_fuzzy_state, ActivationParams};
use crate::routing::{sequential_route, shortcut_route, FuzzyConfig, PatchParams, RouteConfig, RouteOutput};
use crate::tensor::{BatchNormStats, Graph, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
const POSE_NOISE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Uniform in `+-1/sqrt(fan_in)`.
    FanIn(usize),
    /// Identity pose blocks plus uniform noise.
    PoseIdentity,
    Ones,
    Zeros,
}

/// Name, shape and initializer of every trainable tensor, in declaration order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameter layout implied by an architecture.
pub fn param_layout(spec: &ArchitectureSpec) -> Vec<ParamSpec> {
    let s = spec.pose_side();
    let d = spec.capsule_dim;
    let conv1 = spec.conv1();
    let fan1 = spec.input_channels * conv1.kernel * conv1.kernel;
    let prim = spec.primary();
    let prim_out = prim.channels * d;
    let prim_fan = conv1.channels * prim.kernel * prim.kernel;
    let mut out = vec![
        ParamSpec::new("conv1.kernel", &[conv1.channels, spec.input_channels, conv1.kernel, conv1.kernel], Init::FanIn(fan1)),
        ParamSpec::new("conv1.bias", &[conv1.channels], Init::FanIn(fan1)),
        ParamSpec::new("conv1.bn.gamma", &[conv1.channels], Init::Ones),
        ParamSpec::new("conv1.bn.beta", &[conv1.channels], Init::Zeros),
        ParamSpec::new("primary.kernel", &[prim_out, conv1.channels, prim.kernel, prim.kernel], Init::FanIn(prim_fan)),
        ParamSpec::new("primary.bias", &[prim_out], Init::FanIn(prim_fan)),
        ParamSpec::new("primary.bn.gamma", &[prim_out], Init::Ones),
        ParamSpec::new("primary.bn.beta", &[prim_out], Init::Zeros),
    ];
    let classes = spec.num_classes();
    let mut cin = prim.channels;
    for layer in spec.capsule_layers() {
        let (k, cout) = (layer.kernel, layer.channels);
        let tag = layer.kind.to_string().to_ascii_lowercase();
        if spec.shortcut {
            out.push(ParamSpec::new(format!("{tag}.depthwise"), &[cin, k, k, s, s], Init::PoseIdentity));
            out.push(ParamSpec::new(format!("{tag}.pointwise"), &[cout, cin], Init::FanIn(cin)));
            if spec.pointwise_bias {
                out.push(ParamSpec::new(format!("{tag}.pointwise_bias"), &[cout], Init::Zeros));
            }
            out.push(ParamSpec::new(format!("{tag}.global"), &[classes, cin, s, s], Init::PoseIdentity));
        } else {
            out.push(ParamSpec::new(format!("{tag}.votes"), &[k, k, cin, cout, s, s], Init::PoseIdentity));
        }
        cin = cout;
    }
    if spec.routing == RoutingMethod::Fuzzy {
        out.push(ParamSpec::new("beta", &[classes], Init::Zeros));
    }
    out
}

fn init_tensor<R: Rng + ?Sized>(p: &ParamSpec, rng: &mut R) -> Tensor {
    match p.init {
        Init::FanIn(fan) => {
            let bound = 1.0 / (fan.max(1) as f64).sqrt();
            Tensor::rand_uniform(&p.shape, -bound, bound, rng)
        }
        Init::PoseIdentity => {
            let side = *p.shape.last().expect("pose transforms have rank >= 2");
            let count = p.len() / (side * side);
            let mut t = Tensor::identity_stack(count, side);
            for x in t.data_mut() {
                *x += rng.gen_range(-POSE_NOISE..POSE_NOISE);
            }
            t.reshape(&p.shape).expect("same element count")
        }
        Init::Ones => Tensor::ones(&p.shape),
        Init::Zeros => Tensor::zeros(&p.shape),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batch normalization, dropout active.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

/// Everything a forward pass produces.
pub struct ForwardOutput<'g> {
    /// `[B, M]` class activations.
    pub prob: Var<'g>,
    pub route: RouteOutput<'g>,
    /// `[B, M]` cluster spread (fuzzy mode only).
    pub sigma2: Option<Var<'g>>,
    /// Batch statistics of the two normalization layers (training mode only).
    pub bn_batch: Vec<BatchNormStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapsNet {
    spec: ArchitectureSpec,
    activation: ActivationParams,
    fuzzy: FuzzyConfig,
    layout: Vec<ParamSpec>,
    params: Vec<Tensor>,
    bn_running: Vec<BatchNormStats>,
}

impl CapsNet {
    /// Builds and initializes a network for `spec`.
    pub fn new<R: Rng + ?Sized>(spec: ArchitectureSpec, rng: &mut R) -> Result<Self> {
        Self::with_options(spec, ActivationParams::default(), FuzzyConfig::default(), rng)
    }

    pub fn with_options<R: Rng + ?Sized>(
        spec: ArchitectureSpec,
        activation: ActivationParams,
        fuzzy: FuzzyConfig,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        activation.validate()?;
        fuzzy.validate()?;
        let layout = param_layout(&spec);
        let params = layout.iter().map(|p| init_tensor(p, rng)).collect();
        let bn_running = vec![
            BatchNormStats::identity(spec.conv1().channels),
            BatchNormStats::identity(spec.primary().channels * spec.capsule_dim),
        ];
        Ok(Self {
            spec,
            activation,
            fuzzy,
            layout,
            params,
            bn_running,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn activation(&self) -> &ActivationParams {
        &self.activation
    }

    pub fn fuzzy(&self) -> &FuzzyConfig {
        &self.fuzzy
    }

    pub fn layout(&self) -> &[ParamSpec] {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn bn_running(&self) -> &[BatchNormStats] {
        &self.bn_running
    }

    /// Replaces parameters and running statistics, checking shapes.
    pub fn load_state(&mut self, params: Vec<Tensor>, bn_running: Vec<BatchNormStats>) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(contract_err!("expected {} parameter tensors, got {}", self.layout.len(), params.len()));
        }
        for (p, spec) in params.iter().zip(&self.layout) {
            if p.shape() != spec.shape.as_slice() {
                return Err(dim_err!("parameter {} has shape {:?}, expected {:?}", spec.name, p.shape(), spec.shape));
            }
        }
        if bn_running.len() != self.bn_running.len()
            || bn_running.iter().zip(&self.bn_running).any(|(a, b)| a.mean.len() != b.mean.len() || a.var.len() != b.var.len())
        {
            return Err(contract_err!("running statistics do not match the architecture"));
        }
        self.params = params;
        self.bn_running = bn_running;
        Ok(())
    }

    /// Folds one batch's normalization statistics into the running averages.
    pub fn update_running_stats(&mut self, batch: &[BatchNormStats]) {
        for (run, b) in self.bn_running.iter_mut().zip(batch) {
            run.update(b, BN_MOMENTUM);
        }
    }

    /// Registers every parameter on `graph` as a trainable leaf.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Vec<Var<'g>> {
        self.params.iter().map(|p| graph.param(p.clone())).collect()
    }

    /// Forward pass from `[B, C, H, W]` images in `[0, 1]` using the bound
    /// parameters `vars` (as returned by [`CapsNet::bind`]).
    pub fn forward<'g>(&self, vars: &[Var<'g>], images: Var<'g>, mode: Mode, rng: &mut dyn RngCore) -> Result<ForwardOutput<'g>> {
        if vars.len() != self.layout.len() {
            return Err(contract_err!("forward needs {} parameters, got {}", self.layout.len(), vars.len()));
        }
        let shape = images.shape();
        let want = [self.spec.input_channels, self.spec.input_size, self.spec.input_size];
        if shape.len() != 4 || shape[1..] != want {
            return Err(dim_err!("images must be [B, {}, {}, {}], got {shape:?}", want[0], want[1], want[2]));
        }
        let (training, bn1, bn2) = match mode {
            Mode::Train => (true, BnMode::Batch, BnMode::Batch),
            Mode::Eval => (false, BnMode::Running(&self.bn_running[0]), BnMode::Running(&self.bn_running[1])),
        };
        let attention = self.spec.routing == RoutingMethod::Attention;
        let conv1 = ConvBn { kernel: vars[0], bias: vars[1], gamma: vars[2], beta: vars[3] };
        let primary = ConvBn { kernel: vars[4], bias: vars[5], gamma: vars[6], beta: vars[7] };
        let (features, s1) = backbone_forward(images, &conv1, self.spec.conv1().stride, bn1)?;
        let (caps, s2) = make_primary_capsules(features, &primary, self.spec.primary().channels, self.spec.capsule_dim, attention, bn2)?;
        let caps = capsule_dropout(caps, self.spec.dropout, training, rng)?;

        let cfg = RouteConfig { method: self.spec.routing, iterations: self.spec.iterations, fuzzy: self.fuzzy };
        let mut at = 8;
        let route = if self.spec.shortcut {
            let mut blocks = Vec::new();
            let mut globals = Vec::new();
            for layer in self.spec.capsule_layers() {
                let (transform, weights) = (vars[at], vars[at + 1]);
                at += 2;
                let bias = self.spec.pointwise_bias.then(|| {
                    at += 1;
                    vars[at - 1]
                });
                blocks.push(LocapParams { transform, weights, bias, stride: layer.stride });
                globals.push(vars[at]);
                at += 1;
            }
            shortcut_route(&blocks, &globals, caps, &cfg)?
        } else {
            let layers: Vec<PatchParams<'g>> = self
                .spec
                .capsule_layers()
                .iter()
                .map(|layer| {
                    at += 1;
                    PatchParams { transform: vars[at - 1], stride: layer.stride }
                })
                .collect();
            sequential_route(&layers, caps, &cfg)?
        };
        let (prob, sigma2) = match self.spec.routing {
            RoutingMethod::Attention => (activation_attention(route.raw_globals)?, None),
            RoutingMethod::Fuzzy => {
                let (sigma2, prob) = activation_fuzzy_state(route.last_state(), vars[at], &self.activation)?;
                (prob, Some(sigma2))
            }
        };
        Ok(ForwardOutput {
            prob,
            route,
            sigma2,
            bn_batch: s1.into_iter().chain(s2).collect(),
        })
    }

    /// Class activations `[B, M]` in evaluation mode, without recording
    /// gradients.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let graph = Graph::inference();
        let vars = self.bind(&graph);
        let x = graph.constant(images.clone());
        // evaluation mode never draws from the generator
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.forward(&vars, x, Mode::Eval, &mut unused)?;
        let prob = out.prob.value();
        Ok(prob.as_ref().clone())
    }
}
