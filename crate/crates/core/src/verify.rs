//! End-to-end finite-difference check of the full network's gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::caps::{ArchitectureSpec, RoutingMethod};
use crate::error::Result;
use crate::model::{CapsNet, Mode};
use crate::objectives::spread_loss;
use crate::tensor::gradcheck::{check_gradients, loss_fn, GradcheckConfig, GradcheckReport};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct ModelCheck {
    pub method: RoutingMethod,
    pub shortcut: bool,
    pub report: GradcheckReport,
}

impl ModelCheck {
    pub fn label(&self) -> String {
        format!("{}/{}", self.method, if self.shortcut { "shortcut" } else { "sequential" })
    }
}

/// Scales its input by two but reports a derivative of one; used to confirm
/// that the check notices a wrong backward pass.
fn faulty_double(x: Var<'_>) -> Var<'_> {
    let out = x.value().map(|v| 2.0 * v);
    x.graph().record(&[x], out, |ctx| vec![Some(ctx.grad.clone())])
}

/// Gradient check of the spread loss of `spec` on a small random batch.
///
/// When `inject_fault` is set, the activations pass through an op with a
/// deliberately wrong derivative, so the check must fail.
pub fn check_model(spec: &ArchitectureSpec, cfg: &GradcheckConfig, seed: u64, inject_fault: bool) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = CapsNet::new(spec.clone(), &mut rng)?;
    let batch = 3;
    let side = spec.input_size;
    let images = Tensor::rand_uniform(&[batch, spec.input_channels, side, side], 0.0, 1.0, &mut rng);
    let classes = spec.num_classes();
    let targets: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    let dropout_seed: u64 = rng.gen();
    let loss = loss_fn(move |g, vars| {
        let x = g.constant(images.clone());
        // the same dropout mask on every evaluation
        let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let out = net.forward(vars, x, Mode::Train, &mut drop_rng)?;
        let prob = if inject_fault { faulty_double(out.prob).scale(0.5) } else { out.prob };
        spread_loss(prob, &targets, 0.5)
    });
    let params = CapsNet::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?.params().to_vec();
    check_gradients(&params, loss, cfg, &mut rng)
}

/// Runs [`check_model`] on the tiny architecture for both routing methods in
/// shortcut and sequential mode.
pub fn check_all_modes(cfg: &GradcheckConfig, seed: u64, inject_fault: bool) -> Result<Vec<ModelCheck>> {
    let mut out = Vec::new();
    for shortcut in [true, false] {
        for method in [RoutingMethod::Attention, RoutingMethod::Fuzzy] {
            let spec = ArchitectureSpec::tiny().with_routing(method).with_shortcut(shortcut);
            let report = check_model(&spec, cfg, seed, inject_fault)?;
            out.push(ModelCheck { method, shortcut, report });
        }
    }
    Ok(out)
}
