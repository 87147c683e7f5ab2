//! Activation probabilities of the class capsules and the spread loss.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, dim_err, Result};
use crate::routing::{cluster_spread, RoutingState};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivationParams {
    /// Slope of the fuzzy activation sigmoid.
    pub lambda: f64,
    /// Floor for the cluster spread `sigma`.
    pub sigma_floor: f64,
}

impl Default for ActivationParams {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            sigma_floor: 1e-9,
        }
    }
}

impl ActivationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(config_err!("activation lambda must be positive, got {}", self.lambda));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(config_err!("sigma floor must be positive, got {}", self.sigma_floor));
        }
        Ok(())
    }
}

/// Linear margin ramp from `start` to `end` over `ramp_epochs`, constant after.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginSchedule {
    pub start: f64,
    pub end: f64,
    pub ramp_epochs: usize,
}

impl Default for MarginSchedule {
    fn default() -> Self {
        Self {
            start: 0.2,
            end: 0.9,
            ramp_epochs: 10,
        }
    }
}

impl MarginSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.start && self.start <= self.end && self.end < 1.0) {
            return Err(config_err!(
                "margin schedule needs 0 < start <= end < 1, got start {} end {}",
                self.start,
                self.end
            ));
        }
        Ok(())
    }

    pub fn margin_at(&self, epoch: usize) -> f64 {
        if self.ramp_epochs == 0 || epoch >= self.ramp_epochs {
            return self.end;
        }
        self.start + (self.end - self.start) * epoch as f64 / self.ramp_epochs as f64
    }
}

pub fn margin_at(epoch: usize, schedule: &MarginSchedule) -> f64 {
    schedule.margin_at(epoch)
}

/// `prob[b, m] = ||g[b, m]|| / (1 + ||g[b, m]||)` for `g` of shape `[B, M, D]`.
pub fn activation_attention(g: Var<'_>) -> Result<Var<'_>> {
    if g.shape().len() != 3 {
        return Err(dim_err!("class capsules must be [B, M, D], got {:?}", g.shape()));
    }
    let n = g.l2_norm(2)?;
    n.div(n.add_scalar(1.0))
}

/// Cluster spread and activation of each receiving capsule:
/// `sigma2 = sum r * ||v - g||^2` and
/// `prob = sigmoid(lambda * (beta - ln max(sqrt(sigma2), floor)))`.
///
/// `v` is `[B, M, S, D, P]`, `r` is `[B, M, S, P]`, `g` is `[B, M, D, 1]` and
/// `beta` is `[M]`. Returns `([B, M], [B, M])`.
pub fn activation_fuzzy<'g>(
    v: Var<'g>,
    r: Var<'g>,
    g: Var<'g>,
    beta: Var<'g>,
    params: &ActivationParams,
) -> Result<(Var<'g>, Var<'g>)> {
    params.validate()?;
    let sigma2 = cluster_spread(v, r, g)?;
    let shape = sigma2.shape();
    if shape[2] != 1 {
        return Err(dim_err!("fuzzy activation needs one capsule per class, got {} per class", shape[2]));
    }
    if beta.shape() != [shape[1]] {
        return Err(dim_err!("thresholds {:?} do not match {} classes", beta.shape(), shape[1]));
    }
    let sigma2 = sigma2.reshape(&[shape[0], shape[1]])?;
    let floor2 = params.sigma_floor * params.sigma_floor;
    let ln_sigma = sigma2.clamp_min(floor2).ln().scale(0.5);
    let prob = ln_sigma.neg().add(beta)?.scale(params.lambda).sigmoid();
    Ok((sigma2, prob))
}

/// [`activation_fuzzy`] applied to a finished routing state.
pub fn activation_fuzzy_state<'g>(state: &RoutingState<'g>, beta: Var<'g>, params: &ActivationParams) -> Result<(Var<'g>, Var<'g>)> {
    activation_fuzzy(state.votes, state.coefficients, state.globals, beta, params)
}

fn check_margin(margin: f64) -> Result<()> {
    if !(margin > 0.0 && margin < 1.0) {
        return Err(contract_err!("margin must lie in (0, 1), got {margin}"));
    }
    Ok(())
}

/// `sum_{m != t} max(0, margin - (prob[t] - prob[m]))^2` for one example.
pub fn spread_loss_value(prob: &[f64], target: usize, margin: f64) -> Result<f64> {
    check_margin(margin)?;
    if target >= prob.len() {
        return Err(contract_err!("target class {target} out of range for {} classes", prob.len()));
    }
    let pt = prob[target];
    Ok(prob
        .iter()
        .enumerate()
        .filter(|&(m, _)| m != target)
        .map(|(_, &pm)| (margin - (pt - pm)).max(0.0).powi(2))
        .sum())
}

/// Spread loss averaged over the batch; `prob` is `[B, M]`.
pub fn spread_loss<'g>(prob: Var<'g>, targets: &[usize], margin: f64) -> Result<Var<'g>> {
    check_margin(margin)?;
    let p = prob.value();
    let [b, m] = *p.shape() else {
        return Err(dim_err!("spread loss expects [B, M] probabilities, got {:?}", p.shape()));
    };
    if targets.len() != b {
        return Err(contract_err!("{} targets for a batch of {b}", targets.len()));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= m) {
        return Err(contract_err!("target class {t} out of range for {m} classes"));
    }
    let mut total = 0.0;
    for (row, &t) in p.data().chunks(m).zip(targets) {
        total += spread_loss_value(row, t, margin)?;
    }
    let targets = targets.to_vec();
    let out = Tensor::scalar(total / b as f64);
    Ok(prob.graph().record(&[prob], out, move |ctx| {
        let (p, up) = (ctx.inputs[0].data(), ctx.grad.item() / b as f64);
        let mut gp = vec![0.0; p.len()];
        for (bi, &t) in targets.iter().enumerate() {
            let row = &p[bi * m..(bi + 1) * m];
            for mi in (0..m).filter(|&mi| mi != t) {
                let h = (margin - (row[t] - row[mi])).max(0.0);
                gp[bi * m + mi] += 2.0 * h * up;
                gp[bi * m + t] -= 2.0 * h * up;
            }
        }
        vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), gp))]
    }))
}
