//! Capsule layers: backbone, primary capsules, local capsule blocks
//! (depthwise pose convolution followed by pointwise channel mixing), vote
//! generation for the global capsules, squash and capsule dropout.

pub mod arch;
pub mod kernels;

pub use arch::{ArchitectureSpec, LayerDesc, LayerKind, LayerShape, RoutingMethod};
pub use kernels::{depthwise_pose_conv, global_votes, patch_votes, pointwise_mix};

use rand::Rng;

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{BatchNormStats, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;

/// A `[B, N, D, H, W]` capsule map whose poses are `s x s` matrices.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleTensor<'g> {
    var: Var<'g>,
    dims: [usize; 5],
}

impl<'g> CapsuleTensor<'g> {
    pub fn new(var: Var<'g>) -> Result<Self> {
        let shape = var.shape();
        let dims: [usize; 5] = shape
            .as_slice()
            .try_into()
            .map_err(|_| dim_err!("capsule tensor must be [B, N, D, H, W], got {shape:?}"))?;
        if dims.iter().any(|&e| e == 0) {
            return Err(dim_err!("capsule tensor has an empty extent: {shape:?}"));
        }
        let s = (dims[2] as f64).sqrt().round() as usize;
        if s * s != dims[2] {
            return Err(dim_err!("capsule dimension {} is not a perfect square", dims[2]));
        }
        Ok(Self { var, dims })
    }

    pub fn var(&self) -> Var<'g> {
        self.var
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn capsule_dim(&self) -> usize {
        self.dims[2]
    }

    pub fn height(&self) -> usize {
        self.dims[3]
    }

    pub fn width(&self) -> usize {
        self.dims[4]
    }

    pub fn pose_side(&self) -> usize {
        (self.dims[2] as f64).sqrt().round() as usize
    }

    pub fn dims(&self) -> [usize; 5] {
        self.dims
    }

    /// Squash applied to every capsule pose independently.
    pub fn squash(self) -> Result<Self> {
        Self::new(self.var.squash(2)?)
    }
}

/// Trainable pieces of a convolution followed by batch normalization.
#[derive(Clone, Copy, Debug)]
pub struct ConvBn<'g> {
    pub kernel: Var<'g>,
    pub bias: Var<'g>,
    pub gamma: Var<'g>,
    pub beta: Var<'g>,
}

/// Batch normalization either from the current batch (training) or from
/// stored running statistics (evaluation).
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    Batch,
    Running(&'a BatchNormStats),
}

fn apply_bn<'g>(x: Var<'g>, layer: &ConvBn<'g>, mode: BnMode<'_>) -> Result<(Var<'g>, Option<BatchNormStats>)> {
    match mode {
        BnMode::Batch => {
            let (y, stats) = x.batch_norm(layer.gamma, layer.beta, BN_EPS)?;
            Ok((y, Some(stats)))
        }
        BnMode::Running(stats) => Ok((x.batch_norm_fixed(layer.gamma, layer.beta, stats, BN_EPS)?, None)),
    }
}

/// Convolution, ReLU, then batch normalization. Returns the batch statistics
/// when normalizing with them.
pub fn backbone_forward<'g>(
    images: Var<'g>,
    layer: &ConvBn<'g>,
    stride: usize,
    bn: BnMode<'_>,
) -> Result<(Var<'g>, Option<BatchNormStats>)> {
    let x = images.conv2d(layer.kernel, Some(layer.bias), stride, 0)?.relu();
    apply_bn(x, layer, bn)
}

/// 1x1 convolution and batch normalization, reshaped into `n_channels`
/// capsule channels of dimension `capsule_dim`; squashed when `squash` is set.
pub fn make_primary_capsules<'g>(
    features: Var<'g>,
    layer: &ConvBn<'g>,
    n_channels: usize,
    capsule_dim: usize,
    squash: bool,
    bn: BnMode<'_>,
) -> Result<(CapsuleTensor<'g>, Option<BatchNormStats>)> {
    let out_channels = layer.kernel.shape()[0];
    if capsule_dim == 0 || out_channels % capsule_dim != 0 || out_channels / capsule_dim != n_channels {
        return Err(config_err!(
            "primary capsule convolution yields {out_channels} channels, which is not {n_channels} capsules of dimension {capsule_dim}"
        ));
    }
    // no ReLU: pose entries stay signed
    let x = features.conv2d(layer.kernel, Some(layer.bias), 1, 0)?;
    let (x, stats) = apply_bn(x, layer, bn)?;
    let s = x.shape();
    let caps = CapsuleTensor::new(x.reshape(&[s[0], n_channels, capsule_dim, s[2], s[3]])?)?;
    Ok((if squash { caps.squash()? } else { caps }, stats))
}

/// Parameters of one local capsule block.
#[derive(Clone, Copy, Debug)]
pub struct LocapParams<'g> {
    /// `[N_in, K, K, s, s]` per-channel pose transforms.
    pub transform: Var<'g>,
    /// `[N_out, N_in]` channel mixing weights.
    pub weights: Var<'g>,
    pub bias: Option<Var<'g>>,
    pub stride: usize,
}

/// Depthwise pose convolution then pointwise mixing. Returns the pre-voted
/// capsules `p` (input channel count) and the next capsule layer.
pub fn locapblock_forward<'g>(
    c: CapsuleTensor<'g>,
    block: &LocapParams<'g>,
    squash: bool,
) -> Result<(CapsuleTensor<'g>, CapsuleTensor<'g>)> {
    let p = CapsuleTensor::new(depthwise_pose_conv(c.var(), block.transform, block.stride)?)?;
    let next = CapsuleTensor::new(pointwise_mix(p.var(), block.weights, block.bias)?)?;
    Ok((p, if squash { next.squash()? } else { next }))
}

/// Votes `[B, M, N, D, H*W]` of the pre-voted capsules for every global capsule.
pub fn glocap_votes<'g>(p: CapsuleTensor<'g>, transform: Var<'g>) -> Result<Var<'g>> {
    global_votes(p.var(), transform)
}

/// Zeroes whole capsules (every pose entry at one channel and position) with
/// probability `p_drop` and rescales survivors by `1 / (1 - p_drop)`.
/// The identity outside training.
pub fn capsule_dropout<'g, R: Rng + ?Sized>(
    c: CapsuleTensor<'g>,
    p_drop: f64,
    training: bool,
    rng: &mut R,
) -> Result<CapsuleTensor<'g>> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(config_err!("dropout probability {p_drop} outside [0, 1)"));
    }
    if !training || p_drop == 0.0 {
        return Ok(c);
    }
    let [b, n, d, h, w] = c.dims();
    let keep = 1.0 / (1.0 - p_drop);
    let mut mask = vec![0.0; b * n * d * h * w];
    for bn in 0..b * n {
        for q in 0..h * w {
            if rng.gen::<f64>() >= p_drop {
                for di in 0..d {
                    mask[(bn * d + di) * h * w + q] = keep;
                }
            }
        }
    }
    let mask = c.var().graph().constant(Tensor::new(&[b, n, d, h, w], mask)?);
    CapsuleTensor::new(c.var().mul(mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn conv_bn<'g>(g: &'g Graph, cin: usize, cout: usize, k: usize, seed: u64) -> ConvBn<'g> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        ConvBn {
            kernel: g.param(Tensor::rand_uniform(&[cout, cin, k, k], -bound, bound, &mut rng(seed))),
            bias: g.param(Tensor::zeros(&[cout])),
            gamma: g.param(Tensor::ones(&[cout])),
            beta: g.param(Tensor::zeros(&[cout])),
        }
    }

    #[test]
    fn backbone_shapes_and_normalization() {
        let g = Graph::new();
        let layer = conv_bn(&g, 1, 64, 5, 1);
        let images = g.constant(Tensor::rand_uniform(&[4, 1, 28, 28], 0.0, 1.0, &mut rng(2)));
        let (y, stats) = backbone_forward(images, &layer, 2, BnMode::Batch).unwrap();
        assert_eq!(y.shape(), vec![4, 64, 12, 12]);
        assert!(stats.is_some());
        let y = y.value();
        let pre = images.conv2d(layer.kernel, Some(layer.bias), 2, 0).unwrap().relu().value();
        let channel = |t: &Tensor, c: usize| -> Vec<f64> {
            (0..4).flat_map(|b| (0..144).map(move |q| (b * 64 + c) * 144 + q)).map(|at| t.data()[at]).collect()
        };
        let moments = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64)
        };
        for c in 0..64 {
            let (_, raw_var) = moments(&channel(&pre, c));
            let (mean, var) = moments(&channel(&y, c));
            assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
            let want = raw_var / (raw_var + BN_EPS);
            assert!((var - want).abs() < 1e-9, "channel {c} var {var} vs {want}");
        }
        let images = g.constant(Tensor::zeros(&[1, 1, 32, 32]));
        assert_eq!(backbone_forward(images, &layer, 2, BnMode::Batch).unwrap().0.shape(), vec![1, 64, 14, 14]);
        let tiny = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(matches!(backbone_forward(tiny, &layer, 2, BnMode::Batch), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn primary_capsule_reshape() {
        let g = Graph::new();
        let features = g.constant(Tensor::rand_uniform(&[2, 64, 12, 12], -1.0, 1.0, &mut rng(3)));
        let layer = conv_bn(&g, 64, 128, 1, 4);
        let (caps, _) = make_primary_capsules(features, &layer, 8, 16, false, BnMode::Batch).unwrap();
        assert_eq!(caps.dims(), [2, 8, 16, 12, 12]);
        let (squashed, _) = make_primary_capsules(features, &layer, 8, 16, true, BnMode::Batch).unwrap();
        let v = squashed.var().value();
        for b in 0..2 {
            for n in 0..8 {
                let norm = (0..16).map(|d| v.at(&[b, n, d, 3, 7]).powi(2)).sum::<f64>().sqrt();
                assert!(norm < 1.0);
            }
        }
        let odd = conv_bn(&g, 64, 129, 1, 5);
        assert!(matches!(
            make_primary_capsules(features, &odd, 8, 16, false, BnMode::Batch),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn locapblock_identity_case() {
        let g = Graph::new();
        let x = Tensor::rand_uniform(&[1, 1, 16, 3, 3], -1.0, 1.0, &mut rng(6));
        let c = CapsuleTensor::new(g.constant(x.clone())).unwrap();
        let block = LocapParams {
            transform: g.constant(Tensor::identity_stack(1, 4).reshape(&[1, 1, 1, 4, 4]).unwrap()),
            weights: g.constant(Tensor::ones(&[1, 1])),
            bias: None,
            stride: 1,
        };
        let (p, next) = locapblock_forward(c, &block, false).unwrap();
        assert_eq!(*p.var().value(), x);
        assert_eq!(*next.var().value(), x);
    }

    #[test]
    fn baseline_capsconv1_shapes() {
        let g = Graph::new();
        let c = CapsuleTensor::new(g.constant(Tensor::zeros(&[2, 8, 16, 12, 12]))).unwrap();
        let block = LocapParams {
            transform: g.constant(Tensor::zeros(&[8, 3, 3, 4, 4])),
            weights: g.constant(Tensor::zeros(&[16, 8])),
            bias: None,
            stride: 2,
        };
        let (p, next) = locapblock_forward(c, &block, true).unwrap();
        assert_eq!(p.dims(), [2, 8, 16, 5, 5]);
        assert_eq!(next.dims(), [2, 16, 16, 5, 5]);
        let votes = glocap_votes(p, g.constant(Tensor::zeros(&[10, 8, 4, 4]))).unwrap();
        assert_eq!(votes.value().len(), 2 * 32000);
    }

    #[test]
    fn votes_scale_with_transform() {
        let g = Graph::new();
        let x = Tensor::rand_uniform(&[1, 1, 16, 1, 1], -1.0, 1.0, &mut rng(7));
        let p = CapsuleTensor::new(g.constant(x.clone())).unwrap();
        let t = Tensor::identity_stack(1, 4).map(|v| 2.0 * v).reshape(&[1, 1, 4, 4]).unwrap();
        let v = glocap_votes(p, g.constant(t)).unwrap().value();
        for (a, b) in v.data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b);
        }
        let bad = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(glocap_votes(p, bad).is_err());
    }

    #[test]
    fn dropout_modes() {
        let g = Graph::new();
        let x = Tensor::rand_uniform(&[2, 3, 4, 2, 2], -1.0, 1.0, &mut rng(8));
        let c = CapsuleTensor::new(g.constant(x.clone())).unwrap();
        let same = capsule_dropout(c, 0.0, true, &mut rng(0)).unwrap();
        assert_eq!(same.var().id(), c.var().id());
        let eval = capsule_dropout(c, 0.5, false, &mut rng(0)).unwrap();
        assert_eq!(*eval.var().value(), x);
        assert!(matches!(capsule_dropout(c, 1.0, true, &mut rng(0)), Err(crate::Error::Config(_))));

        let dropped = capsule_dropout(c, 0.5, true, &mut rng(1)).unwrap().var().value();
        for bn in 0..6 {
            for q in 0..4 {
                let zeros = (0..4).filter(|d| dropped.data()[(bn * 4 + d) * 4 + q] == 0.0).count();
                assert!(zeros == 0 || zeros == 4, "capsule partially dropped");
                if zeros == 0 {
                    for d in 0..4 {
                        let at = (bn * 4 + d) * 4 + q;
                        assert!((dropped.data()[at] - 2.0 * x.data()[at]).abs() < 1e-15);
                    }
                }
            }
        }
    }
}
