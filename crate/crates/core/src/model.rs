//! The siamese adaptive-fusion network: a shared trunk of three CondConv
//! blocks with 1x1 transitions, dimension matching onto a common 64x7x7
//! scale, channel-attention fusion, a parameter-free correlation layer, 1x1
//! projection heads for the contrastive loss, and a softmax classifier.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BnMode, BnStats, Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

pub const INPUT_SIZE: usize = 28;
pub const TRUNK_CHANNELS: [usize; 3] = [16, 32, 64];
pub const FUSED_CHANNELS: usize = 64;
pub const CLASSES: usize = 2;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Experts per CondConv block.
    pub experts: usize,
    /// Squeeze reduction of the fusion attention (64 -> 64/reduction).
    pub reduction: usize,
    pub channels: [usize; 3],
    pub input_size: usize,
    pub classes: usize,
    pub seed: u64,
    /// When false, fusion is a plain sum of the dimension-matched maps.
    pub use_af: bool,
    /// When false, the correlation layer is replaced by pooled concatenation.
    pub use_correlation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            experts: 4,
            reduction: 8,
            channels: TRUNK_CHANNELS,
            input_size: INPUT_SIZE,
            classes: CLASSES,
            seed: 0,
            use_af: true,
            use_correlation: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts < 1 {
            return Err(Error::invalid("model config", "needs at least one expert"));
        }
        if self.channels != TRUNK_CHANNELS {
            return Err(Error::invalid(
                "model config",
                format!("trunk channels must be {:?}", TRUNK_CHANNELS),
            ));
        }
        if self.input_size != INPUT_SIZE || self.classes != CLASSES {
            return Err(Error::invalid("model config", "fixed 28x28 inputs with 2 classes"));
        }
        if self.reduction == 0 || FUSED_CHANNELS % self.reduction != 0 {
            return Err(Error::invalid(
                "model config",
                format!("reduction {} must divide {}", self.reduction, FUSED_CHANNELS),
            ));
        }
        Ok(())
    }

    pub fn classifier_input(&self) -> usize {
        if self.use_correlation {
            FUSED_CHANNELS
        } else {
            2 * FUSED_CHANNELS
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBnParams<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: BnStats<T>,
}

#[derive(Clone, Debug)]
pub struct BlockParams<T> {
    pub convbn: ConvBnParams<T>,
    /// Expert kernels [k, C, C, 3, 3].
    pub experts: Tensor<T>,
    /// Routing matrix [k, C].
    pub routing: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AfParams<T> {
    /// Squeeze matrix [64/reduction, 64].
    pub squeeze: Tensor<T>,
    /// Per-scale attention heads [64, 64/reduction].
    pub heads: [Tensor<T>; 3],
}

/// Every weight of the network. The trunk is shared between branches; only
/// the two projection kernels differ.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub blocks: [BlockParams<T>; 3],
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
    pub dim_match: [ConvParams<T>; 3],
    pub af: AfParams<T>,
    pub proj1: Tensor<T>,
    pub proj2: Tensor<T>,
    pub fc_weight: Tensor<T>,
    pub fc_bias: Tensor<T>,
}

fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<T> =
        (0..numel).map(|_| T::from_f64(rng.gen_range(-limit..limit))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl<T: Scalar> ModelParams<T> {
    /// He-uniform kernels, zero biases, identity batch-norm, seeded by the
    /// model config.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let k = cfg.experts;

        let block = |rng: &mut ChaCha8Rng, c_in: usize, c: usize| BlockParams {
            convbn: ConvBnParams {
                kernel: he_uniform(rng, &[c, c_in, 3, 3], c_in * 9),
                bias: Tensor::zeros(&[c]),
                gamma: Tensor::full(&[c], T::one()),
                beta: Tensor::zeros(&[c]),
                running: BnStats::identity(c),
            },
            experts: he_uniform(rng, &[k, c, c, 3, 3], c * 9),
            routing: he_uniform(rng, &[k, c], c),
        };

        let blocks = [
            block(&mut rng, 1, TRUNK_CHANNELS[0]),
            block(&mut rng, TRUNK_CHANNELS[1], TRUNK_CHANNELS[1]),
            block(&mut rng, TRUNK_CHANNELS[2], TRUNK_CHANNELS[2]),
        ];
        let conv1 = ConvParams {
            kernel: he_uniform(&mut rng, &[32, 16, 1, 1], 16),
            bias: Tensor::zeros(&[32]),
        };
        let conv2 = ConvParams {
            kernel: he_uniform(&mut rng, &[64, 32, 1, 1], 32),
            bias: Tensor::zeros(&[64]),
        };
        let dim_match = [
            ConvParams { kernel: he_uniform(&mut rng, &[64, 16, 1, 1], 16), bias: Tensor::zeros(&[64]) },
            ConvParams { kernel: he_uniform(&mut rng, &[64, 32, 1, 1], 32), bias: Tensor::zeros(&[64]) },
            ConvParams { kernel: he_uniform(&mut rng, &[64, 64, 1, 1], 64), bias: Tensor::zeros(&[64]) },
        ];
        let squeeze_dim = FUSED_CHANNELS / cfg.reduction;
        let af = AfParams {
            squeeze: he_uniform(&mut rng, &[squeeze_dim, FUSED_CHANNELS], FUSED_CHANNELS),
            heads: [
                he_uniform(&mut rng, &[FUSED_CHANNELS, squeeze_dim], squeeze_dim),
                he_uniform(&mut rng, &[FUSED_CHANNELS, squeeze_dim], squeeze_dim),
                he_uniform(&mut rng, &[FUSED_CHANNELS, squeeze_dim], squeeze_dim),
            ],
        };
        let proj1 = he_uniform(&mut rng, &[64, 64, 1, 1], 64);
        let proj2 = he_uniform(&mut rng, &[64, 64, 1, 1], 64);
        let d_in = cfg.classifier_input();
        // The correlation features are unnormalized spatial sums with a large
        // positive bias, so a He-initialized classifier saturates the softmax
        // at single precision and freezes training. Starting the head at zero
        // keeps the initial prediction uniform; the weights separate after
        // the first update.
        let fc_weight = Tensor::zeros(&[CLASSES, d_in]);
        let fc_bias = Tensor::zeros(&[CLASSES]);

        Ok(ModelParams {
            blocks,
            conv1,
            conv2,
            dim_match,
            af,
            proj1,
            proj2,
            fc_weight,
            fc_bias,
        })
    }

    /// All tensors by name (including batch-norm running statistics), in a
    /// stable order used for checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{}", i + 1);
            out.push((format!("{p}.convbn.kernel"), &b.convbn.kernel));
            out.push((format!("{p}.convbn.bias"), &b.convbn.bias));
            out.push((format!("{p}.convbn.gamma"), &b.convbn.gamma));
            out.push((format!("{p}.convbn.beta"), &b.convbn.beta));
            out.push((format!("{p}.convbn.running_mean"), &b.convbn.running.mean));
            out.push((format!("{p}.convbn.running_var"), &b.convbn.running.var));
            out.push((format!("{p}.experts"), &b.experts));
            out.push((format!("{p}.routing"), &b.routing));
        }
        out.push(("conv1.kernel".into(), &self.conv1.kernel));
        out.push(("conv1.bias".into(), &self.conv1.bias));
        out.push(("conv2.kernel".into(), &self.conv2.kernel));
        out.push(("conv2.bias".into(), &self.conv2.bias));
        for (i, d) in self.dim_match.iter().enumerate() {
            out.push((format!("dim{}.kernel", i + 1), &d.kernel));
            out.push((format!("dim{}.bias", i + 1), &d.bias));
        }
        out.push(("af.squeeze".into(), &self.af.squeeze));
        out.push(("af.head_a".into(), &self.af.heads[0]));
        out.push(("af.head_b".into(), &self.af.heads[1]));
        out.push(("af.head_c".into(), &self.af.heads[2]));
        out.push(("proj1".into(), &self.proj1));
        out.push(("proj2".into(), &self.proj2));
        out.push(("fc.weight".into(), &self.fc_weight));
        out.push(("fc.bias".into(), &self.fc_bias));
        out
    }

    /// Mutable view in the same order as [`Self::named_tensors`].
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{}", i + 1);
            out.push((format!("{p}.convbn.kernel"), &mut b.convbn.kernel));
            out.push((format!("{p}.convbn.bias"), &mut b.convbn.bias));
            out.push((format!("{p}.convbn.gamma"), &mut b.convbn.gamma));
            out.push((format!("{p}.convbn.beta"), &mut b.convbn.beta));
            out.push((format!("{p}.convbn.running_mean"), &mut b.convbn.running.mean));
            out.push((format!("{p}.convbn.running_var"), &mut b.convbn.running.var));
            out.push((format!("{p}.experts"), &mut b.experts));
            out.push((format!("{p}.routing"), &mut b.routing));
        }
        out.push(("conv1.kernel".into(), &mut self.conv1.kernel));
        out.push(("conv1.bias".into(), &mut self.conv1.bias));
        out.push(("conv2.kernel".into(), &mut self.conv2.kernel));
        out.push(("conv2.bias".into(), &mut self.conv2.bias));
        for (i, d) in self.dim_match.iter_mut().enumerate() {
            out.push((format!("dim{}.kernel", i + 1), &mut d.kernel));
            out.push((format!("dim{}.bias", i + 1), &mut d.bias));
        }
        out.push(("af.squeeze".into(), &mut self.af.squeeze));
        let [ha, hb, hc] = &mut self.af.heads;
        out.push(("af.head_a".into(), ha));
        out.push(("af.head_b".into(), hb));
        out.push(("af.head_c".into(), hc));
        out.push(("proj1".into(), &mut self.proj1));
        out.push(("proj2".into(), &mut self.proj2));
        out.push(("fc.weight".into(), &mut self.fc_weight));
        out.push(("fc.bias".into(), &mut self.fc_bias));
        out
    }

    /// Trainable tensors only (running statistics are state, not weights).
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(name, _)| !name.contains("running"))
            .collect()
    }
}

/// Graph leaves for one registration of the parameters.
pub struct ParamNodes {
    pub blocks: [BlockNodes; 3],
    pub conv1: (NodeId, NodeId),
    pub conv2: (NodeId, NodeId),
    pub dim_match: [(NodeId, NodeId); 3],
    pub af_squeeze: NodeId,
    pub af_heads: [NodeId; 3],
    pub proj1: NodeId,
    pub proj2: NodeId,
    pub fc_weight: NodeId,
    pub fc_bias: NodeId,
}

pub struct BlockNodes {
    pub kernel: NodeId,
    pub bias: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
    pub experts: NodeId,
    pub routing: NodeId,
}

/// Insert every trainable tensor as a graph leaf.
pub fn register_params<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<T>) -> ParamNodes {
    let block = |g: &mut Graph<T>, b: &BlockParams<T>| BlockNodes {
        kernel: g.leaf(b.convbn.kernel.clone()),
        bias: g.leaf(b.convbn.bias.clone()),
        gamma: g.leaf(b.convbn.gamma.clone()),
        beta: g.leaf(b.convbn.beta.clone()),
        experts: g.leaf(b.experts.clone()),
        routing: g.leaf(b.routing.clone()),
    };
    ParamNodes {
        blocks: [
            block(g, &params.blocks[0]),
            block(g, &params.blocks[1]),
            block(g, &params.blocks[2]),
        ],
        conv1: (g.leaf(params.conv1.kernel.clone()), g.leaf(params.conv1.bias.clone())),
        conv2: (g.leaf(params.conv2.kernel.clone()), g.leaf(params.conv2.bias.clone())),
        dim_match: [
            (g.leaf(params.dim_match[0].kernel.clone()), g.leaf(params.dim_match[0].bias.clone())),
            (g.leaf(params.dim_match[1].kernel.clone()), g.leaf(params.dim_match[1].bias.clone())),
            (g.leaf(params.dim_match[2].kernel.clone()), g.leaf(params.dim_match[2].bias.clone())),
        ],
        af_squeeze: g.leaf(params.af.squeeze.clone()),
        af_heads: [
            g.leaf(params.af.heads[0].clone()),
            g.leaf(params.af.heads[1].clone()),
            g.leaf(params.af.heads[2].clone()),
        ],
        proj1: g.leaf(params.proj1.clone()),
        proj2: g.leaf(params.proj2.clone()),
        fc_weight: g.leaf(params.fc_weight.clone()),
        fc_bias: g.leaf(params.fc_bias.clone()),
    }
}

/// One CondConv block: ConvBN -> routed expert mixture -> residual.
///
/// The residual is taken from the ConvBN output, whose channel count always
/// matches the block output (the raw block input may not, e.g. the 1-channel
/// patch entering block 1).
pub fn condconv_block<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &BlockNodes,
    running: &mut BnStats<T>,
    x: NodeId,
    mode: BnMode,
) -> Result<NodeId> {
    let conv = g.conv2d(x, nodes.kernel, Some(nodes.bias), 1, 1, 1)?;
    let bn = g.batch_norm(conv, nodes.gamma, nodes.beta, running, mode, BN_MOMENTUM, BN_EPS)?;
    let fc1 = g.relu(bn);

    let pooled = g.global_avg_pool(fc1)?;
    let logits = g.linear(pooled, nodes.routing, None)?;
    let alpha = g.sigmoid(logits);

    let mixed = g.condconv2d(fc1, nodes.experts, alpha, 1)?;
    let activated = g.relu(mixed);
    g.add(activated, fc1)
}

/// Shared trunk: three CondConv blocks joined by strided 1x1 transitions.
/// Returns the low/mid/high level feature maps of Table I.
pub fn trunk_forward<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ParamNodes,
    params: &mut ModelParams<T>,
    x: NodeId,
    mode: BnMode,
) -> Result<(NodeId, NodeId, NodeId)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != INPUT_SIZE || shape[3] != INPUT_SIZE {
        return Err(Error::shape(
            "trunk_forward",
            format!("expected N,1,{},{} input, got {:?}", INPUT_SIZE, INPUT_SIZE, shape),
        ));
    }
    let f1 = condconv_block(g, &nodes.blocks[0], &mut params.blocks[0].convbn.running, x, mode)?;
    let t1 = g.conv2d(f1, nodes.conv1.0, Some(nodes.conv1.1), 2, 0, 1)?;
    let f2 = condconv_block(g, &nodes.blocks[1], &mut params.blocks[1].convbn.running, t1, mode)?;
    let t2 = g.conv2d(f2, nodes.conv2.0, Some(nodes.conv2.1), 2, 0, 1)?;
    let f3 = condconv_block(g, &nodes.blocks[2], &mut params.blocks[2].convbn.running, t2, mode)?;
    Ok((f1, f2, f3))
}

/// 1x1 projections with strides 4/2/1 putting all levels on 64 x 7 x 7.
pub fn dimension_match<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ParamNodes,
    f1: NodeId,
    f2: NodeId,
    f3: NodeId,
) -> Result<(NodeId, NodeId, NodeId)> {
    let d1 = g.conv2d(f1, nodes.dim_match[0].0, Some(nodes.dim_match[0].1), 4, 0, 1)?;
    let d2 = g.conv2d(f2, nodes.dim_match[1].0, Some(nodes.dim_match[1].1), 2, 0, 1)?;
    let d3 = g.conv2d(f3, nodes.dim_match[2].0, Some(nodes.dim_match[2].1), 1, 0, 1)?;
    Ok((d1, d2, d3))
}

pub struct FusionOutput {
    pub fused: NodeId,
    /// Per-scale channel attention (a, b, c); None under the plain-sum ablation.
    pub attention: Option<[NodeId; 3]>,
}

/// Adaptive fusion: squeeze the summed maps into a compact descriptor, emit
/// three per-channel attention heads, softmax them across scales, and take
/// the attention-weighted combination.
pub fn af_fuse<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ParamNodes,
    d1: NodeId,
    d2: NodeId,
    d3: NodeId,
    use_af: bool,
) -> Result<FusionOutput> {
    let s12 = g.add(d1, d2)?;
    let summed = g.add(s12, d3)?;
    if !use_af {
        return Ok(FusionOutput { fused: summed, attention: None });
    }
    let pooled = g.global_avg_pool(summed)?;
    let squeezed = g.linear(pooled, nodes.af_squeeze, None)?;
    let compact = g.relu(squeezed);
    let la = g.linear(compact, nodes.af_heads[0], None)?;
    let lb = g.linear(compact, nodes.af_heads[1], None)?;
    let lc = g.linear(compact, nodes.af_heads[2], None)?;
    let stacked = g.stack3(la, lb, lc)?;
    let soft = g.softmax_axis(stacked, 1)?;
    let a = g.plane(soft, 0)?;
    let b = g.plane(soft, 1)?;
    let c = g.plane(soft, 2)?;
    let wa = g.scale_channels(d1, a)?;
    let wb = g.scale_channels(d2, b)?;
    let wc = g.scale_channels(d3, c)?;
    let ab = g.add(wa, wb)?;
    let fused = g.add(ab, wc)?;
    Ok(FusionOutput { fused, attention: Some([a, b, c]) })
}

/// Parameter-free correlation: per-channel spatial inner product of the two
/// branch maps. Gradients flow into both inputs.
pub fn correlation_layer<T: Scalar>(
    g: &mut Graph<T>,
    fv1: NodeId,
    fv2: NodeId,
) -> Result<NodeId> {
    let prod = g.mul_elem(fv1, fv2)?;
    g.sum_spatial(prod)
}

/// Contrastive projection heads: distinct 1x1 kernels, pooled to a vector.
pub fn project_features<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ParamNodes,
    fv1: NodeId,
    fv2: NodeId,
) -> Result<(NodeId, NodeId)> {
    let p1 = g.conv2d(fv1, nodes.proj1, None, 1, 0, 1)?;
    let p2 = g.conv2d(fv2, nodes.proj2, None, 1, 0, 1)?;
    Ok((g.global_avg_pool(p1)?, g.global_avg_pool(p2)?))
}

/// Fully-connected layer with softmax; column 1 is the change probability.
pub fn classify<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ParamNodes,
    features: NodeId,
) -> Result<NodeId> {
    let logits = g.linear(features, nodes.fc_weight, Some(nodes.fc_bias))?;
    g.softmax_axis(logits, 1)
}

pub struct PairOutput {
    pub probs: NodeId,
    pub feat0: NodeId,
    pub feat1: NodeId,
    pub fv1: NodeId,
    pub fv2: NodeId,
    pub attention1: Option<[NodeId; 3]>,
}

/// Full forward pass over a patch pair through the shared trunk.
pub fn forward_pair<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ParamNodes,
    params: &mut ModelParams<T>,
    cfg: &ModelConfig,
    x1: NodeId,
    x2: NodeId,
    mode: BnMode,
) -> Result<PairOutput> {
    let fv1 = branch_forward(g, nodes, params, cfg, x1, mode)?;
    let fv2 = branch_forward(g, nodes, params, cfg, x2, mode)?;
    let (feat0, feat1) = project_features(g, nodes, fv1.fused, fv2.fused)?;
    let features = if cfg.use_correlation {
        correlation_layer(g, fv1.fused, fv2.fused)?
    } else {
        let g1 = g.global_avg_pool(fv1.fused)?;
        let g2 = g.global_avg_pool(fv2.fused)?;
        g.concat2(g1, g2)?
    };
    let probs = classify(g, nodes, features)?;
    Ok(PairOutput {
        probs,
        feat0,
        feat1,
        fv1: fv1.fused,
        fv2: fv2.fused,
        attention1: fv1.attention,
    })
}

/// One branch: trunk, dimension match, fusion.
pub fn branch_forward<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ParamNodes,
    params: &mut ModelParams<T>,
    cfg: &ModelConfig,
    x: NodeId,
    mode: BnMode,
) -> Result<FusionOutput> {
    let (f1, f2, f3) = trunk_forward(g, nodes, params, x, mode)?;
    let (d1, d2, d3) = dimension_match(g, nodes, f1, f2, f3)?;
    af_fuse(g, nodes, d1, d2, d3, cfg.use_af)
}

impl ParamNodes {
    /// Leaf ids in the same order as [`ModelParams::trainable_mut`].
    pub fn trainable_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([b.kernel, b.bias, b.gamma, b.beta, b.experts, b.routing]);
        }
        out.extend([self.conv1.0, self.conv1.1, self.conv2.0, self.conv2.1]);
        for d in &self.dim_match {
            out.extend([d.0, d.1]);
        }
        out.push(self.af_squeeze);
        out.extend(self.af_heads);
        out.extend([self.proj1, self.proj2, self.fc_weight, self.fc_bias]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{conv2d_forward, Conv2dSpec};
    use crate::testutil::{rel_err, seeded_rng, seeded_vec};
    use crate::train::total_loss;
    use rand::Rng;

    fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), seeded_vec(shape.iter().product(), seed)).unwrap()
    }

    fn patch_batch(n: usize, seed: u64) -> Tensor<f64> {
        // network inputs live in [0, 1]
        let vals: Vec<f64> = seeded_vec(n * 784, seed).iter().map(|v| (v + 1.0) / 2.0).collect();
        Tensor::new(vec![n, 1, 28, 28], vals).unwrap()
    }

    #[test]
    fn trunk_and_dimension_match_shapes_follow_the_layer_table() {
        let cfg = ModelConfig::default();
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params);
        let x = g.leaf(patch_batch(8, 1));
        let (f1, f2, f3) = trunk_forward(&mut g, &nodes, &mut params, x, BnMode::Train).unwrap();
        assert_eq!(g.shape(f1), &[8, 16, 28, 28]);
        assert_eq!(g.shape(f2), &[8, 32, 14, 14]);
        assert_eq!(g.shape(f3), &[8, 64, 7, 7]);
        let (d1, d2, d3) = dimension_match(&mut g, &nodes, f1, f2, f3).unwrap();
        for d in [d1, d2, d3] {
            assert_eq!(g.shape(d), &[8, 64, 7, 7]);
        }
    }

    #[test]
    fn trunk_rejects_wrong_input_size() {
        let cfg = ModelConfig::default();
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params);
        let x = g.leaf(Tensor::zeros(&[2, 1, 27, 27]));
        assert!(trunk_forward(&mut g, &nodes, &mut params, x, BnMode::Train).is_err());
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero_low_level_features() {
        let cfg = ModelConfig::default();
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params);
        let x = g.leaf(Tensor::zeros(&[4, 1, 28, 28]));
        let (f1, _, _) = trunk_forward(&mut g, &nodes, &mut params, x, BnMode::Train).unwrap();
        assert!(g.value(f1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_patches_in_a_batch_give_identical_rows_in_eval() {
        let cfg = ModelConfig::default();
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        let one = patch_batch(1, 5);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        data.extend_from_slice(one.data());
        let batch = Tensor::new(vec![3, 1, 28, 28], data).unwrap();

        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params);
        let x = g.leaf(batch);
        let (f1, f2, f3) = trunk_forward(&mut g, &nodes, &mut params, x, BnMode::Eval).unwrap();
        for f in [f1, f2, f3] {
            let v = g.value(f).data();
            let stride = v.len() / 3;
            assert_eq!(v[..stride], v[stride..2 * stride]);
            assert_eq!(v[..stride], v[2 * stride..]);
        }
    }

    /// Single-expert reduction: the block must equal
    /// relu(conv(F_c1, alpha_n * W_1)) + F_c1 with a per-sample scalar alpha.
    #[test]
    fn condconv_block_single_expert_reduction() {
        let mut cfg = ModelConfig { experts: 1, ..ModelConfig::default() };
        cfg.seed = 3;
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params);
        let x = g.leaf(patch_batch(2, 7));
        let out =
            condconv_block(&mut g, &nodes.blocks[0], &mut params.blocks[0].convbn.running, x, BnMode::Eval)
                .unwrap();

        // recompute F_c1 and alpha with the same engine ops
        let mut g2 = Graph::new();
        let nodes2 = register_params(&mut g2, &params);
        let x2 = g2.leaf(patch_batch(2, 7));
        let conv = g2.conv2d(x2, nodes2.blocks[0].kernel, Some(nodes2.blocks[0].bias), 1, 1, 1).unwrap();
        let mut running = params.blocks[0].convbn.running.clone();
        let bn = g2
            .batch_norm(conv, nodes2.blocks[0].gamma, nodes2.blocks[0].beta, &mut running, BnMode::Eval, BN_MOMENTUM, BN_EPS)
            .unwrap();
        let fc1 = g2.relu(bn);
        let pooled = g2.global_avg_pool(fc1).unwrap();
        let logits = g2.linear(pooled, nodes2.blocks[0].routing, None).unwrap();
        let alpha = g2.sigmoid(logits);
        let alpha_vals = g2.value(alpha).data().to_vec();
        assert!(alpha_vals.iter().all(|&a| a > 0.0 && a < 1.0));

        let fc1_vals = g2.value(fc1).data().to_vec();
        let spec = Conv2dSpec::infer(&[1, 16, 28, 28], &[16, 16, 3, 3], 1, 1, 1).unwrap();
        let w1 = params.blocks[0].experts.data();
        let stride = 16 * 784;
        for n in 0..2 {
            let scaled: Vec<f64> = w1.iter().map(|&w| w * alpha_vals[n]).collect();
            let conv_out =
                conv2d_forward(&fc1_vals[n * stride..(n + 1) * stride], &scaled, None, &spec);
            for (j, &cv) in conv_out.iter().enumerate() {
                let want = cv.max(0.0) + fc1_vals[n * stride + j];
                let got = g.value(out).data()[n * stride + j];
                assert!((got - want).abs() < 1e-9, "sample {n} element {j}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn zero_routing_weights_give_half_alpha_everywhere() {
        let cfg = ModelConfig { seed: 11, ..ModelConfig::default() };
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        params.blocks[0].routing = Tensor::zeros(&[cfg.experts, 16]);
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params);
        let x = g.leaf(patch_batch(3, 13));
        let conv = g.conv2d(x, nodes.blocks[0].kernel, Some(nodes.blocks[0].bias), 1, 1, 1).unwrap();
        let mut running = params.blocks[0].convbn.running.clone();
        let bn = g
            .batch_norm(conv, nodes.blocks[0].gamma, nodes.blocks[0].beta, &mut running, BnMode::Eval, BN_MOMENTUM, BN_EPS)
            .unwrap();
        let fc1 = g.relu(bn);
        let pooled = g.global_avg_pool(fc1).unwrap();
        let logits = g.linear(pooled, nodes.blocks[0].routing, None).unwrap();
        let alpha = g.sigmoid(logits);
        assert!(g.value(alpha).data().iter().all(|&a| a == 0.5));
    }

    #[test]
    fn attention_is_a_simplex_per_channel() {
        for seed in 0..5 {
            let cfg = ModelConfig { seed, ..ModelConfig::default() };
            let params = ModelParams::<f64>::init(&cfg).unwrap();
            let mut g = Graph::new();
            let nodes = register_params(&mut g, &params);
            let d1 = g.leaf(t(&[2, 64, 7, 7], 500 + seed));
            let d2 = g.leaf(t(&[2, 64, 7, 7], 600 + seed));
            let d3 = g.leaf(t(&[2, 64, 7, 7], 700 + seed));
            let fused = af_fuse(&mut g, &nodes, d1, d2, d3, true).unwrap();
            let [a, b, c] = fused.attention.unwrap();
            let (av, bv, cv) = (g.value(a).data(), g.value(b).data(), g.value(c).data());
            for i in 0..av.len() {
                let sum = av[i] + bv[i] + cv[i];
                assert!((sum - 1.0).abs() < 1e-6, "channel {i} sums to {sum}");
                assert!(av[i] >= 0.0 && bv[i] >= 0.0 && cv[i] >= 0.0);
            }
        }
    }

    #[test]
    fn zero_heads_give_uniform_attention_and_average_fusion() {
        let cfg = ModelConfig::default();
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        let dim = FUSED_CHANNELS / cfg.reduction;
        params.af.heads = [
            Tensor::zeros(&[FUSED_CHANNELS, dim]),
            Tensor::zeros(&[FUSED_CHANNELS, dim]),
            Tensor::zeros(&[FUSED_CHANNELS, dim]),
        ];
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params);
        let d1 = g.leaf(t(&[2, 64, 7, 7], 801));
        let d2 = g.leaf(t(&[2, 64, 7, 7], 802));
        let d3 = g.leaf(t(&[2, 64, 7, 7], 803));
        let fused = af_fuse(&mut g, &nodes, d1, d2, d3, true).unwrap();
        let [a, b, c] = fused.attention.unwrap();
        for id in [a, b, c] {
            assert!(g.value(id).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        }
        let f = g.value(fused.fused).data();
        let (x1, x2, x3) = (g.value(d1).data(), g.value(d2).data(), g.value(d3).data());
        for i in 0..f.len() {
            let want = (x1[i] + x2[i] + x3[i]) / 3.0;
            assert!((f[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_inputs_fuse_to_themselves() {
        let cfg = ModelConfig { seed: 21, ..ModelConfig::default() };
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params);
        let d = t(&[2, 64, 7, 7], 810);
        let d1 = g.leaf(d.clone());
        let d2 = g.leaf(d.clone());
        let d3 = g.leaf(d.clone());
        let fused = af_fuse(&mut g, &nodes, d1, d2, d3, true).unwrap();
        for (got, want) in g.value(fused.fused).data().iter().zip(d.data().iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_examples_and_bilinearity() {
        let mut g = Graph::<f64>::new();
        let ones = g.leaf(Tensor::full(&[2, 64, 7, 7], 1.0f64));
        let c = correlation_layer(&mut g, ones, ones).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 49.0));

        let zeros = g.leaf(Tensor::zeros(&[2, 64, 7, 7]));
        let x = g.leaf(t(&[2, 64, 7, 7], 820));
        let c = correlation_layer(&mut g, x, zeros).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));

        // scaling one input by a power of two scales the output exactly
        let y = g.leaf(t(&[2, 64, 7, 7], 821));
        let base = correlation_layer(&mut g, x, y).unwrap();
        let x2 = g.scale(x, 2.0);
        let doubled = correlation_layer(&mut g, x2, y).unwrap();
        for (b, d) in g.value(base).data().iter().zip(g.value(doubled).data().iter()) {
            assert_eq!(*d, 2.0 * b);
        }
    }

    /// The correlation layer must match its grouped-convolution formulation:
    /// reshape one map into a single image of N*64 channels and the other
    /// into N*64 single-channel kernels, convolve with groups = N*64.
    #[test]
    fn correlation_matches_grouped_convolution_oracle() {
        let fv1 = t(&[3, 64, 7, 7], 830);
        let fv2 = t(&[3, 64, 7, 7], 831);
        let mut g = Graph::<f64>::new();
        let a = g.leaf(fv1.clone());
        let b = g.leaf(fv2.clone());
        let got = correlation_layer(&mut g, a, b).unwrap();

        let img = g.reshape(a, vec![1, 3 * 64, 7, 7]).unwrap();
        let ker = g.reshape(b, vec![3 * 64, 1, 7, 7]).unwrap();
        let conv = g.conv2d(img, ker, None, 1, 0, 3 * 64).unwrap();
        assert_eq!(g.shape(conv), &[1, 192, 1, 1]);
        for (x, y) in g.value(got).data().iter().zip(g.value(conv).data().iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn projection_examples() {
        let cfg = ModelConfig { seed: 31, ..ModelConfig::default() };
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        // identity 1x1 kernel reproduces a constant map exactly
        let mut eye = Tensor::zeros(&[64, 64, 1, 1]);
        for i in 0..64 {
            eye.data_mut()[i * 64 + i] = 1.0;
        }
        params.proj1 = eye;
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params);
        let fv1 = g.leaf(Tensor::full(&[2, 64, 7, 7], 3.5f64));
        let fv2 = g.leaf(t(&[2, 64, 7, 7], 840));
        let (f0, f1) = project_features(&mut g, &nodes, fv1, fv2).unwrap();
        assert_eq!(g.shape(f0), &[2, 64]);
        assert_eq!(g.shape(f1), &[2, 64]);
        assert!(g.value(f0).data().iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn projection_swap_symmetry() {
        let cfg = ModelConfig { seed: 33, ..ModelConfig::default() };
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        let mut swapped = params.clone();
        std::mem::swap(&mut swapped.proj1, &mut swapped.proj2);

        let a = t(&[2, 64, 7, 7], 841);
        let b = t(&[2, 64, 7, 7], 842);

        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params);
        let an = g.leaf(a.clone());
        let bn = g.leaf(b.clone());
        let (f0, f1) = project_features(&mut g, &nodes, an, bn).unwrap();

        let mut g2 = Graph::new();
        let nodes2 = register_params(&mut g2, &swapped);
        let bn2 = g2.leaf(b);
        let an2 = g2.leaf(a);
        let (s0, s1) = project_features(&mut g2, &nodes2, bn2, an2).unwrap();

        assert_eq!(g.value(f0).data(), g2.value(s1).data());
        assert_eq!(g.value(f1).data(), g2.value(s0).data());
    }

    #[test]
    fn classifier_is_uniform_with_zero_weights() {
        let cfg = ModelConfig { seed: 41, ..ModelConfig::default() };
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        params.fc_weight = Tensor::zeros(&[2, 64]);
        params.fc_bias = Tensor::zeros(&[2]);
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params);
        let feats = g.leaf(t(&[3, 64], 850));
        let probs = classify(&mut g, &nodes, feats).unwrap();
        assert!(g.value(probs).data().iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn classifier_rows_are_probabilities_and_shift_invariant() {
        let cfg = ModelConfig { seed: 43, ..ModelConfig::default() };
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params);
        let feats = g.leaf(t(&[4, 64], 851));
        let probs = classify(&mut g, &nodes, feats).unwrap();
        for row in g.value(probs).data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }

        // shifting both logits leaves the argmax unchanged
        let logits = g.leaf(t(&[4, 2], 852));
        let shifted = {
            let plus = g.leaf(Tensor::full(&[4, 2], 11.25f64));
            g.add(logits, plus).unwrap()
        };
        let p1 = g.softmax_axis(logits, 1).unwrap();
        let p2 = g.softmax_axis(shifted, 1).unwrap();
        let (v1, v2) = (g.value(p1).data(), g.value(p2).data());
        for n in 0..4 {
            assert_eq!(v1[n * 2] > v1[n * 2 + 1], v2[n * 2] > v2[n * 2 + 1]);
        }
    }

    #[test]
    fn shared_trunk_makes_identical_inputs_identical_features() {
        let cfg = ModelConfig { seed: 51, ..ModelConfig::default() };
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        let x = patch_batch(2, 860);
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params);
        let x1 = g.leaf(x.clone());
        let x2 = g.leaf(x);
        let out = forward_pair(&mut g, &nodes, &mut params, &cfg, x1, x2, BnMode::Eval).unwrap();
        assert_eq!(g.value(out.fv1).data(), g.value(out.fv2).data());
        // the contrastive features may differ only through the two kernels
        assert_ne!(g.value(out.feat0).data(), g.value(out.feat1).data());
    }

    #[test]
    fn ablation_variants_change_the_wiring() {
        let base = patch_batch(2, 870);
        let other = patch_batch(2, 871);
        for (use_af, use_correlation) in [(false, true), (true, false), (false, false)] {
            let cfg = ModelConfig { seed: 7, use_af, use_correlation, ..ModelConfig::default() };
            let mut params = ModelParams::<f64>::init(&cfg).unwrap();
            assert_eq!(params.fc_weight.shape()[1], cfg.classifier_input());
            let mut g = Graph::new();
            let nodes = register_params(&mut g, &params);
            let x1 = g.leaf(base.clone());
            let x2 = g.leaf(other.clone());
            let out = forward_pair(&mut g, &nodes, &mut params, &cfg, x1, x2, BnMode::Eval).unwrap();
            assert_eq!(g.shape(out.probs), &[2, 2]);
            assert_eq!(out.attention1.is_some(), use_af);
        }
    }

    #[test]
    fn dimension_match_identity_kernel_reproduces_f3_and_stride4_samples_f1() {
        let cfg = ModelConfig { seed: 61, ..ModelConfig::default() };
        let mut params = ModelParams::<f64>::init(&cfg).unwrap();
        let mut eye = Tensor::zeros(&[64, 64, 1, 1]);
        for i in 0..64 {
            eye.data_mut()[i * 64 + i] = 1.0;
        }
        params.dim_match[2] = ConvParams { kernel: eye, bias: Tensor::zeros(&[64]) };

        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params);
        let x = g.leaf(patch_batch(2, 880));
        let (f1, f2, f3) = trunk_forward(&mut g, &nodes, &mut params, x, BnMode::Eval).unwrap();
        let (d1, _, d3) = dimension_match(&mut g, &nodes, f1, f2, f3).unwrap();
        assert_eq!(g.value(d3).data(), g.value(f3).data());

        // stride-4 1x1: output (i, j) reads input (4i, 4j)
        let f1v = g.value(f1).data().to_vec();
        let d1v = g.value(d1).data().to_vec();
        let k = params.dim_match[0].kernel.data();
        let b = params.dim_match[0].bias.data();
        for n in 0..2 {
            for co in 0..64 {
                for i in 0..7 {
                    for j in 0..7 {
                        let mut want = b[co];
                        for ci in 0..16 {
                            want += k[co * 16 + ci]
                                * f1v[((n * 16 + ci) * 28 + 4 * i) * 28 + 4 * j];
                        }
                        let got = d1v[((n * 64 + co) * 7 + i) * 7 + j];
                        assert!((got - want).abs() < 1e-10);
                    }
                }
            }
        }
    }

    /// End-to-end analytic gradients against finite differences on a
    /// two-sample batch for a random selection of parameter elements.
    #[test]
    fn end_to_end_gradient_check() {
        let cfg = ModelConfig { seed: 71, ..ModelConfig::default() };
        let params = ModelParams::<f64>::init(&cfg).unwrap();
        let x1 = patch_batch(2, 890);
        let x2 = patch_batch(2, 891);
        let labels = [1u8, 0u8];
        let lambda = 0.5;
        let margin = 1.0;

        let eval_loss = |p: &ModelParams<f64>| -> f64 {
            let mut p = p.clone();
            let mut g = Graph::new();
            let nodes = register_params(&mut g, &p);
            let a = g.leaf(x1.clone());
            let b = g.leaf(x2.clone());
            let out = forward_pair(&mut g, &nodes, &mut p, &cfg, a, b, BnMode::Train).unwrap();
            let l1 = g.classification_loss(out.probs, &labels).unwrap();
            let l2 = g.contrastive_loss(out.feat0, out.feat1, &labels, margin).unwrap();
            let loss = total_loss(&mut g, l1, l2, lambda).unwrap();
            g.value(loss).item()
        };

        // analytic gradients once
        let mut p = params.clone();
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &p);
        let a = g.leaf(x1.clone());
        let b = g.leaf(x2.clone());
        let out = forward_pair(&mut g, &nodes, &mut p, &cfg, a, b, BnMode::Train).unwrap();
        let l1 = g.classification_loss(out.probs, &labels).unwrap();
        let l2 = g.contrastive_loss(out.feat0, out.feat1, &labels, margin).unwrap();
        let loss = total_loss(&mut g, l1, l2, lambda).unwrap();
        g.backward(loss).unwrap();
        let ids = nodes.trainable_ids();
        let grads: Vec<Tensor<f64>> = ids
            .iter()
            .map(|&id| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(id))))
            .collect();
        drop(g);

        let mut rng = seeded_rng(99);
        let mut checked = 0;
        let mut probe = params.clone();
        while checked < 20 {
            let pi = rng.gen_range(0..grads.len());
            let numel = grads[pi].numel();
            let ei = rng.gen_range(0..numel);
            let analytic = grads[pi].data()[ei];

            let h = 1e-5;
            let base = {
                let list = probe.trainable_mut();
                list[pi].1.data()[ei]
            };
            {
                let mut list = probe.trainable_mut();
                list[pi].1.data_mut()[ei] = base + h;
            }
            let up = eval_loss(&probe);
            {
                let mut list = probe.trainable_mut();
                list[pi].1.data_mut()[ei] = base - h;
            }
            let down = eval_loss(&probe);
            {
                let mut list = probe.trainable_mut();
                list[pi].1.data_mut()[ei] = base;
            }
            let numeric = (up - down) / (2.0 * h);
            assert!(
                rel_err(analytic, numeric) < 1e-3,
                "tensor {pi} element {ei}: analytic {analytic}, numeric {numeric}"
            );
            checked += 1;
        }
    }
}
