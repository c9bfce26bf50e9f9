//! Joint contrastive/classification training over pseudo-labeled patch pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, NodeId};
use crate::grid::{extract_patch, normalize, resize_bilinear, Grid};
use crate::model::{forward_pair, register_params, ModelConfig, ModelParams, INPUT_SIZE};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::preclassify::TrainSample;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    /// Weight of the contrastive term in the total loss.
    pub lambda: f64,
    /// Contrastive margin.
    pub margin: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Patch size r (odd).
    pub r: usize,
    /// Training sample fraction over the eligible pseudo-labeled pixels.
    pub n_t: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            margin: 1.0,
            adam: AdamConfig::default(),
            epochs: 30,
            batch_size: 64,
            seed: 0,
            r: 13,
            n_t: 0.04,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::invalid("train config", "lambda must be non-negative"));
        }
        if self.margin <= 0.0 {
            return Err(Error::invalid("train config", "margin must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(
                "train config",
                "batch size must be at least 2 (batch norm needs a batch)",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("train config", "epochs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

pub struct TrainOutput {
    pub params: ModelParams<f32>,
    pub log: Vec<EpochStats>,
}

/// Total loss L = L1 + lambda * L2.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    l1: NodeId,
    l2: NodeId,
    lambda: f64,
) -> Result<NodeId> {
    if lambda < 0.0 {
        return Err(Error::invalid("total_loss", "lambda must be non-negative"));
    }
    let weighted = g.scale(l2, T::from_f64(lambda));
    g.add(l1, weighted)
}

/// Normalized 28x28 network input for one pixel of one acquisition.
fn patch_input(grid: &Grid, center: (usize, usize), r: usize) -> Result<Vec<f32>> {
    let window = extract_patch(grid, center, r)?;
    let resized = resize_bilinear(&window, INPUT_SIZE);
    Ok(normalize(&resized).values)
}

/// Build the full [n, 1, 28, 28] input buffers for a sample list.
pub fn build_patch_pairs(
    i1: &Grid,
    i2: &Grid,
    samples: &[TrainSample],
    r: usize,
) -> Result<(Vec<f32>, Vec<f32>)> {
    if !i1.same_size(i2) {
        return Err(Error::shape("build_patch_pairs", "temporal images differ in size"));
    }
    let pairs: Result<Vec<(Vec<f32>, Vec<f32>)>> = samples
        .par_iter()
        .map(|s| {
            let c = (s.row as usize, s.col as usize);
            Ok((patch_input(i1, c, r)?, patch_input(i2, c, r)?))
        })
        .collect();
    let pairs = pairs?;
    let mut a = Vec::with_capacity(samples.len() * INPUT_SIZE * INPUT_SIZE);
    let mut b = Vec::with_capacity(samples.len() * INPUT_SIZE * INPUT_SIZE);
    for (pa, pb) in pairs {
        a.extend_from_slice(&pa);
        b.extend_from_slice(&pb);
    }
    Ok((a, b))
}

fn batch_tensor(all: &[f32], indices: &[usize]) -> Tensor<f32> {
    let plane = INPUT_SIZE * INPUT_SIZE;
    let mut data = Vec::with_capacity(indices.len() * plane);
    for &i in indices {
        data.extend_from_slice(&all[i * plane..(i + 1) * plane]);
    }
    Tensor::new(vec![indices.len(), 1, INPUT_SIZE, INPUT_SIZE], data).expect("batch shape")
}

/// Train the network on pseudo-labeled patch pairs. Batches are shuffled per
/// epoch from the config seed; a trailing batch of one sample is dropped
/// (batch norm needs at least two values).
pub fn train(
    i1: &Grid,
    i2: &Grid,
    samples: &[TrainSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyClass { class: "training sample set" });
    }
    let (x1, x2) = build_patch_pairs(i1, i2, samples, cfg.r)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();

    let mut params = ModelParams::<f32>::init(model_cfg)?;
    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum_l1 = 0.0;
        let mut sum_l2 = 0.0;
        let mut sum_loss = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let bx1 = batch_tensor(&x1, batch);
            let bx2 = batch_tensor(&x2, batch);
            let by: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();

            let mut g = Graph::<f32>::new();
            let nodes = register_params(&mut g, &params);
            let in1 = g.leaf(bx1);
            let in2 = g.leaf(bx2);
            let out = forward_pair(&mut g, &nodes, &mut params, model_cfg, in1, in2, BnMode::Train)?;
            let l1 = g.classification_loss(out.probs, &by)?;
            let l2 = g.contrastive_loss(out.feat0, out.feat1, &by, cfg.margin)?;
            let loss = total_loss(&mut g, l1, l2, cfg.lambda)?;
            g.backward(loss)?;

            let probs = g.value(out.probs).data();
            for (j, &y) in by.iter().enumerate() {
                let predicted = (probs[j * 2 + 1] > probs[j * 2]) as u8;
                if predicted == y {
                    correct += 1;
                }
            }
            seen += by.len();
            let w = by.len() as f64;
            sum_l1 += g.value(l1).item() as f64 * w;
            sum_l2 += g.value(l2).item() as f64 * w;
            sum_loss += g.value(loss).item() as f64 * w;

            let grads: Vec<Option<Tensor<f32>>> =
                nodes.trainable_ids().iter().map(|&id| g.grad(id).cloned()).collect();
            drop(g);
            let mut trainable = params.trainable_mut();
            adam_step(&mut trainable, &grads, &mut adam, &cfg.adam)?;
        }

        if seen == 0 {
            return Err(Error::invalid(
                "train",
                "no trainable batch (need at least 2 samples)",
            ));
        }
        log.push(EpochStats {
            epoch,
            l1: sum_l1 / seen as f64,
            l2: sum_l2 / seen as f64,
            loss: sum_loss / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
        });
    }

    Ok(TrainOutput { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preclassify::TrainSample;

    /// Constant-patch scenes: unchanged pixels see (128, 128), changed pixels
    /// (128, 255). Linearly separable after normalization.
    fn toy_task() -> (Grid, Grid, Vec<TrainSample>) {
        let size = 16;
        let i1 = Grid::filled(size, size, 128.0);
        let mut i2 = Grid::filled(size, size, 128.0);
        for row in 0..size {
            for col in size / 2..size {
                i2.set(row, col, 255.0);
            }
        }
        let mut samples = Vec::new();
        for row in 0..size {
            for col in [1, 2, 3] {
                samples.push(TrainSample { row: row as u32, col, label: 0 });
            }
            for col in [12, 13, 14] {
                samples.push(TrainSample { row: row as u32, col: col as u32, label: 1 });
            }
        }
        (i1, i2, samples)
    }

    #[test]
    fn toy_constant_patches_reach_full_accuracy_within_five_epochs() {
        let (i1, i2, samples) = toy_task();
        let model_cfg = ModelConfig { seed: 1, ..ModelConfig::default() };
        let cfg = TrainConfig { epochs: 5, batch_size: 16, r: 5, seed: 2, ..TrainConfig::default() };
        let out = train(&i1, &i2, &samples, &model_cfg, &cfg).unwrap();
        let best = out.log.iter().map(|e| e.train_accuracy).fold(0.0, f64::max);
        assert_eq!(best, 1.0, "log: {:?}", out.log);
    }

    #[test]
    fn loss_log_satisfies_the_total_identity() {
        let (i1, i2, samples) = toy_task();
        let model_cfg = ModelConfig { seed: 3, ..ModelConfig::default() };
        let cfg = TrainConfig { epochs: 3, batch_size: 16, r: 5, seed: 4, ..TrainConfig::default() };
        let out = train(&i1, &i2, &samples, &model_cfg, &cfg).unwrap();
        for e in &out.log {
            assert!(
                (e.loss - (e.l1 + cfg.lambda * e.l2)).abs() < 1e-6,
                "epoch {}: {} vs {} + {}*{}",
                e.epoch,
                e.loss,
                e.l1,
                cfg.lambda,
                e.l2
            );
        }
    }

    #[test]
    fn same_seed_training_is_bitwise_reproducible() {
        let (i1, i2, samples) = toy_task();
        let model_cfg = ModelConfig { seed: 5, ..ModelConfig::default() };
        let cfg = TrainConfig { epochs: 2, batch_size: 16, r: 5, seed: 6, ..TrainConfig::default() };
        let a = train(&i1, &i2, &samples, &model_cfg, &cfg).unwrap();
        let b = train(&i1, &i2, &samples, &model_cfg, &cfg).unwrap();
        for ((na, ta), (nb, tb)) in a.params.named_tensors().iter().zip(b.params.named_tensors()) {
            assert_eq!(na, &nb);
            assert_eq!(ta.data(), tb.data(), "tensor {na} differs between runs");
        }
    }

    #[test]
    fn batch_size_one_is_rejected() {
        let (i1, i2, samples) = toy_task();
        let model_cfg = ModelConfig::default();
        let cfg = TrainConfig { batch_size: 1, ..TrainConfig::default() };
        assert!(train(&i1, &i2, &samples, &model_cfg, &cfg).is_err());
    }

    #[test]
    fn zero_lambda_sends_no_gradient_to_projection_kernels() {
        let (i1, i2, samples) = toy_task();
        let (x1, x2) = build_patch_pairs(&i1, &i2, &samples[..8], 5).unwrap();
        let labels: Vec<u8> = samples[..8].iter().map(|s| s.label).collect();
        let model_cfg = ModelConfig { seed: 9, ..ModelConfig::default() };
        let mut params = ModelParams::<f32>::init(&model_cfg).unwrap();

        let mut g = Graph::<f32>::new();
        let nodes = register_params(&mut g, &params);
        let in1 = g.leaf(Tensor::new(vec![8, 1, 28, 28], x1).unwrap());
        let in2 = g.leaf(Tensor::new(vec![8, 1, 28, 28], x2).unwrap());
        let out = forward_pair(&mut g, &nodes, &mut params, &model_cfg, in1, in2, BnMode::Train)
            .unwrap();
        let l1 = g.classification_loss(out.probs, &labels).unwrap();
        let l2 = g.contrastive_loss(out.feat0, out.feat1, &labels, 1.0).unwrap();
        let loss = total_loss(&mut g, l1, l2, 0.0).unwrap();
        g.backward(loss).unwrap();

        for id in [nodes.proj1, nodes.proj2] {
            let grad = g.grad(id).expect("projection kernels sit on the contrastive path");
            let norm: f32 = grad.data().iter().map(|v| v * v).sum();
            assert_eq!(norm, 0.0);
        }
        // the classifier still receives gradient
        let fc = g.grad(nodes.fc_weight).unwrap();
        assert!(fc.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fixed_batch_loss_decreases_over_first_ten_steps() {
        let scene = crate::synth::synth_scene(64, 11, 4, 2).unwrap();
        let di = crate::preclassify::log_ratio_di(&scene.t1, &scene.t2).unwrap();
        let map = crate::preclassify::hierarchical_preclassify(&di, 1.2, 11).unwrap();
        let samples = crate::preclassify::select_training_samples(&map, 0.2, 11).unwrap();
        let batch: Vec<TrainSample> = samples.into_iter().take(32).collect();

        let model_cfg = ModelConfig { seed: 13, ..ModelConfig::default() };
        let cfg = TrainConfig { r: 9, ..TrainConfig::default() };
        let (x1, x2) = build_patch_pairs(&scene.t1, &scene.t2, &batch, cfg.r).unwrap();
        let labels: Vec<u8> = batch.iter().map(|s| s.label).collect();
        let n = batch.len();

        let mut params = ModelParams::<f32>::init(&model_cfg).unwrap();
        let mut adam = crate::optim::AdamState::new();
        let mut losses = Vec::new();
        for _ in 0..10 {
            let mut g = Graph::<f32>::new();
            let nodes = register_params(&mut g, &params);
            let in1 = g.leaf(Tensor::new(vec![n, 1, 28, 28], x1.clone()).unwrap());
            let in2 = g.leaf(Tensor::new(vec![n, 1, 28, 28], x2.clone()).unwrap());
            let out =
                forward_pair(&mut g, &nodes, &mut params, &model_cfg, in1, in2, BnMode::Train)
                    .unwrap();
            let l1 = g.classification_loss(out.probs, &labels).unwrap();
            let l2 = g.contrastive_loss(out.feat0, out.feat1, &labels, cfg.margin).unwrap();
            let loss = total_loss(&mut g, l1, l2, cfg.lambda).unwrap();
            g.backward(loss).unwrap();
            losses.push(g.value(loss).item() as f64);

            let grads: Vec<Option<Tensor<f32>>> =
                nodes.trainable_ids().iter().map(|&id| g.grad(id).cloned()).collect();
            drop(g);
            let mut trainable = params.trainable_mut();
            adam_step(&mut trainable, &grads, &mut adam, &cfg.adam).unwrap();
        }
        assert!(
            losses[9] < losses[0],
            "loss did not decrease over ten steps: {losses:?}"
        );
    }
}
