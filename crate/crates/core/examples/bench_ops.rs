use safnet_core::graph::{BnMode, BnStats, Graph};
use safnet_core::model::*;
use safnet_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::default();
    let mut params = ModelParams::<f32>::init(&cfg).unwrap();
    let n = 256;
    let x: Vec<f32> = (0..n * 784).map(|i| ((i % 255) as f32) / 255.0).collect();

    let mut g = Graph::<f32>::new();
    let nodes = register_params(&mut g, &params);
    let a = g.leaf(Tensor::new(vec![n, 1, 28, 28], x.clone()).unwrap());

    let stamp = |label: &str, t: &mut Instant| {
        println!("{label:14} {:7.1} ms", t.elapsed().as_secs_f64() * 1e3);
        *t = Instant::now();
    };
    let mut t = Instant::now();

    // block 1 unrolled
    let conv = g.conv2d(a, nodes.blocks[0].kernel, Some(nodes.blocks[0].bias), 1, 1, 1).unwrap();
    stamp("b1 convbn-conv", &mut t);
    let mut run = BnStats::identity(16);
    let bn = g.batch_norm(conv, nodes.blocks[0].gamma, nodes.blocks[0].beta, &mut run, BnMode::Eval, 0.9, 1e-5).unwrap();
    stamp("b1 bn", &mut t);
    let fc1 = g.relu(bn);
    stamp("b1 relu", &mut t);
    let pooled = g.global_avg_pool(fc1).unwrap();
    let logits = g.linear(pooled, nodes.blocks[0].routing, None).unwrap();
    let alpha = g.sigmoid(logits);
    stamp("b1 routing", &mut t);
    let mixed = g.condconv2d(fc1, nodes.blocks[0].experts, alpha, 1).unwrap();
    stamp("b1 condconv", &mut t);
    let act = g.relu(mixed);
    let b1 = g.add(act, fc1).unwrap();
    stamp("b1 relu+add", &mut t);

    let t1 = g.conv2d(b1, nodes.conv1.0, Some(nodes.conv1.1), 2, 0, 1).unwrap();
    stamp("conv1", &mut t);

    // block 2
    let conv = g.conv2d(t1, nodes.blocks[1].kernel, Some(nodes.blocks[1].bias), 1, 1, 1).unwrap();
    stamp("b2 convbn-conv", &mut t);
    let mut run = BnStats::identity(32);
    let bn = g.batch_norm(conv, nodes.blocks[1].gamma, nodes.blocks[1].beta, &mut run, BnMode::Eval, 0.9, 1e-5).unwrap();
    let fc1 = g.relu(bn);
    let pooled = g.global_avg_pool(fc1).unwrap();
    let logits = g.linear(pooled, nodes.blocks[1].routing, None).unwrap();
    let alpha = g.sigmoid(logits);
    stamp("b2 bn/relu/rt", &mut t);
    let mixed = g.condconv2d(fc1, nodes.blocks[1].experts, alpha, 1).unwrap();
    stamp("b2 condconv", &mut t);
    let act = g.relu(mixed);
    let b2 = g.add(act, fc1).unwrap();
    let t2 = g.conv2d(b2, nodes.conv2.0, Some(nodes.conv2.1), 2, 0, 1).unwrap();
    stamp("conv2", &mut t);

    // block 3
    let conv = g.conv2d(t2, nodes.blocks[2].kernel, Some(nodes.blocks[2].bias), 1, 1, 1).unwrap();
    stamp("b3 convbn-conv", &mut t);
    let mut run = BnStats::identity(64);
    let bn = g.batch_norm(conv, nodes.blocks[2].gamma, nodes.blocks[2].beta, &mut run, BnMode::Eval, 0.9, 1e-5).unwrap();
    let fc1 = g.relu(bn);
    let pooled = g.global_avg_pool(fc1).unwrap();
    let logits = g.linear(pooled, nodes.blocks[2].routing, None).unwrap();
    let alpha = g.sigmoid(logits);
    stamp("b3 bn/relu/rt", &mut t);
    let mixed = g.condconv2d(fc1, nodes.blocks[2].experts, alpha, 1).unwrap();
    stamp("b3 condconv", &mut t);
    let act = g.relu(mixed);
    let f3 = g.add(act, fc1).unwrap();
    stamp("b3 tail", &mut t);

    let d3 = g.conv2d(f3, nodes.dim_match[2].0, Some(nodes.dim_match[2].1), 1, 0, 1).unwrap();
    stamp("dim3", &mut t);
    let p = g.conv2d(d3, nodes.proj1, None, 1, 0, 1).unwrap();
    stamp("proj", &mut t);
    let _ = g.global_avg_pool(p).unwrap();
    let _keep = params.blocks[0].convbn.running.mean.data()[0];
    stamp("gap", &mut t);
}
