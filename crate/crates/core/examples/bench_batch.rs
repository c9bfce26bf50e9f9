use safnet_core::graph::{BnMode, Graph};
use safnet_core::model::*;
use safnet_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::default();
    let mut params = ModelParams::<f32>::init(&cfg).unwrap();
    for &n in &[32usize, 64, 128, 256] {
        let x: Vec<f32> = (0..n * 784).map(|i| ((i % 255) as f32) / 255.0).collect();
        let total = 1024; // pixels per trial
        let reps = total / n;
        let t = Instant::now();
        for _ in 0..reps {
            let mut g = Graph::<f32>::new();
            let nodes = register_params(&mut g, &params);
            let a = g.leaf(Tensor::new(vec![n, 1, 28, 28], x.clone()).unwrap());
            let b = g.leaf(Tensor::new(vec![n, 1, 28, 28], x.clone()).unwrap());
            let out = forward_pair(&mut g, &nodes, &mut params, &cfg, a, b, BnMode::Eval).unwrap();
            std::hint::black_box(g.value(out.probs).data()[0]);
        }
        let dt = t.elapsed().as_secs_f64();
        let flops = 2.0 * total as f64 * 20.0e6;
        println!("batch {n:4}: {:.3}s for {total} px -> {:.1} GFLOP/s", dt, flops / dt / 1e9);
    }
}
