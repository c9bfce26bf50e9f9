use safnet_core::graph::{BnMode, Graph};
use safnet_core::model::*;
use safnet_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::default();
    let mut params = ModelParams::<f32>::init(&cfg).unwrap();
    let n = 256;
    let x: Vec<f32> = (0..n * 784).map(|i| ((i % 255) as f32) / 255.0).collect();

    // eval forward pair timing
    for _ in 0..2 {
        let t = Instant::now();
        let mut g = Graph::<f32>::new();
        let nodes = register_params(&mut g, &params);
        let a = g.leaf(Tensor::new(vec![n, 1, 28, 28], x.clone()).unwrap());
        let b = g.leaf(Tensor::new(vec![n, 1, 28, 28], x.clone()).unwrap());
        let out = forward_pair(&mut g, &nodes, &mut params, &cfg, a, b, BnMode::Eval).unwrap();
        let dt = t.elapsed().as_secs_f64();
        let flops = 2.0 * n as f64 * 20.0e6;
        println!("forward_pair eval n={}: {:.3}s  {:.1} GFLOP/s (p={})", n, dt, flops / dt / 1e9, g.value(out.probs).data()[0]);
    }

    // single branch pieces
    let t = Instant::now();
    let mut g = Graph::<f32>::new();
    let nodes = register_params(&mut g, &params);
    let a = g.leaf(Tensor::new(vec![n, 1, 28, 28], x.clone()).unwrap());
    let (f1, f2, f3) = trunk_forward(&mut g, &nodes, &mut params, a, BnMode::Eval).unwrap();
    println!("trunk: {:.3}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let (d1, d2, d3) = dimension_match(&mut g, &nodes, f1, f2, f3).unwrap();
    let _fv = af_fuse(&mut g, &nodes, d1, d2, d3, true).unwrap();
    println!("dim+af: {:.3}s", t.elapsed().as_secs_f64());
}
