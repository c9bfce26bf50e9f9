// quick throughput probe for the conv path
use safnet_core::conv::{conv2d_forward, conv2d_backward_input, conv2d_backward_kernel, Conv2dSpec};
use std::time::Instant;

fn main() {
    // block3-like conv over a training batch: 64x64x7x7 -> 64ch 3x3 same pad
    let spec = Conv2dSpec::infer(&[64, 64, 7, 7], &[64, 64, 3, 3], 1, 1, 1).unwrap();
    let input: Vec<f32> = (0..64*64*49).map(|i| (i as f32 * 0.001).sin()).collect();
    let kernel: Vec<f32> = (0..64*64*9).map(|i| (i as f32 * 0.01).cos() * 0.1).collect();
    let flops = 2.0 * 64.0 * 49.0 * 64.0 * 64.0 * 9.0;
    let t = Instant::now();
    let iters = 50;
    let mut acc = 0.0f32;
    for _ in 0..iters {
        let out = conv2d_forward(&input, &kernel, None, &spec);
        acc += out[0];
    }
    let dt = t.elapsed().as_secs_f64() / iters as f64;
    println!("block3 fwd: {:.2} ms, {:.1} GFLOP/s (acc={})", dt*1e3, flops/dt/1e9, acc);

    // block1-like: 64x16x28x28 -> 16ch
    let spec1 = Conv2dSpec::infer(&[64, 16, 28, 28], &[16, 16, 3, 3], 1, 1, 1).unwrap();
    let input1: Vec<f32> = (0..64*16*784).map(|i| (i as f32 * 0.001).sin()).collect();
    let kernel1: Vec<f32> = (0..16*16*9).map(|i| (i as f32 * 0.01).cos() * 0.1).collect();
    let flops1 = 2.0 * 64.0 * 784.0 * 16.0 * 16.0 * 9.0;
    let t = Instant::now();
    for _ in 0..iters { let o = conv2d_forward(&input1, &kernel1, None, &spec1); acc += o[0]; }
    let dt = t.elapsed().as_secs_f64() / iters as f64;
    println!("block1 fwd: {:.2} ms, {:.1} GFLOP/s", dt*1e3, flops1/dt/1e9);

    // backward probes on block3
    let grad: Vec<f32> = (0..64*64*49).map(|i| (i as f32 * 0.002).sin()).collect();
    let t = Instant::now();
    for _ in 0..iters { let o = conv2d_backward_input(&grad, &kernel, &spec); acc += o[0]; }
    let dt = t.elapsed().as_secs_f64() / iters as f64;
    println!("block3 bwd-in: {:.2} ms, {:.1} GFLOP/s", dt*1e3, flops/dt/1e9);
    let t = Instant::now();
    for _ in 0..iters { let o = conv2d_backward_kernel(&grad, &input, &spec); acc += o[0]; }
    let dt = t.elapsed().as_secs_f64() / iters as f64;
    println!("block3 bwd-k: {:.2} ms, {:.1} GFLOP/s (acc {})", dt*1e3, flops/dt/1e9, acc);

    // per-sample small gemm case: batch=1 spec, 64 calls
    let specs = Conv2dSpec::infer(&[1, 64, 7, 7], &[64, 64, 3, 3], 1, 1, 1).unwrap();
    let t = Instant::now();
    for _ in 0..iters {
        for n in 0..64 {
            let o = conv2d_forward(&input[n*64*49..(n+1)*64*49], &kernel, None, &specs);
            acc += o[0];
        }
    }
    let dt = t.elapsed().as_secs_f64() / iters as f64;
    println!("block3 fwd per-sample x64: {:.2} ms, {:.1} GFLOP/s (acc {})", dt*1e3, flops/dt/1e9, acc);
}
