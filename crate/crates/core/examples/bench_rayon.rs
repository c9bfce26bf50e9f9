use rayon::prelude::*;
use std::time::Instant;

fn spin(n: u64) -> f64 { let mut x = 1.00000001f64; for _ in 0..n { x = x * x % 10.0 + 0.5; } x }

fn main() {
    println!("rayon threads: {}", rayon::current_num_threads());
    let t = Instant::now();
    let a: f64 = (0..8).map(|_| spin(40_000_000)).sum();
    let seq = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let b: f64 = (0..8).into_par_iter().map(|_| spin(40_000_000)).sum();
    let par = t.elapsed().as_secs_f64();
    println!("seq {:.2}s  par {:.2}s  speedup {:.2} ({} {})", seq, par, seq / par, a, b);
}
