// end-to-end probe: timings and metrics on the synthetic benchmark
use safnet_core::eval::{confusion, pcc, kappa, predict_change_map};
use safnet_core::grid::Grid;
use safnet_core::model::ModelConfig;
use safnet_core::preclassify::*;
use safnet_core::synth::synth_scene;
use safnet_core::train::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let epochs: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(30);
    let t0 = Instant::now();
    let scene = synth_scene(256, seed, 4, 3).unwrap();
    let truth_changed = scene.truth.data().iter().filter(|&&v| v > 0.0).count();
    println!("scene: {} changed px ({:.1}%)", truth_changed, 100.0 * truth_changed as f64 / 65536.0);

    let di = log_ratio_di(&scene.t1, &scene.t2).unwrap();
    let map = hierarchical_preclassify(&di, 1.2, seed).unwrap();
    println!("preclass: t_c1={} cap={} omega_c={} omega_i={} omega_u={} ({:?} clusters) [{:.1?}]",
        map.t_c1, map.cap, map.count(PixelClass::Changed), map.count(PixelClass::Intermediate),
        map.count(PixelClass::Unchanged), map.cluster_sizes, t0.elapsed());

    // FCM-only baseline: preclass thresholded to binary (changed=255)
    let fcm_map = Grid::new(256, 256, map.labels.iter().map(|&l| if l == PixelClass::Changed { 255.0 } else { 0.0 }).collect()).unwrap();
    let c = confusion(&fcm_map, &scene.truth).unwrap();
    println!("fcm-only: FP={} FN={} PCC={:.3} KC={:.3}", c.fp, c.fn_count, pcc(c.fp, c.fn_count, c.n_c, c.n_u), kappa(c.fp, c.fn_count, c.n_c, c.n_u));

    let samples = select_training_samples(&map, 0.04, seed).unwrap();
    println!("samples: {} ({} changed)", samples.len(), samples.iter().filter(|s| s.label==1).count());

    let model_cfg = ModelConfig { seed, ..ModelConfig::default() };
    let train_cfg = TrainConfig { epochs, seed, r: 13, ..TrainConfig::default() };
    let t1 = Instant::now();
    let out = train(&scene.t1, &scene.t2, &samples, &model_cfg, &train_cfg).unwrap();
    println!("train: {:.1?} ({} epochs), last epochs:", t1.elapsed(), epochs);
    for e in out.log.iter().rev().take(3).rev() {
        println!("  epoch {}: l1={:.4} l2={:.4} loss={:.4} acc={:.4}", e.epoch, e.l1, e.l2, e.loss, e.train_accuracy);
    }

    let t2 = Instant::now();
    let cmap = predict_change_map(&scene.t1, &scene.t2, &out.params, &model_cfg, 13, 256).unwrap();
    let c = confusion(&cmap, &scene.truth).unwrap();
    println!("predict: {:.1?}  FP={} FN={} PCC={:.3} KC={:.3}", t2.elapsed(), c.fp, c.fn_count,
        pcc(c.fp, c.fn_count, c.n_c, c.n_u), kappa(c.fp, c.fn_count, c.n_c, c.n_u));
    if let Ok(vars) = std::env::var("NOISE_VARS") {
        let vars: Vec<f64> = vars.split(',').map(|v| v.parse().unwrap()).collect();
        let ray = std::env::var("NOISE_RAY").is_ok().then(safnet_core::noise::default_rayleigh_scale);
        let entries = safnet_core::eval::noise_sweep(
            &scene.t1, &scene.t2, &scene.truth, &out.params, &model_cfg, 13, 256, &vars, ray, 77, true,
        ).unwrap();
        for e in &entries {
            println!("sweep {}: PCC={:.3} KC={:.3} FP={} FN={}", e.label, e.report.pcc, e.report.kc, e.report.fp, e.report.fn_count);
        }
    }
    println!("total {:.1?}", t0.elapsed());
}
