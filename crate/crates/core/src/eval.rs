//! Full-scene change-map prediction, accuracy metrics, and the
//! noise-robustness sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph};
use crate::grid::Grid;
use crate::model::{
    branch_forward, classify, correlation_layer, register_params, ModelConfig, ModelParams,
};
use crate::noise::{inject_noise, NoiseModel};
use crate::preclassify::TrainSample;
use crate::tensor::Tensor;
use crate::train::build_patch_pairs;

pub const CHANGED_PIXEL: f32 = 255.0;
pub const UNCHANGED_PIXEL: f32 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub fp: u64,
    pub fn_count: u64,
    pub oe: u64,
    pub n_c: u64,
    pub n_u: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_count: u64,
    pub oe: u64,
    pub pcc: f64,
    pub kc: f64,
    pub n_c: u64,
    pub n_u: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noise_model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<serde_json::Value>,
}

impl MetricsReport {
    pub fn from_confusion(c: &Confusion) -> Self {
        MetricsReport {
            fp: c.fp,
            fn_count: c.fn_count,
            oe: c.oe,
            pcc: pcc(c.fp, c.fn_count, c.n_c, c.n_u),
            kc: kappa(c.fp, c.fn_count, c.n_c, c.n_u),
            n_c: c.n_c,
            n_u: c.n_u,
            noise_model: None,
            seed: None,
            config: None,
        }
    }
}

fn binary_value(v: f32, what: &'static str) -> Result<bool> {
    if v == CHANGED_PIXEL {
        Ok(true)
    } else if v == UNCHANGED_PIXEL {
        Ok(false)
    } else {
        Err(Error::invalid(what, format!("non-binary pixel value {v}; expected 0 or 255")))
    }
}

/// Pixel-level error counts of a binary change map against binary truth.
pub fn confusion(map: &Grid, truth: &Grid) -> Result<Confusion> {
    if !map.same_size(truth) {
        return Err(Error::shape(
            "confusion",
            format!(
                "{}x{} map vs {}x{} truth",
                map.width(),
                map.height(),
                truth.width(),
                truth.height()
            ),
        ));
    }
    let mut c = Confusion { fp: 0, fn_count: 0, oe: 0, n_c: 0, n_u: 0 };
    for (&m, &t) in map.data().iter().zip(truth.data().iter()) {
        let m = binary_value(m, "confusion map")?;
        let t = binary_value(t, "confusion truth")?;
        match (m, t) {
            (true, false) => c.fp += 1,
            (false, true) => c.fn_count += 1,
            _ => {}
        }
        if t {
            c.n_c += 1;
        } else {
            c.n_u += 1;
        }
    }
    c.oe = c.fp + c.fn_count;
    Ok(c)
}

/// Percentage correct classification.
pub fn pcc(fp: u64, fn_count: u64, n_c: u64, n_u: u64) -> f64 {
    let total = (n_c + n_u) as f64;
    debug_assert!(total > 0.0);
    (total - (fp + fn_count) as f64) / total * 100.0
}

/// Kappa coefficient; 100 at the degenerate chance-agreement-1 point.
pub fn kappa(fp: u64, fn_count: u64, n_c: u64, n_u: u64) -> f64 {
    let total = (n_c + n_u) as f64;
    let predicted_changed = (n_c + fp) as f64 - fn_count as f64;
    let predicted_unchanged = (n_u + fn_count) as f64 - fp as f64;
    let pre = (predicted_changed * n_c as f64 + predicted_unchanged * n_u as f64) / (total * total);
    if (1.0 - pre).abs() < 1e-15 {
        return 100.0;
    }
    let pcc_frac = pcc(fp, fn_count, n_c, n_u) / 100.0;
    (pcc_frac - pre) / (1.0 - pre) * 100.0
}

/// Classify every pixel of the scene pair from its resized patch pair using
/// eval-mode batch statistics. Batched; deterministic.
pub fn predict_change_map(
    i1: &Grid,
    i2: &Grid,
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    r: usize,
    batch: usize,
) -> Result<Grid> {
    if !i1.same_size(i2) {
        return Err(Error::shape("predict_change_map", "temporal images differ in size"));
    }
    if batch == 0 {
        return Err(Error::invalid("predict_change_map", "batch must be positive"));
    }
    let (w, h) = (i1.width(), i1.height());
    let mut params = params.clone();
    let mut out = vec![UNCHANGED_PIXEL; w * h];

    let all: Vec<TrainSample> = (0..w * h)
        .map(|i| TrainSample { row: (i / w) as u32, col: (i % w) as u32, label: 0 })
        .collect();

    for (b, chunk) in all.chunks(batch).enumerate() {
        let (x1, x2) = build_patch_pairs(i1, i2, chunk, r)?;
        let n = chunk.len();
        let mut g = Graph::<f32>::new();
        let nodes = register_params(&mut g, &params);
        let in1 = g.leaf(Tensor::new(vec![n, 1, 28, 28], x1)?);
        let in2 = g.leaf(Tensor::new(vec![n, 1, 28, 28], x2)?);
        // prediction only needs the classification head; the contrastive
        // projections are left out of the graph
        let fv1 = branch_forward(&mut g, &nodes, &mut params, cfg, in1, BnMode::Eval)?;
        let fv2 = branch_forward(&mut g, &nodes, &mut params, cfg, in2, BnMode::Eval)?;
        let features = if cfg.use_correlation {
            correlation_layer(&mut g, fv1.fused, fv2.fused)?
        } else {
            let g1 = g.global_avg_pool(fv1.fused)?;
            let g2 = g.global_avg_pool(fv2.fused)?;
            g.concat2(g1, g2)?
        };
        let probs_id = classify(&mut g, &nodes, features)?;
        let probs = g.value(probs_id).data();
        for (j, _) in chunk.iter().enumerate() {
            if probs[j * 2 + 1] > probs[j * 2] {
                out[b * batch + j] = CHANGED_PIXEL;
            }
        }
    }
    Grid::new(w, h, out)
}

/// One entry of the noise-robustness sweep.
#[derive(Clone, Debug)]
pub struct SweepEntry {
    pub label: String,
    pub model: NoiseModel,
    pub report: MetricsReport,
}

/// Evaluate the trained model under each noise setting. Noise goes into both
/// acquisitions with independent seeds unless `both_images` is false, in
/// which case only the first image is polluted.
#[allow(clippy::too_many_arguments)]
pub fn noise_sweep(
    i1: &Grid,
    i2: &Grid,
    truth: &Grid,
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    r: usize,
    batch: usize,
    vars: &[f64],
    rayleigh_scale: Option<f64>,
    seed: u64,
    both_images: bool,
) -> Result<Vec<SweepEntry>> {
    let mut settings: Vec<(String, NoiseModel)> = vars
        .iter()
        .map(|&v| (format!("Var={v}"), NoiseModel::Gaussian { var: v }))
        .collect();
    if let Some(scale) = rayleigh_scale {
        settings.push((format!("Ray(scale={scale:.4})"), NoiseModel::Rayleigh { scale }));
    }

    let mut out = Vec::with_capacity(settings.len());
    for (idx, (label, model)) in settings.into_iter().enumerate() {
        let s1 = seed.wrapping_add(1000 * idx as u64);
        let s2 = s1.wrapping_add(1);
        let n1 = inject_noise(i1, &model, s1)?;
        let n2 = if both_images { inject_noise(i2, &model, s2)? } else { i2.clone() };
        let map = predict_change_map(&n1, &n2, params, cfg, r, batch)?;
        let conf = confusion(&map, truth)?;
        let mut report = MetricsReport::from_confusion(&conf);
        report.noise_model = Some(model.describe());
        report.seed = Some(seed);
        out.push(SweepEntry { label, model, report });
    }
    Ok(out)
}
