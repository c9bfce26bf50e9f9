//! Difference-image generation and two-pass hierarchical FCM pseudo-labeling.
//!
//! Pass one (two clusters) sizes the changed class and sets the candidate cap
//! `theta * T_c1`. Pass two (five clusters, sorted by descending center)
//! assigns the top cluster to the changed set, walks the rest into the
//! intermediate set while the running candidate total stays under the cap,
//! and leaves everything else unchanged.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fcm::fcm;
use crate::grid::Grid;

pub const DEFAULT_THETA: f64 = 1.2;

/// Raster encodings used when a preclassification map is written as PGM.
pub const OMEGA_U_PIXEL: u8 = 0;
pub const OMEGA_I_PIXEL: u8 = 128;
pub const OMEGA_C_PIXEL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelClass {
    Unchanged,
    Intermediate,
    Changed,
}

impl PixelClass {
    pub fn to_pixel(self) -> u8 {
        match self {
            PixelClass::Unchanged => OMEGA_U_PIXEL,
            PixelClass::Intermediate => OMEGA_I_PIXEL,
            PixelClass::Changed => OMEGA_C_PIXEL,
        }
    }

    pub fn from_pixel(v: u8) -> Option<Self> {
        match v {
            OMEGA_U_PIXEL => Some(PixelClass::Unchanged),
            OMEGA_I_PIXEL => Some(PixelClass::Intermediate),
            OMEGA_C_PIXEL => Some(PixelClass::Changed),
            _ => None,
        }
    }
}

/// A pseudo-labeled training pixel: `label` 1 for changed, 0 for unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainSample {
    pub row: u32,
    pub col: u32,
    pub label: u8,
}

#[derive(Clone, Debug)]
pub struct PreclassMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<PixelClass>,
    /// Changed-cluster size from the two-cluster pass.
    pub t_c1: usize,
    /// ceil(theta * t_c1), the candidate-pool cap.
    pub cap: usize,
    /// Five-cluster sizes in descending-center order.
    pub cluster_sizes: Vec<usize>,
}

impl PreclassMap {
    pub fn count(&self, class: PixelClass) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Absolute log-ratio per pixel, before rescaling.
pub fn log_ratio_raw(i1: &Grid, i2: &Grid) -> Result<Vec<f64>> {
    if !i1.same_size(i2) {
        return Err(Error::shape(
            "log_ratio_di",
            format!(
                "{}x{} vs {}x{}",
                i1.width(),
                i1.height(),
                i2.width(),
                i2.height()
            ),
        ));
    }
    Ok(i1
        .data()
        .iter()
        .zip(i2.data().iter())
        .map(|(&a, &b)| (((b as f64) + 1.0) / ((a as f64) + 1.0)).ln().abs())
        .collect())
}

/// Difference image: absolute log-ratio linearly rescaled to [0, 255].
pub fn log_ratio_di(i1: &Grid, i2: &Grid) -> Result<Grid> {
    let raw = log_ratio_raw(i1, i2)?;
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let data: Vec<f32> = if max > 0.0 {
        raw.iter().map(|&v| (v / max * 255.0) as f32).collect()
    } else {
        vec![0.0; raw.len()]
    };
    Grid::new(i1.width(), i1.height(), data)
}

/// Three-way pseudo-labeling of a difference image.
pub fn hierarchical_preclassify(di: &Grid, theta: f64, seed: u64) -> Result<PreclassMap> {
    if theta <= 0.0 {
        return Err(Error::invalid("hierarchical_preclassify", "theta must be positive"));
    }
    let values: Vec<f64> = di.data().iter().map(|&v| v as f64).collect();

    // pass one: changed/unchanged split sizes the candidate pool
    let two = fcm(&values, 2, 2.0, 1e-5, 100, seed)?;
    let high = two.clusters_by_descending_center()[0];
    let t_c1 = two.cluster_count(high);
    let cap = (theta * t_c1 as f64).ceil() as usize;

    // pass two: five clusters ranked by descending center. Degenerate
    // difference images with fewer than five distinct values get as many
    // clusters as the data supports (a strictly two-level image then splits
    // exactly into its levels).
    let mut distinct = values.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let c2 = distinct.len().min(5);
    let five = fcm(&values, c2, 2.0, 1e-5, 100, seed.wrapping_add(1))?;
    let order = five.clusters_by_descending_center();
    let sizes: Vec<usize> = order.iter().map(|&i| five.cluster_count(i)).collect();

    let changed_cluster = order[0];
    if sizes[0] > cap {
        return Err(Error::DegeneratePreclass { got: sizes[0], cap });
    }

    // Candidate pool stays strictly under theta * T_c1: a whole cluster joins
    // the intermediate set only if the running total still fits afterwards.
    let mut rank_class = vec![PixelClass::Unchanged; c2];
    rank_class[0] = PixelClass::Changed;
    let mut total = sizes[0];
    for rank in 1..c2 {
        if ((total + sizes[rank]) as f64) < theta * t_c1 as f64 {
            rank_class[rank] = PixelClass::Intermediate;
            total += sizes[rank];
        } else {
            break;
        }
    }

    let mut rank_of_cluster = vec![0usize; c2];
    for (rank, &cluster) in order.iter().enumerate() {
        rank_of_cluster[cluster] = rank;
    }
    let labels: Vec<PixelClass> = five
        .assignments
        .iter()
        .map(|&a| if a == changed_cluster { PixelClass::Changed } else { rank_class[rank_of_cluster[a]] })
        .collect();

    Ok(PreclassMap {
        width: di.width(),
        height: di.height(),
        labels,
        t_c1,
        cap,
        cluster_sizes: sizes,
    })
}

/// Stratified sample of pseudo-labeled pixels for training. Draws from the
/// changed and unchanged sets only, preserving their ratio but giving each
/// class at least 10% of the draw (capped by class size); deterministic per
/// seed. The rest of the eligible pixels form the test pool.
pub fn select_training_samples(
    map: &PreclassMap,
    n_t: f64,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    if !(0.0 < n_t && n_t <= 1.0) {
        return Err(Error::invalid(
            "select_training_samples",
            format!("sample fraction {} outside (0, 1]", n_t),
        ));
    }
    let mut changed: Vec<(u32, u32)> = Vec::new();
    let mut unchanged: Vec<(u32, u32)> = Vec::new();
    for (i, &l) in map.labels.iter().enumerate() {
        let rc = ((i / map.width) as u32, (i % map.width) as u32);
        match l {
            PixelClass::Changed => changed.push(rc),
            PixelClass::Unchanged => unchanged.push(rc),
            PixelClass::Intermediate => {}
        }
    }
    if changed.is_empty() {
        return Err(Error::EmptyClass { class: "changed set" });
    }
    if unchanged.is_empty() {
        return Err(Error::EmptyClass { class: "unchanged set" });
    }

    let eligible = changed.len() + unchanged.len();
    let total = ((n_t * eligible as f64).round() as usize).clamp(1, eligible);
    let floor = ((0.10 * total as f64).ceil() as usize).max(1);
    let mut n_changed =
        ((total as f64 * changed.len() as f64 / eligible as f64).round() as usize).max(floor);
    let mut n_unchanged = total.saturating_sub(n_changed).max(floor);
    n_changed = n_changed.min(changed.len());
    n_unchanged = n_unchanged.min(unchanged.len()).min(total.saturating_sub(n_changed).max(1));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (class_draw, _) = changed.partial_shuffle(&mut rng, n_changed);
    let mut samples: Vec<TrainSample> = class_draw
        .iter()
        .map(|&(row, col)| TrainSample { row, col, label: 1 })
        .collect();
    let (class_draw, _) = unchanged.partial_shuffle(&mut rng, n_unchanged);
    samples.extend(class_draw.iter().map(|&(row, col)| TrainSample { row, col, label: 0 }));
    Ok(samples)
}
