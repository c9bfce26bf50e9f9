//! Fuzzy c-means on scalar data with deterministic quantile initialization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FcmResult {
    /// Cluster centers in the order they were optimized (not sorted).
    pub centers: Vec<f64>,
    /// Row-major memberships, one simplex row of length `centers.len()` per value.
    pub memberships: Vec<f64>,
    /// Crisp assignment per value (argmax membership).
    pub assignments: Vec<usize>,
    /// Objective value per iteration; non-increasing.
    pub objective_trace: Vec<f64>,
}

impl FcmResult {
    pub fn cluster_count(&self, cluster: usize) -> usize {
        self.assignments.iter().filter(|&&a| a == cluster).count()
    }

    /// Cluster indices ordered by descending center value.
    pub fn clusters_by_descending_center(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.centers.len()).collect();
        order.sort_by(|&a, &b| self.centers[b].partial_cmp(&self.centers[a]).unwrap());
        order
    }
}

/// Alternating-update fuzzy c-means. Centers start on quantiles of the
/// distinct values (plus a vanishing seeded jitter), which makes runs
/// reproducible without a random restart.
pub fn fcm(
    values: &[f64],
    c: usize,
    m: f64,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<FcmResult> {
    if c < 2 {
        return Err(Error::invalid("fcm", format!("need at least 2 clusters, got {}", c)));
    }
    if m <= 1.0 {
        return Err(Error::invalid("fcm", format!("fuzziness {} must exceed 1", m)));
    }
    if values.is_empty() {
        return Err(Error::invalid("fcm", "no data"));
    }

    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < c {
        return Err(Error::TooFewDistinctValues { wanted: c, found: distinct.len() });
    }

    let range = distinct[distinct.len() - 1] - distinct[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<f64> = Vec::with_capacity(c);
    let mut prev_idx: Option<usize> = None;
    for i in 0..c {
        let q = (2 * i + 1) as f64 / (2 * c) as f64;
        let mut idx = (q * (distinct.len() - 1) as f64).round() as usize;
        if let Some(p) = prev_idx {
            idx = idx.max(p + 1).min(distinct.len() - 1);
        }
        prev_idx = Some(idx);
        let jitter = range * 1e-9 * rng.gen_range(-1.0..1.0);
        centers.push(distinct[idx] + jitter);
    }

    let n = values.len();
    let p = 1.0 / (m - 1.0);
    let mut memberships = vec![0.0; n * c];
    let mut trace = Vec::new();
    let mut dists = vec![0.0; c];

    for _ in 0..max_iter {
        // membership update given centers, accumulating the objective
        let mut objective = 0.0;
        for (j, &x) in values.iter().enumerate() {
            let row = &mut memberships[j * c..(j + 1) * c];
            let mut zero_hits = 0usize;
            for (i, d) in dists.iter_mut().enumerate() {
                let diff = x - centers[i];
                *d = diff * diff;
                if *d == 0.0 {
                    zero_hits += 1;
                }
            }
            if zero_hits > 0 {
                let u = 1.0 / zero_hits as f64;
                for (i, r) in row.iter_mut().enumerate() {
                    *r = if dists[i] == 0.0 { u } else { 0.0 };
                }
            } else {
                for i in 0..c {
                    let mut denom = 0.0;
                    for &dk in dists.iter() {
                        let ratio = dists[i] / dk;
                        denom += if (m - 2.0).abs() < 1e-12 { ratio } else { ratio.powf(p) };
                    }
                    row[i] = 1.0 / denom;
                }
            }
            for i in 0..c {
                objective += row[i].powf(m) * dists[i];
            }
        }
        trace.push(objective);

        // center update given memberships
        let mut shift: f64 = 0.0;
        for i in 0..c {
            let mut num = 0.0;
            let mut den = 0.0;
            for (j, &x) in values.iter().enumerate() {
                let w = memberships[j * c + i].powf(m);
                num += w * x;
                den += w;
            }
            if den > 0.0 {
                let next = num / den;
                shift = shift.max((next - centers[i]).abs());
                centers[i] = next;
            }
        }
        if shift < tol {
            break;
        }
    }

    let assignments: Vec<usize> = (0..n)
        .map(|j| {
            let row = &memberships[j * c..(j + 1) * c];
            let mut best = 0;
            for i in 1..c {
                if row[i] > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();

    Ok(FcmResult { centers, memberships, assignments, objective_trace: trace })
}
