//! Multiplicative noise injection for the robustness sweep: I_n = I * n with
//! a unit-mean Gaussian or Rayleigh multiplier.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Rayleigh scale giving a unit-mean multiplier: mean = scale * sqrt(pi/2).
/// The alternative reading of the sweep parameter (scale = sqrt(pi/2), mean
/// pi/2) is selectable by passing that scale explicitly.
pub fn default_rayleigh_scale() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseModel {
    /// n ~ Normal(1, var/255). `var` is the 8-bit sweep parameter.
    Gaussian { var: f64 },
    /// n ~ Rayleigh(scale).
    Rayleigh { scale: f64 },
}

impl NoiseModel {
    pub fn describe(&self) -> String {
        match self {
            NoiseModel::Gaussian { var } => format!("gaussian(var={})", var),
            NoiseModel::Rayleigh { scale } => format!("rayleigh(scale={:.6})", scale),
        }
    }
}

pub(crate) fn sample_multiplier(model: &NoiseModel, rng: &mut ChaCha8Rng) -> f64 {
    match model {
        NoiseModel::Gaussian { var } => {
            let z: f64 = StandardNormal.sample(rng);
            1.0 + (var / 255.0).sqrt() * z
        }
        NoiseModel::Rayleigh { scale } => {
            let u: f64 = rng.gen_range(0.0..1.0);
            scale * (-2.0 * (1.0 - u).ln()).sqrt()
        }
    }
}

/// Multiply every pixel by a fresh noise draw and clamp back to [0, 255].
pub fn inject_noise(grid: &Grid, model: &NoiseModel, seed: u64) -> Result<Grid> {
    match model {
        NoiseModel::Gaussian { var } if *var < 0.0 => {
            return Err(Error::invalid("inject_noise", format!("negative variance {}", var)));
        }
        NoiseModel::Rayleigh { scale } if *scale <= 0.0 => {
            return Err(Error::invalid("inject_noise", format!("non-positive scale {}", scale)));
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = grid
        .data()
        .iter()
        .map(|&v| ((v as f64) * sample_multiplier(model, &mut rng)).clamp(0.0, 255.0) as f32)
        .collect();
    Grid::new(grid.width(), grid.height(), data)
}
