use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::systems::{Field, Origin, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DiffusionInit {
    /// Unit mass at one cell; `site: None` draws the cell from the seed.
    Delta { site: Option<usize> },
    /// Independent U[0,1) per cell.
    UniformRandom,
    /// exp(-(x-center)^2 / (2 sigma^2)) sampled per cell.
    GaussianBump { center: f64, sigma: f64 },
}

/// Conserved 1D diffusion on a periodic domain. Frames are recorded at
/// integer times regardless of the simulation step, so data sets produced
/// with different `dt` share frame spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    /// Diffusion coefficient (length^2 / time).
    pub d_coeff: f64,
    /// Simulation time step; `None` selects the analytic solution.
    pub dt: Option<f64>,
    /// Space step.
    pub dx: f64,
    /// Domain size; `length / dx` must be integral.
    pub length: f64,
    /// Final time; frames run t = 0, 1, .., t_end.
    pub t_end: f64,
    pub init: DiffusionInit,
}

impl DiffusionConfig {
    pub fn cells(&self) -> usize {
        (self.length / self.dx).round() as usize
    }

    /// Explicit-scheme stability number D*dt/dx^2.
    pub fn stability(&self) -> Option<f64> {
        self.dt.map(|dt| self.d_coeff * dt / (self.dx * self.dx))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_coeff <= 0.0 || self.dx <= 0.0 || self.length <= 0.0 || self.t_end < 1.0 {
            return Err(Error::Config(format!(
                "diffusion config needs positive D, dx, length and t_end >= 1, got {self:?}"
            )));
        }
        let cells = self.length / self.dx;
        if (cells - cells.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "length {} is not an integer multiple of dx {}",
                self.length, self.dx
            )));
        }
        if let Some(dt) = self.dt {
            if dt <= 0.0 {
                return Err(Error::Config(format!("dt must be positive, got {dt}")));
            }
            let r = self.d_coeff * dt / (self.dx * self.dx);
            if r > 0.5 {
                return Err(Error::Config(format!(
                    "explicit scheme unstable: D*dt/dx^2 = {r} > 0.5"
                )));
            }
            let steps_per_frame = 1.0 / dt;
            if (steps_per_frame - steps_per_frame.round()).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "dt {dt} does not divide the unit frame spacing"
                )));
            }
        }
        Ok(())
    }

    pub fn initial_field(&self, seed: u64) -> Field {
        let n = self.cells();
        let mut rng = seeds::rng(seed);
        let values = match self.init {
            DiffusionInit::Delta { site } => {
                let site = site.unwrap_or_else(|| rng.random_range(0..n));
                let mut v = vec![0.0; n];
                v[site % n] = 1.0;
                v
            }
            DiffusionInit::UniformRandom => (0..n).map(|_| rng.random::<f64>()).collect(),
            DiffusionInit::GaussianBump { center, sigma } => (0..n)
                .map(|i| {
                    let x = i as f64 * self.dx;
                    let mut d = (x - center).abs();
                    d = d.min(self.length - d);
                    (-d * d / (2.0 * sigma * sigma)).exp()
                })
                .collect(),
        };
        Field::new(vec![n], 1, values).expect("consistent shape")
    }
}

/// One explicit finite-difference step,
/// `C'_i = C_i + r (C_{i+1} - 2 C_i + C_{i-1})`, periodic indices.
/// The stencil coefficients sum to one, so total mass is preserved.
pub fn diffusion_step_fd(field: &Field, cfg: &DiffusionConfig) -> Result<Field> {
    cfg.validate()?;
    let r = cfg
        .stability()
        .ok_or_else(|| Error::Config("diffusion_step_fd needs a finite dt".into()))?;
    let n = field.sites();
    let x = field.values();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let left = x[(i + n - 1) % n];
        let right = x[(i + 1) % n];
        out[i] = x[i] + r * (right - 2.0 * x[i] + left);
    }
    Field::new(vec![n], 1, out)
}

/// Closed-form solution: circular convolution of `init` with the heat
/// kernel `exp(-x^2 / 4Dt) / sqrt(4 pi D t)`, periodized over the domain,
/// sampled at the grid and renormalized so total mass is exactly preserved.
pub fn diffusion_analytic(init: &Field, cfg: &DiffusionConfig, t: f64) -> Result<Field> {
    if t <= 0.0 {
        return Err(Error::Domain(format!(
            "analytic diffusion needs t > 0, got {t}"
        )));
    }
    let n = init.sites();
    let sigma_sq = 2.0 * cfg.d_coeff * t;
    // periodize: sum image charges until the tail is below f64 resolution
    let images = 1 + (10.0 * sigma_sq.sqrt() / cfg.length).ceil() as i64;
    let mut kernel = vec![0.0; n];
    for (j, k) in kernel.iter_mut().enumerate() {
        let mut acc = 0.0;
        for m in -images..=images {
            let x = j as f64 * cfg.dx + m as f64 * cfg.length;
            acc += (-x * x / (2.0 * sigma_sq)).exp();
        }
        *k = acc;
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let x = init.values();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for (j, k) in kernel.iter().enumerate() {
            acc += k * x[(i + n - j) % n];
        }
        out[i] = acc;
    }
    Field::new(vec![n], 1, out)
}

/// One trajectory with frames at t = 0, 1, .., t_end following `cfg`
/// (finite differences when `dt` is set, analytic otherwise).
pub fn diffusion_trajectory(cfg: &DiffusionConfig, seed: u64) -> Result<Trajectory> {
    cfg.validate()?;
    let frames_after_init = cfg.t_end.round() as usize;
    let init = cfg.initial_field(seed);
    let mut frames = Vec::with_capacity(frames_after_init + 1);
    frames.push(init.clone());
    match cfg.dt {
        Some(dt) => {
            let steps_per_frame = (1.0 / dt).round() as usize;
            let mut current = init;
            for _ in 0..frames_after_init {
                for _ in 0..steps_per_frame {
                    current = diffusion_step_fd(&current, cfg)?;
                }
                frames.push(current.clone());
            }
        }
        None => {
            for frame in 1..=frames_after_init {
                frames.push(diffusion_analytic(&init, cfg, frame as f64)?);
            }
        }
    }
    Trajectory::new(frames, 1.0, Origin::Micro)
}

/// A set of independent trajectories with seeds derived from `seed`.
pub fn diffusion_dataset(cfg: &DiffusionConfig, count: usize, seed: u64) -> Result<Vec<Trajectory>> {
    (0..count)
        .map(|i| diffusion_trajectory(cfg, seeds::child_seed(seed, &format!("traj{i}"))))
        .collect()
}
