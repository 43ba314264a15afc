use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::systems::{Field, Origin, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VicsekParams {
    /// Torus side length; the lattice grid has the same extent (cell size 1).
    pub box_len: f64,
    /// Particles per unit area; N = density * box_len^2.
    pub density: f64,
    /// Constant particle speed.
    pub speed: f64,
    /// Interaction radius.
    pub radius: f64,
    /// Noise intensity; heading noise is eta * U[-pi/2, pi/2].
    pub eta: f64,
}

impl VicsekParams {
    pub fn particle_count(&self) -> usize {
        (self.density * self.box_len * self.box_len).round() as usize
    }
}

/// Self-propelled particles on a torus.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    positions: Vec<[f64; 2]>,
    angles: Vec<f64>,
    speed: f64,
    radius: f64,
    eta: f64,
    box_len: f64,
}

impl ParticleState {
    pub fn random(params: &VicsekParams, seed: u64) -> Self {
        let mut rng = seeds::rng(seed);
        let n = params.particle_count();
        let positions = (0..n)
            .map(|_| {
                [
                    rng.random::<f64>() * params.box_len,
                    rng.random::<f64>() * params.box_len,
                ]
            })
            .collect();
        let angles = (0..n)
            .map(|_| rng.random::<f64>() * 2.0 * std::f64::consts::PI)
            .collect();
        ParticleState {
            positions,
            angles,
            speed: params.speed,
            radius: params.radius,
            eta: params.eta,
            box_len: params.box_len,
        }
    }

    pub fn from_parts(
        positions: Vec<[f64; 2]>,
        angles: Vec<f64>,
        params: &VicsekParams,
    ) -> Result<Self> {
        if positions.len() != angles.len() {
            return Err(Error::Usage(format!(
                "{} positions vs {} angles",
                positions.len(),
                angles.len()
            )));
        }
        if positions
            .iter()
            .flatten()
            .any(|&c| !(0.0..params.box_len).contains(&c))
        {
            return Err(Error::Domain("positions must lie in [0, box_len)".into()));
        }
        Ok(ParticleState {
            positions,
            angles,
            speed: params.speed,
            radius: params.radius,
            eta: params.eta,
            box_len: params.box_len,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn box_len(&self) -> f64 {
        self.box_len
    }

    fn torus_dist_sq(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let mut acc = 0.0;
        for axis in 0..2 {
            let mut d = (a[axis] - b[axis]).abs();
            d = d.min(self.box_len - d);
            acc += d * d;
        }
        acc
    }
}

/// One synchronous update: each heading becomes the circular mean of all
/// headings within the interaction radius (self included) plus
/// `eta * U[-pi/2, pi/2]` noise, then every particle advances by
/// `speed * (cos, sin)` with unit time step, wrapped onto the torus.
pub fn vicsek_step(state: &ParticleState, rng: &mut ChaCha8Rng) -> ParticleState {
    let n = state.len();
    let r_sq = state.radius * state.radius;
    let mut new_angles = Vec::with_capacity(n);
    for i in 0..n {
        let mut sin_sum = 0.0;
        let mut cos_sum = 0.0;
        for j in 0..n {
            if state.torus_dist_sq(state.positions[i], state.positions[j]) <= r_sq {
                sin_sum += state.angles[j].sin();
                cos_sum += state.angles[j].cos();
            }
        }
        let mean = sin_sum.atan2(cos_sum);
        let noise = state.eta * (rng.random::<f64>() - 0.5) * std::f64::consts::PI;
        new_angles.push(mean + noise);
    }
    let mut new_positions = Vec::with_capacity(n);
    for i in 0..n {
        let mut p = state.positions[i];
        p[0] = wrap(p[0] + state.speed * new_angles[i].cos(), state.box_len);
        p[1] = wrap(p[1] + state.speed * new_angles[i].sin(), state.box_len);
        new_positions.push(p);
    }
    ParticleState {
        positions: new_positions,
        angles: new_angles,
        speed: state.speed,
        radius: state.radius,
        eta: state.eta,
        box_len: state.box_len,
    }
}

fn wrap(x: f64, len: f64) -> f64 {
    let mut w = x % len;
    if w < 0.0 {
        w += len;
    }
    // x % len can return len itself after rounding when x is a tiny negative
    if w >= len {
        w -= len;
    }
    w
}

/// Bins particles into unit cells of an `L x L` grid. Channels per cell:
/// particle count, then summed x- and y-velocity components.
pub fn vicsek_latticize(state: &ParticleState, grid: usize) -> Result<Field> {
    if (grid as f64 - state.box_len).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "grid extent {} must equal the torus size {}",
            grid, state.box_len
        )));
    }
    let mut field = Field::zeros(vec![grid, grid], 3);
    for (pos, angle) in state.positions.iter().zip(&state.angles) {
        let ix = (pos[0].floor() as usize).min(grid - 1);
        let iy = (pos[1].floor() as usize).min(grid - 1);
        let vx = state.speed * angle.cos();
        let vy = state.speed * angle.sin();
        let site = [ix, iy];
        field.set(&site, 0, field.get(&site, 0) + 1.0);
        field.set(&site, 1, field.get(&site, 1) + vx);
        field.set(&site, 2, field.get(&site, 2) + vy);
    }
    Ok(field)
}

/// Normalized mean velocity magnitude, 1 = fully ordered, 0 = disordered.
pub fn order_parameter(state: &ParticleState) -> f64 {
    let n = state.len();
    if n == 0 {
        return 0.0;
    }
    let mut sx = 0.0;
    let mut sy = 0.0;
    for a in &state.angles {
        sx += a.cos();
        sy += a.sin();
    }
    (sx * sx + sy * sy).sqrt() / n as f64
}

/// A simulated run: latticized frames plus the order parameter per frame.
pub struct VicsekRun {
    pub trajectory: Trajectory,
    pub phi: Vec<f64>,
}

/// Simulates `discard + frames - 1` steps from a random state and keeps the
/// last `frames` snapshots.
pub fn vicsek_run(
    params: &VicsekParams,
    frames: usize,
    discard: usize,
    seed: u64,
) -> Result<VicsekRun> {
    if frames < 2 {
        return Err(Error::Usage("vicsek_run needs frames >= 2".into()));
    }
    let grid = params.box_len.round() as usize;
    if (grid as f64 - params.box_len).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "box_len {} must be integral for unit lattice cells",
            params.box_len
        )));
    }
    let mut rng = seeds::rng(seeds::child_seed(seed, "vicsek"));
    let mut state = ParticleState::random(params, seeds::child_seed(seed, "init"));
    for _ in 0..discard {
        state = vicsek_step(&state, &mut rng);
    }
    let mut lattice_frames = Vec::with_capacity(frames);
    let mut phi = Vec::with_capacity(frames);
    lattice_frames.push(vicsek_latticize(&state, grid)?);
    phi.push(order_parameter(&state));
    for _ in 1..frames {
        state = vicsek_step(&state, &mut rng);
        lattice_frames.push(vicsek_latticize(&state, grid)?);
        phi.push(order_parameter(&state));
    }
    Ok(VicsekRun {
        trajectory: Trajectory::new(lattice_frames, 1.0, Origin::Micro)?,
        phi,
    })
}
