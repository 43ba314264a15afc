//! Ground-truth generators: elementary cellular automata, conserved 1D
//! diffusion (finite-difference and analytic), and the latticeized 2D
//! Vicsek model. Simulators are pure functions of (state, seed).

mod ca;
mod diffusion;
mod io;
mod vicsek;

pub use ca::{eca_run, eca_step, CARule};
pub use diffusion::{
    diffusion_analytic, diffusion_dataset, diffusion_step_fd, diffusion_trajectory,
    DiffusionConfig, DiffusionInit,
};
pub use io::{load_trajectory, save_trajectory, write_pgm, write_trajectory_pgm};
pub use vicsek::{
    order_parameter, vicsek_latticize, vicsek_run, vicsek_step, ParticleState, VicsekParams,
    VicsekRun,
};

use serde::{Deserialize, Serialize};

use crate::error::{dim_error, Error, Result};
use crate::tensor::Tensor;

/// A d-dimensional periodic lattice snapshot with feature channels.
/// Values are stored row-major as `[site_1, .., site_d, channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    extents: Vec<usize>,
    channels: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn new(extents: Vec<usize>, channels: usize, values: Vec<f64>) -> Result<Self> {
        let sites: usize = extents.iter().product();
        if sites * channels != values.len() {
            return Err(dim_error(
                format!(
                    "{} values for extents {extents:?} x {channels} channels",
                    sites * channels
                ),
                values.len(),
            ));
        }
        if extents.is_empty() || extents.len() > 2 {
            return Err(Error::Config(format!(
                "fields are 1D or 2D, got extents {extents:?}"
            )));
        }
        Ok(Field {
            extents,
            channels,
            values,
        })
    }

    pub fn zeros(extents: Vec<usize>, channels: usize) -> Self {
        let sites: usize = extents.iter().product();
        Field {
            values: vec![0.0; sites * channels],
            extents,
            channels,
        }
    }

    pub fn dims(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sites(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, site: &[usize], channel: usize) -> f64 {
        self.values[self.flat_index(site, channel)]
    }

    pub fn set(&mut self, site: &[usize], channel: usize, value: f64) {
        let idx = self.flat_index(site, channel);
        self.values[idx] = value;
    }

    fn flat_index(&self, site: &[usize], channel: usize) -> usize {
        debug_assert_eq!(site.len(), self.extents.len());
        let mut flat = 0;
        for (a, &c) in site.iter().enumerate() {
            debug_assert!(c < self.extents[a]);
            flat = flat * self.extents[a] + c;
        }
        flat * self.channels + channel
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.extents == other.extents && self.channels == other.channels
    }

    /// Tensor view with shape `[extents.., channels]`.
    pub fn to_tensor(&self) -> Tensor {
        let mut shape = self.extents.clone();
        shape.push(self.channels);
        Tensor::new(shape, self.values.clone()).expect("field shape is consistent")
    }

    /// Inverse of [`Field::to_tensor`]; the trailing axis is channels.
    pub fn from_tensor(tensor: &Tensor) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() < 2 {
            return Err(dim_error("[extents.., channels]", shape));
        }
        let (extents, channels) = shape.split_at(shape.len() - 1);
        Field::new(extents.to_vec(), channels[0], tensor.values().to_vec())
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Micro,
    Macro,
}

/// Time-ordered sequence of shape-congruent fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    frames: Vec<Field>,
    dt: f64,
    origin: Origin,
}

impl Trajectory {
    pub fn new(frames: Vec<Field>, dt: f64, origin: Origin) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Usage(format!(
                "a trajectory needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let first = frames[0].clone();
        if let Some(bad) = frames.iter().find(|f| !f.same_shape(&first)) {
            return Err(dim_error(
                (first.extents(), first.channels()),
                (bad.extents(), bad.channels()),
            ));
        }
        Ok(Trajectory { frames, dt, origin })
    }

    pub fn frames(&self) -> &[Field] {
        &self.frames
    }

    pub fn frame(&self, idx: usize) -> &Field {
        &self.frames[idx]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_round_trips_through_tensor() {
        let f = Field::new(vec![2, 3], 2, (0..12).map(|v| v as f64).collect()).unwrap();
        let t = f.to_tensor();
        assert_eq!(t.shape(), &[2, 3, 2]);
        assert_eq!(Field::from_tensor(&t).unwrap(), f);
        assert_eq!(f.get(&[1, 2], 1), 11.0);
    }

    #[test]
    fn trajectory_rejects_short_or_ragged_input() {
        let f = Field::zeros(vec![4], 1);
        assert!(Trajectory::new(vec![f.clone()], 1.0, Origin::Micro).is_err());
        let g = Field::zeros(vec![5], 1);
        assert!(Trajectory::new(vec![f, g], 1.0, Origin::Micro).is_err());
    }
}
