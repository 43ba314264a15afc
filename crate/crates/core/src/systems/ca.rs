use rand::Rng;

use crate::error::{Error, Result};
use crate::seeds;
use crate::systems::{Field, Origin, Trajectory};

/// One of the 256 nearest-neighbor binary rules, Wolfram numbering:
/// `lookup[4*left + 2*center + right]` is bit k of the rule number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CARule {
    number: u8,
    lookup: [f64; 8],
}

impl CARule {
    pub fn new(number: u8) -> Self {
        let mut lookup = [0.0; 8];
        for (k, slot) in lookup.iter_mut().enumerate() {
            *slot = ((number >> k) & 1) as f64;
        }
        CARule { number, lookup }
    }

    pub fn number(&self) -> u8 {
        self.number
    }

    pub fn output(&self, left: bool, center: bool, right: bool) -> f64 {
        let k = (left as usize) << 2 | (center as usize) << 1 | right as usize;
        self.lookup[k]
    }
}

/// Advances a binary 1D field one step under `rule` with periodic boundary.
pub fn eca_step(state: &Field, rule: &CARule) -> Result<Field> {
    if state.dims() != 1 || state.channels() != 1 {
        return Err(Error::Domain(format!(
            "elementary CA states are 1D single-channel, got extents {:?} x {} channels",
            state.extents(),
            state.channels()
        )));
    }
    if !state.is_binary() {
        return Err(Error::Domain(
            "elementary CA states must contain only 0.0 and 1.0".into(),
        ));
    }
    let n = state.sites();
    let x = state.values();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let left = x[(i + n - 1) % n] != 0.0;
        let center = x[i] != 0.0;
        let right = x[(i + 1) % n] != 0.0;
        out[i] = rule.output(left, center, right);
    }
    Field::new(vec![n], 1, out)
}

/// Rolls out `steps` updates; the result holds `steps + 1` frames.
pub fn eca_run(rule: &CARule, init: &Field, steps: usize) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::Usage("eca_run needs steps >= 1".into()));
    }
    let mut frames = Vec::with_capacity(steps + 1);
    frames.push(init.clone());
    for _ in 0..steps {
        let next = eca_step(frames.last().expect("non-empty"), rule)?;
        frames.push(next);
    }
    Trajectory::new(frames, 1.0, Origin::Micro)
}

/// Uniform random bits per site, fresh per trajectory.
pub fn random_bits(extent: usize, seed: u64) -> Field {
    let mut rng = seeds::rng(seed);
    let values = (0..extent)
        .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
        .collect();
    Field::new(vec![extent], 1, values).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(bits: &[u8]) -> Field {
        Field::new(
            vec![bits.len()],
            1,
            bits.iter().map(|&b| b as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rule_0_maps_everything_to_zero() {
        let rule = CARule::new(0);
        let out = eca_step(&field(&[1, 0, 1, 1, 0]), &rule).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rule_204_is_identity() {
        let rule = CARule::new(204);
        let state = field(&[1, 0, 1, 1, 0, 0, 1]);
        let out = eca_step(&state, &rule).unwrap();
        assert_eq!(out, state);
    }

    #[test]
    fn rule_90_from_single_seed() {
        let rule = CARule::new(90);
        let out = eca_step(&field(&[0, 0, 1, 0, 0]), &rule).unwrap();
        assert_eq!(out.values(), &[0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn rule_90_rollout_is_pascals_triangle_mod_2() {
        // brute-force oracle: iterate the rule table directly
        let rule = CARule::new(90);
        let n = 9;
        let mut init = vec![0.0; n];
        init[4] = 1.0;
        let traj = eca_run(&rule, &Field::new(vec![n], 1, init).unwrap(), 4).unwrap();
        let binom_mod2 = |r: usize, c: i64| -> f64 {
            if c < 0 || c > r as i64 {
                return 0.0;
            }
            // Lucas: C(r,c) odd iff c's bits are a subset of r's
            let c = c as usize;
            if (!r & c) == 0 {
                1.0
            } else {
                0.0
            }
        };
        for (row, frame) in traj.frames().iter().enumerate() {
            for i in 0..n {
                let offset = i as i64 - 4 + row as i64;
                assert_eq!(
                    frame.values()[i],
                    binom_mod2(2 * row, offset),
                    "row {row} site {i}"
                );
            }
        }
    }

    #[test]
    fn rule_255_saturates_after_one_step() {
        let rule = CARule::new(255);
        let traj = eca_run(&rule, &field(&[0, 1, 0, 0]), 3).unwrap();
        for frame in &traj.frames()[1..] {
            assert!(frame.values().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn non_binary_input_is_a_domain_error() {
        let rule = CARule::new(30);
        let state = Field::new(vec![3], 1, vec![0.0, 0.5, 1.0]).unwrap();
        match eca_step(&state, &rule) {
            Err(Error::Domain(_)) => {}
            other => panic!("expected Domain error, got {other:?}"),
        }
    }
}
