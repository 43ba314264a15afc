use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::{Field, Origin, Trajectory};

#[derive(Serialize, Deserialize)]
struct TrajectoryHeader {
    dims: usize,
    extents: Vec<usize>,
    channels: usize,
    frames: usize,
    dt: f64,
    origin: Origin,
}

/// Writes a trajectory as a one-line JSON header followed by one CSV row
/// per frame (row-major values, shortest round-tripping decimals).
pub fn save_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let first = traj.frame(0);
    let header = TrajectoryHeader {
        dims: first.dims(),
        extents: first.extents().to_vec(),
        channels: first.channels(),
        frames: traj.len(),
        dt: traj.dt(),
        origin: traj.origin(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for frame in traj.frames() {
        let mut row = String::with_capacity(frame.values().len() * 8);
        for (i, v) in frame.values().iter().enumerate() {
            if i > 0 {
                row.push(',');
            }
            row.push_str(&format!("{v:?}"));
        }
        writeln!(w, "{row}")?;
    }
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: TrajectoryHeader = serde_json::from_str(header_line.trim())?;
    let mut frames = Vec::with_capacity(header.frames);
    for (row_idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("row {row_idx}: bad value `{tok}`: {e}")))
            })
            .collect::<Result<_>>()?;
        frames.push(Field::new(
            header.extents.clone(),
            header.channels,
            values,
        )?);
    }
    if frames.len() != header.frames {
        return Err(Error::Config(format!(
            "header announced {} frames, file holds {}",
            header.frames,
            frames.len()
        )));
    }
    Trajectory::new(frames, header.dt, header.origin)
}

/// ASCII PGM (P2) with values min-max scaled to 0..255.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Usage(format!(
            "pgm needs {} values for {width}x{height}, got {}",
            width * height,
            values.len()
        )));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "P2")?;
    writeln!(w, "{width} {height}")?;
    writeln!(w, "255")?;
    for row in 0..height {
        let mut line = String::with_capacity(width * 4);
        for col in 0..width {
            if col > 0 {
                line.push(' ');
            }
            let v = ((values[row * width + col] - lo) / span * 255.0).round() as u32;
            line.push_str(&v.min(255).to_string());
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// One image per trajectory: 1D systems render as a time-by-space raster,
/// 2D systems as a horizontal strip of channel-0 frames.
pub fn write_trajectory_pgm(traj: &Trajectory, channel: usize, path: &Path) -> Result<()> {
    let first = traj.frame(0);
    match first.dims() {
        1 => {
            let width = first.extents()[0];
            let height = traj.len();
            let mut values = Vec::with_capacity(width * height);
            for frame in traj.frames() {
                for site in 0..width {
                    values.push(frame.get(&[site], channel));
                }
            }
            write_pgm(path, width, height, &values)
        }
        2 => {
            let (ex, ey) = (first.extents()[0], first.extents()[1]);
            let width = (ex + 1) * traj.len() - 1;
            let height = ey;
            let mut values = vec![0.0; width * height];
            for (f, frame) in traj.frames().iter().enumerate() {
                for x in 0..ex {
                    for y in 0..ey {
                        // image row = y, column = frame offset + x
                        values[y * width + f * (ex + 1) + x] = frame.get(&[x, y], channel);
                    }
                }
            }
            write_pgm(path, width, height, &values)
        }
        d => Err(Error::Config(format!("cannot render {d}-dimensional field"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{eca_run, CARule};

    #[test]
    fn trajectory_save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.traj");
        let init = Field::new(vec![8], 1, vec![0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let traj = eca_run(&CARule::new(110), &init, 5).unwrap();
        save_trajectory(&traj, &path).unwrap();
        let back = load_trajectory(&path).unwrap();
        assert_eq!(back.len(), traj.len());
        assert_eq!(back.dt(), traj.dt());
        assert_eq!(back.origin(), traj.origin());
        for (a, b) in traj.frames().iter().zip(back.frames()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn pgm_has_p2_header_and_scaled_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        write_pgm(&path, 2, 2, &[0.0, 0.5, 0.75, 1.0]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("2 2"));
        assert_eq!(lines.next(), Some("255"));
        assert_eq!(lines.next(), Some("0 128"));
        assert_eq!(lines.next(), Some("191 255"));
    }
}
