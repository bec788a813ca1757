//! Particle frame dumps.
//!
//! Binary layout, little-endian: magic `GGDP`, `u32` version, `u64` particle
//! count, then `x y z` as `f64` for every particle, then `vx vy vz` likewise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::mpm::ParticleState;

pub const MAGIC: &[u8; 4] = b"GGDP";
pub const VERSION: u32 = 1;

pub fn write_frame(path: &Path, particles: &ParticleState) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(particles.len() as u64).to_le_bytes())
        .map_err(io)?;
    for field in [&particles.x, &particles.v] {
        for p in field.iter() {
            for c in p.iter() {
                out.write_all(&c.to_le_bytes()).map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)
}

/// Positions and velocities of a binary frame.
pub fn read_frame(path: &Path) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(io)?;
    if &head[..4] != MAGIC {
        return Err(Error::Config(format!(
            "{}: not a GGDP frame",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported frame version {version}",
            path.display()
        )));
    }
    let n = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    let mut read_block = || -> Result<Vec<Vec3>> {
        let mut buf = vec![0u8; n * 24];
        r.read_exact(&mut buf).map_err(io)?;
        Ok(buf
            .chunks_exact(24)
            .map(|c| {
                let f = |i: usize| f64::from_le_bytes(c[i * 8..i * 8 + 8].try_into().unwrap());
                Vec3::new(f(0), f(1), f(2))
            })
            .collect())
    };
    let x = read_block()?;
    let v = read_block()?;
    Ok((x, v))
}

/// Plain-text XYZ file for external viewers.
pub fn write_xyz(path: &Path, particles: &ParticleState) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(out, "{}", particles.len()).map_err(io)?;
    writeln!(out, "granugrad frame").map_err(io)?;
    for p in &particles.x {
        writeln!(out, "P {} {} {}", p.x, p.y, p.z).map_err(io)?;
    }
    out.flush().map_err(io)
}
