//! Reproducible Brownian increments on a dyadic grid.
//!
//! Path `i` of a study with seed `s` draws from ChaCha8 keyed by `s` on
//! stream `i`, so every path is an independent, order-free function of
//! `(s, i)`. Standard normals come from the Box–Muller transform applied to
//! consecutive pairs of 53-bit uniforms. Coarse increments are formed by
//! repeated pairwise summation, which makes every level an exact
//! aggregation of the next finer one.

use std::io::{self, Read, Write};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

/// Identifies the generator in report metadata.
pub const GENERATOR_ID: &str = "chacha8(seed_from_u64,stream=path)+box-muller";

const DUMP_MAGIC: &[u8; 8] = b"SDAEBM01";

#[derive(Debug, Error)]
pub enum PathError {
    #[error("horizon {horizon} is not an integer multiple of 2^-{level}")]
    NonIntegralGrid { horizon: f64, level: u32 },
    #[error("level {level} out of range (finest level is {finest})")]
    LevelOutOfRange { level: u32, finest: u32 },
    #[error("Brownian dimension must be positive")]
    ZeroDimension,
    #[error("malformed lattice dump: {0}")]
    BadDump(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform on `(0, 1]` from the top 53 bits.
pub fn uniform01<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Two independent standard normals via Box–Muller.
pub fn normal_pair<R: RngCore>(rng: &mut R) -> (f64, f64) {
    let u1 = uniform01(rng);
    let u2 = uniform01(rng);
    let radius = (-2.0 * u1.ln()).sqrt();
    let angle = std::f64::consts::TAU * u2;
    (radius * angle.cos(), radius * angle.sin())
}

/// Number of steps of size `2^-level` covering `[0, horizon]`.
pub fn steps_for_level(horizon: f64, level: u32) -> Result<usize, PathError> {
    let steps = horizon * 2f64.powi(level as i32);
    let rounded = steps.round();
    if rounded < 1.0 || (steps - rounded).abs() > 1e-9 * rounded.max(1.0) {
        return Err(PathError::NonIntegralGrid { horizon, level });
    }
    Ok(rounded as usize)
}

/// A `K × m` table of Wiener increments, one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    m: usize,
    data: Vec<f64>,
}

impl Increments {
    pub fn new(m: usize, data: Vec<f64>) -> Self {
        assert!(m >= 1 && data.len().is_multiple_of(m));
        Self { m, data }
    }

    pub fn zeros(m: usize, steps: usize) -> Self {
        Self::new(m, vec![0.0; m * steps])
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.data[k * self.m..(k + 1) * self.m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Sums adjacent pairs of rows: row `k` of the result is `row 2k + row 2k+1`.
    pub fn pairwise_sum(&self) -> Increments {
        assert!(self.len().is_multiple_of(2), "odd number of increments");
        let m = self.m;
        let mut out = Vec::with_capacity(self.data.len() / 2);
        for k in 0..self.len() / 2 {
            let a = self.step(2 * k);
            let b = self.step(2 * k + 1);
            out.extend((0..m).map(|j| a[j] + b[j]));
        }
        Increments::new(m, out)
    }
}

/// Finest-grid Brownian increments for one path.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianLattice {
    pub seed: u64,
    pub stream: u64,
    pub finest_level: u32,
    pub horizon: f64,
    pub increments: Increments,
}

impl BrownianLattice {
    /// Draws `T·2^L` increments of variance `2^-L` for path `stream`.
    pub fn generate(
        seed: u64,
        stream: u64,
        m: usize,
        finest_level: u32,
        horizon: f64,
    ) -> Result<Self, PathError> {
        if m == 0 {
            return Err(PathError::ZeroDimension);
        }
        let steps = steps_for_level(horizon, finest_level)?;
        let sd = 2f64.powi(-(finest_level as i32)).sqrt();
        let total = steps * m;
        let mut rng = stream_rng(seed, stream);
        let mut data = Vec::with_capacity(total + 1);
        while data.len() < total {
            let (z0, z1) = normal_pair(&mut rng);
            data.push(z0 * sd);
            data.push(z1 * sd);
        }
        data.truncate(total);
        Ok(Self {
            seed,
            stream,
            finest_level,
            horizon,
            increments: Increments::new(m, data),
        })
    }

    pub fn dim(&self) -> usize {
        self.increments.dim()
    }

    pub fn delta(&self) -> f64 {
        2f64.powi(-(self.finest_level as i32))
    }

    /// Increments of the same path on the grid of spacing `2^-level`.
    pub fn coarsen(&self, level: u32) -> Result<Increments, PathError> {
        if level > self.finest_level {
            return Err(PathError::LevelOutOfRange {
                level,
                finest: self.finest_level,
            });
        }
        steps_for_level(self.horizon, level)?;
        let mut inc = self.increments.clone();
        for _ in level..self.finest_level {
            inc = inc.pairwise_sum();
        }
        Ok(inc)
    }

    /// Every level from `finest_level` down to `lowest`, finest first.
    pub fn ladder(&self, lowest: u32) -> Result<Vec<Increments>, PathError> {
        if lowest > self.finest_level {
            return Err(PathError::LevelOutOfRange {
                level: lowest,
                finest: self.finest_level,
            });
        }
        steps_for_level(self.horizon, lowest)?;
        let mut out = vec![self.increments.clone()];
        for _ in lowest..self.finest_level {
            let next = out.last().expect("non-empty").pairwise_sum();
            out.push(next);
        }
        Ok(out)
    }

    /// Writes the debug dump: `SDAEBM01`, then `m`, `finest_level` and the
    /// number of time steps as little-endian u64, then the increments as
    /// little-endian f64 in row-major order.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<(), PathError> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        w.write_all(&u64::from(self.finest_level).to_le_bytes())?;
        w.write_all(&(self.increments.len() as u64).to_le_bytes())?;
        for v in self.increments.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump written by [`write_dump`](Self::write_dump). Seed and
    /// stream are not stored and come back as zero.
    pub fn read_dump<R: Read>(mut r: R) -> Result<Self, PathError> {
        let mut header = [0u8; 32];
        r.read_exact(&mut header)?;
        if &header[..8] != DUMP_MAGIC {
            return Err(PathError::BadDump("bad magic".into()));
        }
        let word = |i: usize| u64::from_le_bytes(header[i..i + 8].try_into().expect("8 bytes"));
        let m = word(8) as usize;
        let level = word(16) as u32;
        let steps = word(24) as usize;
        if m == 0 {
            return Err(PathError::BadDump("zero dimension".into()));
        }
        let mut data = Vec::with_capacity(m * steps);
        let mut buf = [0u8; 8];
        for _ in 0..m * steps {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let horizon = steps as f64 * 2f64.powi(-(level as i32));
        Ok(Self {
            seed: 0,
            stream: 0,
            finest_level: level,
            horizon,
            increments: Increments::new(m, data),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed_and_stream() {
        let a = BrownianLattice::generate(42, 3, 2, 8, 1.0).unwrap();
        let b = BrownianLattice::generate(42, 3, 2, 8, 1.0).unwrap();
        assert_eq!(a.increments, b.increments);
        let c = BrownianLattice::generate(42, 4, 2, 8, 1.0).unwrap();
        assert_ne!(a.increments, c.increments);
        let d = BrownianLattice::generate(43, 3, 2, 8, 1.0).unwrap();
        assert_ne!(a.increments, d.increments);
    }

    #[test]
    fn variance_at_reference_level() {
        let lat = BrownianLattice::generate(42, 0, 1, 13, 1.0).unwrap();
        let xs = lat.increments.as_slice();
        assert_eq!(xs.len(), 1 << 13);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let dt = 2f64.powi(-13);
        assert!(var >= 0.9 * dt && var <= 1.1 * dt, "var/dt = {}", var / dt);
        // 5σ band for the sample mean.
        assert!(mean.abs() <= 5.0 * (dt / n).sqrt());
    }

    #[test]
    fn components_uncorrelated() {
        let lat = BrownianLattice::generate(42, 0, 2, 13, 1.0).unwrap();
        let inc = &lat.increments;
        let n = inc.len() as f64;
        let col = |j: usize| (0..inc.len()).map(move |k| inc.step(k)[j]);
        let (m0, m1) = (col(0).sum::<f64>() / n, col(1).sum::<f64>() / n);
        let cov: f64 = col(0).zip(col(1)).map(|(a, b)| (a - m0) * (b - m1)).sum();
        let v0: f64 = col(0).map(|a| (a - m0).powi(2)).sum();
        let v1: f64 = col(1).map(|b| (b - m1).powi(2)).sum();
        let rho = cov / (v0 * v1).sqrt();
        assert!(rho.abs() <= 0.05, "rho = {rho}");
    }

    #[test]
    fn coarsen_identity_and_pairs() {
        let lat = BrownianLattice::generate(7, 1, 2, 6, 1.0).unwrap();
        assert_eq!(lat.coarsen(6).unwrap(), lat.increments);
        let half = lat.coarsen(5).unwrap();
        assert_eq!(half.len(), 32);
        for k in 0..32 {
            for j in 0..2 {
                assert_eq!(
                    half.step(k)[j],
                    lat.increments.step(2 * k)[j] + lat.increments.step(2 * k + 1)[j]
                );
            }
        }
    }

    #[test]
    fn coarsening_is_nested_bitwise() {
        let lat = BrownianLattice::generate(11, 0, 3, 9, 1.0).unwrap();
        for l2 in 1..=9 {
            for l1 in 0..l2 {
                let mut via = lat.coarsen(l2).unwrap();
                for _ in l1..l2 {
                    via = via.pairwise_sum();
                }
                assert_eq!(via, lat.coarsen(l1).unwrap(), "{l1} < {l2}");
            }
        }
        let total = lat.coarsen(0).unwrap();
        assert_eq!(total.len(), 1);
        let ladder = lat.ladder(0).unwrap();
        assert_eq!(ladder.last().unwrap(), &total);
    }

    #[test]
    fn grid_errors() {
        assert!(matches!(
            BrownianLattice::generate(1, 0, 1, 4, 1.03),
            Err(PathError::NonIntegralGrid { .. })
        ));
        let lat = BrownianLattice::generate(1, 0, 1, 4, 1.0).unwrap();
        assert!(matches!(
            lat.coarsen(5),
            Err(PathError::LevelOutOfRange { level: 5, finest: 4 })
        ));
        // T = 1.5 is representable at level 1 but not at level 0.
        let lat = BrownianLattice::generate(1, 0, 1, 4, 1.5).unwrap();
        assert_eq!(lat.coarsen(1).unwrap().len(), 3);
        assert!(lat.coarsen(0).is_err());
        assert!(matches!(
            BrownianLattice::generate(1, 0, 0, 4, 1.0),
            Err(PathError::ZeroDimension)
        ));
    }

    #[test]
    fn dump_round_trip() {
        let lat = BrownianLattice::generate(5, 2, 2, 5, 1.0).unwrap();
        let mut buf = Vec::new();
        lat.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 32 + 8 * 2 * 32);
        assert_eq!(&buf[..8], b"SDAEBM01");
        let back = BrownianLattice::read_dump(buf.as_slice()).unwrap();
        assert_eq!(back.increments, lat.increments);
        assert_eq!(back.finest_level, 5);
        assert_eq!(back.horizon, 1.0);
        buf[0] = b'X';
        assert!(BrownianLattice::read_dump(buf.as_slice()).is_err());
    }
}
