//! Seeded randomness and the synthetic 2-D targets.
//!
//! [`Rng`] wraps ChaCha8, a counter-based generator: a `(seed, stream)`
//! pair fully determines the output, and independent streams are derived
//! from one master seed by selecting a different ChaCha stream id rather
//! than by sharing a generator. Normals come from the polar-free
//! Box–Muller transform with the second variate of each pair cached.
//!
//! The datasets follow the usual synthetic-benchmark layout:
//!
//! - moons: upper arc `(cos θ, sin θ)`, lower arc `(1 - cos θ, 0.5 - sin θ)`,
//!   `θ ~ U[0, π]`, arc chosen with probability 1/2;
//! - circles: radii 1.0 and 0.5, angle uniform, circle chosen with
//!   probability 1/2;
//!
//! both with isotropic Gaussian noise of standard deviation `noise_std`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deterministic random number generator.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    cached_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    /// Independent stream `stream` of the master seed `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            inner,
            cached_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n` (multiply-shift; bias below `n / 2^64`).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli_half(&mut self) -> bool {
        self.inner.next_u64() >> 63 == 1
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Draws `mean + sqrt(cov_diag) ⊙ ε` with `ε ~ N(0, I)`.
pub fn sample_normal(rng: &mut Rng, mean: &[f64], cov_diag: &[f64]) -> Result<Vec<f64>> {
    crate::error::check_dim(mean.len(), cov_diag.len())?;
    if let Some(c) = cov_diag.iter().find(|c| !(**c >= 0.0)) {
        return Err(Error::Domain(format!("covariance entry {c} is negative")));
    }
    Ok(mean
        .iter()
        .zip(cov_diag)
        .map(|(&m, &c)| {
            let eps = rng.normal();
            if c == 0.0 {
                m
            } else {
                m + c.sqrt() * eps
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Moons,
    Circles,
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moons" => Ok(Self::Moons),
            "circles" => Ok(Self::Circles),
            other => Err(Error::config("name", format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: DatasetName,
    pub points: Vec<[f64; 2]>,
    pub noise_std: f64,
    /// Label of the arc/circle each point was drawn from (0 = outer/upper).
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn to_vectors(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p.to_vec()).collect()
    }
}

/// JSON sidecar written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: DatasetName,
    pub n: usize,
    pub noise_std: f64,
    pub seed: u64,
}

fn check_gen_args(n: usize, noise_std: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::config("n", "dataset size must be at least 1"));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::config("noise_std", "must be finite and non-negative"));
    }
    Ok(())
}

fn add_noise(rng: &mut Rng, p: [f64; 2], noise_std: f64) -> [f64; 2] {
    let (e0, e1) = (rng.normal(), rng.normal());
    if noise_std == 0.0 {
        p
    } else {
        [p[0] + noise_std * e0, p[1] + noise_std * e1]
    }
}

pub fn make_moons(n: usize, noise_std: f64, rng: &mut Rng) -> Result<Dataset> {
    check_gen_args(n, noise_std)?;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let lower = rng.bernoulli_half();
        let theta = PI * rng.uniform();
        let p = if lower {
            [1.0 - theta.cos(), 0.5 - theta.sin()]
        } else {
            [theta.cos(), theta.sin()]
        };
        points.push(add_noise(rng, p, noise_std));
        labels.push(lower as u8);
    }
    Ok(Dataset {
        name: DatasetName::Moons,
        points,
        noise_std,
        labels,
    })
}

pub const CIRCLES_INNER_RADIUS: f64 = 0.5;

pub fn make_circles(n: usize, noise_std: f64, rng: &mut Rng) -> Result<Dataset> {
    check_gen_args(n, noise_std)?;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let inner = rng.bernoulli_half();
        let theta = 2.0 * PI * rng.uniform();
        let r = if inner { CIRCLES_INNER_RADIUS } else { 1.0 };
        let p = [r * theta.cos(), r * theta.sin()];
        points.push(add_noise(rng, p, noise_std));
        labels.push(inner as u8);
    }
    Ok(Dataset {
        name: DatasetName::Circles,
        points,
        noise_std,
        labels,
    })
}

pub fn generate(name: DatasetName, n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    let mut rng = Rng::new(seed);
    match name {
        DatasetName::Moons => make_moons(n, noise_std, &mut rng),
        DatasetName::Circles => make_circles(n, noise_std, &mut rng),
    }
}

/// Writes `z1,z2` rows to `csv_path` and the metadata sidecar to the same
/// path with a `.json` extension.
pub fn write_dataset(dataset: &Dataset, seed: u64, csv_path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(csv_path)?);
    writeln!(out, "z1,z2")?;
    for p in &dataset.points {
        writeln!(out, "{},{}", p[0], p[1])?;
    }
    out.flush()?;
    let meta = DatasetMeta {
        name: dataset.name,
        n: dataset.n(),
        noise_std: dataset.noise_std,
        seed,
    };
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(csv_path.with_extension("json"), json)?;
    Ok(())
}

/// Reads the points of a `z1,...,zd` CSV. Returns an empty list for a
/// header-only file; callers decide whether that is acceptable.
pub fn read_points_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse { offset: 0, message: "missing CSV header".into() })?;
    let d = header.split(',').count();
    let mut offset = header.len() + 1;
    let mut points = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            offset += line.len() + 1;
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match row {
            Ok(row) if row.len() == d && row.iter().all(|v| v.is_finite()) => points.push(row),
            _ => {
                return Err(Error::Parse {
                    offset,
                    message: format!("expected {d} finite numbers, got `{line}`"),
                })
            }
        }
        offset += line.len() + 1;
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seeds_give_identical_streams() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        let mut c = Rng::stream(42, 1);
        assert_ne!(Rng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn uniform_equidistribution_smoke() {
        let mut rng = Rng::new(7);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            s += u;
            s2 += u * u;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        // sd(mean) = sqrt(1/12 / n); sd(var) ≈ sqrt(1/180 / n).
        assert!((mean - 0.5).abs() < 4.0 * (1.0 / 12.0 / n as f64).sqrt());
        assert!((var - 1.0 / 12.0).abs() < 4.0 * (1.0 / 180.0 / n as f64).sqrt());
    }

    #[test]
    fn normal_moments_within_clt_bounds() {
        let mut rng = Rng::new(3);
        let n = 100_000;
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| sample_normal(&mut rng, &[0.0, 0.0], &[1.0, 1.0]).unwrap())
            .collect();
        for k in 0..2 {
            let mean = draws.iter().map(|x| x[k]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.013, "mean {mean}");
            assert!((var - 1.0).abs() < 0.02, "var {var}");
        }
    }

    #[test]
    fn zero_covariance_returns_mean() {
        let mut rng = Rng::new(1);
        let x = sample_normal(&mut rng, &[1.5, -2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(x, vec![1.5, -2.0]);
        assert!(sample_normal(&mut rng, &[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let ds = generate(DatasetName::Moons, 2000, 0.0, 11).unwrap();
        for (p, &l) in ds.points.iter().zip(&ds.labels) {
            let r = if l == 0 {
                (p[0].powi(2) + p[1].powi(2)).sqrt() - 1.0
            } else {
                ((1.0 - p[0]).powi(2) + (0.5 - p[1]).powi(2)).sqrt() - 1.0
            };
            assert!(r.abs() < 1e-12, "residual {r}");
            let upper_half = if l == 0 { p[1] } else { 0.5 - p[1] };
            assert!(upper_half >= -1e-12);
        }
    }

    #[test]
    fn moons_mean_matches_arc_average() {
        let n = 100_000;
        let ds = generate(DatasetName::Moons, n, 0.05, 5).unwrap();
        let mx = ds.points.iter().map(|p| p[0]).sum::<f64>() / n as f64;
        let my = ds.points.iter().map(|p| p[1]).sum::<f64>() / n as f64;
        let vx = ds.points.iter().map(|p| (p[0] - mx).powi(2)).sum::<f64>() / n as f64;
        let vy = ds.points.iter().map(|p| (p[1] - my).powi(2)).sum::<f64>() / n as f64;
        assert!((mx - 0.5).abs() < 4.0 * (vx / n as f64).sqrt(), "mx {mx}");
        assert!((my - 0.25).abs() < 4.0 * (vy / n as f64).sqrt(), "my {my}");
    }

    #[test]
    fn noiseless_circles_have_two_radii_and_balanced_classes() {
        let n = 10_000;
        let ds = generate(DatasetName::Circles, n, 0.0, 9).unwrap();
        for p in &ds.points {
            let r = (p[0].powi(2) + p[1].powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12 || (r - 0.5).abs() < 1e-12, "r {r}");
        }
        let inner = ds.labels.iter().filter(|&&l| l == 1).count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((inner - n as f64 / 2.0).abs() < 4.0 * sd);

        let noisy = generate(DatasetName::Circles, n, 0.05, 9).unwrap();
        for k in 0..2 {
            let m = noisy.points.iter().map(|p| p[k]).sum::<f64>() / n as f64;
            // Coordinate variance is about (1 + 0.25) / 4 + noise.
            assert!(m.abs() < 4.0 * (0.32 / n as f64).sqrt(), "mean {m}");
        }
    }

    #[test]
    fn generation_is_a_pure_function_of_the_seed() {
        let a = generate(DatasetName::Moons, 500, 0.05, 77).unwrap();
        let b = generate(DatasetName::Moons, 500, 0.05, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_arguments() {
        let mut rng = Rng::new(0);
        assert!(make_moons(0, 0.1, &mut rng).is_err());
        assert!(make_circles(10, -0.1, &mut rng).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("moons.csv");
        let ds = generate(DatasetName::Moons, 50, 0.05, 1).unwrap();
        write_dataset(&ds, 1, &path).unwrap();
        let back = read_points_csv(&path).unwrap();
        assert_eq!(back, ds.to_vectors());
        let meta: DatasetMeta =
            serde_json::from_str(&fs::read_to_string(path.with_extension("json")).unwrap())
                .unwrap();
        assert_eq!(meta.n, 50);
        assert_eq!(meta.name, DatasetName::Moons);
    }
}
