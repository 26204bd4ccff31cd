//! Fixed-step ODE integration, push-forward sampling and stability
//! diagnostics.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccnf::StableCcnfParams;
use crate::data::{sample_normal, Rng};
use crate::error::{check_dim, Error, Result};
use crate::loss::EmpiricalTarget;
use crate::model::{FieldNet, Model, PotentialNet};

/// A state whose Euclidean norm exceeds this is treated as divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Default integration step.
pub const DEFAULT_DT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            _ => Err(Error::config("method", format!("unknown integrator `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> Option<&[f64]> {
        self.states.last().map(Vec::as_slice)
    }

    pub fn last_time(&self) -> Option<f64> {
        self.times.last().copied()
    }

    /// Recorded state closest to `t`, if one lies within `tol`.
    pub fn state_at(&self, t: f64, tol: f64) -> Option<&[f64]> {
        let i = self.times.partition_point(|&s| s < t);
        [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter(|&j| j < self.times.len())
            .min_by(|&a, &b| (self.times[a] - t).abs().total_cmp(&(self.times[b] - t).abs()))
            .filter(|&j| (self.times[j] - t).abs() <= tol)
            .map(|j| self.states[j].as_slice())
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn axpy(a: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(y, x)| y + a * x).collect()
}

/// Integration that stops at the first divergent step and keeps everything
/// recorded before it.
#[derive(Debug, Clone)]
pub struct PartialRun {
    pub trajectory: Trajectory,
    /// `(time, norm)` of the first divergent state.
    pub diverged: Option<(f64, f64)>,
}

/// Number of steps covering `span` with step `dt`; the last may be shorter.
fn step_count(span: f64, dt: f64) -> usize {
    ((span / dt) - 1e-9).ceil().max(1.0) as usize
}

pub fn integrate_partial<F>(
    mut field: F,
    x0: &[f64],
    t_span: (f64, f64),
    dt: f64,
    method: Method,
) -> Result<PartialRun>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let (t0, t1) = t_span;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Domain(format!("step must be > 0, got {dt}")));
    }
    if !(t1 > t0) {
        return Err(Error::Domain(format!("empty time span [{t0}, {t1}]")));
    }
    let n = step_count(t1 - t0, dt);
    let mut traj = Trajectory {
        times: Vec::with_capacity(n + 1),
        states: Vec::with_capacity(n + 1),
    };
    let x0n = norm(x0);
    if !(x0n <= DIVERGENCE_NORM) {
        return Ok(PartialRun { trajectory: traj, diverged: Some((t0, x0n)) });
    }
    traj.times.push(t0);
    traj.states.push(x0.to_vec());
    let mut x = x0.to_vec();
    for k in 0..n {
        let t = t0 + k as f64 * dt;
        let t_next = if k + 1 == n { t1 } else { t0 + (k + 1) as f64 * dt };
        let h = t_next - t;
        let next = match method {
            Method::Euler => {
                let v = field(t, &x)?;
                check_dim(x.len(), v.len())?;
                axpy(h, &v, &x)
            }
            Method::Rk4 => {
                let k1 = field(t, &x)?;
                check_dim(x.len(), k1.len())?;
                let k2 = field(t + 0.5 * h, &axpy(0.5 * h, &k1, &x))?;
                let k3 = field(t + 0.5 * h, &axpy(0.5 * h, &k2, &x))?;
                let k4 = field(t + h, &axpy(h, &k3, &x))?;
                x.iter()
                    .enumerate()
                    .map(|(i, xi)| xi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                    .collect()
            }
        };
        let nn = norm(&next);
        if !(nn <= DIVERGENCE_NORM) {
            return Ok(PartialRun { trajectory: traj, diverged: Some((t_next, nn)) });
        }
        x = next;
        traj.times.push(t_next);
        traj.states.push(x.clone());
    }
    Ok(PartialRun { trajectory: traj, diverged: None })
}

/// Fixed-step integration of `dx/dt = field(t, x)` over `t_span`.
///
/// The last step is shortened so the trajectory ends exactly at `t_end`.
/// A state that is non-finite or has norm above [`DIVERGENCE_NORM`] aborts
/// with [`Error::Divergence`].
pub fn integrate<F>(field: F, x0: &[f64], t_span: (f64, f64), dt: f64, method: Method) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let run = integrate_partial(field, x0, t_span, dt, method)?;
    match run.diverged {
        Some((time, norm)) => Err(Error::Divergence { time, norm }),
        None => Ok(run.trajectory),
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub trajectory: Trajectory,
    pub diverged_at: Option<f64>,
}

/// Integrated samples. Divergent samples keep their trajectory up to the
/// last finite state.
#[derive(Debug, Clone, Default)]
pub struct PushForward {
    pub outcomes: Vec<SampleOutcome>,
    pub diverged: usize,
}

impl PushForward {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn divergence_fraction(&self) -> f64 {
        if self.outcomes.is_empty() {
            0.0
        } else {
            self.diverged as f64 / self.outcomes.len() as f64
        }
    }

    /// Final states of the samples that did not diverge.
    pub fn final_states(&self) -> Vec<Vec<f64>> {
        self.outcomes
            .iter()
            .filter(|o| o.diverged_at.is_none())
            .filter_map(|o| o.trajectory.last_state().map(<[f64]>::to_vec))
            .collect()
    }

    /// States at time `t` of the samples that reached it.
    pub fn states_at(&self, t: f64, tol: f64) -> Vec<Vec<f64>> {
        self.outcomes
            .iter()
            .filter_map(|o| o.trajectory.state_at(t, tol).map(<[f64]>::to_vec))
            .collect()
    }

    pub fn trajectories(&self) -> Vec<&Trajectory> {
        self.outcomes.iter().map(|o| &o.trajectory).collect()
    }
}

/// Draws `n` initial states sequentially from `rng` and integrates each
/// over `[0, t_end]`. Integration runs in parallel; results keep draw order.
pub fn push_forward<I, F>(
    n: usize,
    mut initial: I,
    field: F,
    t_end: f64,
    dt: f64,
    method: Method,
    rng: &mut Rng,
) -> Result<PushForward>
where
    I: FnMut(&mut Rng) -> Result<Vec<f64>>,
    F: Fn(f64, &[f64]) -> Result<Vec<f64>> + Sync,
{
    let starts = (0..n).map(|_| initial(rng)).collect::<Result<Vec<_>>>()?;
    let outcomes = starts
        .par_iter()
        .map(|x0| {
            let run = integrate_partial(&field, x0, (0.0, t_end), dt, method)?;
            Ok(SampleOutcome {
                trajectory: run.trajectory,
                diverged_at: run.diverged.map(|(t, _)| t),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let diverged = outcomes.iter().filter(|o| o.diverged_at.is_some()).count();
    Ok(PushForward { outcomes, diverged })
}

/// Stable model: start at `(z ~ N(z₀, Σ₀), τ₀)` and follow `-∇H_θ`.
pub fn push_forward_stable(
    m: &PotentialNet,
    p: &StableCcnfParams,
    n: usize,
    t_end: f64,
    dt: f64,
    rng: &mut Rng,
) -> Result<PushForward> {
    check_dim(m.dim(), p.dim())?;
    push_forward(
        n,
        |rng| {
            let mut x = sample_normal(rng, &p.z0_mean, &p.sigma0_diag)?;
            x.push(p.tau0);
            Ok(x)
        },
        |_, x| m.grad_field_flat(x),
        t_end,
        dt,
        Method::Rk4,
        rng,
    )
}

/// Baseline: start at `z ~ N(0, I)` and follow the time-dependent network
/// field.
pub fn push_forward_baseline(m: &FieldNet, n: usize, t_end: f64, dt: f64, rng: &mut Rng) -> Result<PushForward> {
    let d = m.dim();
    let (zeros, ones) = (vec![0.0; d], vec![1.0; d]);
    push_forward(
        n,
        |rng| sample_normal(rng, &zeros, &ones),
        |t, z| m.baseline_field(z, t),
        t_end,
        dt,
        Method::Rk4,
        rng,
    )
}

/// Summary of `∇H_θ · v_θ` over a point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub n: usize,
    pub max_lie_derivative: f64,
    pub min_lie_derivative: f64,
    pub mean_lie_derivative: f64,
    /// Fraction of points where `‖∇H_θ‖ < grad_tol`.
    pub near_critical_fraction: f64,
    pub grad_tol: f64,
}

/// Evaluates the Lie derivative `∇H_θ(x) · v_θ(x)` at flat `(z, τ)` points.
pub fn lyapunov_scan(m: &PotentialNet, points: &[Vec<f64>], grad_tol: f64) -> Result<LyapunovReport> {
    let vals = points
        .par_iter()
        .map(|x| {
            let g = m.net.input_grad(x)?;
            let v: Vec<f64> = g.iter().map(|g| -g).collect();
            Ok((g.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>(), norm(&g)))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let n = vals.len();
    let (mut max, mut min, mut sum, mut small) = (f64::NEG_INFINITY, f64::INFINITY, 0.0, 0usize);
    for &(l, g) in &vals {
        max = max.max(l);
        min = min.min(l);
        sum += l;
        small += usize::from(g < grad_tol);
    }
    Ok(LyapunovReport {
        n,
        max_lie_derivative: if n == 0 { 0.0 } else { max },
        min_lie_derivative: if n == 0 { 0.0 } else { min },
        mean_lie_derivative: if n == 0 { 0.0 } else { sum / n as f64 },
        near_critical_fraction: if n == 0 { 0.0 } else { small as f64 / n as f64 },
        grad_tol,
    })
}

/// Mean over samples of the distance to the nearest data point (brute
/// force). Only the first `d` coordinates of each sample are used, so
/// augmented `(z, τ)` states can be passed directly.
pub fn support_distance(samples: &[Vec<f64>], data: &EmpiricalTarget) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("support distance of an empty sample set".into()));
    }
    let d = data.dim();
    let dists = samples
        .par_iter()
        .map(|s| {
            if s.len() < d {
                return Err(Error::DimensionMismatch { expected: d, got: s.len() });
            }
            let best = data
                .points()
                .iter()
                .map(|p| p.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            Ok(best.sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

/// Field sampled on a regular 2-D grid at a fixed τ or t.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub z_axis_1: Vec<f64>,
    pub z_axis_2: Vec<f64>,
    pub slice_value: f64,
    /// Row-major with `z2` outer and `z1` inner.
    pub vectors: Vec<Vec<f64>>,
    pub magnitudes: Vec<f64>,
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
        .collect()
}

/// `bounds = [z1_min, z1_max, z2_min, z2_max]`.
pub fn field_grid<F>(field: F, bounds: [f64; 4], resolution: (usize, usize), slice_value: f64) -> Result<FieldGrid>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>> + Sync,
{
    let (nx, ny) = resolution;
    if nx < 2 || ny < 2 {
        return Err(Error::config("resolution", "need at least 2 nodes per axis"));
    }
    if !(bounds[1] > bounds[0] && bounds[3] > bounds[2]) {
        return Err(Error::config("bounds", "expected xmin < xmax and ymin < ymax"));
    }
    let z_axis_1 = axis(bounds[0], bounds[1], nx);
    let z_axis_2 = axis(bounds[2], bounds[3], ny);
    let nodes: Vec<[f64; 2]> = z_axis_2
        .iter()
        .flat_map(|&y| z_axis_1.iter().map(move |&x| [x, y]))
        .collect();
    let vectors = nodes
        .par_iter()
        .map(|z| field(z, slice_value))
        .collect::<Result<Vec<_>>>()?;
    let magnitudes = vectors.iter().map(|v| norm(v)).collect();
    Ok(FieldGrid {
        z_axis_1,
        z_axis_2,
        slice_value,
        vectors,
        magnitudes,
    })
}

impl FieldGrid {
    /// CSV `z1,z2,v1,v2[,vtau],mag`, one row per node.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let width = self.vectors.first().map_or(2, Vec::len);
        write!(out, "z1,z2,v1,v2")?;
        if width > 2 {
            write!(out, ",vtau")?;
        }
        writeln!(out, ",mag")?;
        let nx = self.z_axis_1.len();
        for (k, (v, mag)) in self.vectors.iter().zip(&self.magnitudes).enumerate() {
            write!(out, "{},{}", self.z_axis_1[k % nx], self.z_axis_2[k / nx])?;
            for c in v {
                write!(out, ",{c}")?;
            }
            writeln!(out, ",{mag}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// CSV `sample_id,t,z1,...,zd[,tau]`, one row per recorded state. With
/// `has_tau` the last state coordinate is written as `tau`.
pub fn write_trajectories<W: Write>(mut out: W, trajectories: &[&Trajectory], d: usize, has_tau: bool) -> Result<()> {
    write!(out, "sample_id,t")?;
    for j in 1..=d {
        write!(out, ",z{j}")?;
    }
    if has_tau {
        write!(out, ",tau")?;
    }
    writeln!(out)?;
    let width = d + usize::from(has_tau);
    for (id, traj) in trajectories.iter().enumerate() {
        for (t, x) in traj.times.iter().zip(&traj.states) {
            check_dim(width, x.len())?;
            write!(out, "{id},{t}")?;
            for c in x {
                write!(out, ",{c}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Times at which the stability evaluation measures support distance.
pub const EVAL_TIMES: [f64; 3] = [1.0, 1.25, 1.5];

/// Push-forward diagnostics of a trained model against its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityEval {
    pub n: usize,
    pub times: Vec<f64>,
    /// `None` when no sample reached that time.
    pub support_distance: Vec<Option<f64>>,
    pub divergence_fraction: f64,
    /// Stable models only: scan over `n_scan` random states in the data's
    /// bounding box padded by 1, τ uniform over the pseudo-time interval.
    pub lyapunov: Option<LyapunovReport>,
}

impl StabilityEval {
    pub fn distance_at(&self, t: f64) -> Option<f64> {
        self.times.iter().position(|s| (s - t).abs() < 1e-12).and_then(|i| self.support_distance[i])
    }
}

/// Integrates `n` samples to `t = 1.5` with RK4 and reports support distance
/// at [`EVAL_TIMES`], the divergence fraction and, for stable models, a
/// Lyapunov scan. `p` is required for stable models.
pub fn stability_eval(
    model: &Model,
    p: Option<&StableCcnfParams>,
    data: &EmpiricalTarget,
    n: usize,
    dt: f64,
    rng: &mut Rng,
) -> Result<StabilityEval> {
    check_dim(model.dim(), data.dim())?;
    let t_end = EVAL_TIMES[EVAL_TIMES.len() - 1];
    let pf = match model {
        Model::Potential(m) => {
            let p = p.ok_or_else(|| Error::config("ccnf", "stable model needs pseudo-time parameters"))?;
            push_forward_stable(m, p, n, t_end, dt, rng)?
        }
        Model::Field(m) => push_forward_baseline(m, n, t_end, dt, rng)?,
    };
    let support_distance = EVAL_TIMES
        .iter()
        .map(|&t| {
            let states = pf.states_at(t, 1e-9);
            if states.is_empty() {
                Ok(None)
            } else {
                support_distance(&states, data).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let lyapunov = match (model, p) {
        (Model::Potential(m), Some(p)) => {
            let d = data.dim();
            let mut lo = vec![f64::INFINITY; d];
            let mut hi = vec![f64::NEG_INFINITY; d];
            for x in data.points() {
                for j in 0..d {
                    lo[j] = lo[j].min(x[j] - 1.0);
                    hi[j] = hi[j].max(x[j] + 1.0);
                }
            }
            let points: Vec<Vec<f64>> = (0..10_000)
                .map(|_| {
                    let mut x: Vec<f64> = (0..d).map(|j| rng.uniform_in(lo[j], hi[j])).collect();
                    x.push(rng.uniform_in(p.tau0.min(p.tau1), p.tau0.max(p.tau1)));
                    x
                })
                .collect();
            Some(lyapunov_scan(m, &points, 1e-6)?)
        }
        _ => None,
    };
    Ok(StabilityEval {
        n,
        times: EVAL_TIMES.to_vec(),
        support_distance,
        divergence_fraction: pf.divergence_fraction(),
        lyapunov,
    })
}
