//! Closed-form scalar stable conditional flow.
//!
//! The conditional field on the augmented state `x = (z, τ)` is linear,
//! `v'(x | x') = -A (x - x')` with `A = diag(λ_z I, λ_τ)`, i.e. the negative
//! gradient of `H'(x | x') = ½ (x - x')ᵀ A (x - x')`. Everything here
//! follows from that: the flow map is an exponential decay, the τ-flow is a
//! bijection between time and pseudo-time, and eliminating time gives the
//! Gaussian interpolant indexed by τ with exponent `k = λ_z / λ_τ`.

use serde::{Deserialize, Serialize};

use crate::data::{sample_normal, Rng};
use crate::error::{check_dim, Error, Result};

/// Default `λ_τ`: puts `τ` within 0.1 of `τ₁ = 1` at `t = 1` when starting
/// from `τ₀ = 0`.
pub const DEFAULT_LAMBDA_TAU: f64 = std::f64::consts::LN_10;

/// Default `λ_z / λ_τ`. Ratios above one pull `z` onto the target before
/// `τ` settles.
pub const DEFAULT_RATE_RATIO: f64 = 2.0;

/// Relative slack on the τ interval absorbed by clamping.
const INTERVAL_SLACK: f64 = 1e-12;

/// Augmented state `(z, τ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub z: Vec<f64>,
    pub tau: f64,
}

impl AugmentedState {
    pub fn new(z: Vec<f64>, tau: f64) -> Self {
        Self { z, tau }
    }

    /// Splits a flat `[z..., τ]` vector.
    pub fn from_flat(x: &[f64]) -> Result<Self> {
        match x.split_last() {
            Some((&tau, z)) if !z.is_empty() => Ok(Self { z: z.to_vec(), tau }),
            _ => Err(Error::DimensionMismatch {
                expected: 2,
                got: x.len(),
            }),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.z.clone();
        v.push(self.tau);
        v
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn is_finite(&self) -> bool {
        self.tau.is_finite() && self.z.iter().all(|v| v.is_finite())
    }
}

/// Parameters of the scalar stable conditional flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableCcnfParams {
    pub lambda_z: f64,
    pub lambda_tau: f64,
    pub tau0: f64,
    pub tau1: f64,
    pub z0_mean: Vec<f64>,
    pub sigma0_diag: Vec<f64>,
}

/// Diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
}

impl StableCcnfParams {
    /// `τ: 0 → 1`, standard normal base, `λ_τ = ln 10`, `λ_z = ratio · λ_τ`.
    pub fn standard(d: usize, ratio: f64) -> Self {
        Self {
            lambda_z: ratio * DEFAULT_LAMBDA_TAU,
            lambda_tau: DEFAULT_LAMBDA_TAU,
            tau0: 0.0,
            tau1: 1.0,
            z0_mean: vec![0.0; d],
            sigma0_diag: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.z0_mean.len()
    }

    /// `λ_z / λ_τ`
    pub fn rate_ratio(&self) -> f64 {
        self.lambda_z / self.lambda_tau
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("lambda_z", self.lambda_z), ("lambda_tau", self.lambda_tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(
                    field,
                    format!("must be finite and > 0 for A to be positive definite, got {v}"),
                ));
            }
        }
        for (field, v) in [("tau0", self.tau0), ("tau1", self.tau1)] {
            if !v.is_finite() {
                return Err(Error::config(field, format!("must be finite, got {v}")));
            }
        }
        if self.tau0 == self.tau1 {
            return Err(Error::config("tau1", "tau0 and tau1 must differ"));
        }
        if self.z0_mean.is_empty() {
            return Err(Error::config("z0_mean", "data dimension must be at least 1"));
        }
        if self.z0_mean.len() != self.sigma0_diag.len() {
            return Err(Error::config(
                "sigma0_diag",
                format!(
                    "length {} does not match z0_mean length {}",
                    self.sigma0_diag.len(),
                    self.z0_mean.len()
                ),
            ));
        }
        if !self.z0_mean.iter().all(|v| v.is_finite()) {
            return Err(Error::config("z0_mean", "entries must be finite"));
        }
        if !self.sigma0_diag.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            return Err(Error::config("sigma0_diag", "entries must be finite and >= 0"));
        }
        Ok(())
    }

    fn tau_lo_hi(&self) -> (f64, f64) {
        (self.tau0.min(self.tau1), self.tau0.max(self.tau1))
    }

    /// `(τ - τ₁) / (τ₀ - τ₁)` clamped to `[0, 1]`; values further than a
    /// rounding slack outside the τ interval are rejected.
    pub fn tau_ratio(&self, tau: f64) -> Result<f64> {
        let (lo, hi) = self.tau_lo_hi();
        let slack = INTERVAL_SLACK * (hi - lo);
        if !(tau >= lo - slack && tau <= hi + slack) {
            return Err(Error::Domain(format!(
                "pseudo-time {tau} outside [{lo}, {hi}]"
            )));
        }
        Ok(((tau - self.tau1) / (self.tau0 - self.tau1)).clamp(0.0, 1.0))
    }

    /// Interpolation weight on the start point, `ratio(τ)^(λ_z/λ_τ)`.
    pub fn interpolation_weight(&self, tau: f64) -> Result<f64> {
        Ok(self.tau_ratio(tau)?.powf(self.rate_ratio()))
    }
}

/// `v'(x | x') = (-λ_z (z - z'), -λ_τ (τ - τ'))` as a flat `d + 1` vector.
pub fn ccnf_vf(p: &StableCcnfParams, x: &AugmentedState, target: &AugmentedState) -> Result<Vec<f64>> {
    check_dim(x.dim(), target.dim())?;
    let mut v: Vec<f64> = x
        .z
        .iter()
        .zip(&target.z)
        .map(|(z, zt)| -p.lambda_z * (z - zt))
        .collect();
    v.push(-p.lambda_tau * (x.tau - target.tau));
    Ok(v)
}

/// `∇H'(x | x') = A (x - x')`.
pub fn ccnf_potential_grad(
    p: &StableCcnfParams,
    x: &AugmentedState,
    target: &AugmentedState,
) -> Result<Vec<f64>> {
    Ok(ccnf_vf(p, x, target)?.into_iter().map(|v| -v).collect())
}

/// Conditional flow map `ψ'(x, t | x') = x' + exp(-A t)(x - x')`.
pub fn ccnf_flow(
    p: &StableCcnfParams,
    x: &AugmentedState,
    t: f64,
    target: &AugmentedState,
) -> Result<AugmentedState> {
    check_dim(x.dim(), target.dim())?;
    if t == 0.0 {
        return Ok(x.clone());
    }
    let ez = (-p.lambda_z * t).exp();
    let z = x
        .z
        .iter()
        .zip(&target.z)
        .map(|(z, zt)| zt + ez * (z - zt))
        .collect();
    let tau = target.tau + (-p.lambda_tau * t).exp() * (x.tau - target.tau);
    Ok(AugmentedState { z, tau })
}

/// `τ(t) = τ₁ + exp(-λ_τ t)(τ₀ - τ₁)`
pub fn tau_flow(p: &StableCcnfParams, t: f64) -> f64 {
    if t == 0.0 {
        return p.tau0;
    }
    p.tau1 + (-p.lambda_tau * t).exp() * (p.tau0 - p.tau1)
}

/// Time at which the τ-flow started at `τ₀` reaches `tau`.
pub fn tau_flow_inverse(p: &StableCcnfParams, tau: f64) -> Result<f64> {
    if tau == p.tau1 {
        return Err(Error::InfiniteTime { tau });
    }
    let (lo, hi) = p.tau_lo_hi();
    if !(tau >= lo && tau <= hi) {
        return Err(Error::Domain(format!(
            "pseudo-time {tau} outside [{lo}, {hi}]"
        )));
    }
    let r = (tau - p.tau1) / (p.tau0 - p.tau1);
    Ok(-r.ln() / p.lambda_tau)
}

/// Mean and covariance of the conditional z-marginal at pseudo-time `tau`:
/// `μ̄ = z' + r^k (z₀ - z')`, `Σ̄ = r^{2k} Σ₀`.
pub fn interpolant_params(p: &StableCcnfParams, tau: f64, z_target: &[f64]) -> Result<GaussianParams> {
    check_dim(p.dim(), z_target.len())?;
    let w = p.interpolation_weight(tau)?;
    let w2 = w * w;
    Ok(GaussianParams {
        mean: z_target
            .iter()
            .zip(&p.z0_mean)
            .map(|(zt, z0)| zt + w * (z0 - zt))
            .collect(),
        cov_diag: p.sigma0_diag.iter().map(|s| w2 * s).collect(),
    })
}

/// Draws `z ~ N(μ̄(τ), Σ̄(τ))`. Consumes `d` normals even when `Σ̄ = 0`.
pub fn sample_interpolant(
    p: &StableCcnfParams,
    tau: f64,
    z_target: &[f64],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let g = interpolant_params(p, tau, z_target)?;
    sample_normal(rng, &g.mean, &g.cov_diag)
}

/// Straight-line path `(1 - (1 - σ) t) x + t x₁`.
pub fn ot_flow(x: &[f64], t: f64, x1: &[f64], sigma_min: f64) -> Result<Vec<f64>> {
    check_dim(x.len(), x1.len())?;
    let a = 1.0 - (1.0 - sigma_min) * t;
    Ok(x.iter().zip(x1).map(|(x, x1)| a * x + t * x1).collect())
}

/// Velocity of the straight-line path expressed at the current point,
/// `(x₁ - (1 - σ) x) / (1 - (1 - σ) t)`.
pub fn ot_vf(x: &[f64], t: f64, x1: &[f64], sigma_min: f64) -> Result<Vec<f64>> {
    check_dim(x.len(), x1.len())?;
    let denom = 1.0 - (1.0 - sigma_min) * t;
    if !(denom > 0.0) {
        return Err(Error::Singularity(format!(
            "OT field denominator {denom} at t = {t}"
        )));
    }
    let c = 1.0 - sigma_min;
    Ok(x.iter().zip(x1).map(|(x, x1)| (x1 - c * x) / denom).collect())
}

/// Conditional z-flow with time eliminated: `z' + r^k (z - z')`.
pub fn reparam_stable_flow(p: &StableCcnfParams, z: &[f64], tau: f64, z_target: &[f64]) -> Result<Vec<f64>> {
    check_dim(z.len(), z_target.len())?;
    let w = p.interpolation_weight(tau)?;
    Ok(z.iter().zip(z_target).map(|(z, zt)| zt + w * (z - zt)).collect())
}

/// `dz/dτ = v'_z / v'_τ = λ_z (z' - z) / (λ_τ (τ₁ - τ))`.
pub fn reparam_stable_vf(p: &StableCcnfParams, z: &[f64], tau: f64, z_target: &[f64]) -> Result<Vec<f64>> {
    check_dim(z.len(), z_target.len())?;
    let denom = p.lambda_tau * (p.tau1 - tau);
    if denom == 0.0 {
        return Err(Error::Singularity(format!(
            "pseudo-time field undefined at tau = tau1 = {tau}"
        )));
    }
    Ok(z
        .iter()
        .zip(z_target)
        .map(|(z, zt)| p.lambda_z * (zt - z) / denom)
        .collect())
}

/// Smallest decay rates `(λ_τ, λ_z)` that bring the τ- and z-gaps within
/// `eps_tau` and `eps_z` by time `horizon`.
///
/// `tau_gap = |τ₀ - τ₁|`, `z_gap = ‖z₀ - z₁‖`.
pub fn min_rates(horizon: f64, eps_tau: f64, eps_z: f64, tau_gap: f64, z_gap: f64) -> Result<(f64, f64)> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Domain(format!("horizon must be > 0, got {horizon}")));
    }
    let rate = |eps: f64, gap: f64, what: &str| -> Result<f64> {
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("{what} tolerance must be > 0, got {eps}")));
        }
        if !(eps < gap) {
            return Err(Error::Domain(format!(
                "{what} tolerance {eps} is not below the gap {gap}; no decay is needed and a zero rate is not positive definite"
            )));
        }
        Ok(-(eps / gap).ln() / horizon)
    };
    Ok((rate(eps_tau, tau_gap, "tau")?, rate(eps_z, z_gap, "z")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::max_rel_err;
    use proptest::prelude::{prop, prop_assert, proptest, Strategy};
    use std::f64::consts::{LN_10, LN_2};

    fn params(lz: f64, lt: f64, d: usize) -> StableCcnfParams {
        StableCcnfParams {
            lambda_z: lz,
            lambda_tau: lt,
            ..StableCcnfParams::standard(d, 1.0)
        }
    }

    fn st(z: &[f64], tau: f64) -> AugmentedState {
        AugmentedState::new(z.to_vec(), tau)
    }

    #[test]
    fn vf_examples() {
        let p = params(2.0, 1.0, 2);
        let v = ccnf_vf(&p, &st(&[1.0, 0.0], 0.5), &st(&[0.0, 0.0], 1.0)).unwrap();
        assert_eq!(v, vec![-2.0, 0.0, 0.5]);
        let x = st(&[0.3, -1.2], 0.4);
        assert_eq!(ccnf_vf(&p, &x, &x).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn conditional_field_descends_its_potential() {
        let p = params(1.7, 0.6, 2);
        let mut rng = Rng::new(3);
        let target = st(&[0.5, -0.5], 1.0);
        for _ in 0..1000 {
            let x = st(&[rng.normal() * 3.0, rng.normal() * 3.0], rng.uniform_in(-1.0, 2.0));
            let g = ccnf_potential_grad(&p, &x, &target).unwrap();
            let v = ccnf_vf(&p, &x, &target).unwrap();
            let dot: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
            assert!(dot <= 0.0);
            assert!(dot < 0.0);
        }
        let g = ccnf_potential_grad(&p, &target, &target).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn flow_examples() {
        let p = params(LN_2, 1.0, 1);
        let x = st(&[4.0], 0.0);
        let target = st(&[0.0], 1.0);
        assert_eq!(ccnf_flow(&p, &x, 0.0, &target).unwrap(), x);
        let y = ccnf_flow(&p, &x, 1.0, &target).unwrap();
        assert!((y.z[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn tau_flow_examples() {
        let p = StableCcnfParams::standard(1, 1.0);
        assert_eq!(tau_flow(&p, 0.0), 0.0);
        assert!((tau_flow(&p, 1.0) - 0.9).abs() < 1e-15);
        let q = params(1.0, 1.0, 1);
        assert!((tau_flow(&q, 100.0) - 1.0).abs() < 1e-12);
        assert_eq!(tau_flow_inverse(&p, 0.0).unwrap(), 0.0);
        assert!((tau_flow_inverse(&p, 0.9).unwrap() - 1.0).abs() < 1e-14);
        assert!(matches!(tau_flow_inverse(&p, 1.0), Err(Error::InfiniteTime { .. })));
        assert!(matches!(tau_flow_inverse(&p, 1.5), Err(Error::Domain(_))));
        assert!(matches!(tau_flow_inverse(&p, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn tau_bijection_round_trips() {
        let p = StableCcnfParams::standard(1, 1.0);
        for i in 0..=50 {
            let t = 0.1 * i as f64;
            let back = tau_flow_inverse(&p, tau_flow(&p, t)).unwrap();
            assert!((back - t).abs() < 1e-9, "t = {t}: {back}");
        }
        for i in 0..1000 {
            let tau = i as f64 / 1000.0;
            let back = tau_flow(&p, tau_flow_inverse(&p, tau).unwrap());
            assert!((back - tau).abs() < 1e-9);
        }
    }

    #[test]
    fn reversed_tau_interval_works() {
        let p = StableCcnfParams {
            tau0: 2.0,
            tau1: -1.0,
            ..StableCcnfParams::standard(1, 1.0)
        };
        let t = tau_flow_inverse(&p, 0.5).unwrap();
        assert!((tau_flow(&p, t) - 0.5).abs() < 1e-12);
        assert_eq!(p.tau_ratio(2.0).unwrap(), 1.0);
        assert_eq!(p.tau_ratio(-1.0).unwrap(), 0.0);
    }

    #[test]
    fn interpolant_examples() {
        let mut p = StableCcnfParams::standard(1, 1.0);
        let g = interpolant_params(&p, 1.0, &[3.0]).unwrap();
        assert_eq!(g, GaussianParams { mean: vec![3.0], cov_diag: vec![0.0] });
        let g = interpolant_params(&p, 0.0, &[3.0]).unwrap();
        assert_eq!(g, GaussianParams { mean: vec![0.0], cov_diag: vec![1.0] });

        let g = interpolant_params(&p, 0.5, &[1.0]).unwrap();
        assert_eq!(g.mean, vec![0.5]);
        assert_eq!(g.cov_diag, vec![0.25]);

        p.lambda_z = 2.0 * p.lambda_tau;
        let g = interpolant_params(&p, 0.5, &[4.0]).unwrap();
        assert!((g.mean[0] - 3.0).abs() < 1e-15);

        assert!(matches!(interpolant_params(&p, 1.1, &[4.0]), Err(Error::Domain(_))));
        assert!(interpolant_params(&p, 1.0 + 1e-15, &[4.0]).is_ok());
    }

    #[test]
    fn unit_ratio_interpolant_is_linear() {
        let mut p = StableCcnfParams::standard(2, 1.0);
        p.z0_mean = vec![-1.5, 0.25];
        let zt = [2.0, -3.0];
        for i in 0..=100 {
            let tau = i as f64 / 100.0;
            let g = interpolant_params(&p, tau, &zt).unwrap();
            for j in 0..2 {
                let lin = (1.0 - tau) * p.z0_mean[j] + tau * zt[j];
                assert!((g.mean[j] - lin).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn larger_rate_ratio_moves_the_mean_toward_the_target() {
        let zt = [4.0];
        for i in 1..100 {
            let tau = i as f64 / 100.0;
            let dist = |k: f64| {
                let p = StableCcnfParams::standard(1, k);
                (interpolant_params(&p, tau, &zt).unwrap().mean[0] - zt[0]).abs()
            };
            assert!(dist(1.0) > dist(2.0) && dist(2.0) > dist(3.0) && dist(3.0) > dist(4.0));
        }
    }

    #[test]
    fn interpolant_sampling_moments() {
        let mut p = StableCcnfParams::standard(1, 1.5);
        p.sigma0_diag = vec![2.0];
        p.z0_mean = vec![1.0];
        let tau = 0.3;
        let g = interpolant_params(&p, tau, &[-2.0]).unwrap();
        let mut rng = Rng::new(17);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_interpolant(&p, tau, &[-2.0], &mut rng).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (g.cov_diag[0] / n as f64).sqrt();
        assert!((mean - g.mean[0]).abs() < 4.0 * se);
        assert!((var / g.cov_diag[0] - 1.0).abs() < 0.1);

        let mut rng = Rng::new(1);
        assert_eq!(sample_interpolant(&p, 1.0, &[-2.0], &mut rng).unwrap(), vec![-2.0]);
    }

    #[test]
    fn ot_examples() {
        assert_eq!(ot_flow(&[1.0, 0.0], 0.5, &[0.0, 0.0], 0.0).unwrap(), vec![0.5, 0.0]);
        assert_eq!(ot_flow(&[1.0, 2.0], 0.0, &[5.0, 5.0], 0.1).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(ot_vf(&[1.0], 1.0, &[0.0], 0.0), Err(Error::Singularity(_))));
        assert!(ot_vf(&[1.0], 1.0, &[0.0], 0.01).is_ok());
    }

    #[test]
    fn reparam_examples() {
        let p = StableCcnfParams::standard(1, 1.0);
        assert_eq!(reparam_stable_flow(&p, &[2.5], 0.0, &[7.0]).unwrap(), vec![2.5]);
        let v = reparam_stable_vf(&p, &[1.0], 0.75, &[3.0]).unwrap();
        assert!((v[0] - 2.0 / 0.25).abs() < 1e-14);
        assert!(matches!(
            reparam_stable_vf(&p, &[1.0], 1.0, &[3.0]),
            Err(Error::Singularity(_))
        ));
    }

    #[test]
    fn reparam_matches_ot_on_a_grid() {
        let p = StableCcnfParams::standard(1, 1.0);
        let mut worst: f64 = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                let z = -3.0 + 6.0 * i as f64 / 9.0;
                let tau = 0.99 * j as f64 / 9.0;
                let zt = [1.0 - 0.3 * j as f64];
                let a = reparam_stable_flow(&p, &[z], tau, &zt).unwrap();
                let b = ot_flow(&[z], tau, &zt, 0.0).unwrap();
                let z_tau = b[0];
                let va = reparam_stable_vf(&p, &[z_tau], tau, &zt).unwrap();
                let vb = ot_vf(&[z_tau], tau, &zt, 0.0).unwrap();
                worst = worst.max((a[0] - b[0]).abs()).max((va[0] - vb[0]).abs());
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn min_rates_examples() {
        let (lt, lz) = min_rates(1.0, 0.1, 0.2, 1.0, 2.0).unwrap();
        assert!((lt - LN_10).abs() < 1e-12);
        assert!((lz - LN_10).abs() < 1e-12);
        let p = params(1.0, lt, 1);
        assert!(((tau_flow(&p, 1.0) - 1.0).abs() - 0.1).abs() < 1e-15);
        let (lt2, _) = min_rates(2.0, 0.1, 0.2, 1.0, 2.0).unwrap();
        assert!((lt2 - LN_10 / 2.0).abs() < 1e-15);
        assert!(matches!(min_rates(1.0, 1.0, 0.2, 1.0, 2.0), Err(Error::Domain(_))));
        assert!(matches!(min_rates(1.0, 0.1, 3.0, 1.0, 2.0), Err(Error::Domain(_))));
        assert!(min_rates(0.0, 0.1, 0.2, 1.0, 2.0).is_err());
    }

    #[test]
    fn validate_names_the_field() {
        let mut p = StableCcnfParams::standard(2, 2.0);
        assert!(p.validate().is_ok());
        p.lambda_tau = -1.0;
        match p.validate() {
            Err(Error::Config { field, message }) => {
                assert_eq!(field, "lambda_tau");
                assert!(message.contains("positive definite"));
            }
            other => panic!("{other:?}"),
        }
        let mut p = StableCcnfParams::standard(2, 2.0);
        p.tau1 = p.tau0;
        assert!(p.validate().is_err());
        let mut p = StableCcnfParams::standard(2, 2.0);
        p.sigma0_diag = vec![1.0];
        assert!(p.validate().is_err());
    }

    #[test]
    fn params_json_field_names() {
        let p = StableCcnfParams::standard(2, 2.0);
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        for key in ["lambda_z", "lambda_tau", "tau0", "tau1", "z0_mean", "sigma0_diag"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: StableCcnfParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }

    fn arb_setup() -> impl Strategy<Value = (StableCcnfParams, AugmentedState, AugmentedState)> {
        (
            0.1f64..5.0,
            0.1f64..5.0,
            prop::collection::vec(-3.0f64..3.0, 2),
            -1.0f64..1.0,
            prop::collection::vec(-3.0f64..3.0, 2),
        )
            .prop_map(|(lz, lt, z, tau, zt)| {
                (params(lz, lt, 2), st(&z, tau), st(&zt, 1.0))
            })
    }

    proptest! {
        #[test]
        fn flow_derivative_matches_field((p, x, target) in arb_setup(), t in 0.01f64..2.0) {
            let h = 1e-6;
            let fwd = ccnf_flow(&p, &x, t + h, &target).unwrap().to_flat();
            let bwd = ccnf_flow(&p, &x, t - h, &target).unwrap().to_flat();
            let fd: Vec<f64> = fwd.iter().zip(&bwd).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let at = ccnf_flow(&p, &x, t, &target).unwrap();
            let v = ccnf_vf(&p, &at, &target).unwrap();
            prop_assert!(max_rel_err(&fd, &v, 1e-3) < 1e-5);
        }

        #[test]
        fn flow_is_a_semigroup((p, x, target) in arb_setup(), s in 0.0f64..3.0, t in 0.0f64..3.0) {
            let two = ccnf_flow(&p, &ccnf_flow(&p, &x, s, &target).unwrap(), t, &target).unwrap();
            let one = ccnf_flow(&p, &x, s + t, &target).unwrap();
            for (a, b) in two.to_flat().iter().zip(one.to_flat()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn reparam_derivative_matches_field((p, x, target) in arb_setup(), tau in 0.05f64..0.95) {
            let h = 1e-6;
            let f = |tau: f64| reparam_stable_flow(&p, &x.z, tau, &target.z).unwrap();
            let fd: Vec<f64> = f(tau + h).iter().zip(f(tau - h)).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let v = reparam_stable_vf(&p, &f(tau), tau, &target.z).unwrap();
            prop_assert!(max_rel_err(&fd, &v, 1e-3) < 1e-5, "{:?} vs {:?}", fd, v);
        }

        #[test]
        fn descent_holds_everywhere((p, x, target) in arb_setup()) {
            let g = ccnf_potential_grad(&p, &x, &target).unwrap();
            let v = ccnf_vf(&p, &x, &target).unwrap();
            let dot: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
            prop_assert!(dot <= 0.0);
        }
    }
}
