//! Flow-matching losses, their Monte-Carlo estimators, and the exact
//! marginal field over an empirical target.
//!
//! Sample draws are kept apart from evaluation so that a fixed batch can be
//! re-evaluated under perturbed parameters (finite-difference checks) and so
//! that every loss value can be recomputed from its logged terms.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ccnf::{
    ccnf_flow, interpolant_params, sample_interpolant, tau_flow_inverse, AugmentedState,
    StableCcnfParams,
};
use crate::data::{sample_normal, Rng};
use crate::diffkit::{loss_param_grad, max_rel_err, BatchGrad, LocalLoss, TapeMode};
use crate::error::{check_dim, Error, Result};
use crate::model::{FieldNet, PotentialNet};

/// Default truncation of the τ range for the normalized loss.
pub const DEFAULT_EPS_TAU_GUARD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CfmOt,
    Auto,
    AutoUnnormalized,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cfm_ot" => Ok(LossKind::CfmOt),
            "auto" => Ok(LossKind::Auto),
            "auto_unnormalized" => Ok(LossKind::AutoUnnormalized),
            _ => Err(Error::config("loss_kind", format!("unknown loss `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBatchSpec {
    pub batch_size: usize,
    pub loss_kind: LossKind,
    #[serde(default)]
    pub sigma_min: f64,
    #[serde(default = "default_eps_tau_guard")]
    pub eps_tau_guard: f64,
}

fn default_eps_tau_guard() -> f64 {
    DEFAULT_EPS_TAU_GUARD
}

impl LossBatchSpec {
    pub fn new(batch_size: usize, loss_kind: LossKind) -> Self {
        Self {
            batch_size,
            loss_kind,
            sigma_min: 0.0,
            eps_tau_guard: DEFAULT_EPS_TAU_GUARD,
        }
    }

    /// `tau_gap` is `|τ₁ - τ₀|` for stable runs.
    pub fn validate(&self, tau_gap: Option<f64>) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::config("sigma_min", "must lie in [0, 1)"));
        }
        if !(self.eps_tau_guard >= 0.0 && self.eps_tau_guard.is_finite()) {
            return Err(Error::config("eps_tau_guard", "must be finite and >= 0"));
        }
        if let Some(gap) = tau_gap {
            if self.eps_tau_guard >= gap {
                return Err(Error::config(
                    "eps_tau_guard",
                    format!("{} must be below |tau1 - tau0| = {gap}", self.eps_tau_guard),
                ));
            }
        }
        if self.loss_kind == LossKind::Auto && self.eps_tau_guard == 0.0 {
            return Err(Error::config(
                "eps_tau_guard",
                "the normalized loss is undefined at tau = tau1 and needs a positive guard",
            ));
        }
        Ok(())
    }
}

/// Empirical target measure: uniform over its points.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalTarget {
    points: Vec<Vec<f64>>,
}

impl EmpiricalTarget {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::config("dataset", "target needs at least one point"));
        };
        let d = first.len();
        if d == 0 {
            return Err(Error::config("dataset", "points need at least one coordinate"));
        }
        for (i, p) in points.iter().enumerate() {
            check_dim(d, p.len())?;
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::config("dataset", format!("point {i} is not finite")));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Uniform draw with replacement.
    pub fn sample<'a>(&'a self, rng: &mut Rng) -> &'a [f64] {
        &self.points[rng.index(self.points.len())]
    }
}

/// One draw for the pseudo-time losses.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoSample {
    pub z_target: Vec<f64>,
    pub z: Vec<f64>,
    pub tau: f64,
}

/// One draw for the straight-line baseline loss.
#[derive(Debug, Clone, PartialEq)]
pub struct OtSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
}

/// Per-sample record: network input, regression target, weight and the
/// resulting loss term.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoggedTerm {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub weight: f64,
    pub term: f64,
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub samples: Vec<LoggedTerm>,
}

/// `weight · ‖v - target‖²`, the per-sample term of every loss here.
pub fn residual_term(v: &[f64], target: &[f64], weight: f64) -> f64 {
    weight * v.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// Conditional target toward `(z', τ₁)`: `(-λ_z (z - z'), -λ_τ (τ - τ₁))`.
pub fn auto_target(p: &StableCcnfParams, z: &[f64], tau: f64, z_target: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = z
        .iter()
        .zip(z_target)
        .map(|(z, zt)| -p.lambda_z * (z - zt))
        .collect();
    v.push(-p.lambda_tau * (tau - p.tau1));
    v
}

/// `1 / |v'_τ| = 1 / (λ_τ |τ₁ - τ|)` for the normalized loss, 1 otherwise.
pub fn auto_weight(p: &StableCcnfParams, tau: f64, normalized: bool) -> f64 {
    if normalized {
        1.0 / (p.lambda_tau * (p.tau1 - tau).abs())
    } else {
        1.0
    }
}

/// Upper end of the τ sampling range, `ε` short of `τ₁`.
fn tau_sampling_end(p: &StableCcnfParams, eps: f64) -> f64 {
    p.tau1 - eps * (p.tau1 - p.tau0).signum()
}

/// Draws `τ ~ U[τ₀, tau_end]`, `z' ~ data`, `z ~ p̄'(·, τ | z')` in that order
/// per sample.
pub fn draw_auto_samples(
    p: &StableCcnfParams,
    data: &EmpiricalTarget,
    n: usize,
    tau_end: f64,
    rng: &mut Rng,
) -> Result<Vec<AutoSample>> {
    check_dim(p.dim(), data.dim())?;
    (0..n)
        .map(|_| {
            let tau = rng.uniform_in(p.tau0, tau_end);
            let z_target = data.sample(rng).to_vec();
            let z = sample_interpolant(p, tau, &z_target, rng)?;
            Ok(AutoSample { z_target, z, tau })
        })
        .collect()
}

/// Draws `t ~ U[0, 1]`, `x₁ ~ data`, `x₀ ~ N(0, I)` in that order per sample.
pub fn draw_ot_samples(data: &EmpiricalTarget, n: usize, rng: &mut Rng) -> Result<Vec<OtSample>> {
    let d = data.dim();
    let zeros = vec![0.0; d];
    let ones = vec![1.0; d];
    (0..n)
        .map(|_| {
            let t = rng.uniform();
            let x1 = data.sample(rng).to_vec();
            let x0 = sample_normal(rng, &zeros, &ones)?;
            Ok(OtSample { x0, x1, t })
        })
        .collect()
}

fn fault(context: &str, i: usize, term: &LoggedTerm) -> Error {
    Error::numeric(
        context,
        format!(
            "non-finite loss term {} at sample {i}: input {:?}, target {:?}, weight {}",
            term.term, term.input, term.target, term.weight
        ),
    )
}

fn finish(res: BatchGrad, samples: Vec<LoggedTerm>) -> LossEval {
    LossEval {
        value: res.value,
        grad: res.grad,
        samples,
    }
}

/// Pseudo-time loss over fixed samples, with its parameter gradient.
pub fn evaluate_auto(
    m: &PotentialNet,
    p: &StableCcnfParams,
    samples: &[AutoSample],
    normalized: bool,
) -> Result<LossEval> {
    let context = if normalized { "auto_cfm_loss" } else { "auto_cfm_loss_unnormalized" };
    let logged: Vec<LoggedTerm> = samples
        .iter()
        .map(|s| {
            let mut input = s.z.clone();
            input.push(s.tau);
            LoggedTerm {
                target: auto_target(p, &s.z, s.tau, &s.z_target),
                weight: auto_weight(p, s.tau, normalized),
                input,
                term: 0.0,
            }
        })
        .collect();
    let inputs: Vec<Vec<f64>> = logged.iter().map(|l| l.input.clone()).collect();
    let res = loss_param_grad(&m.net, &inputs, TapeMode::SecondOrder, |i, _, g| {
        let g = g.expect("second-order tape supplies the input gradient");
        let l = &logged[i];
        let v: Vec<f64> = g.iter().map(|g| -g).collect();
        let value = residual_term(&v, &l.target, l.weight);
        if !value.is_finite() {
            return Err(fault(context, i, &LoggedTerm { term: value, ..l.clone() }));
        }
        // ∂/∂g of w‖-g - c‖² = -2w(-g - c)
        let d_g = v.iter().zip(&l.target).map(|(v, c)| -2.0 * l.weight * (v - c)).collect();
        Ok(LocalLoss {
            value,
            d_output: vec![0.0],
            d_input_grad: Some(d_g),
        })
    })?;
    let logged = logged
        .into_iter()
        .zip(&res.terms)
        .map(|(l, &term)| LoggedTerm { term, ..l })
        .collect();
    Ok(finish(res, logged))
}

/// Straight-line regression target `x₁ - (1 - σ) x₀`.
pub fn ot_target(s: &OtSample, sigma_min: f64) -> Vec<f64> {
    s.x1.iter().zip(&s.x0).map(|(x1, x0)| x1 - (1.0 - sigma_min) * x0).collect()
}

/// Baseline loss over fixed samples, with its (first-order) parameter
/// gradient.
pub fn evaluate_ot(m: &FieldNet, samples: &[OtSample], sigma_min: f64) -> Result<LossEval> {
    let logged: Vec<LoggedTerm> = samples
        .iter()
        .map(|s| {
            let x = crate::ccnf::ot_flow(&s.x0, s.t, &s.x1, sigma_min)?;
            Ok(LoggedTerm {
                input: m.input(&x, s.t)?,
                target: ot_target(s, sigma_min),
                weight: 1.0,
                term: 0.0,
            })
        })
        .collect::<Result<_>>()?;
    let inputs: Vec<Vec<f64>> = logged.iter().map(|l| l.input.clone()).collect();
    let res = loss_param_grad(&m.net, &inputs, TapeMode::FirstOrder, |i, y, _| {
        let l = &logged[i];
        let value = residual_term(y, &l.target, 1.0);
        if !value.is_finite() {
            return Err(fault("cfm_ot_loss", i, &LoggedTerm { term: value, ..l.clone() }));
        }
        Ok(LocalLoss {
            value,
            d_output: y.iter().zip(&l.target).map(|(y, c)| 2.0 * (y - c)).collect(),
            d_input_grad: None,
        })
    })?;
    let logged = logged
        .into_iter()
        .zip(&res.terms)
        .map(|(l, &term)| LoggedTerm { term, ..l })
        .collect();
    Ok(finish(res, logged))
}

/// Monte-Carlo estimate of the unnormalized pseudo-time loss, with
/// `τ ~ U[τ₀, τ₁]`.
pub fn auto_cfm_loss_unnormalized(
    m: &PotentialNet,
    p: &StableCcnfParams,
    data: &EmpiricalTarget,
    spec: &LossBatchSpec,
    rng: &mut Rng,
) -> Result<LossEval> {
    spec.validate(Some((p.tau1 - p.tau0).abs()))?;
    let samples = draw_auto_samples(p, data, spec.batch_size, p.tau1, rng)?;
    evaluate_auto(m, p, &samples, false)
}

/// Monte-Carlo estimate of the normalized pseudo-time loss, with
/// `τ ~ U[τ₀, τ₁ - ε]`.
pub fn auto_cfm_loss(
    m: &PotentialNet,
    p: &StableCcnfParams,
    data: &EmpiricalTarget,
    spec: &LossBatchSpec,
    rng: &mut Rng,
) -> Result<LossEval> {
    let spec = LossBatchSpec {
        loss_kind: LossKind::Auto,
        ..spec.clone()
    };
    spec.validate(Some((p.tau1 - p.tau0).abs()))?;
    let end = tau_sampling_end(p, spec.eps_tau_guard);
    let samples = draw_auto_samples(p, data, spec.batch_size, end, rng)?;
    evaluate_auto(m, p, &samples, true)
}

/// Monte-Carlo estimate of the straight-line baseline loss.
pub fn cfm_ot_loss(
    m: &FieldNet,
    data: &EmpiricalTarget,
    spec: &LossBatchSpec,
    rng: &mut Rng,
) -> Result<LossEval> {
    spec.validate(None)?;
    check_dim(m.dim(), data.dim())?;
    let samples = draw_ot_samples(data, spec.batch_size, rng)?;
    evaluate_ot(m, &samples, spec.sigma_min)
}

/// Posterior weights of the data points given `(z, τ)`. Every component
/// shares `Σ̄(τ)`, so only the quadratic forms differ and are normalized
/// with log-sum-exp.
pub fn mixture_weights(p: &StableCcnfParams, data: &EmpiricalTarget, z: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_dim(p.dim(), z.len())?;
    check_dim(p.dim(), data.dim())?;
    let w = p.interpolation_weight(tau)?;
    let cov: Vec<f64> = p.sigma0_diag.iter().map(|s| w * w * s).collect();
    if let Some(j) = cov.iter().position(|c| !(*c > 0.0)) {
        return Err(Error::DegenerateCovariance(format!(
            "interpolant variance of coordinate {j} is {} at tau = {tau}",
            cov[j]
        )));
    }
    let logs: Vec<f64> = data
        .points()
        .iter()
        .map(|zt| {
            -0.5 * z
                .iter()
                .zip(zt)
                .zip(p.z0_mean.iter().zip(&cov))
                .map(|((z, zt), (z0, c))| {
                    let r = z - (zt + w * (z0 - zt));
                    r * r / c
                })
                .sum::<f64>()
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::numeric(
            "mixture_weights",
            format!("all component weights underflow at z = {z:?}, tau = {tau}"),
        ));
    }
    let e: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Exact autonomous marginal field `Σᵢ wᵢ(z, τ) v'(z, τ | z'ᵢ, τ₁)`.
pub fn exact_marginal_vf(p: &StableCcnfParams, data: &EmpiricalTarget, z: &[f64], tau: f64) -> Result<Vec<f64>> {
    let w = mixture_weights(p, data, z, tau)?;
    let mut mean = vec![0.0; z.len()];
    for (wi, zt) in w.iter().zip(data.points()) {
        for (m, v) in mean.iter_mut().zip(zt) {
            *m += wi * v;
        }
    }
    Ok(auto_target(p, z, tau, &mean))
}

/// Outcome of a named verification check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub check: String,
    pub max_rel_err: f64,
    pub pass: bool,
    pub details: serde_json::Value,
}

/// Compares the parameter gradients of the time-parameterized and the
/// pseudo-time-parameterized losses on a degenerate single-point target
/// (`Σ₀ = 0`), where both reduce to one-dimensional integrals along the
/// same deterministic path.
///
/// With `τ(t)` the pseudo-time flow, `dτ = λ_τ (τ₁ - τ) dt`, so
/// `∫₀ᵀ f dt = ∫ f / (λ_τ (τ₁ - τ)) dτ` and the gradients of the two
/// integrals must agree. The t-integral uses a uniform grid on `[0, T]`,
/// `T = t(τ₁ - ε)`. The τ-integral uses a grid on `[τ₀, τ₁ - ε]` that is
/// geometric in `τ₁ - τ` to resolve the `1/(τ₁ - τ)` growth near the end.
pub fn grad_equivalence_check(
    p: &StableCcnfParams,
    z_single: &[f64],
    quadrature_n: usize,
    eps: f64,
    net_seed: u64,
) -> Result<VerificationReport> {
    let m = PotentialNet::init(z_single.len(), 2, 8, &mut Rng::new(net_seed))?;
    grad_equivalence_check_with_net(p, z_single, quadrature_n, eps, &m)
}

/// [`grad_equivalence_check`] on a caller-supplied potential.
pub fn grad_equivalence_check_with_net(
    p: &StableCcnfParams,
    z_single: &[f64],
    quadrature_n: usize,
    eps: f64,
    m: &PotentialNet,
) -> Result<VerificationReport> {
    if quadrature_n < 64 {
        return Err(Error::config("quadrature_n", "must be at least 64"));
    }
    let gap = (p.tau1 - p.tau0).abs();
    if !(eps > 0.0 && eps < gap) {
        return Err(Error::config("eps_tau_guard", "must lie in (0, |tau1 - tau0|)"));
    }
    let mut p = p.clone();
    p.sigma0_diag = vec![0.0; p.dim()];
    p.validate()?;
    check_dim(p.dim(), z_single.len())?;
    check_dim(p.dim(), m.dim())?;

    let tau_end = tau_sampling_end(&p, eps);
    let horizon = tau_flow_inverse(&p, tau_end)?;
    let n = quadrature_n;
    let start = AugmentedState::new(p.z0_mean.clone(), p.tau0);
    let goal = AugmentedState::new(z_single.to_vec(), p.tau1);

    // Time route: x(t) along the conditional flow, trapezoid weights.
    let h = horizon / n as f64;
    let mut t_nodes = Vec::with_capacity(n + 1);
    let mut t_weights = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = if k == n { horizon } else { k as f64 * h };
        let x = ccnf_flow(&p, &start, t, &goal)?;
        t_nodes.push(AutoSample { z_target: z_single.to_vec(), z: x.z, tau: x.tau });
        t_weights.push(if k == 0 || k == n { 0.5 * h } else { h });
    }

    // Pseudo-time route: τ₁ - τ graded geometrically from |τ₀ - τ₁| to ε,
    // z from the interpolant mean, trapezoid on the non-uniform nodes.
    let sign = (p.tau1 - p.tau0).signum();
    let taus: Vec<f64> = (0..=n)
        .map(|k| {
            if k == 0 {
                p.tau0
            } else if k == n {
                tau_end
            } else {
                let s = gap * (eps / gap).powf(k as f64 / n as f64);
                p.tau1 - sign * s
            }
        })
        .collect();
    let mut tau_nodes = Vec::with_capacity(n + 1);
    let mut tau_weights = vec![0.0; n + 1];
    for k in 0..=n {
        let g = interpolant_params(&p, taus[k], z_single)?;
        tau_nodes.push(AutoSample { z_target: z_single.to_vec(), z: g.mean, tau: taus[k] });
        if k < n {
            let half = 0.5 * (taus[k + 1] - taus[k]).abs();
            tau_weights[k] += half;
            tau_weights[k + 1] += half;
        }
    }
    for (w, &tau) in tau_weights.iter_mut().zip(&taus) {
        *w *= auto_weight(&p, tau, true);
    }

    let time_route = weighted_auto_integral(m, &p, &t_nodes, &t_weights)?;
    let tau_route = weighted_auto_integral(m, &p, &tau_nodes, &tau_weights)?;

    let scale = time_route
        .grad
        .iter()
        .chain(&tau_route.grad)
        .fold(0.0f64, |a, g| a.max(g.abs()));
    let diff = time_route
        .grad
        .iter()
        .zip(&tau_route.grad)
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    let rel = if scale == 0.0 { 0.0 } else { diff / scale };
    let pass = rel < 1e-3;
    Ok(VerificationReport {
        check: "grad_equivalence".into(),
        max_rel_err: rel,
        pass,
        details: json!({
            "quadrature_n": n,
            "eps_tau_guard": eps,
            "horizon": horizon,
            "time_integral": time_route.value,
            "pseudo_time_integral": tau_route.value,
            "max_abs_grad": scale,
            "max_abs_grad_diff": diff,
            "coordinate_rel_err": max_rel_err(&time_route.grad, &tau_route.grad, scale.max(f64::MIN_POSITIVE)),
        }),
    })
}

/// `Σ_k w_k ‖v_θ(x_k) - v'(x_k)‖²` and its parameter gradient.
fn weighted_auto_integral(
    m: &PotentialNet,
    p: &StableCcnfParams,
    nodes: &[AutoSample],
    weights: &[f64],
) -> Result<LossEval> {
    // evaluate_auto averages, so fold the node count into the weights.
    let n = nodes.len() as f64;
    let inputs: Vec<Vec<f64>> = nodes
        .iter()
        .map(|s| {
            let mut x = s.z.clone();
            x.push(s.tau);
            x
        })
        .collect();
    let res = loss_param_grad(&m.net, &inputs, TapeMode::SecondOrder, |i, _, g| {
        let g = g.expect("second-order tape supplies the input gradient");
        let s = &nodes[i];
        let target = auto_target(p, &s.z, s.tau, &s.z_target);
        let w = n * weights[i];
        let v: Vec<f64> = g.iter().map(|g| -g).collect();
        Ok(LocalLoss {
            value: residual_term(&v, &target, w),
            d_output: vec![0.0],
            d_input_grad: Some(v.iter().zip(&target).map(|(v, c)| -2.0 * w * (v - c)).collect()),
        })
    })?;
    Ok(finish(res, Vec::new()))
}
