//! Property suites with fixed seeds, shared by the CLI `verify` command and
//! the test targets.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ccnf::{
    ccnf_vf, interpolant_params, min_rates, ot_flow, ot_vf, reparam_stable_flow, reparam_stable_vf, tau_flow,
    tau_flow_inverse, AugmentedState, StableCcnfParams,
};
use crate::data::Rng;
use crate::diffkit::{finite_diff_grad, max_rel_err};
use crate::dynamics::{integrate, lyapunov_scan, Method};
use crate::error::{Error, Result};
use crate::loss::{
    draw_auto_samples, draw_ot_samples, evaluate_auto, evaluate_ot, exact_marginal_vf, grad_equivalence_check,
    mixture_weights, EmpiricalTarget, VerificationReport, DEFAULT_EPS_TAU_GUARD,
};
use crate::model::{FieldNet, PotentialNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Math,
    Grad,
    Oracle,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "math" => Ok(Suite::Math),
            "grad" => Ok(Suite::Grad),
            "oracle" => Ok(Suite::Oracle),
            "all" => Ok(Suite::All),
            _ => Err(Error::config("suite", format!("unknown suite `{s}` (math, grad, oracle, all)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub pass: bool,
    pub checks: Vec<VerificationReport>,
}

impl SuiteReport {
    pub fn failing(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.check.as_str()).collect()
    }
}

type Check = fn(&StableCcnfParams) -> Result<VerificationReport>;

fn checks(suite: Suite) -> Vec<(&'static str, Check)> {
    let math: Vec<(&'static str, Check)> = vec![
        ("positivity", positivity),
        ("ot_equivalence", ot_equivalence),
        ("tau_bijection", tau_bijection),
        ("min_rates_equality", min_rates_equality),
        ("interpolant_ratio_ordering", interpolant_ratio_ordering),
    ];
    let grad: Vec<(&'static str, Check)> = vec![
        ("input_grad_fd", input_grad_fd),
        ("loss_grad_fd_auto_unnormalized", |_| auto_loss_grad_fd(false)),
        ("loss_grad_fd_auto", |_| auto_loss_grad_fd(true)),
        ("loss_grad_fd_cfm_ot", ot_loss_grad_fd),
        ("grad_equivalence", grad_equivalence),
    ];
    let oracle: Vec<(&'static str, Check)> = vec![
        ("mixture_convexity", mixture_convexity),
        ("single_point_oracle", single_point_oracle),
        ("lyapunov_random_nets", lyapunov_random_nets),
    ];
    match suite {
        Suite::Math => math,
        Suite::Grad => grad,
        Suite::Oracle => oracle,
        Suite::All => math.into_iter().chain(grad).chain(oracle).collect(),
    }
}

/// Runs a suite against `params`. Only the positivity check reads the
/// supplied parameters; the others use their own fixed settings so that a
/// corrupted config shows up under one name.
pub fn run_suite(suite: Suite, params: &StableCcnfParams) -> SuiteReport {
    let checks: Vec<VerificationReport> = checks(suite)
        .into_iter()
        .map(|(name, f)| match f(params) {
            Ok(r) => r,
            Err(e) => VerificationReport {
                check: name.into(),
                max_rel_err: 1.0,
                pass: false,
                details: json!({ "error": e.to_string() }),
            },
        })
        .collect();
    SuiteReport {
        suite,
        pass: checks.iter().all(|c| c.pass),
        checks,
    }
}

fn report(check: &str, err: f64, tol: f64, details: serde_json::Value) -> VerificationReport {
    VerificationReport {
        check: check.into(),
        max_rel_err: err,
        pass: err < tol,
        details,
    }
}

fn positivity(p: &StableCcnfParams) -> Result<VerificationReport> {
    let (pass, msg) = match p.validate() {
        Ok(()) => (true, String::new()),
        Err(e) => (false, e.to_string()),
    };
    Ok(VerificationReport {
        check: "positivity".into(),
        max_rel_err: if pass { 0.0 } else { 1.0 },
        pass,
        details: json!({ "lambda_z": p.lambda_z, "lambda_tau": p.lambda_tau, "message": msg }),
    })
}

/// Largest absolute gap between the reparameterized stable path at equal
/// rates and the straight-line path, over a 100×100 `(z, τ)` grid.
pub fn ot_equivalence_error() -> Result<f64> {
    let p = StableCcnfParams::standard(1, 1.0);
    let mut worst = 0.0f64;
    for zt in [-1.7, 0.4, 2.5] {
        for i in 0..100 {
            let z = -3.0 + 6.0 * i as f64 / 99.0;
            for j in 0..100 {
                let tau = 0.99 * j as f64 / 99.0;
                let a = reparam_stable_flow(&p, &[z], tau, &[zt])?;
                let b = ot_flow(&[z], tau, &[zt], 0.0)?;
                let va = reparam_stable_vf(&p, &[z], tau, &[zt])?;
                let vb = ot_vf(&[z], tau, &[zt], 0.0)?;
                worst = worst.max((a[0] - b[0]).abs()).max((va[0] - vb[0]).abs());
            }
        }
    }
    Ok(worst)
}

fn ot_equivalence(_: &StableCcnfParams) -> Result<VerificationReport> {
    let err = ot_equivalence_error()?;
    Ok(report("ot_equivalence", err, 1e-12, json!({ "max_abs_diff": err, "grid": [100, 100] })))
}

/// Worst round-trip error of the pseudo-time map over `n` random times and
/// `n` random pseudo-times.
pub fn tau_bijection_error(n: usize, seed: u64) -> Result<f64> {
    let p = StableCcnfParams::standard(1, 2.0);
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let t = rng.uniform_in(0.0, 5.0);
        worst = worst.max((tau_flow_inverse(&p, tau_flow(&p, t))? - t).abs());
        let tau = rng.uniform_in(p.tau0, p.tau1 - 1e-6);
        worst = worst.max((tau_flow(&p, tau_flow_inverse(&p, tau)?) - tau).abs());
    }
    Ok(worst)
}

fn tau_bijection(_: &StableCcnfParams) -> Result<VerificationReport> {
    let err = tau_bijection_error(1000, 11)?;
    Ok(report("tau_bijection", err, 1e-9, json!({ "points": 1000, "max_abs_err": err })))
}

/// `(λ_τ, |τ(T) - τ₁|)` for the equality case `T = 1`, `ε_τ = 0.1`, unit
/// gap, integrating τ with RK4 at `dt = 1e-3`.
pub fn min_rates_equality_case() -> Result<(f64, f64)> {
    let (lambda_tau, _) = min_rates(1.0, 0.1, 0.1, 1.0, 1.0)?;
    let traj = integrate(|_, x| Ok(vec![-lambda_tau * (x[0] - 1.0)]), &[0.0], (0.0, 1.0), 1e-3, Method::Rk4)?;
    let end = traj.last_state().expect("non-empty trajectory")[0];
    Ok((lambda_tau, (end - 1.0).abs()))
}

fn min_rates_equality(_: &StableCcnfParams) -> Result<VerificationReport> {
    let (lambda_tau, gap) = min_rates_equality_case()?;
    let (rate_err, gap_err) = ((lambda_tau - std::f64::consts::LN_10).abs(), (gap - 0.1).abs());
    let err = rate_err.max(gap_err);
    let pass = rate_err < 1e-12 && gap_err < 1e-6;
    Ok(VerificationReport {
        check: "min_rates_equality".into(),
        max_rel_err: err,
        pass,
        details: json!({ "lambda_tau": lambda_tau, "final_tau_gap": gap }),
    })
}

/// Interpolant means for ratios 1 to 4 on an interior τ grid. A larger
/// ratio shrinks the weight `r^k` on the start point, so the mean sits
/// closer to the target `z'` at every interior τ.
fn interpolant_ratio_ordering(_: &StableCcnfParams) -> Result<VerificationReport> {
    let (z0, zt) = (0.0, 4.0);
    let mut violations = 0usize;
    let mut worst = f64::NEG_INFINITY;
    for i in 1..100 {
        let tau = i as f64 / 100.0;
        let dist: Vec<f64> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|&k| {
                let mut p = StableCcnfParams::standard(1, k);
                p.z0_mean = vec![z0];
                Ok((interpolant_params(&p, tau, &[zt])?.mean[0] - zt).abs())
            })
            .collect::<Result<_>>()?;
        for w in dist.windows(2) {
            // positive margin when the larger ratio is closer to z'
            let margin = w[0] - w[1];
            worst = if worst == f64::NEG_INFINITY { margin } else { worst.min(margin) };
            violations += usize::from(!(margin > 0.0));
        }
    }
    Ok(VerificationReport {
        check: "interpolant_ratio_ordering".into(),
        max_rel_err: if violations == 0 { 0.0 } else { 1.0 },
        pass: violations == 0,
        details: json!({ "violations": violations, "min_margin": worst }),
    })
}

fn small_potential(seed: u64) -> Result<PotentialNet> {
    PotentialNet::init(2, 4, 8, &mut Rng::new(seed))
}

fn moons(n: usize, seed: u64) -> Result<EmpiricalTarget> {
    let ds = crate::data::generate(crate::data::DatasetName::Moons, n, 0.05, seed)?;
    EmpiricalTarget::new(ds.to_vectors())
}

/// Worst relative error of the potential's input gradient against central
/// differences at 16 random points, 4×8 net.
pub fn input_grad_error() -> Result<f64> {
    let m = small_potential(21)?;
    let mut rng = Rng::new(22);
    let mut worst = 0.0f64;
    for _ in 0..16 {
        let x = vec![rng.uniform_in(-2.0, 2.0), rng.uniform_in(-2.0, 2.0), rng.uniform()];
        let g = m.net.input_grad(&x)?;
        let fd = finite_diff_grad(|y| m.net.forward(y).map_or(f64::NAN, |o| o[0]), &x, 1e-5)?;
        worst = worst.max(max_rel_err(&g, &fd, 1e-6));
    }
    Ok(worst)
}

fn input_grad_fd(_: &StableCcnfParams) -> Result<VerificationReport> {
    let err = input_grad_error()?;
    Ok(report("input_grad_fd", err, 1e-4, json!({ "net": "4x8", "points": 16 })))
}

/// Relative error of the analytic parameter gradient of a pseudo-time loss
/// against central differences, 4×8 net, batch 16.
pub fn auto_loss_grad_error(normalized: bool) -> Result<f64> {
    let p = StableCcnfParams::standard(2, 2.0);
    let m = small_potential(23)?;
    let data = moons(50, 24)?;
    let end = if normalized { p.tau1 - DEFAULT_EPS_TAU_GUARD } else { p.tau1 };
    let samples = draw_auto_samples(&p, &data, 16, end, &mut Rng::new(25))?;
    let eval = evaluate_auto(&m, &p, &samples, normalized)?;
    let fd = finite_diff_grad(
        |theta| {
            let mut m2 = m.clone();
            m2.net
                .set_params(theta)
                .and_then(|_| evaluate_auto(&m2, &p, &samples, normalized))
                .map_or(f64::NAN, |e| e.value)
        },
        &m.net.params(),
        1e-5,
    )?;
    Ok(max_rel_err(&eval.grad, &fd, 1e-6))
}

fn auto_loss_grad_fd(normalized: bool) -> Result<VerificationReport> {
    let name = if normalized { "loss_grad_fd_auto" } else { "loss_grad_fd_auto_unnormalized" };
    let err = auto_loss_grad_error(normalized)?;
    Ok(report(name, err, 1e-4, json!({ "net": "4x8", "batch": 16 })))
}

/// As [`auto_loss_grad_error`] for the straight-line baseline loss.
pub fn ot_loss_grad_error() -> Result<f64> {
    let m = FieldNet::init(2, 4, 8, true, &mut Rng::new(26))?;
    let data = moons(50, 27)?;
    let samples = draw_ot_samples(&data, 16, &mut Rng::new(28))?;
    let eval = evaluate_ot(&m, &samples, 0.0)?;
    let fd = finite_diff_grad(
        |theta| {
            let mut m2 = m.clone();
            m2.net
                .set_params(theta)
                .and_then(|_| evaluate_ot(&m2, &samples, 0.0))
                .map_or(f64::NAN, |e| e.value)
        },
        &m.net.params(),
        1e-5,
    )?;
    Ok(max_rel_err(&eval.grad, &fd, 1e-6))
}

fn ot_loss_grad_fd(_: &StableCcnfParams) -> Result<VerificationReport> {
    let err = ot_loss_grad_error()?;
    Ok(report("loss_grad_fd_cfm_ot", err, 1e-4, json!({ "net": "4x8", "batch": 16 })))
}

/// Gradient-equivalence discrepancy at 512 and 1024 quadrature nodes.
pub fn grad_equivalence_pair() -> Result<(VerificationReport, VerificationReport)> {
    let p = StableCcnfParams::standard(2, 2.0);
    let z = [0.8, -0.4];
    Ok((
        grad_equivalence_check(&p, &z, 512, 1e-3, 31)?,
        grad_equivalence_check(&p, &z, 1024, 1e-3, 31)?,
    ))
}

fn grad_equivalence(_: &StableCcnfParams) -> Result<VerificationReport> {
    let (a, b) = grad_equivalence_pair()?;
    let converging = b.max_rel_err < a.max_rel_err;
    Ok(VerificationReport {
        check: "grad_equivalence".into(),
        max_rel_err: a.max_rel_err,
        pass: a.pass && converging,
        details: json!({ "n512": a.max_rel_err, "n1024": b.max_rel_err, "converging": converging }),
    })
}

/// Worst deviation of the oracle weights from a convex combination over
/// `n` random queries: `(most negative weight, worst |Σw - 1|)`.
pub fn mixture_convexity_error(n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = Rng::new(seed);
    let (mut min_w, mut worst_sum) = (f64::INFINITY, 0.0f64);
    for _ in 0..n {
        let k = 1 + rng.index(8);
        let points = (0..k)
            .map(|_| vec![rng.uniform_in(-3.0, 3.0), rng.uniform_in(-3.0, 3.0)])
            .collect();
        let data = EmpiricalTarget::new(points)?;
        let mut p = StableCcnfParams::standard(2, rng.uniform_in(0.5, 4.0));
        p.sigma0_diag = vec![rng.uniform_in(0.1, 2.0), rng.uniform_in(0.1, 2.0)];
        let tau = rng.uniform_in(0.0, 0.999);
        let z = [rng.uniform_in(-5.0, 5.0), rng.uniform_in(-5.0, 5.0)];
        let w = mixture_weights(&p, &data, &z, tau)?;
        min_w = min_w.min(w.iter().copied().fold(f64::INFINITY, f64::min));
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((min_w, worst_sum))
}

fn mixture_convexity(_: &StableCcnfParams) -> Result<VerificationReport> {
    let (min_w, sum_err) = mixture_convexity_error(10_000, 41)?;
    Ok(VerificationReport {
        check: "mixture_convexity".into(),
        max_rel_err: sum_err,
        pass: min_w >= 0.0 && sum_err <= 1e-12,
        details: json!({ "queries": 10_000, "min_weight": min_w, "max_sum_err": sum_err }),
    })
}

/// Largest gap between the oracle on a one-point target and the
/// conditional field toward that point.
pub fn single_point_oracle_error(n: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let p = StableCcnfParams::standard(2, 2.0);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let zt = vec![rng.uniform_in(-3.0, 3.0), rng.uniform_in(-3.0, 3.0)];
        let data = EmpiricalTarget::new(vec![zt.clone()])?;
        let z = vec![rng.uniform_in(-5.0, 5.0), rng.uniform_in(-5.0, 5.0)];
        let tau = rng.uniform_in(0.0, 0.999);
        let a = exact_marginal_vf(&p, &data, &z, tau)?;
        let b = ccnf_vf(&p, &AugmentedState::new(z, tau), &AugmentedState::new(zt, p.tau1))?;
        worst = a.iter().zip(&b).fold(worst, |w, (x, y)| w.max((x - y).abs()));
    }
    Ok(worst)
}

fn single_point_oracle(_: &StableCcnfParams) -> Result<VerificationReport> {
    let err = single_point_oracle_error(1000, 42)?;
    Ok(VerificationReport {
        check: "single_point_oracle".into(),
        max_rel_err: err,
        pass: err == 0.0,
        details: json!({ "queries": 1000, "max_abs_diff": err }),
    })
}

/// `n` random `(z, τ)` points in a box around the moons data.
pub fn lyapunov_points(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| vec![rng.uniform_in(-3.0, 3.0), rng.uniform_in(-3.0, 3.0), rng.uniform_in(0.0, 1.0)])
        .collect()
}

fn lyapunov_random_nets(_: &StableCcnfParams) -> Result<VerificationReport> {
    let points = lyapunov_points(10_000, 51);
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..4 {
        let m = PotentialNet::init(2, 4, 64, &mut Rng::new(60 + seed))?;
        worst = worst.max(lyapunov_scan(&m, &points, 1e-8)?.max_lie_derivative);
    }
    Ok(VerificationReport {
        check: "lyapunov_random_nets".into(),
        max_rel_err: worst.max(0.0),
        pass: worst <= 1e-12,
        details: json!({ "nets": 4, "points": points.len(), "max_lie_derivative": worst }),
    })
}
