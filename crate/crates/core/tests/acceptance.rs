//! The ten acceptance criteria at their stated tolerances. Each prints one
//! `criterion N: PASS|FAIL` line; the test fails if any criterion does.
//!
//! Run with `cargo test -p stableflow --test acceptance -- --nocapture`.

use std::time::Instant;

use stableflow::ccnf::{interpolant_params, StableCcnfParams};
use stableflow::data::Rng;
use stableflow::dynamics::{lyapunov_scan, stability_eval, DEFAULT_DT};
use stableflow::loss::{exact_marginal_vf, EmpiricalTarget};
use stableflow::model::{Model, ModelKind, PotentialNet};
use stableflow::train::{train, TrainConfig};
use stableflow::verify;

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn line(o: &Outcome) -> String {
    format!("criterion {}: {} {}", o.id, if o.pass { "PASS" } else { "FAIL" }, o.detail)
}

fn record(out: &mut Vec<Outcome>, id: usize, pass: bool, detail: String) {
    let o = Outcome { id, pass, detail };
    eprintln!("{}", line(&o));
    out.push(o);
}

fn secs(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

fn trained_potential(cfg: &TrainConfig, data: &EmpiricalTarget) -> PotentialNet {
    let model = cfg.init_model(data.dim()).expect("init");
    match train(model, data, cfg, &mut cfg.batch_rng()).expect("training") {
        (Model::Potential(m), _) => m,
        _ => unreachable!("potential config"),
    }
}

/// Mean of `‖-∇H_θ - v̄‖²` over `τ ~ U[0.1, 0.9]`, a uniformly chosen
/// target point and `z` from its interpolant with every standardized
/// coordinate inside 3σ.
fn oracle_mse(m: &PotentialNet, p: &StableCcnfParams, data: &EmpiricalTarget, n: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut total = 0.0;
    for _ in 0..n {
        let tau = rng.uniform_in(0.1, 0.9);
        let zt = data.sample(&mut rng).to_vec();
        let g = interpolant_params(p, tau, &zt).unwrap();
        let z: Vec<f64> = g
            .mean
            .iter()
            .zip(&g.cov_diag)
            .map(|(mu, c)| {
                let mut e = rng.normal();
                while e.abs() > 3.0 {
                    e = rng.normal();
                }
                mu + c.sqrt() * e
            })
            .collect();
        let v = m.grad_field(&z, tau).unwrap();
        let exact = exact_marginal_vf(p, data, &z, tau).unwrap();
        total += v.iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    total / n as f64
}

#[test]
fn acceptance_criteria() {
    let mut out = Vec::new();

    let t = Instant::now();
    let err = verify::ot_equivalence_error().unwrap();
    let el = secs(t);
    record(&mut out, 1, err < 1e-12 && el < 1.0, format!("max |stable - ot| = {err:.3e} ({el:.2}s)"));

    let t = Instant::now();
    let err = verify::tau_bijection_error(1000, 11).unwrap();
    let el = secs(t);
    record(&mut out, 2, err < 1e-9 && el < 1.0, format!("max round-trip error = {err:.3e} ({el:.2}s)"));

    let (lambda_tau, gap) = verify::min_rates_equality_case().unwrap();
    let rate_err = (lambda_tau - std::f64::consts::LN_10).abs();
    record(
        &mut out,
        3,
        rate_err < 1e-12 && (gap - 0.1).abs() < 1e-6,
        format!("lambda_tau - ln 10 = {rate_err:.3e}, |tau(T) - tau1| = {gap:.9}"),
    );

    let t = Instant::now();
    let errs = [
        ("input_grad", verify::input_grad_error().unwrap()),
        ("auto_unnormalized", verify::auto_loss_grad_error(false).unwrap()),
        ("auto", verify::auto_loss_grad_error(true).unwrap()),
        ("cfm_ot", verify::ot_loss_grad_error().unwrap()),
    ];
    let el = secs(t);
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let listing: Vec<String> = errs.iter().map(|(k, e)| format!("{k} {e:.2e}")).collect();
    record(&mut out, 4, worst < 1e-4 && el < 60.0, format!("{} ({el:.1}s)", listing.join(", ")));

    let (a, b) = verify::grad_equivalence_pair().unwrap();
    record(
        &mut out,
        5,
        a.max_rel_err < 1e-3 && b.max_rel_err < a.max_rel_err,
        format!("n=512: {:.3e}, n=1024: {:.3e}", a.max_rel_err, b.max_rel_err),
    );

    let (min_w, sum_err) = verify::mixture_convexity_error(10_000, 41).unwrap();
    let single = verify::single_point_oracle_error(1000, 42).unwrap();
    record(
        &mut out,
        6,
        min_w >= 0.0 && sum_err <= 1e-12 && single == 0.0,
        format!("min weight {min_w:.3e}, max |sum - 1| {sum_err:.3e}, single-point gap {single:.3e}"),
    );

    // 8: two points, unit base covariance, equal rates
    let t = Instant::now();
    let mut cfg8 = TrainConfig::desk(ModelKind::Potential);
    let p8 = StableCcnfParams::standard(2, 1.0);
    cfg8.ccnf = Some(p8.clone());
    let two = EmpiricalTarget::new(vec![vec![-1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let m8 = trained_potential(&cfg8, &two);
    let mse = oracle_mse(&m8, &p8, &two, 10_000, 81);
    let el = secs(t);
    let result8 = (mse < 0.05 && el < 600.0, format!("oracle MSE {mse:.4} ({el:.1}s)"));

    // 9: moons, stable vs baseline
    let t = Instant::now();
    let cfg_s = TrainConfig::desk(ModelKind::Potential);
    let moons = cfg_s.data.load(cfg_s.seed).unwrap();
    let m9 = trained_potential(&cfg_s, &moons);
    let stable = stability_eval(
        &Model::Potential(m9.clone()),
        cfg_s.ccnf.as_ref(),
        &moons,
        2000,
        DEFAULT_DT,
        &mut Rng::new(91),
    )
    .unwrap();
    let cfg_b = TrainConfig::desk(ModelKind::Field);
    let (mb, _) = train(cfg_b.init_model(2).unwrap(), &moons, &cfg_b, &mut cfg_b.batch_rng()).expect("training");
    let base = stability_eval(&mb, None, &moons, 2000, DEFAULT_DT, &mut Rng::new(92)).unwrap();
    let el = secs(t);
    let d = |e: &stableflow::dynamics::StabilityEval, t: f64| e.distance_at(t).unwrap_or(f64::INFINITY);
    let stable_ok = d(&stable, 1.5) <= 1.5 * d(&stable, 1.0);
    let base_ok = d(&base, 1.5) >= 3.0 * d(&base, 1.0) || base.divergence_fraction > 0.25;
    let result9 = (
        stable_ok && base_ok && el < 900.0,
        format!(
            "stable d(1.0) {:.4} d(1.5) {:.4}; baseline d(1.0) {:.4} d(1.5) {:.4} diverged {:.3} ({el:.1}s)",
            d(&stable, 1.0),
            d(&stable, 1.5),
            d(&base, 1.0),
            d(&base, 1.5),
            base.divergence_fraction
        ),
    );

    // 7: random nets and the two trained potentials
    let points = verify::lyapunov_points(10_000, 71);
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..4 {
        let m = PotentialNet::init(2, 4, 64, &mut Rng::new(70 + seed)).unwrap();
        worst = worst.max(lyapunov_scan(&m, &points, 1e-8).unwrap().max_lie_derivative);
    }
    for m in [&m8, &m9] {
        worst = worst.max(lyapunov_scan(m, &points, 1e-8).unwrap().max_lie_derivative);
    }
    record(&mut out, 7, worst <= 1e-12, format!("max grad H . v = {worst:.3e} over 6 nets"));
    record(&mut out, 8, result8.0, result8.1);
    record(&mut out, 9, result9.0, result9.1);

    // 10: larger ratio ⇒ interpolant mean closer to z₀ at every interior τ
    let (z0, zt) = (0.0, 4.0);
    let mut violations = 0usize;
    let mut total = 0usize;
    for i in 1..100 {
        let tau = i as f64 / 100.0;
        let dist: Vec<f64> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|&k| {
                let mut p = StableCcnfParams::standard(1, k);
                p.z0_mean = vec![z0];
                (interpolant_params(&p, tau, &[zt]).unwrap().mean[0] - z0).abs()
            })
            .collect();
        for w in dist.windows(2) {
            total += 1;
            violations += usize::from(w[1] > w[0] + 1e-12);
        }
    }
    record(
        &mut out,
        10,
        violations == 0,
        format!("{violations} of {total} adjacent-ratio pairs violate the ordering"),
    );

    out.sort_by_key(|o| o.id);
    println!();
    for o in &out {
        println!("{}", line(o));
    }
    let failed: Vec<usize> = out.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
