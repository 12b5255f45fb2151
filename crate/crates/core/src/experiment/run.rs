use std::time::Instant;

use crate::error::Result;
use crate::identities::{
    decoupling_residual, derivative_bound_checks, fds_residual, gaussian_checks, magnetisation_bound_check,
    nishimori_residual, nonincreasing, thermal_l_check, ScanPoint, EXACT_TOL,
};
use crate::model::ModelConfig;
use crate::observables::ObservableSpec;
use crate::perturbation::LambdaVector;
use crate::quenched::{empirical_v_n, lambda_average, observable_records, Estimate, Scenario, Strategy};
use crate::rng::{derive_seed, streams};

use super::config::{ExperimentConfig, TestSpec};
use super::output::{Row, Timing};

/// Draws used for the empirical `v_N`.
pub const V_N_DRAWS: usize = 16;

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub rows: Vec<Row>,
    pub timings: Vec<Timing>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        !self.rows.iter().any(Row::failed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(|r| r.failed())
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    hash: String,
    strategy: Strategy,
    lambdas: Vec<LambdaVector>,
}

impl Ctx<'_> {
    fn new(cfg: &ExperimentConfig) -> Ctx<'_> {
        let lambdas = cfg.perturbation.lambda_draws(cfg.lambda_draw_count(), derive_seed(cfg.seed, streams::LAMBDA));
        Ctx { cfg, hash: cfg.hash(), strategy: cfg.strategy(), lambdas }
    }

    fn report_rows(&self, reports: impl IntoIterator<Item = crate::identities::ResidualReport>) -> Vec<Row> {
        reports.into_iter().map(|r| Row::from_report(&r, self.cfg.seed, &self.hash)).collect()
    }
}

/// Every configured test at every N, in config order.
pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ctx = Ctx::new(cfg);
    let mut out = Outcome::default();
    for (ti, test) in cfg.tests.iter().enumerate() {
        for n in cfg.n_values() {
            let start = Instant::now();
            let seed = derive_seed(derive_seed(cfg.seed, ti as u64), n as u64);
            let rows = run_test(&ctx, test, &cfg.model.with_n(n), seed)?;
            out.rows.extend(rows);
            out.timings.push(Timing { test: test.name().into(), n, seconds: start.elapsed().as_secs_f64() });
        }
    }
    Ok(out)
}

fn run_test(ctx: &Ctx, test: &TestSpec, model: &ModelConfig, seed: u64) -> Result<Vec<Row>> {
    let cfg = ctx.cfg;
    let pert = &cfg.perturbation;
    let outer = outer_only(&ctx.strategy);
    let strategy = &outer;
    let single = || -> Result<Scenario> { Scenario::new(model, pert, &pert.lambda_for_run()?) };
    Ok(match test {
        TestSpec::Nishimori { functions } => {
            let scn = single()?;
            let reports = functions
                .iter()
                .enumerate()
                .map(|(j, f)| nishimori_residual(&scn, f, strategy, derive_seed(seed, j as u64)))
                .collect::<Result<Vec<_>>>()?;
            ctx.report_rows(reports)
        }
        TestSpec::MagnetisationBound => ctx.report_rows([magnetisation_bound_check(&single()?, strategy, seed)?]),
        TestSpec::GaussianIdentities => {
            let g = gaussian_checks(&single()?, &ctx.strategy, seed)?;
            ctx.report_rows([g.derivative, g.signal_covariance, g.variance_equality, g.overlap_vs_l])
        }
        TestSpec::ThermalL => ctx.report_rows([thermal_l_check(model, pert, strategy, &ctx.lambdas, seed)?]),
        TestSpec::DerivativeBounds { k } => {
            let scn = single()?;
            let mut reports = Vec::new();
            for (j, &k) in k.iter().enumerate() {
                let mut r = derivative_bound_checks(&scn, k, strategy, seed)?;
                if j > 0 {
                    r.retain(|r| r.name != "free_entropy_gap");
                }
                reports.extend(r);
            }
            ctx.report_rows(reports)
        }
        TestSpec::Fds { functions, k } => {
            let v_n = empirical_v_n(model, pert, strategy, V_N_DRAWS, seed)?;
            let mut reports = Vec::new();
            for &k in k {
                for (j, f) in functions.iter().enumerate() {
                    let s = derive_seed(derive_seed(seed, k as u64), j as u64);
                    reports.push(fds_residual(model, pert, f, k, strategy, &ctx.lambdas, v_n, s)?);
                }
            }
            ctx.report_rows(reports)
        }
        TestSpec::Decoupling { h, sites } => {
            let r = decoupling_residual(model, pert, h, sites, strategy, &ctx.lambdas, seed)?;
            vec![decoupling_row(ctx, &r)]
        }
        TestSpec::Variance { observables } => {
            let scn = single()?;
            observable_records(&scn, observables, strategy, seed)?
                .iter()
                .zip(observables)
                .map(|(rec, o)| {
                    let split = rec.total_var - rec.thermal_var - rec.quenched_var;
                    Row {
                        estimate: Some(rec.estimate),
                        thermal_var: Some(rec.thermal_var),
                        quenched_var: Some(rec.quenched_var),
                        total_var: Some(rec.total_var),
                        se: Some(rec.se),
                        bound: Some(EXACT_TOL),
                        pass: Some(split.abs() <= EXACT_TOL),
                        ..Row::blank("variance", model.n, &o.to_string(), cfg.seed, &ctx.hash)
                    }
                })
                .collect()
        }
    })
}

/// The inner Gauss-Hermite layer of the hybrid strategy only matters for the
/// Gaussian-channel identities; every other test is already exact in σ* under
/// plain Monte Carlo over the data.
fn outer_only(s: &Strategy) -> Strategy {
    match *s {
        Strategy::Hybrid { r, .. } => Strategy::MonteCarlo { r },
        other => other,
    }
}

/// At finite N the decoupling residual is only expected to shrink with N, so it
/// carries a verdict only when it must vanish exactly (a single factor).
fn decoupling_row(ctx: &Ctx, r: &crate::identities::ResidualReport) -> Row {
    let mut row = Row::from_report(r, ctx.cfg.seed, &ctx.hash);
    if r.tol.is_none() {
        row.pass = None;
    }
    row
}

/// λ-averaged moments of several observables at one N.
fn averaged_rows(
    ctx: &Ctx,
    model: &ModelConfig,
    obs: &[ObservableSpec],
    strategy: &Strategy,
    seed: u64,
) -> Result<Vec<Row>> {
    let k = ctx.lambdas.len();
    let mut acc = vec![([0.0f64; 4], Vec::with_capacity(k)); obs.len()];
    for (j, lam) in ctx.lambdas.iter().enumerate() {
        let scn = Scenario::new(model, &ctx.cfg.perturbation, lam)?;
        let recs = observable_records(&scn, obs, strategy, derive_seed(seed, j as u64))?;
        for (a, r) in acc.iter_mut().zip(&recs) {
            for (s, x) in a.0.iter_mut().zip([r.estimate, r.thermal_var, r.quenched_var, r.total_var]) {
                *s += x / k as f64;
            }
            a.1.push(Estimate { value: r.total_var, se: r.total_var_se });
        }
    }
    Ok(acc
        .iter()
        .zip(obs)
        .map(|((m, per), o)| Row {
            estimate: Some(m[0]),
            thermal_var: Some(m[1]),
            quenched_var: Some(m[2]),
            total_var: Some(m[3]),
            se: Some(lambda_average(per).se),
            ..Row::blank("concentration", model.n, &o.to_string(), ctx.cfg.seed, &ctx.hash)
        })
        .collect())
}

fn trend_row(ctx: &Ctx, test: &str, observable: &str, points: &[ScanPoint]) -> Option<Row> {
    let verdict = nonincreasing(points)?;
    let last = points.last()?;
    Some(Row { pass: Some(verdict), ..Row::blank(test, last.n, observable, ctx.cfg.seed, &ctx.hash) })
}

fn point(r: &Row) -> ScanPoint {
    ScanPoint {
        n: r.n,
        value: r.total_var.or(r.estimate).unwrap_or(f64::NAN),
        se: r.se.unwrap_or(0.0),
        v_n: None,
        shape: None,
    }
}

/// λ-averaged total variances per (N, observable), trend verdicts and the optional
/// enumeration cross-check at the smallest N.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ctx = Ctx::new(cfg);
    let sw = cfg.sweep.clone().unwrap_or_else(|| super::config::SweepConfig {
        n: vec![cfg.model.n],
        r: cfg.disorder_count(),
        lambda_draws: cfg.lambda_draw_count(),
        observables: vec![ObservableSpec::Multioverlap(vec![1, 1]), ObservableSpec::Multioverlap(vec![1, 1, 1])],
        decoupling: None,
        oracle: false,
    });
    let mut out = Outcome::default();
    let mut per_obs: Vec<Vec<ScanPoint>> = vec![Vec::new(); sw.observables.len()];
    let mut dec_points = Vec::new();
    for (ni, &n) in sw.n.iter().enumerate() {
        let start = Instant::now();
        let model = cfg.model.with_n(n);
        let seed = derive_seed(cfg.seed, n as u64);
        let rows = averaged_rows(&ctx, &model, &sw.observables, &ctx.strategy, seed)?;
        for (q, r) in rows.iter().enumerate() {
            per_obs[q].push(point(r));
        }
        if ni == 0 && sw.oracle && matches!(ctx.strategy, Strategy::Mcmc { .. }) {
            let exact = averaged_rows(&ctx, &model, &sw.observables, &Strategy::MonteCarlo { r: sw.r }, seed)?;
            for (m, e) in rows.iter().zip(&exact) {
                let (a, b) = (m.total_var.unwrap_or(f64::NAN), e.total_var.unwrap_or(f64::NAN));
                let se = (m.se.unwrap_or(0.0).powi(2) + e.se.unwrap_or(0.0).powi(2)).sqrt();
                out.rows.push(Row {
                    estimate: Some(a - b),
                    total_var: Some(b),
                    se: Some(se),
                    bound: Some(0.0),
                    pass: Some((a - b).abs() <= 3.0 * se),
                    ..Row::blank("oracle", n, &m.observable, cfg.seed, &ctx.hash)
                });
            }
        }
        out.rows.extend(rows);
        if let Some(d) = &sw.decoupling {
            let r = decoupling_residual(&model, &cfg.perturbation, &d.h, &d.sites, &ctx.strategy, &ctx.lambdas, seed)?;
            dec_points.push(ScanPoint { n, value: r.residual, se: r.se, v_n: None, shape: None });
            out.rows.push(decoupling_row(&ctx, &r));
        }
        out.timings.push(Timing { test: "sweep".into(), n, seconds: start.elapsed().as_secs_f64() });
    }
    for (o, pts) in sw.observables.iter().zip(&per_obs) {
        out.rows.extend(trend_row(&ctx, "trend", &o.to_string(), pts));
    }
    if let Some(d) = &sw.decoupling {
        out.rows.extend(trend_row(&ctx, "trend", &format!("{:?}@{:?}", d.h, d.sites), &dec_points));
    }
    Ok(out)
}
