//! End-to-end acceptance checks. Runs without the libtest harness so that every
//! criterion prints exactly one verdict line; exits non-zero if any fails.
//! Pass substrings as arguments to run a subset, e.g. `-- c10`.

use std::time::Instant;

use nishimori_lab::experiment::{self, ExperimentConfig, Outcome, Row};
use nishimori_lab::identities::{
    derivative_bound_checks, fds_residual, gaussian_checks, magnetisation_bound_check, nishimori_residual,
    thermal_l_check, FdsFunction, NishimoriFunction, ResidualReport, EXACT_TOL, IBP_TOL,
};
use nishimori_lab::model::{ChannelSpec, FieldValue, ModelConfig, PlantedInstance, PriorSpec};
use nishimori_lab::perturbation::{PerturbationConfig, PerturbationMode, PerturbationRealization};
use nishimori_lab::posterior::{build_posterior, PosteriorMode};
use nishimori_lab::quenched::{empirical_v_n, Scenario, Strategy};

type Check = Result<String, String>;

fn model(prior: PriorSpec, channel: ChannelSpec, n: usize, seed: u64) -> ModelConfig {
    ModelConfig { prior, channel, n, seed }
}

fn wigner(n: usize, seed: u64) -> ModelConfig {
    model(PriorSpec::Rademacher, ChannelSpec::SpikedTensor { p: 2, snr: 1.0 }, n, seed)
}

fn binary(k_max: usize, lambda_seed: u64) -> PerturbationConfig {
    PerturbationConfig { k_max, lambda_seed, noise_seed: lambda_seed + 1, ..PerturbationConfig::default() }
}

fn soft(k_max: usize, lambda_seed: u64) -> PerturbationConfig {
    PerturbationConfig {
        mode: PerturbationMode::Soft,
        soft_max_terms: 2,
        soft_dyadic_depth: 1,
        ..binary(k_max, lambda_seed)
    }
}

fn scenario(m: &ModelConfig, p: &PerturbationConfig) -> Result<Scenario, String> {
    let lam = p.lambda_for_run().map_err(|e| e.to_string())?;
    Scenario::new(m, p, &lam).map_err(|e| e.to_string())
}

fn describe(r: &ResidualReport) -> String {
    format!(
        "{} N={} {} residual={:.3e} se={:.2e} bound={:?} tol={:?}",
        r.name, r.n, r.observable, r.residual, r.se, r.bound, r.tol
    )
}

/// Every report passes; the detail names the worst margin.
fn all_pass(reports: &[ResidualReport]) -> Check {
    if let Some(bad) = reports.iter().find(|r| !r.pass) {
        return Err(describe(bad));
    }
    Ok(format!("{} checks", reports.len()))
}

fn e<T: std::fmt::Display>(x: T) -> String {
    x.to_string()
}

/// A varied family of small instances: priors × channels × N.
fn instance_family(count: usize, k_max: usize) -> Vec<(ModelConfig, PerturbationConfig)> {
    let priors = [
        PriorSpec::Rademacher,
        PriorSpec::FieldRademacher { fields: vec![], field: Some(FieldValue(0.3)), field_std: 0.5 },
        PriorSpec::GridSoft { points: vec![-1.0, 0.0, 1.0], weights: vec![0.25, 0.5, 0.25] },
    ];
    let channels = [
        ChannelSpec::SpikedTensor { p: 2, snr: 1.0 },
        ChannelSpec::SpikedTensor { p: 3, snr: 1.5 },
        ChannelSpec::GlmGaussian { m: 3, snr: 1.0, design_seed: 11 },
        ChannelSpec::PerceptronSign { m: 2, design_seed: 12 },
        ChannelSpec::Null,
    ];
    (0..count)
        .map(|i| {
            let prior = priors[i % priors.len()].clone();
            let pert = if matches!(prior, PriorSpec::GridSoft { .. }) {
                soft(k_max, i as u64)
            } else {
                binary(k_max, i as u64)
            };
            let channel = channels[(i / priors.len()) % channels.len()].clone();
            (model(prior, channel, 2 + i % 2, 100 + i as u64), pert)
        })
        .collect()
}

fn c1_nishimori() -> Check {
    let mut models: Vec<ModelConfig> = [2, 4, 6].iter().map(|&n| wigner(n, 7)).collect();
    for (n, m) in [(3, 2), (4, 3), (6, 4)] {
        models.push(model(PriorSpec::Rademacher, ChannelSpec::PerceptronSign { m, design_seed: 9 }, n, 8));
    }
    let fs = ["R:1", "R:1,2", "R:1,2,3", "spin_pair"];
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (i, m) in models.iter().enumerate() {
        let scn = scenario(m, &binary(3, 20 + i as u64))?;
        for (j, f) in fs.iter().enumerate() {
            let f: NishimoriFunction = f.parse().map_err(e)?;
            let r = nishimori_residual(&scn, &f, &Strategy::MonteCarlo { r: 6 }, (10 * i + j) as u64).map_err(e)?;
            if !(r.pass && r.residual.abs() < EXACT_TOL) {
                return Err(describe(&r));
            }
            worst = worst.max(r.residual.abs());
            count += 1;
        }
    }
    Ok(format!("{count} residuals, max |r| = {worst:.1e} < 1e-10"))
}

fn c2_magnetisation() -> Check {
    let q = Strategy::Quadrature { hermite: 8, laguerre: 8 };
    let mut reports = Vec::new();
    for n in [2, 4, 8] {
        let null = model(PriorSpec::Rademacher, ChannelSpec::Null, n, 0);
        let r = magnetisation_bound_check(&scenario(&null, &PerturbationConfig::none())?, &q, 0).map_err(e)?;
        if (r.residual - 1.0 / n as f64).abs() > 1e-12 {
            return Err(format!("null channel N={n}: Var(R1) = {} != 1/N", r.residual));
        }
        reports.push(r);
        let r = magnetisation_bound_check(&scenario(&wigner(n, 4), &binary(3, 5))?, &Strategy::MonteCarlo { r: 32 }, 1)
            .map_err(e)?;
        reports.push(r);
    }
    all_pass(&reports).map(|d| format!("{d}; Var(R1) = 0.25 at N=4 null channel"))
}

/// Gaussian-channel identities at N = 2, 3, 4 (shared by criteria 3 and 4).
fn gaussian_reports(n: usize) -> Result<Vec<ResidualReport>, String> {
    let scn = scenario(&wigner(n, 3), &binary(2, 5))?;
    let g = gaussian_checks(&scn, &Strategy::Hybrid { r: 4, hermite: 24 }, n as u64).map_err(e)?;
    Ok(vec![g.derivative, g.signal_covariance, g.variance_equality])
}

fn c3_derivative() -> Check {
    let r = gaussian_reports(3)?.remove(0);
    if r.pass && r.residual.abs() < IBP_TOL {
        Ok(format!("N=3 |E<H'> - (N/2)E<R12>| = {:.1e}", r.residual.abs()))
    } else {
        Err(describe(&r))
    }
}

fn c4_appendix_identities() -> Check {
    let mut worst: f64 = 0.0;
    for n in [2, 3, 4] {
        for r in gaussian_reports(n)?.into_iter().skip(1) {
            if !(r.pass && r.residual.abs() < IBP_TOL) {
                return Err(describe(&r));
            }
            worst = worst.max(r.residual.abs());
        }
    }
    Ok(format!("N=2,3,4 max |r| = {worst:.1e} < 1e-8"))
}

fn c5_overlap_vs_l() -> Check {
    let family = instance_family(50, 1);
    let mut reports = Vec::new();
    for (i, (m, p)) in family.iter().enumerate() {
        let scn = scenario(m, p)?;
        reports.push(gaussian_checks(&scn, &Strategy::Hybrid { r: 8, hermite: 12 }, i as u64).map_err(e)?.overlap_vs_l);
    }
    all_pass(&reports).map(|d| format!("{d} across 3 priors x 5 channels"))
}

fn c6_explicit_bounds() -> Check {
    let mc = Strategy::MonteCarlo { r: 16 };
    let mut reports = Vec::new();
    for (i, (m, p)) in instance_family(15, 2).iter().enumerate() {
        let scn = scenario(m, p)?;
        for k in 1..=2 {
            let mut r = derivative_bound_checks(&scn, k, &mc, i as u64).map_err(e)?;
            if k > 1 {
                r.retain(|r| r.name != "free_entropy_gap");
            }
            reports.extend(r);
        }
        let lam = p.lambda_draws(4, 77 + i as u64);
        reports.push(thermal_l_check(m, p, &mc, &lam, i as u64).map_err(e)?);
    }
    all_pass(&reports)
}

fn c7_fds() -> Check {
    let mc = Strategy::MonteCarlo { r: 16 };
    let m = wigner(4, 3);
    let p = binary(2, 5);
    let v_n = empirical_v_n(&m, &p, &mc, 16, 9).map_err(e)?;
    let lam = p.lambda_draws(8, 10);
    let mut reports = Vec::new();
    for k in [1, 2] {
        for f in ["1", "R:1,2"] {
            let f: FdsFunction = f.parse().map_err(e)?;
            let r = fds_residual(&m, &p, &f, k, &mc, &lam, v_n, k as u64).map_err(e)?;
            if f == FdsFunction::One && r.residual.abs() >= EXACT_TOL {
                return Err(describe(&r));
            }
            reports.push(r);
        }
    }
    all_pass(&reports).map(|d| format!("{d}, v_N = {v_n:.3e}"))
}

fn sweep_config(file: &str) -> Result<Outcome, String> {
    let path = format!("{}/../../configs/{file}", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(&path).map_err(e)?;
    let cfg = ExperimentConfig::parse(&text).map_err(e)?;
    experiment::sweep(&cfg).map_err(e)
}

fn row_line(r: &Row) -> String {
    format!("{} N={} {} estimate={:?} total_var={:?} se={:?}", r.test, r.n, r.observable, r.estimate, r.total_var, r.se)
}

/// Trend and oracle rows of a sweep, requiring a verdict for each expected observable.
fn sweep_verdicts(out: &Outcome, observables: &[&str], oracle: bool) -> Result<Vec<String>, String> {
    let mut seen = Vec::new();
    for obs in observables {
        let trend = out
            .rows
            .iter()
            .find(|r| r.test == "trend" && r.observable == *obs)
            .ok_or_else(|| format!("no trend verdict for {obs}"))?;
        if trend.pass != Some(true) {
            return Err(format!("{obs} increases beyond 3 SE"));
        }
        let totals: Vec<String> = out
            .rows
            .iter()
            .filter(|r| r.test == "concentration" && r.observable == *obs)
            .map(|r| format!("{:.4}", r.total_var.unwrap_or(f64::NAN)))
            .collect();
        seen.push(format!("{obs}: {}", totals.join(" > ")));
        if oracle {
            let o = out
                .rows
                .iter()
                .find(|r| r.test == "oracle" && r.observable == *obs)
                .ok_or_else(|| format!("no oracle row for {obs}"))?;
            if o.pass != Some(true) {
                return Err(format!("oracle mismatch: {}", row_line(o)));
            }
        }
    }
    Ok(seen)
}

fn c8_concentration(wigner: &Outcome, soft: &Outcome) -> Check {
    let mut parts: Vec<String> =
        sweep_verdicts(wigner, &["R:1,2", "R:1,2,3"], true)?.into_iter().map(|p| format!("binary {p}")).collect();
    parts.extend(sweep_verdicts(soft, &["Rk:(2)(2)", "R:1,2"], true)?.into_iter().map(|p| format!("soft {p}")));
    if let Some(bad) = wigner.failures().chain(soft.failures()).next() {
        return Err(row_line(bad));
    }
    Ok(parts.join("; "))
}

fn c9_decoupling(wigner: &Outcome) -> Check {
    let trend = wigner
        .rows
        .iter()
        .find(|r| r.test == "trend" && r.observable.contains('@'))
        .ok_or("no decoupling trend verdict")?;
    let values: Vec<String> = wigner
        .rows
        .iter()
        .filter(|r| r.test == "decoupling")
        .map(|r| format!("{:.2e}", r.estimate.unwrap_or(f64::NAN)))
        .collect();
    match trend.pass {
        Some(true) => Ok(format!("residuals {}", values.join(", "))),
        _ => Err(format!("not nonincreasing: {}", values.join(", "))),
    }
}

/// MCMC site means at N=2 against a brute-force sum written out here.
fn c10_mcmc_marginals() -> Check {
    let prior =
        PriorSpec::FieldRademacher { fields: vec![FieldValue(0.4), FieldValue(-0.7)], field: None, field_std: 0.0 };
    let inst =
        PlantedInstance::generate(&model(prior, ChannelSpec::SpikedTensor { p: 2, snr: 1.5 }, 2, 5)).map_err(e)?;
    let theta = &inst.prior.theta_star;
    let ch = &inst.channel;
    let mut z = 0.0;
    let mut mean = [0.0; 2];
    for s in [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]] {
        let field: f64 = theta.iter().zip(&s).map(|(t, x)| t * x).sum();
        let lik: f64 = ch
            .tuples
            .iter()
            .zip(&inst.data.values)
            .map(|(t, y)| {
                let r = y - ch.scale * t.iter().map(|&i| s[i]).product::<f64>();
                -0.5 * r * r
            })
            .sum();
        let w = (field + lik).exp();
        z += w;
        mean[0] += w * s[0];
        mean[1] += w * s[1];
    }
    let exact = mean.map(|m| m / z);

    let handle = build_posterior(&inst, &PerturbationRealization::none(2), PosteriorMode::Mcmc).map_err(e)?;
    let (chains, kept, burn) = (10, 10_000, 500);
    let batch = handle.sample(chains, kept, burn, 1, 42).map_err(e)?;
    if batch.chains * batch.samples < 100_000 {
        return Err(format!("only {} samples", batch.chains * batch.samples));
    }
    let mut worst = String::new();
    for (i, &ex) in exact.iter().enumerate() {
        let per_batch = 1000;
        let mut means = Vec::new();
        for c in 0..batch.chains {
            for b in 0..batch.samples / per_batch {
                let s: f64 = (b * per_batch..(b + 1) * per_batch).map(|t| batch.state(c, t)[i]).sum();
                means.push(s / per_batch as f64);
            }
        }
        let k = means.len() as f64;
        let m = means.iter().sum::<f64>() / k;
        let se = (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt();
        let line = format!("site {i}: mcmc {m:.4} exact {ex:.4} se {se:.1e}");
        if (m - ex).abs() > 3.0 * se {
            return Err(line);
        }
        worst.push_str(&line);
        worst.push_str("; ");
    }
    Ok(format!("{} samples; {}", batch.chains * batch.samples, worst.trim_end_matches("; ")))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filters.is_empty() || filters.iter().any(|f| id.contains(f.as_str()));
    let mut failed = 0;
    let mut report = |id: &str, name: &str, f: &dyn Fn() -> Check| {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let res = f();
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("{id} PASS {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("{id} FAIL {name} ({secs:.1}s): {d}");
            }
        }
    };
    report("c1", "nishimori identities", &c1_nishimori);
    report("c2", "magnetisation bound", &c2_magnetisation);
    report("c3", "derivative identity", &c3_derivative);
    report("c4", "signal covariance and variance equality", &c4_appendix_identities);
    report("c5", "overlap variance vs L variance", &c5_overlap_vs_l);
    report("c6", "explicit-constant bounds", &c6_explicit_bounds);
    report("c7", "franz-de sanctis residual", &c7_fds);
    if wanted("c8") || wanted("c9") {
        let t = Instant::now();
        let sweeps = sweep_config("concentration-sweep.json").and_then(|w| Ok((w, sweep_config("soft-sweep.json")?)));
        let secs = t.elapsed().as_secs_f64();
        println!("sweeps finished in {secs:.1}s");
        match &sweeps {
            Ok((w, s)) => {
                report("c8", "concentration trends", &|| c8_concentration(w, s));
                report("c9", "decoupling trend", &|| c9_decoupling(w));
            }
            Err(msg) => {
                report("c8", "concentration trends", &|| Err(msg.clone()));
                report("c9", "decoupling trend", &|| Err(msg.clone()));
            }
        }
    }
    report("c10", "mcmc marginals at N=2", &c10_mcmc_marginals);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
