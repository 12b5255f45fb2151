//! Identities and inequalities of optimal Bayesian inference turned into
//! numerical residual checks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::ModelConfig;
use crate::observables::{fds_terms, multioverlap, ObservableSpec, SignalContext};
use crate::perturbation::{LambdaVector, PerturbationConfig};
use crate::posterior::ExactPosterior;
use crate::quadrature::laguerre;
use crate::quenched::{
    free_entropy, integrate, integrate_mcmc, lambda_average, observable_records, Estimate, NodeView, Scenario,
    Strategy, Units,
};
use crate::rng::{derive_seed, streams};

/// Tolerance for identities that hold exactly at every node.
pub const EXACT_TOL: f64 = 1e-10;
/// Tolerance for identities that hold after exact Gaussian integration by parts,
/// up to Gauss-Hermite error.
pub const IBP_TOL: f64 = 1e-8;
/// Rounding allowance for inequalities that can hold with equality.
pub const ROUNDING_SLACK: f64 = 1e-12;

/// One checked identity or inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub name: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub observable: String,
    pub residual: f64,
    pub bound: Option<f64>,
    pub se: f64,
    pub tol: Option<f64>,
    pub pass: bool,
}

impl ResidualReport {
    /// `residual = 0`: within `tol` when given, else within `3·se`.
    pub fn equality(
        name: impl Into<String>,
        n: usize,
        observable: impl Into<String>,
        e: Estimate,
        tol: Option<f64>,
    ) -> Self {
        let mut r = ResidualReport {
            name: name.into(),
            n,
            observable: observable.into(),
            residual: e.value,
            bound: None,
            se: e.se.max(0.0),
            tol,
            pass: false,
        };
        r.pass = r.passes();
        r
    }

    /// `|value| ≤ bound`, up to `3·se` and rounding.
    pub fn inequality(
        name: impl Into<String>,
        n: usize,
        observable: impl Into<String>,
        e: Estimate,
        bound: f64,
    ) -> Self {
        let mut r = ResidualReport {
            name: name.into(),
            n,
            observable: observable.into(),
            residual: e.value,
            bound: Some(bound),
            se: e.se.max(0.0),
            tol: None,
            pass: false,
        };
        r.pass = r.passes();
        r
    }

    /// The verdict recomputed from the stored fields.
    pub fn passes(&self) -> bool {
        if !self.residual.is_finite() {
            return false;
        }
        match (self.tol, self.bound) {
            (Some(t), _) => self.residual.abs() <= t,
            (None, b) => self.residual.abs() <= b.unwrap_or(0.0) + 3.0 * self.se + ROUNDING_SLACK,
        }
    }
}

/// Whether the strategy integrates every node's signal exactly, so that
/// Nishimori-type identities hold node by node.
pub fn signal_exact(scn: &Scenario, strategy: &Strategy) -> bool {
    match strategy {
        Strategy::Quadrature { .. } | Strategy::Hybrid { .. } => true,
        Strategy::MonteCarlo { .. } => scn.enumerates_signal(),
        Strategy::Mcmc { .. } => false,
    }
}

/// Whether the power-one Gaussian side observations are integrated exactly.
pub fn gauss_exact(strategy: &Strategy) -> bool {
    matches!(strategy, Strategy::Quadrature { .. } | Strategy::Hybrid { .. })
}

fn se_of(strategy_exact: bool, tol: f64) -> Option<f64> {
    strategy_exact.then_some(tol)
}

/// Test functions admitted by the Nishimori check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NishimoriFunction {
    /// `R^{(k)}_{1..n}` against the same with replica 1 replaced by σ*.
    Multioverlap(Vec<u32>),
    /// `σ₁σ₂` of one replica against `σ₁*σ₂*`.
    SpinPair,
}

impl fmt::Display for NishimoriFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NishimoriFunction::Multioverlap(p) => write!(f, "{}", ObservableSpec::Multioverlap(p.clone())),
            NishimoriFunction::SpinPair => write!(f, "spin_pair"),
        }
    }
}

impl FromStr for NishimoriFunction {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "spin_pair" {
            return Ok(NishimoriFunction::SpinPair);
        }
        match s.parse::<ObservableSpec>() {
            Ok(ObservableSpec::Multioverlap(p)) => Ok(NishimoriFunction::Multioverlap(p)),
            _ => Err(LabError::Unknown(format!("Nishimori test function '{s}'"))),
        }
    }
}

impl TryFrom<String> for NishimoriFunction {
    type Error = LabError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NishimoriFunction> for String {
    fn from(f: NishimoriFunction) -> String {
        f.to_string()
    }
}

/// `[𝔼⟨f(σ¹,…)⟩, 𝔼⟨f(σ*,σ²,…)⟩]` at one exact node.
fn nishimori_node(f: &NishimoriFunction, v: &NodeView) -> Result<Vec<f64>> {
    let post = v.posterior;
    let n = post.n as f64;
    match f {
        NishimoriFunction::Multioverlap(powers) => {
            let means: Vec<Vec<f64>> = powers.iter().map(|&k| post.site_means(|_, x| x.powi(k as i32))).collect();
            let rest: Vec<f64> = (0..post.n).map(|i| means[1..].iter().map(|m| m[i]).product()).collect();
            let lhs = (0..post.n).map(|i| means[0][i] * rest[i]).sum::<f64>() / n;
            let rhs = v.signal_average(|c| {
                Ok((0..post.n).map(|i| c.signal[i].powi(powers[0] as i32) * rest[i]).sum::<f64>() / n)
            })?;
            Ok(vec![lhs, rhs])
        }
        NishimoriFunction::SpinPair => {
            if post.n < 2 {
                return Err(LabError::Domain("spin_pair needs N >= 2".into()));
            }
            let lhs = post.expect(|s| s[0] * s[1]);
            let rhs = v.signal_average(|c| Ok(c.signal[0] * c.signal[1]))?;
            Ok(vec![lhs, rhs])
        }
    }
}

/// `𝔼⟨f(σ¹,σ²,…)⟩ − 𝔼⟨f(σ*,σ²,…)⟩`.
pub fn nishimori_residual(
    scn: &Scenario,
    f: &NishimoriFunction,
    strategy: &Strategy,
    seed: u64,
) -> Result<ResidualReport> {
    let units = match *strategy {
        Strategy::Mcmc { r, chains, sweeps, burn_in, thin } => {
            let opts = crate::posterior::McmcOptions { chains, sweeps, burn_in, thin };
            integrate_mcmc(scn, r, &opts, seed, |v| {
                let b = v.batch;
                let arity = match f {
                    NishimoriFunction::Multioverlap(p) => p.len(),
                    NishimoriFunction::SpinPair => 1,
                };
                if b.chains < arity {
                    return Err(LabError::Domain(format!("need L >= {arity} replicas")));
                }
                let (mut lhs, mut rhs) = (0.0, 0.0);
                for t in 0..b.samples {
                    for g in 0..b.chains {
                        match f {
                            NishimoriFunction::Multioverlap(p) => {
                                let mut reps: Vec<&[f64]> =
                                    (0..arity).map(|j| b.state((g + j) % b.chains, t)).collect();
                                lhs += multioverlap(&reps, Some(p))?;
                                reps[0] = v.signal;
                                rhs += multioverlap(&reps, Some(p))?;
                            }
                            NishimoriFunction::SpinPair => {
                                let s = b.state(g, t);
                                lhs += s[0] * s[1];
                                rhs += v.signal[0] * v.signal[1];
                            }
                        }
                    }
                }
                let m = (b.samples * b.chains) as f64;
                Ok(vec![lhs / m, rhs / m])
            })?
        }
        _ => integrate(scn, strategy, seed, |v| nishimori_node(f, v))?,
    };
    let e = units.estimate(|v| v[0] - v[1]);
    Ok(ResidualReport::equality("nishimori", scn.n(), f.to_string(), e, se_of(signal_exact(scn, strategy), EXACT_TOL)))
}

/// `Var(R₁) ≤ 1/N`.
pub fn magnetisation_bound_check(scn: &Scenario, strategy: &Strategy, seed: u64) -> Result<ResidualReport> {
    let rec = observable_records(scn, &[ObservableSpec::Multioverlap(vec![1])], strategy, seed)?.remove(0);
    Ok(ResidualReport::inequality(
        "magnetisation_bound",
        scn.n(),
        "R:1",
        Estimate { value: rec.total_var, se: rec.total_var_se },
        1.0 / scn.n() as f64,
    ))
}

/// Node quantities of the Gaussian-channel identities, in this order:
/// `⟨𝓛⟩, ⟨𝓛²⟩, ⟨𝓛⟩², ⟨R₁,₂⟩, ⟨R₁,₂²⟩, ⟨R₁,*⟩, ⟨R₁,*²⟩, ⟨R₁,*⟩², ⟨R₁,* 𝓛⟩`.
fn gaussian_node(v: &NodeView) -> Result<Vec<f64>> {
    let post = v.posterior;
    let n = post.n as f64;
    let m = post.site_means(|_, x| x);
    let pm = post.pair_means(|_, x| x, |_, x| x);
    let r12 = m.iter().map(|x| x * x).sum::<f64>() / n;
    let r12sq = pm.iter().map(|x| x * x).sum::<f64>() / (n * n);
    let mut out = vec![0.0; 9];
    out[3] = r12;
    out[4] = r12sq;
    for c in 0..v.signals.len() {
        let ctx = v.context(c);
        let w = v.weights[c];
        let l = ctx.l_gauss_table(&post.values)?;
        let r: Vec<Vec<f64>> =
            post.values.iter().enumerate().map(|(i, vs)| vs.iter().map(|x| x * ctx.signal[i] / n).collect()).collect();
        let lm = post.additive_mean(&l);
        let rm = post.additive_mean(&r);
        out[0] += w * lm;
        out[1] += w * post.additive_product(&l, &l);
        out[2] += w * lm * lm;
        out[5] += w * rm;
        out[6] += w * post.additive_product(&r, &r);
        out[7] += w * rm * rm;
        out[8] += w * post.additive_product(&r, &l);
    }
    Ok(out)
}

/// Reports from one pass over the Gaussian-channel quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianChecks {
    /// `𝔼⟨𝓗'⟩ − (N/2)𝔼⟨R₁,₂⟩`.
    pub derivative: ResidualReport,
    /// `2𝔼⟨R₁,*(𝓛−𝔼⟨𝓛⟩)⟩ − [𝔼⟨(R₁,*−𝔼⟨R₁,*⟩)²⟩ + 𝔼⟨(R₁,*−⟨R₁,*⟩)²⟩]`.
    pub signal_covariance: ResidualReport,
    /// `Var(R₁,*) − Var(R₁,₂)`.
    pub variance_equality: ResidualReport,
    /// `Var(R₁,₂) ≤ 4 Var(𝓛)`: residual `Var(R₁,₂)`, bound `4Var(𝓛)`, se of the difference.
    pub overlap_vs_l: ResidualReport,
    /// `𝔼⟨(𝓛−⟨𝓛⟩)²⟩`.
    pub thermal_l: Estimate,
    pub total_l: Estimate,
    pub total_r12: Estimate,
}

pub fn gaussian_checks(scn: &Scenario, strategy: &Strategy, seed: u64) -> Result<GaussianChecks> {
    let units = integrate(scn, strategy, seed, gaussian_node)?;
    let n = scn.n();
    let nf = n as f64;
    let exact = gauss_exact(strategy) && signal_exact(scn, strategy);
    let tol = se_of(exact, IBP_TOL);
    let derivative = units.estimate(|v| nf * v[0] - 0.5 * nf * v[3]);
    let cov = units.estimate(|v| {
        let lhs = 2.0 * (v[8] - v[5] * v[0]);
        let rhs = (v[6] - v[5] * v[5]) + (v[6] - v[7]);
        lhs - rhs
    });
    let var_eq = units.estimate(|v| (v[6] - v[5] * v[5]) - (v[4] - v[3] * v[3]));
    let margin = units.estimate(|v| (v[4] - v[3] * v[3]) - 4.0 * (v[1] - v[0] * v[0]));
    let total_l = units.estimate(|v| v[1] - v[0] * v[0]);
    let total_r12 = units.estimate(|v| v[4] - v[3] * v[3]);
    let mut overlap_vs_l = ResidualReport::inequality(
        "overlap_vs_l",
        n,
        "R:1,2",
        Estimate { value: total_r12.value, se: margin.se },
        4.0 * total_l.value,
    );
    overlap_vs_l.pass = margin.value <= 3.0 * margin.se;
    Ok(GaussianChecks {
        derivative: ResidualReport::equality("derivative_identity", n, "Lgauss", derivative, tol),
        signal_covariance: ResidualReport::equality("signal_covariance_identity", n, "R:1,*", cov, tol),
        variance_equality: ResidualReport::equality("variance_equality", n, "R:1,*", var_eq, tol),
        overlap_vs_l,
        thermal_l: units.estimate(|v| v[1] - v[2]),
        total_l,
        total_r12,
    })
}

/// Test functions for the Franz-de Sanctis residual.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FdsFunction {
    One,
    Multioverlap(Vec<u32>),
}

impl FdsFunction {
    pub fn arity(&self) -> usize {
        match self {
            FdsFunction::One => 1,
            FdsFunction::Multioverlap(p) => p.len(),
        }
    }
}

impl fmt::Display for FdsFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FdsFunction::One => write!(f, "1"),
            FdsFunction::Multioverlap(p) => write!(f, "{}", ObservableSpec::Multioverlap(p.clone())),
        }
    }
}

impl FromStr for FdsFunction {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "1" {
            return Ok(FdsFunction::One);
        }
        match s.parse::<ObservableSpec>() {
            Ok(ObservableSpec::Multioverlap(p)) => Ok(FdsFunction::Multioverlap(p)),
            Ok(other) => Err(LabError::Domain(format!("f_n = {other} is not bounded by 1"))),
            Err(_) => Err(LabError::Unknown(format!("test function '{s}'"))),
        }
    }
}

impl TryFrom<String> for FdsFunction {
    type Error = LabError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FdsFunction> for String {
    fn from(f: FdsFunction) -> String {
        f.to_string()
    }
}

/// `[A, ⟨f⟩, G]` at one node, where `A = 𝔼_{i,ξ}⟨f d¹e^{Σθ}⟩/⟨e^θ⟩ⁿ` and `G = 𝔼_{i,ξ}⟨d e^θ⟩/⟨e^θ⟩`.
fn fds_node(f: &FdsFunction, k: usize, xi_order: usize, v: &NodeView) -> Result<Vec<f64>> {
    let post = v.posterior;
    let nsites = post.n;
    let ch = v.scenario.side.exp.get(k - 1).ok_or_else(|| LabError::Domain(format!("no exponential channel {k}")))?;
    let lambda = ch.lambda;
    let rule = laguerre(xi_order, 0.0)?;
    let powers: Vec<u32> = match f {
        FdsFunction::One => vec![],
        FdsFunction::Multioverlap(p) => p.clone(),
    };
    let f_mean = if powers.is_empty() {
        1.0
    } else {
        let means: Vec<Vec<f64>> = powers.iter().map(|&p| post.site_means(|_, x| x.powi(p as i32))).collect();
        (0..nsites).map(|i| means.iter().map(|m| m[i]).product::<f64>()).sum::<f64>() / nsites as f64
    };
    if f_mean.abs() > 1.0 + 1e-12 {
        return Err(LabError::Domain("|f_n| > 1".into()));
    }
    let n_rep = powers.len().max(1);
    let (mut a, mut g) = (0.0, 0.0);
    for c in 0..v.signals.len() {
        let signal = v.signals[c];
        let w = v.weights[c];
        for i in 0..nsites {
            let vals = &post.values[i];
            for (xi, wq) in rule.nodes.iter().zip(&rule.weights) {
                let reps: Vec<[f64; 1]> = vals.iter().map(|x| [*x]).collect();
                let mut e = Vec::with_capacity(vals.len());
                let mut de = Vec::with_capacity(vals.len());
                for (a_idx, r) in reps.iter().enumerate() {
                    let mut pad = signal.to_vec();
                    pad[i] = r[0];
                    let t = fds_terms(i, &[&pad], signal, *xi, lambda)?;
                    e.push(t.theta[0].exp());
                    de.push(t.d[0] * e[a_idx]);
                }
                let marg = &post.site_marginals()[i];
                let z: f64 = marg.iter().zip(&e).map(|(p, x)| p * x).sum();
                let gd: f64 = marg.iter().zip(&de).map(|(p, x)| p * x).sum();
                g += w * wq * gd / z / nsites as f64;
                let an = if powers.is_empty() {
                    gd / z
                } else {
                    let mut acc = 0.0;
                    for j in 0..nsites {
                        let mut prod = site_pair(post, i, j, powers[0], &de);
                        for &p in &powers[1..] {
                            prod *= site_pair(post, i, j, p, &e);
                        }
                        acc += prod;
                    }
                    acc / nsites as f64 / z.powi(n_rep as i32)
                };
                a += w * wq * an / nsites as f64;
            }
        }
    }
    Ok(vec![a, f_mean, g])
}

/// `⟨σⱼ^p h(σᵢ)⟩` with `h` tabulated over the support of site `i`.
fn site_pair(post: &ExactPosterior, i: usize, j: usize, p: u32, h: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, ha) in h.iter().enumerate() {
        for (b, vb) in post.values[j].iter().enumerate() {
            acc += post.pair(i, j, a, b) * ha * vb.powi(p as i32);
        }
    }
    acc
}

/// `{(2·10³+2^{k+6})/s_N + 4·10⁴(v_N N/s_N²)^{1/3}}^{1/2}`.
pub fn fds_bound(k: usize, s_n: f64, v_n: f64, n: usize) -> f64 {
    ((2e3 + 2f64.powi(k as i32 + 6)) / s_n + 4e4 * (v_n * n as f64 / (s_n * s_n)).cbrt()).sqrt()
}

/// λ-averaged `|𝔼⟨f d¹e^{Σθ}⟩/⟨e^θ⟩ⁿ − 𝔼⟨f⟩𝔼⟨d e^θ⟩/⟨e^θ⟩|` against its bound.
#[allow(clippy::too_many_arguments)]
pub fn fds_residual(
    model: &ModelConfig,
    perturbation: &PerturbationConfig,
    f: &FdsFunction,
    k: usize,
    strategy: &Strategy,
    lambdas: &[LambdaVector],
    v_n: f64,
    seed: u64,
) -> Result<ResidualReport> {
    if strategy.mcmc_options().is_some() {
        return Err(LabError::Mode("the Franz-de Sanctis residual needs an exact strategy".into()));
    }
    if k == 0 || k > perturbation.k_max {
        return Err(LabError::Domain(format!("k = {k} outside 1..={}", perturbation.k_max)));
    }
    let mut per = Vec::with_capacity(lambdas.len());
    let mut s_n = 0.0;
    let mut exact = true;
    for (j, lam) in lambdas.iter().enumerate() {
        let scn = Scenario::new(model, perturbation, lam)?;
        s_n = scn.side.schedules.s_n;
        exact &= signal_exact(&scn, strategy);
        let units = integrate(&scn, strategy, derive_seed(seed, j as u64), |v| fds_node(f, k, 24, v))?;
        let e = units.estimate(|v| v[0] - v[1] * v[2]);
        per.push(Estimate { value: e.value.abs(), se: e.se });
    }
    let avg = lambda_average(&per);
    let name = format!("fds_k{k}");
    if *f == FdsFunction::One {
        return Ok(ResidualReport::equality(name, model.n, f.to_string(), avg, se_of(exact, EXACT_TOL)));
    }
    Ok(ResidualReport::inequality(name, model.n, f.to_string(), avg, fds_bound(k, s_n, v_n, model.n)))
}

/// `[⟨𝓗'_k⟩, ⟨𝓗''_k⟩]` at one node.
fn derivative_node(k: usize, v: &NodeView) -> Result<Vec<f64>> {
    let post = v.posterior;
    let mut out = vec![0.0; 2];
    for c in 0..v.signals.len() {
        let ctx: SignalContext = v.context(c);
        let [h1, _, h2] = ctx.exp_tables(k, &post.values)?;
        out[0] += v.weights[c] * post.additive_mean(&h1);
        out[1] += v.weights[c] * post.additive_mean(&h2);
    }
    Ok(out)
}

/// `|𝔼⟨𝓗'_k⟩| ≤ 6s_N`, `|𝔼⟨𝓗''_k⟩| ≤ 20s_N` and `|𝔼F^pert − 𝔼F|/N ≤ ε_N/2 + 6s_N/N`.
pub fn derivative_bound_checks(
    scn: &Scenario,
    k: usize,
    strategy: &Strategy,
    seed: u64,
) -> Result<Vec<ResidualReport>> {
    let n = scn.n();
    let sched = scn.side.schedules;
    let mut out = Vec::with_capacity(3);
    if k >= 1 && k <= scn.side.exp.len() {
        let units = integrate(scn, strategy, seed, |v| derivative_node(k, v))?;
        let obs = format!("Lexp:{k}");
        out.push(ResidualReport::inequality(
            "first_derivative_bound",
            n,
            obs.clone(),
            units.estimate(|v| v[0]),
            6.0 * sched.s_n,
        ));
        out.push(ResidualReport::inequality(
            "second_derivative_bound",
            n,
            obs,
            units.estimate(|v| v[1]),
            20.0 * sched.s_n,
        ));
    } else if !scn.side.exp.is_empty() {
        return Err(LabError::Domain(format!("no exponential channel {k}")));
    }
    out.push(free_entropy_gap(scn, strategy, seed)?);
    Ok(out)
}

/// `|𝔼F^pert − 𝔼F|/N ≤ ε_N/2 + 6s_N/N`.
pub fn free_entropy_gap(scn: &Scenario, strategy: &Strategy, seed: u64) -> Result<ResidualReport> {
    let n = scn.n();
    let sched = scn.side.schedules;
    let pert = free_entropy(scn, strategy, derive_seed(seed, 1))?;
    let base = Scenario::with_side(&scn.config, crate::perturbation::SideChannels::none())?;
    let unpert = free_entropy(&base, strategy, derive_seed(seed, 2))?;
    let gap = Estimate {
        value: (pert.estimate - unpert.estimate) / n as f64,
        se: (pert.se.powi(2) + unpert.se.powi(2)).sqrt() / n as f64,
    };
    let bound = if scn.side.exp.is_empty() {
        sched.eps_n * scn.lambda().lambda0() / 2.0
    } else {
        sched.eps_n / 2.0 + 6.0 * sched.s_n / n as f64
    };
    Ok(ResidualReport::inequality("free_entropy_gap", n, "F", gap, bound))
}

/// λ₀-averaged thermal variance of `𝓛` against `(4+ln2)/(2Nε_N)`.
pub fn thermal_l_check(
    model: &ModelConfig,
    perturbation: &PerturbationConfig,
    strategy: &Strategy,
    lambdas: &[LambdaVector],
    seed: u64,
) -> Result<ResidualReport> {
    let mut per = Vec::with_capacity(lambdas.len());
    let mut eps = 0.0;
    for (j, lam) in lambdas.iter().enumerate() {
        let scn = Scenario::new(model, perturbation, lam)?;
        eps = scn.side.schedules.eps_n;
        let rec = observable_records(&scn, &[ObservableSpec::LGauss], strategy, derive_seed(seed, j as u64))?.remove(0);
        per.push(Estimate { value: rec.thermal_var, se: rec.thermal_var_se });
    }
    let avg = lambda_average(&per);
    let bound = (4.0 + 2f64.ln()) / (2.0 * model.n as f64 * eps);
    Ok(ResidualReport::inequality("thermal_l_bound", model.n, "Lgauss", avg, bound))
}

/// Bounded single-spin functions for the decoupling check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteFunction {
    Identity,
    Square,
}

impl SiteFunction {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            SiteFunction::Identity => x,
            SiteFunction::Square => x * x,
        }
    }
}

/// Node vector `[⟨Π h_j(σ_{s_j})⟩, ⟨h_1(σ_{s_1})⟩, …]` from exact posteriors.
fn decoupling_node(h: &[SiteFunction], sites: &[usize], post: &ExactPosterior) -> Vec<f64> {
    let mut out = Vec::with_capacity(h.len() + 1);
    out.push(post.expect(|s| h.iter().zip(sites).map(|(f, &i)| f.eval(s[i])).product()));
    for (f, &i) in h.iter().zip(sites) {
        out.push(post.expect(|s| f.eval(s[i])));
    }
    out
}

/// λ-averaged `|𝔼⟨Π h_j(σ_j)⟩ − Π 𝔼⟨h_j(σ_j)⟩|`.
pub fn decoupling_residual(
    model: &ModelConfig,
    perturbation: &PerturbationConfig,
    h: &[SiteFunction],
    sites: &[usize],
    strategy: &Strategy,
    lambdas: &[LambdaVector],
    seed: u64,
) -> Result<ResidualReport> {
    if h.len() != sites.len() || h.is_empty() {
        return Err(LabError::Domain("one site per function, at least one".into()));
    }
    let mut sorted = sites.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != sites.len() || sites.iter().any(|&i| i >= model.n) {
        return Err(LabError::Domain("sites must be distinct and < N".into()));
    }
    let mut per = Vec::with_capacity(lambdas.len());
    for (j, lam) in lambdas.iter().enumerate() {
        let scn = Scenario::new(model, perturbation, lam)?;
        let s = derive_seed(seed, j as u64);
        let units: Units = match *strategy {
            Strategy::Mcmc { r, chains, sweeps, burn_in, thin } => {
                let opts = crate::posterior::McmcOptions { chains, sweeps, burn_in, thin };
                integrate_mcmc(&scn, r, &opts, s, |v| {
                    let b = v.batch;
                    let mut out = vec![0.0; h.len() + 1];
                    for c in 0..b.chains {
                        for t in 0..b.samples {
                            let st = b.state(c, t);
                            out[0] += h.iter().zip(sites).map(|(f, &i)| f.eval(st[i])).product::<f64>();
                            for (q, (f, &i)) in h.iter().zip(sites).enumerate() {
                                out[q + 1] += f.eval(st[i]);
                            }
                        }
                    }
                    let m = (b.chains * b.samples) as f64;
                    Ok(out.into_iter().map(|x| x / m).collect())
                })?
            }
            _ => integrate(&scn, strategy, s, |v| Ok(decoupling_node(h, sites, v.posterior)))?,
        };
        let e = units.estimate(|v| v[0] - v[1..].iter().product::<f64>());
        per.push(Estimate { value: e.value.abs(), se: e.se });
    }
    let avg = lambda_average(&per);
    let tol = (h.len() == 1).then_some(EXACT_TOL);
    Ok(ResidualReport::equality("decoupling", model.n, format!("{h:?}@{sites:?}"), avg, tol))
}

/// `(thermal, quenched, total)` and the residual of their sum rule.
pub fn variance_decomposition(
    scn: &Scenario,
    obs: &ObservableSpec,
    strategy: &Strategy,
    seed: u64,
) -> Result<((f64, f64, f64), ResidualReport)> {
    let rec = observable_records(scn, std::slice::from_ref(obs), strategy, seed)?.remove(0);
    let resid = rec.total_var - rec.thermal_var - rec.quenched_var;
    let report = ResidualReport::equality(
        "variance_split",
        scn.n(),
        obs.to_string(),
        Estimate { value: resid, se: 0.0 },
        Some(EXACT_TOL),
    );
    Ok(((rec.thermal_var, rec.quenched_var, rec.total_var), report))
}

/// One point of an N-scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    #[serde(rename = "N")]
    pub n: usize,
    pub value: f64,
    pub se: f64,
    pub v_n: Option<f64>,
    pub shape: Option<f64>,
}

/// Nonincreasing in N up to `3·√(se_a² + se_b²)` per consecutive pair; `None` for one point.
pub fn nonincreasing(points: &[ScanPoint]) -> Option<bool> {
    if points.len() < 2 {
        return None;
    }
    Some(points.windows(2).all(|w| w[1].value <= w[0].value + 3.0 * (w[0].se.powi(2) + w[1].se.powi(2)).sqrt()))
}

/// λ-averaged total variances of several observables at one N, sharing disorder and replicas.
pub fn lambda_averaged_variances(
    model: &ModelConfig,
    perturbation: &PerturbationConfig,
    obs: &[ObservableSpec],
    strategy: &Strategy,
    lambdas: &[LambdaVector],
    seed: u64,
) -> Result<Vec<Estimate>> {
    let mut per: Vec<Vec<Estimate>> = vec![Vec::with_capacity(lambdas.len()); obs.len()];
    for (j, lam) in lambdas.iter().enumerate() {
        let scn = Scenario::new(model, perturbation, lam)?;
        let recs = observable_records(&scn, obs, strategy, derive_seed(seed, j as u64))?;
        for (q, r) in recs.iter().enumerate() {
            per[q].push(Estimate { value: r.total_var, se: r.total_var_se });
        }
    }
    Ok(per.iter().map(|p| lambda_average(p)).collect())
}

/// `𝔼_λ 𝔼⟨(R₁,₂ − 𝔼⟨R₁,₂⟩)²⟩` per N, with the measured `v_N` and the
/// rate shape `(v_N/(Nε_N) + 1/N)^{1/3}/ε_N` when the free entropy is computable.
#[allow(clippy::too_many_arguments)]
pub fn overlap_concentration_scan(
    model: &ModelConfig,
    perturbation: &PerturbationConfig,
    n_values: &[usize],
    strategy: &Strategy,
    lambda_draws: usize,
    v_n_strategy: Option<&Strategy>,
    seed: u64,
) -> Result<(Vec<ScanPoint>, Option<bool>)> {
    let lambdas = perturbation.lambda_draws(lambda_draws, derive_seed(seed, streams::LAMBDA));
    let mut points = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let m = model.with_n(n);
        let e = lambda_averaged_variances(
            &m,
            perturbation,
            &[ObservableSpec::Multioverlap(vec![1, 1])],
            strategy,
            &lambdas,
            seed,
        )?[0];
        let (v_n, shape) = match v_n_strategy {
            Some(s) => {
                let v = crate::quenched::empirical_v_n(&m, perturbation, s, 16, seed)?;
                let eps = perturbation.schedules(n)?.eps_n;
                (Some(v), Some((v / (n as f64 * eps) + 1.0 / n as f64).cbrt() / eps))
            }
            None => (None, None),
        };
        points.push(ScanPoint { n, value: e.value, se: e.se, v_n, shape });
    }
    let verdict = nonincreasing(&points);
    Ok((points, verdict))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelSpec, FieldValue, PriorSpec};
    use approx::assert_abs_diff_eq;

    fn wigner(n: usize) -> ModelConfig {
        ModelConfig { prior: PriorSpec::Rademacher, channel: ChannelSpec::SpikedTensor { p: 2, snr: 1.0 }, n, seed: 3 }
    }

    fn pert(k_max: usize) -> PerturbationConfig {
        PerturbationConfig { k_max, lambda_seed: 4, ..PerturbationConfig::default() }
    }

    fn scenario(m: &ModelConfig, p: &PerturbationConfig) -> Scenario {
        Scenario::new(m, p, &p.lambda_for_run().unwrap()).unwrap()
    }

    #[test]
    fn report_verdicts_are_recomputable() {
        let e = ResidualReport::equality("x", 2, "R:1", Estimate { value: 1e-12, se: 0.0 }, Some(1e-10));
        assert!(e.pass && e.passes());
        let i = ResidualReport::inequality("y", 2, "R:1", Estimate { value: 0.3, se: 0.01 }, 0.25);
        assert!(!i.pass);
        let i = ResidualReport::inequality("y", 2, "R:1", Estimate { value: 0.27, se: 0.01 }, 0.25);
        assert!(i.pass);
        let tie = ResidualReport::inequality("t", 8, "R:1", Estimate { value: 0.125 + 3e-17, se: 0.0 }, 0.125);
        assert!(tie.pass);
        let nan = ResidualReport::equality("z", 2, "R:1", Estimate { value: f64::NAN, se: 0.0 }, None);
        assert!(!nan.pass);
    }

    #[test]
    fn nishimori_exact_on_small_wigner() {
        let m = wigner(3);
        let scn = scenario(&m, &pert(2));
        for f in ["R:1", "R:1,2", "R:1,2,3", "spin_pair"] {
            let f: NishimoriFunction = f.parse().unwrap();
            let r = nishimori_residual(&scn, &f, &Strategy::MonteCarlo { r: 20 }, 1).unwrap();
            assert!(r.pass, "{r:?}");
            assert!(r.residual.abs() < 1e-12);
        }
        assert!("Lgauss".parse::<NishimoriFunction>().is_err());
    }

    #[test]
    fn nishimori_fails_for_a_mismatched_posterior() {
        let m = wigner(3);
        let scn = scenario(&m, &PerturbationConfig::none())
            .with_posterior_channel(&ChannelSpec::SpikedTensor { p: 2, snr: 3.0 })
            .unwrap();
        let r = nishimori_residual(&scn, &NishimoriFunction::SpinPair, &Strategy::MonteCarlo { r: 200 }, 1).unwrap();
        assert!(!r.pass, "{r:?}");
    }

    #[test]
    fn nishimori_with_point_mass_prior() {
        let prior =
            PriorSpec::FieldRademacher { fields: vec![], field: Some(FieldValue(f64::INFINITY)), field_std: 0.0 };
        let m = ModelConfig { prior, channel: ChannelSpec::Null, n: 2, seed: 0 };
        let scn = scenario(&m, &pert(1));
        let r =
            nishimori_residual(&scn, &NishimoriFunction::Multioverlap(vec![1, 1]), &Strategy::MonteCarlo { r: 3 }, 0)
                .unwrap();
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn magnetisation_bound_examples() {
        let rad = ModelConfig { prior: PriorSpec::Rademacher, channel: ChannelSpec::Null, n: 4, seed: 0 };
        let q = Strategy::Quadrature { hermite: 4, laguerre: 4 };
        let r = magnetisation_bound_check(&scenario(&rad, &PerturbationConfig::none()), &q, 0).unwrap();
        assert_abs_diff_eq!(r.residual, 0.25, epsilon = 1e-12);
        assert!(r.pass);
        let grid = ModelConfig {
            prior: PriorSpec::GridSoft { points: vec![-1.0, 0.0, 1.0], weights: vec![0.25, 0.5, 0.25] },
            ..rad
        };
        let r = magnetisation_bound_check(&scenario(&grid, &PerturbationConfig::none()), &q, 0).unwrap();
        assert_abs_diff_eq!(r.residual, 0.125, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_identities_hold_under_hybrid_integration() {
        let m = wigner(3);
        let p = pert(1);
        let scn = scenario(&m, &p);
        let g = gaussian_checks(&scn, &Strategy::Hybrid { r: 4, hermite: 16 }, 2).unwrap();
        for r in [&g.derivative, &g.signal_covariance, &g.variance_equality, &g.overlap_vs_l] {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn fds_with_unit_function_vanishes() {
        let m = wigner(2);
        let p = pert(2);
        let lam = p.lambda_draws(2, 1);
        let r = fds_residual(&m, &p, &FdsFunction::One, 1, &Strategy::MonteCarlo { r: 4 }, &lam, 0.1, 0).unwrap();
        assert!(r.residual.abs() < 1e-12 && r.pass);
        let r =
            fds_residual(&m, &p, &"R:1,2".parse().unwrap(), 2, &Strategy::MonteCarlo { r: 4 }, &lam, 0.1, 0).unwrap();
        assert!(r.bound.unwrap() > r.residual.abs());
        assert!("Lgauss".parse::<FdsFunction>().is_err());
    }

    #[test]
    fn derivative_bounds_with_empty_channel() {
        let m = wigner(2);
        let scn = scenario(&m, &pert(1));
        let reps = derivative_bound_checks(&scn, 1, &Strategy::MonteCarlo { r: 16 }, 0).unwrap();
        assert_eq!(reps.len(), 3);
        assert!(reps.iter().all(|r| r.pass), "{reps:?}");
    }

    #[test]
    fn decoupling_examples() {
        let free = ModelConfig { prior: PriorSpec::Rademacher, channel: ChannelSpec::Null, n: 3, seed: 0 };
        let p = PerturbationConfig::none();
        let lam = vec![LambdaVector::None];
        let q = Strategy::Quadrature { hermite: 4, laguerre: 4 };
        let r = decoupling_residual(&free, &p, &[SiteFunction::Identity; 2], &[0, 1], &q, &lam, 0).unwrap();
        assert!(r.residual.abs() < 1e-14);
        let one = decoupling_residual(&free, &p, &[SiteFunction::Identity], &[2], &q, &lam, 0).unwrap();
        assert_eq!(one.residual, 0.0);
        assert!(decoupling_residual(&free, &p, &[SiteFunction::Identity; 2], &[0, 0], &q, &lam, 0).is_err());
    }

    #[test]
    fn variance_split_sums_to_total() {
        let m = wigner(3);
        let scn = scenario(&m, &pert(1));
        let ((t, q, tot), r) =
            variance_decomposition(&scn, &ObservableSpec::LGauss, &Strategy::MonteCarlo { r: 10 }, 0).unwrap();
        assert!(r.pass);
        assert_abs_diff_eq!(t + q, tot, epsilon = 1e-12);
    }

    #[test]
    fn nonincreasing_verdicts() {
        let pt = |n, value, se| ScanPoint { n, value, se, v_n: None, shape: None };
        assert_eq!(nonincreasing(&[pt(8, 1.0, 0.1)]), None);
        assert_eq!(nonincreasing(&[pt(8, 1.0, 0.1), pt(12, 1.2, 0.1)]), Some(true));
        assert_eq!(nonincreasing(&[pt(8, 1.0, 0.01), pt(12, 1.2, 0.01)]), Some(false));
    }
}
