use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::identities::{FdsFunction, NishimoriFunction, SiteFunction};
use crate::model::ModelConfig;
use crate::observables::ObservableSpec;
use crate::perturbation::{PerturbationConfig, PerturbationMode};
use crate::posterior::ENUMERATION_LIMIT;
use crate::quenched::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    Quadrature,
    MonteCarlo,
    Hybrid,
    Mcmc,
}

fn d_mode() -> EngineMode {
    EngineMode::Hybrid
}
fn d_l() -> usize {
    8
}
fn d_sweeps() -> usize {
    2000
}
fn d_burn() -> usize {
    500
}
fn d_one() -> usize {
    1
}
fn d_order() -> usize {
    20
}

/// How posterior brackets and disorder averages are computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "d_mode")]
    pub mode: EngineMode,
    /// Replicas (independent chains) per disorder realisation in MCMC mode.
    #[serde(rename = "L", alias = "l", default = "d_l")]
    pub l: usize,
    #[serde(default = "d_sweeps")]
    pub sweeps: usize,
    #[serde(default = "d_burn")]
    pub burn_in: usize,
    #[serde(default = "d_one")]
    pub thin: usize,
    #[serde(default = "d_order")]
    pub hermite: usize,
    #[serde(default = "d_order")]
    pub laguerre: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            mode: d_mode(),
            l: d_l(),
            sweeps: d_sweeps(),
            burn_in: d_burn(),
            thin: d_one(),
            hermite: d_order(),
            laguerre: d_order(),
        }
    }
}

impl EngineConfig {
    pub fn strategy(&self, r: usize) -> Strategy {
        match self.mode {
            EngineMode::Quadrature => Strategy::Quadrature { hermite: self.hermite, laguerre: self.laguerre },
            EngineMode::MonteCarlo => Strategy::MonteCarlo { r },
            EngineMode::Hybrid => Strategy::Hybrid { r, hermite: self.hermite },
            EngineMode::Mcmc => {
                Strategy::Mcmc { r, chains: self.l, sweeps: self.sweeps, burn_in: self.burn_in, thin: self.thin }
            }
        }
    }
}

fn d_r() -> usize {
    64
}
fn d_draws() -> usize {
    8
}
fn d_sweep_obs() -> Vec<ObservableSpec> {
    vec![ObservableSpec::Multioverlap(vec![1, 1]), ObservableSpec::Multioverlap(vec![1, 1, 1])]
}

/// Decoupling functions and sites tracked across a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecouplingSpec {
    pub h: Vec<SiteFunction>,
    pub sites: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// System sizes, strictly ascending.
    #[serde(rename = "N", alias = "n")]
    pub n: Vec<usize>,
    /// Disorder realisations per (N, λ).
    #[serde(rename = "R", alias = "r", default = "d_r")]
    pub r: usize,
    #[serde(default = "d_draws")]
    pub lambda_draws: usize,
    /// Observables whose λ-averaged total variance is tracked by `sweep`.
    #[serde(default = "d_sweep_obs")]
    pub observables: Vec<ObservableSpec>,
    #[serde(default)]
    pub decoupling: Option<DecouplingSpec>,
    /// In MCMC mode, cross-check the smallest N against exact enumeration.
    #[serde(default)]
    pub oracle: bool,
}

fn d_nishimori() -> Vec<NishimoriFunction> {
    vec![
        NishimoriFunction::Multioverlap(vec![1]),
        NishimoriFunction::Multioverlap(vec![1, 1]),
        NishimoriFunction::Multioverlap(vec![1, 1, 1]),
        NishimoriFunction::SpinPair,
    ]
}
fn d_fds() -> Vec<FdsFunction> {
    vec![FdsFunction::One, FdsFunction::Multioverlap(vec![1, 1])]
}
fn d_ks() -> Vec<usize> {
    vec![1]
}
fn d_variance_obs() -> Vec<ObservableSpec> {
    vec![ObservableSpec::LGauss]
}

/// One entry of the `tests` list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "test", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestSpec {
    Nishimori {
        #[serde(default = "d_nishimori")]
        functions: Vec<NishimoriFunction>,
    },
    MagnetisationBound,
    /// Derivative identity, signal covariance identity, Var(R₁,*) = Var(R₁,₂) and Var(R₁,₂) ≤ 4Var(𝓛).
    GaussianIdentities,
    ThermalL,
    DerivativeBounds {
        #[serde(default = "d_ks")]
        k: Vec<usize>,
    },
    Fds {
        #[serde(default = "d_fds")]
        functions: Vec<FdsFunction>,
        #[serde(default = "d_ks")]
        k: Vec<usize>,
    },
    Decoupling {
        h: Vec<SiteFunction>,
        sites: Vec<usize>,
    },
    Variance {
        #[serde(default = "d_variance_obs")]
        observables: Vec<ObservableSpec>,
    },
}

impl TestSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TestSpec::Nishimori { .. } => "nishimori",
            TestSpec::MagnetisationBound => "magnetisation_bound",
            TestSpec::GaussianIdentities => "gaussian_identities",
            TestSpec::ThermalL => "thermal_l",
            TestSpec::DerivativeBounds { .. } => "derivative_bounds",
            TestSpec::Fds { .. } => "fds",
            TestSpec::Decoupling { .. } => "decoupling",
            TestSpec::Variance { .. } => "variance",
        }
    }

    /// Tests that need exact posteriors at every disorder node.
    fn needs_exact_nodes(&self) -> bool {
        matches!(self, TestSpec::GaussianIdentities | TestSpec::DerivativeBounds { .. } | TestSpec::Fds { .. })
    }
}

fn d_pert() -> PerturbationConfig {
    PerturbationConfig::none()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default = "d_pert")]
    pub perturbation: PerturbationConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub tests: Vec<TestSpec>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
}

/// A configuration problem, located in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Line (1-based) of the last key of `path`, each key searched after the
/// previous one; 1 when not found.
fn line_of(text: &str, path: &[&str]) -> usize {
    let mut from = 0;
    for key in path {
        let needle = format!("\"{key}\"");
        match text[from..].find(&needle) {
            Some(at) => from += at,
            None => break,
        }
    }
    text[..from].matches('\n').count() + 1
}

impl ExperimentConfig {
    /// Parse and validate; every error carries a line number.
    pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| ConfigError { line: e.line().max(1), message: e.to_string() })?;
        cfg.validate().map_err(|(key, message)| ConfigError { line: line_of(text, key), message })?;
        Ok(cfg)
    }

    /// System sizes visited by `run` and `sweep`.
    pub fn n_values(&self) -> Vec<usize> {
        self.sweep.as_ref().map_or_else(|| vec![self.model.n], |s| s.n.clone())
    }

    pub fn disorder_count(&self) -> usize {
        self.sweep.as_ref().map_or_else(d_r, |s| s.r)
    }

    pub fn lambda_draw_count(&self) -> usize {
        self.sweep.as_ref().map_or_else(d_draws, |s| s.lambda_draws)
    }

    pub fn strategy(&self) -> Strategy {
        self.engine.strategy(self.disorder_count())
    }

    /// Hex SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Semantic checks; the error names the JSON key to point at.
    fn validate(&self) -> Result<(), (&'static [&'static str], String)> {
        self.model.validate().map_err(|e| (&["model"][..], e.to_string()))?;
        self.perturbation.validate().map_err(|e| (&["perturbation"][..], e.to_string()))?;
        let e = &self.engine;
        if e.mode == EngineMode::Mcmc && (e.l == 0 || e.sweeps <= e.burn_in || e.thin == 0) {
            return Err((&["engine"], "mcmc needs L >= 1, sweeps > burn_in and thin >= 1".into()));
        }
        if e.hermite == 0 || e.laguerre == 0 {
            return Err((&["engine"], "quadrature orders must be positive".into()));
        }
        if let Some(s) = &self.sweep {
            if s.n.is_empty() || s.n.contains(&0) || s.n.windows(2).any(|w| w[0] >= w[1]) {
                return Err((&["sweep", "N"], "sweep N values must be positive and strictly ascending".into()));
            }
            if s.r == 0 || s.lambda_draws == 0 {
                return Err((&["sweep"], "R and lambda_draws must be positive".into()));
            }
            if let Some(d) = &s.decoupling {
                check_decoupling(&d.h, &d.sites, &s.n)?;
            }
        }
        let ns = self.n_values();
        for &n in &ns {
            self.model.with_n(n).validate().map_err(|e| (&["model"][..], format!("N = {n}: {e}")))?;
            if e.mode != EngineMode::Mcmc {
                let count = self
                    .model
                    .with_n(n)
                    .materialize()
                    .map_err(|e| (&["model"][..], e.to_string()))?
                    .0
                    .configuration_count();
                if count > ENUMERATION_LIMIT as f64 {
                    return Err((
                        &["engine", "mode"],
                        format!("N = {n} has {count} configurations; use mode \"mcmc\""),
                    ));
                }
            }
        }
        for t in &self.tests {
            if e.mode == EngineMode::Mcmc && t.needs_exact_nodes() {
                return Err((&["tests"], format!("test '{}' needs an exact engine mode, not mcmc", t.name())));
            }
            match t {
                TestSpec::Nishimori { functions } if functions.is_empty() => {
                    return Err((&["functions"], "nishimori needs at least one function".into()));
                }
                TestSpec::Nishimori { functions } if functions.contains(&NishimoriFunction::SpinPair) && ns[0] < 2 => {
                    return Err((&["functions"], "spin_pair needs N >= 2".into()));
                }
                TestSpec::DerivativeBounds { k } | TestSpec::Fds { k, .. } => {
                    let kmax = if self.perturbation.exponential { self.perturbation.k_max } else { 0 };
                    if let Some(bad) = k.iter().find(|&&k| k == 0 || k > kmax) {
                        return Err((&["k"], format!("k = {bad} outside the exponential channels 1..={kmax}")));
                    }
                }
                TestSpec::Decoupling { h, sites } => check_decoupling(h, sites, &ns)?,
                TestSpec::GaussianIdentities | TestSpec::ThermalL
                    if self.perturbation.mode == PerturbationMode::None =>
                {
                    return Err((
                        &["tests"],
                        format!(
                            "test '{}' needs the Gaussian side channel (perturbation mode binary or soft)",
                            t.name()
                        ),
                    ));
                }
                TestSpec::Variance { observables } if observables.iter().any(|o| o.replica_arity() > 2) => {
                    return Err((&["observables"], "variance decomposition needs replica arity 1 or 2".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn check_decoupling(
    h: &[SiteFunction],
    sites: &[usize],
    ns: &[usize],
) -> Result<(), (&'static [&'static str], String)> {
    let mut s = sites.to_vec();
    s.sort_unstable();
    s.dedup();
    if h.is_empty() || h.len() != sites.len() || s.len() != sites.len() {
        return Err((&["sites"], "decoupling needs one distinct site per function".into()));
    }
    if sites.iter().any(|&i| i >= ns[0]) {
        return Err((&["sites"], format!("sites must be < N = {}", ns[0])));
    }
    Ok(())
}
