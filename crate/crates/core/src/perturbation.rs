//! Gaussian and exponential side channels, their Hamiltonians and schedules.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, LabError, Result};
use crate::rng::{stream_rng, streams, LabRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    Binary,
    Soft,
    None,
}

fn d_kmax() -> usize {
    6
}
fn d_eps_exp() -> f64 {
    0.5
}
fn d_s_exp() -> f64 {
    0.75
}
fn d_one() -> f64 {
    1.0
}
fn d_true() -> bool {
    true
}
fn d_three() -> usize {
    3
}

/// Perturbation block of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    #[serde(rename = "K_max", alias = "k_max", default = "d_kmax")]
    pub k_max: usize,
    #[serde(default = "d_eps_exp")]
    pub eps_exponent: f64,
    #[serde(default = "d_s_exp")]
    pub s_exponent: f64,
    #[serde(default = "d_one")]
    pub eps_scale: f64,
    #[serde(default = "d_one")]
    pub s_scale: f64,
    #[serde(default = "default_mode")]
    pub mode: PerturbationMode,
    /// Include the exponential channels; `false` keeps only the Gaussian one.
    #[serde(default = "d_true")]
    pub exponential: bool,
    #[serde(default)]
    pub lambda_seed: u64,
    #[serde(default)]
    pub noise_seed: u64,
    /// Fixed λ; when absent λ is drawn from `lambda_seed`.
    #[serde(default)]
    pub lambda: Option<LambdaVector>,
    /// Soft mode: largest polynomial degree bound `m`.
    #[serde(default = "d_three")]
    pub soft_max_terms: usize,
    /// Soft mode: coefficients are `2^{-j}` for `j = 1..=soft_dyadic_depth`.
    #[serde(default = "d_three")]
    pub soft_dyadic_depth: usize,
    /// Soft mode: keep only the first indices in ι order.
    #[serde(default)]
    pub soft_max_indices: Option<usize>,
}

fn default_mode() -> PerturbationMode {
    PerturbationMode::Binary
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            k_max: d_kmax(),
            eps_exponent: d_eps_exp(),
            s_exponent: d_s_exp(),
            eps_scale: 1.0,
            s_scale: 1.0,
            mode: PerturbationMode::Binary,
            exponential: true,
            lambda_seed: 0,
            noise_seed: 0,
            lambda: None,
            soft_max_terms: 3,
            soft_dyadic_depth: 3,
            soft_max_indices: None,
        }
    }
}

impl PerturbationConfig {
    pub fn none() -> Self {
        PerturbationConfig { mode: PerturbationMode::None, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode != PerturbationMode::None && self.k_max < 1 {
            return Err(LabError::InvalidPerturbation("K_max must be >= 1".into()));
        }
        if !(self.eps_exponent > 0.0 && self.eps_exponent < 1.0) {
            return Err(LabError::InvalidPerturbation("eps_exponent must lie in (0, 1)".into()));
        }
        if !(self.s_exponent > 0.5 && self.s_exponent < 1.0) {
            return Err(LabError::InvalidPerturbation("s_exponent must lie in (1/2, 1)".into()));
        }
        if !(self.eps_scale > 0.0 && self.s_scale > 0.0) {
            return Err(LabError::InvalidPerturbation("schedule constants must be positive".into()));
        }
        if self.mode == PerturbationMode::Soft && (self.soft_max_terms == 0 || self.soft_dyadic_depth == 0) {
            return Err(LabError::InvalidPerturbation("soft index set is empty".into()));
        }
        if let Some(l) = &self.lambda {
            l.validate_shape(self)?;
        }
        Ok(())
    }

    pub fn schedules(&self, n: usize) -> Result<Schedules> {
        Schedules::new(n, self)
    }

    pub fn index_set(&self) -> MultiIndexSet {
        let mut set = MultiIndexSet::new(self.soft_max_terms, self.soft_dyadic_depth);
        if let Some(cap) = self.soft_max_indices {
            set.indices.truncate(cap);
        }
        set
    }

    /// Dyadic interval of every λ component, in [`LambdaVector::components`] order.
    pub fn lambda_intervals(&self) -> Vec<(f64, f64)> {
        lambda_intervals(self.k_max, self.mode, self.index_set().len())
    }

    /// The λ used for a single run: the fixed one if given, else a draw.
    pub fn lambda_for_run(&self) -> Result<LambdaVector> {
        match &self.lambda {
            Some(l) => Ok(l.clone()),
            None => Ok(self.lambda_from_unit(&unit_draw(self.lambda_intervals().len(), self.lambda_seed))),
        }
    }

    pub fn lambda_from_unit(&self, u: &[f64]) -> LambdaVector {
        LambdaVector::from_unit(self.k_max, self.mode, self.index_set().len(), u)
    }

    /// `count` stratified draws: each component's interval is cut into `count`
    /// strata and every stratum is used once (Latin hypercube).
    pub fn lambda_draws(&self, count: usize, seed: u64) -> Vec<LambdaVector> {
        if let Some(l) = &self.lambda {
            return vec![l.clone(); count];
        }
        latin_hypercube(count, self.lambda_intervals().len(), seed)
            .into_iter()
            .map(|u| self.lambda_from_unit(&u))
            .collect()
    }

    pub fn side_channels(&self, n: usize, lambda: &LambdaVector) -> Result<SideChannels> {
        let sched = self.schedules(n)?;
        SideChannels::build(lambda, sched, self.exponential, &self.index_set())
    }
}

fn unit_draw(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, streams::LAMBDA);
    (0..dim).map(|_| rng.random::<f64>()).collect()
}

/// `count` points of a Latin hypercube in `[0,1]^dim`.
pub fn latin_hypercube(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, streams::LAMBDA);
    let mut pts = vec![vec![0.0; dim]; count];
    for d in 0..dim {
        let mut perm: Vec<usize> = (0..count).collect();
        perm.shuffle(&mut rng);
        for (j, p) in perm.into_iter().enumerate() {
            let u: f64 = rng.random();
            pts[j][d] = (p as f64 + u) / count as f64;
        }
    }
    pts
}

/// `ε_N = c_ε N^{-γ_ε}` and `s_N = c_s N^{γ_s}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub eps_n: f64,
    pub s_n: f64,
}

impl Schedules {
    pub fn new(n: usize, cfg: &PerturbationConfig) -> Result<Schedules> {
        if n == 0 {
            return Err(LabError::InvalidPerturbation("N must be positive".into()));
        }
        let nf = n as f64;
        Schedules::explicit(cfg.eps_scale * nf.powf(-cfg.eps_exponent), cfg.s_scale * nf.powf(cfg.s_exponent))
    }

    pub fn explicit(eps_n: f64, s_n: f64) -> Result<Schedules> {
        if !(eps_n > 0.0 && eps_n <= 1.0) {
            return Err(LabError::InvalidPerturbation(format!("eps_N = {eps_n} outside (0, 1]")));
        }
        if !(s_n > 0.0 && s_n.is_finite()) {
            return Err(LabError::InvalidPerturbation(format!("s_N = {s_n} must be positive")));
        }
        Ok(Schedules { eps_n, s_n })
    }
}

/// Perturbation parameters λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LambdaVector {
    Binary { lambda0: f64, lambda_k: Vec<f64> },
    Soft { lambda0_k: Vec<f64>, lambda_i: Vec<f64> },
    None,
}

/// Intervals in component order: binary `λ₀, λ₁…λ_K`; soft `λ₀₁…λ₀_K, λ_I…`.
pub fn lambda_intervals(k_max: usize, mode: PerturbationMode, n_indices: usize) -> Vec<(f64, f64)> {
    let dyadic = |k: usize| (0.5f64.powi(k as i32 + 1), 0.5f64.powi(k as i32));
    match mode {
        PerturbationMode::Binary => std::iter::once((0.5, 1.0)).chain((1..=k_max).map(dyadic)).collect(),
        PerturbationMode::Soft => {
            (1..=k_max).map(dyadic).chain(std::iter::repeat((0.5, 1.0)).take(n_indices)).collect()
        }
        PerturbationMode::None => Vec::new(),
    }
}

impl LambdaVector {
    pub fn from_unit(k_max: usize, mode: PerturbationMode, n_indices: usize, u: &[f64]) -> LambdaVector {
        let iv = lambda_intervals(k_max, mode, n_indices);
        let v: Vec<f64> = iv.iter().zip(u).map(|((lo, hi), x)| lo + (hi - lo) * x).collect();
        match mode {
            PerturbationMode::Binary => LambdaVector::Binary { lambda0: v[0], lambda_k: v[1..].to_vec() },
            PerturbationMode::Soft => {
                LambdaVector::Soft { lambda0_k: v[..k_max].to_vec(), lambda_i: v[k_max..].to_vec() }
            }
            PerturbationMode::None => LambdaVector::None,
        }
    }

    pub fn components(&self) -> Vec<f64> {
        match self {
            LambdaVector::Binary { lambda0, lambda_k } => {
                std::iter::once(*lambda0).chain(lambda_k.iter().copied()).collect()
            }
            LambdaVector::Soft { lambda0_k, lambda_i } => lambda0_k.iter().chain(lambda_i).copied().collect(),
            LambdaVector::None => Vec::new(),
        }
    }

    pub fn mode(&self) -> PerturbationMode {
        match self {
            LambdaVector::Binary { .. } => PerturbationMode::Binary,
            LambdaVector::Soft { .. } => PerturbationMode::Soft,
            LambdaVector::None => PerturbationMode::None,
        }
    }

    /// λ₀ of the first Gaussian channel (the one `𝓛` differentiates).
    pub fn lambda0(&self) -> f64 {
        match self {
            LambdaVector::Binary { lambda0, .. } => *lambda0,
            LambdaVector::Soft { lambda0_k, .. } => lambda0_k.first().copied().unwrap_or(0.0),
            LambdaVector::None => 0.0,
        }
    }

    pub fn with_lambda0(&self, l0: f64) -> LambdaVector {
        let mut out = self.clone();
        match &mut out {
            LambdaVector::Binary { lambda0, .. } => *lambda0 = l0,
            LambdaVector::Soft { lambda0_k, .. } => {
                if let Some(x) = lambda0_k.first_mut() {
                    *x = l0
                }
            }
            LambdaVector::None => {}
        }
        out
    }

    /// Zeroes every exponential-channel λ.
    pub fn without_exponential(&self) -> LambdaVector {
        match self {
            LambdaVector::Binary { lambda0, lambda_k } => {
                LambdaVector::Binary { lambda0: *lambda0, lambda_k: vec![0.0; lambda_k.len()] }
            }
            LambdaVector::Soft { lambda0_k, lambda_i } => {
                LambdaVector::Soft { lambda0_k: lambda0_k.clone(), lambda_i: vec![0.0; lambda_i.len()] }
            }
            LambdaVector::None => LambdaVector::None,
        }
    }

    fn validate_shape(&self, cfg: &PerturbationConfig) -> Result<()> {
        let ok = match (self, cfg.mode) {
            (LambdaVector::Binary { lambda_k, .. }, PerturbationMode::Binary) => lambda_k.len() == cfg.k_max,
            (LambdaVector::Soft { lambda0_k, lambda_i }, PerturbationMode::Soft) => {
                lambda0_k.len() == cfg.k_max && lambda_i.len() == cfg.index_set().len()
            }
            (LambdaVector::None, PerturbationMode::None) => true,
            _ => false,
        };
        if !ok {
            return Err(LabError::InvalidPerturbation("lambda does not match mode / K_max".into()));
        }
        let c = self.components();
        if c.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(LabError::InvalidPerturbation("lambda entries must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// True when every component lies in its dyadic interval.
    pub fn in_intervals(&self, cfg: &PerturbationConfig) -> bool {
        let iv = cfg.lambda_intervals();
        let c = self.components();
        iv.len() == c.len() && c.iter().zip(&iv).all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }
}

/// Draws each λ component uniformly on its dyadic interval.
pub fn draw_lambda(k_max: usize, mode: PerturbationMode, seed: u64) -> Result<LambdaVector> {
    if k_max < 1 {
        return Err(LabError::InvalidPerturbation("K_max must be >= 1".into()));
    }
    let n_idx = MultiIndexSet::default().len();
    let dim = lambda_intervals(k_max, mode, n_idx).len();
    Ok(LambdaVector::from_unit(k_max, mode, n_idx, &unit_draw(dim, seed)))
}

/// A dyadic polynomial `P_I(x) = 2^{-ι-m} Σ_{p<m} a_p x^p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialIndex {
    pub m: usize,
    pub coeffs: Vec<f64>,
    pub iota: usize,
}

impl PolynomialIndex {
    pub fn new(coeffs: Vec<f64>, iota: usize) -> Result<PolynomialIndex> {
        if coeffs.is_empty() {
            return Err(LabError::InvalidPerturbation("polynomial index needs m >= 1".into()));
        }
        for &a in &coeffs {
            let k = -a.log2();
            if !(a > 0.0 && a <= 0.5 && k.fract() == 0.0) {
                return Err(LabError::InvalidPerturbation(format!("coefficient {a} is not 2^-k, k >= 1")));
            }
        }
        Ok(PolynomialIndex { m: coeffs.len(), coeffs, iota })
    }

    pub fn prefactor(&self) -> f64 {
        0.5f64.powi((self.iota + self.m) as i32)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for &a in self.coeffs.iter().rev() {
            acc = acc * x + a;
        }
        self.prefactor() * acc
    }

    /// `m·2^{-ι-m}`.
    pub fn bound(&self) -> f64 {
        self.m as f64 * self.prefactor()
    }
}

/// The evaluable form of [`PolynomialIndex`].
pub fn polynomial_basis(index: &PolynomialIndex) -> impl Fn(f64) -> f64 + '_ {
    move |x| index.eval(x)
}

/// All indices with `m ≤ max_terms` and `a_p ∈ {2^{-1}, …, 2^{-depth}}`,
/// ranked lexicographically by `(m, a₀, …, a_{m-1})` with larger `a_p` first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiIndexSet {
    pub indices: Vec<PolynomialIndex>,
}

impl Default for MultiIndexSet {
    fn default() -> Self {
        MultiIndexSet::new(3, 3)
    }
}

impl MultiIndexSet {
    pub fn new(max_terms: usize, depth: usize) -> MultiIndexSet {
        let mut indices = Vec::new();
        for m in 1..=max_terms {
            let total = depth.pow(m as u32);
            for code in 0..total {
                let mut c = code;
                let mut ks = vec![0usize; m];
                for p in (0..m).rev() {
                    ks[p] = c % depth + 1;
                    c /= depth;
                }
                let coeffs = ks.iter().map(|&k| 0.5f64.powi(k as i32)).collect();
                let iota = indices.len();
                indices.push(PolynomialIndex { m, coeffs, iota });
            }
        }
        MultiIndexSet { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The function `P` inside an exponential channel: `x` for Ising spins or a dyadic polynomial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpPoly {
    Identity,
    Dyadic(PolynomialIndex),
}

impl ExpPoly {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ExpPoly::Identity => x,
            ExpPoly::Dyadic(p) => p.eval(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussChannel {
    /// `λ₀ₖ ε_N`.
    pub coef: f64,
    pub power: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpChannel {
    pub lambda: f64,
    pub poly: ExpPoly,
}

impl ExpChannel {
    pub fn rate(&self, x: f64) -> f64 {
        1.0 + self.lambda * self.poly.eval(x)
    }
}

/// The side channels implied by λ and the schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideChannels {
    pub lambda: LambdaVector,
    pub schedules: Schedules,
    pub gauss: Vec<GaussChannel>,
    pub exp: Vec<ExpChannel>,
}

impl SideChannels {
    pub fn build(
        lambda: &LambdaVector,
        schedules: Schedules,
        exponential: bool,
        index_set: &MultiIndexSet,
    ) -> Result<SideChannels> {
        let eps = schedules.eps_n;
        let (gauss, exp) = match lambda {
            LambdaVector::Binary { lambda0, lambda_k } => {
                if lambda_k.iter().any(|l| *l > 0.5) {
                    return Err(LabError::InvalidPerturbation("binary λ_k must be <= 1/2".into()));
                }
                let exp = if exponential {
                    lambda_k.iter().map(|&l| ExpChannel { lambda: l, poly: ExpPoly::Identity }).collect()
                } else {
                    Vec::new()
                };
                (vec![GaussChannel { coef: lambda0 * eps, power: 1 }], exp)
            }
            LambdaVector::Soft { lambda0_k, lambda_i } => {
                if lambda_i.len() > index_set.len() {
                    return Err(LabError::InvalidPerturbation("more λ_I than indices".into()));
                }
                let gauss = lambda0_k
                    .iter()
                    .enumerate()
                    .map(|(k, &l)| GaussChannel { coef: l * eps, power: k as u32 + 1 })
                    .collect();
                let exp = if exponential {
                    lambda_i
                        .iter()
                        .zip(&index_set.indices)
                        .map(|(&l, idx)| ExpChannel { lambda: l, poly: ExpPoly::Dyadic(idx.clone()) })
                        .collect()
                } else {
                    Vec::new()
                };
                (gauss, exp)
            }
            LambdaVector::None => (Vec::new(), Vec::new()),
        };
        if lambda.components().iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(LabError::InvalidPerturbation("λ entries must be finite and >= 0".into()));
        }
        Ok(SideChannels { lambda: lambda.clone(), schedules, gauss, exp })
    }

    pub fn none() -> SideChannels {
        SideChannels {
            lambda: LambdaVector::None,
            schedules: Schedules { eps_n: 1.0, s_n: 1.0 },
            gauss: Vec::new(),
            exp: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.gauss.is_empty() && self.exp.is_empty()
    }

    /// Mean of every Poisson site count, `s_N/N`.
    pub fn site_rate(&self, n: usize) -> f64 {
        self.schedules.s_n / n as f64
    }
}

/// All side-channel randomness for one realisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRealization {
    pub channels: SideChannels,
    pub n: usize,
    /// `z[i·K_g + k]`.
    pub z: Vec<f64>,
    pub pi: Vec<usize>,
    pub sites: Vec<Vec<usize>>,
    pub xi: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Side observations in sufficient-statistic form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideData {
    pub n: usize,
    pub kg: usize,
    /// `gauss_y[i·K_g + k] = √(λ₀ₖε_N)·σ*ᵢᵏ + Z_{ik}`.
    pub gauss_y: Vec<f64>,
    pub kc: usize,
    /// Number of exponential observations on `(channel c, site i)` at `c·N + i`.
    pub count: Vec<u32>,
    /// Sum of those observations.
    pub sum: Vec<f64>,
}

impl SideData {
    pub fn empty(n: usize) -> SideData {
        SideData { n, kg: 0, gauss_y: Vec::new(), kc: 0, count: Vec::new(), sum: Vec::new() }
    }
}

impl PerturbationRealization {
    pub fn lambda(&self) -> &LambdaVector {
        &self.channels.lambda
    }

    pub fn schedules(&self) -> Schedules {
        self.channels.schedules
    }

    /// The observation `ξ/(1+λ_c P_c(σ*_i))` for term `j` of channel `c`.
    pub fn y_exp(&self, signal: &[f64], c: usize, j: usize) -> f64 {
        let ch = &self.channels.exp[c];
        self.xi[c][j] / ch.rate(signal[self.sites[c][j]])
    }

    pub fn side_data(&self, signal: &[f64]) -> SideData {
        let n = self.n;
        let kg = self.channels.gauss.len();
        let mut gauss_y = vec![0.0; n * kg];
        for i in 0..n {
            for (k, g) in self.channels.gauss.iter().enumerate() {
                gauss_y[i * kg + k] = g.coef.sqrt() * signal[i].powi(g.power as i32) + self.z[i * kg + k];
            }
        }
        let kc = self.channels.exp.len();
        let mut count = vec![0u32; kc * n];
        let mut sum = vec![0.0; kc * n];
        for c in 0..kc {
            for j in 0..self.pi[c] {
                let i = self.sites[c][j];
                count[c * n + i] += 1;
                sum[c * n + i] += self.y_exp(signal, c, j);
            }
        }
        SideData { n, kg, gauss_y, kc, count, sum }
    }
}

/// Draws Z, π, site indices and ξ for the channels implied by `lambda` and `schedules`.
pub fn sample_perturbation(
    signal: &[f64],
    lambda: &LambdaVector,
    schedules: Schedules,
    seed: u64,
) -> Result<PerturbationRealization> {
    let channels = SideChannels::build(lambda, schedules, true, &MultiIndexSet::default())?;
    sample_perturbation_with(signal, &channels, seed)
}

pub fn sample_perturbation_with(signal: &[f64], channels: &SideChannels, seed: u64) -> Result<PerturbationRealization> {
    let mut rng = stream_rng(seed, streams::SIDE_NOISE);
    let mut r = draw_realization(signal.len(), channels, &mut rng)?;
    r.seed = seed;
    check_rates(signal, channels)?;
    Ok(r)
}

pub(crate) fn check_rates(signal: &[f64], channels: &SideChannels) -> Result<()> {
    ensure_finite(signal, "signal")?;
    for ch in &channels.exp {
        for &s in signal {
            if ch.rate(s) <= 0.0 {
                return Err(LabError::Domain(format!("1 + λP(σ*) = {} <= 0", ch.rate(s))));
            }
        }
    }
    Ok(())
}

pub(crate) fn draw_realization(n: usize, channels: &SideChannels, rng: &mut LabRng) -> Result<PerturbationRealization> {
    let kg = channels.gauss.len();
    let z = (0..n * kg).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut pi = Vec::with_capacity(channels.exp.len());
    let mut sites = Vec::with_capacity(channels.exp.len());
    let mut xi = Vec::with_capacity(channels.exp.len());
    let pois = Poisson::new(channels.schedules.s_n)
        .map_err(|e| LabError::InvalidPerturbation(format!("Poisson(s_N): {e}")))?;
    for _ in &channels.exp {
        let count = pois.sample(rng) as usize;
        pi.push(count);
        sites.push((0..count).map(|_| rng.random_range(0..n)).collect());
        xi.push((0..count).map(|_| rng.sample::<f64, _>(Exp1)).collect());
    }
    Ok(PerturbationRealization { channels: channels.clone(), n, z, pi, sites, xi, seed: 0 })
}

/// `λ₀ε σ*·σ + √(λ₀ε) Z·σ − ½λ₀ε‖σ‖²`.
pub fn gaussian_hamiltonian(sigma: &[f64], signal: &[f64], z: &[f64], lambda0: f64, eps_n: f64) -> Result<f64> {
    if eps_n < 0.0 || lambda0 < 0.0 {
        return Err(LabError::Domain("negative eps_N or lambda0".into()));
    }
    if sigma.len() != signal.len() || z.len() != sigma.len() {
        return Err(LabError::Shape("sigma, signal and Z must have length N".into()));
    }
    let c = lambda0 * eps_n;
    let dot: f64 = sigma.iter().zip(signal).map(|(a, b)| a * b).sum();
    let zs: f64 = sigma.iter().zip(z).map(|(a, b)| a * b).sum();
    let nrm: f64 = sigma.iter().map(|a| a * a).sum();
    Ok(c * dot + c.sqrt() * zs - 0.5 * c * nrm)
}

/// Soft form: `Σ_k Σ_i λ₀ₖε(σ*σ)^k + √(λ₀ₖε) Z_{ik} σ^k − ½λ₀ₖε σ^{2k}`, with `z[i·K + k]`.
pub fn gaussian_hamiltonian_soft(
    sigma: &[f64],
    signal: &[f64],
    z: &[f64],
    lambda0_k: &[f64],
    eps_n: f64,
) -> Result<f64> {
    if eps_n < 0.0 || lambda0_k.iter().any(|l| *l < 0.0) {
        return Err(LabError::Domain("negative eps_N or lambda0".into()));
    }
    let kk = lambda0_k.len();
    if sigma.len() != signal.len() || z.len() != sigma.len() * kk {
        return Err(LabError::Shape("Z must be N×K".into()));
    }
    let mut h = 0.0;
    for i in 0..sigma.len() {
        for (k, l) in lambda0_k.iter().enumerate() {
            let c = l * eps_n;
            let p = k as i32 + 1;
            let s = sigma[i].powi(p);
            h += c * (signal[i] * sigma[i]).powi(p) + c.sqrt() * z[i * kk + k] * s - 0.5 * c * s * s;
        }
    }
    Ok(h)
}

/// `Σ_c Σ_{j≤π_c} ln(1+λ_c P_c(σ_i)) − λ_c ξ P_c(σ_i)/(1+λ_c P_c(σ*_i))`.
pub fn exponential_hamiltonian(sigma: &[f64], signal: &[f64], r: &PerturbationRealization) -> Result<f64> {
    if sigma.len() != r.n || signal.len() != r.n {
        return Err(LabError::Shape("sigma and signal must have length N".into()));
    }
    let mut h = 0.0;
    for (c, ch) in r.channels.exp.iter().enumerate() {
        for j in 0..r.pi[c] {
            let i = r.sites[c][j];
            let p = ch.poly.eval(sigma[i]);
            let arg = 1.0 + ch.lambda * p;
            let rate = ch.rate(signal[i]);
            if arg <= 0.0 || rate <= 0.0 {
                return Err(LabError::Domain("log argument <= 0".into()));
            }
            h += arg.ln() - ch.lambda * r.xi[c][j] * p / rate;
        }
    }
    Ok(h)
}

/// Per-site log-weights of the side channels, evaluated from sufficient statistics.
/// `values[i]` lists the candidate spin values at site `i`.
pub fn site_tables(channels: &SideChannels, side: &SideData, values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = values.len();
    let kg = channels.gauss.len();
    values
        .iter()
        .enumerate()
        .map(|(i, vals)| {
            vals.iter()
                .map(|&v| {
                    let mut h = 0.0;
                    for (k, g) in channels.gauss.iter().enumerate() {
                        let s = v.powi(g.power as i32);
                        h += g.coef.sqrt() * side.gauss_y[i * kg + k] * s - 0.5 * g.coef * s * s;
                    }
                    for (c, ch) in channels.exp.iter().enumerate() {
                        let cnt = side.count[c * n + i];
                        if cnt > 0 {
                            let lp = ch.lambda * ch.poly.eval(v);
                            h += cnt as f64 * lp.ln_1p() - lp * side.sum[c * n + i];
                        }
                    }
                    h
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn binary(l: f64, k: usize) -> LambdaVector {
        LambdaVector::Binary { lambda0: 1.0, lambda_k: vec![l; k] }
    }

    #[test]
    fn lambda_intervals_binary() {
        let l = draw_lambda(3, PerturbationMode::Binary, 4).unwrap();
        let LambdaVector::Binary { lambda0, lambda_k } = &l else { panic!() };
        assert!((0.5..=1.0).contains(lambda0));
        assert!((0.25..=0.5).contains(&lambda_k[0]));
        assert!((0.125..=0.25).contains(&lambda_k[1]));
        assert!((1.0 / 16.0..=0.125).contains(&lambda_k[2]));
        assert_eq!(l, draw_lambda(3, PerturbationMode::Binary, 4).unwrap());
        let one = draw_lambda(1, PerturbationMode::Binary, 9).unwrap();
        assert!((0.5..=1.0).contains(&one.lambda0()));
        assert!(draw_lambda(0, PerturbationMode::Binary, 9).is_err());
    }

    #[test]
    fn soft_lambda_intervals() {
        let l = draw_lambda(2, PerturbationMode::Soft, 1).unwrap();
        let LambdaVector::Soft { lambda0_k, lambda_i } = &l else { panic!() };
        assert!((0.25..=0.5).contains(&lambda0_k[0]));
        assert!((0.125..=0.25).contains(&lambda0_k[1]));
        assert_eq!(lambda_i.len(), 39);
        assert!(lambda_i.iter().all(|x| (0.5..=1.0).contains(x)));
    }

    #[test]
    fn poisson_counts_have_mean_s() {
        let sched = Schedules::explicit(0.5, 9.0).unwrap();
        let signal = vec![1.0; 10];
        let mut total = 0.0;
        let reps = 400;
        for s in 0..reps {
            let r = sample_perturbation(&signal, &binary(0.25, 2), sched, s).unwrap();
            total += r.pi.iter().sum::<usize>() as f64;
            assert!(r.xi.iter().flatten().all(|x| *x > 0.0));
            assert!(r.sites.iter().flatten().all(|i| *i < 10));
        }
        let mean = total / (2 * reps) as f64;
        let se = (9.0 / (2 * reps) as f64).sqrt();
        assert!((mean - 9.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn exp_observations_at_negative_signal_have_mean_two() {
        let sched = Schedules::explicit(0.5, 200.0).unwrap();
        let signal = vec![-1.0; 4];
        let r = sample_perturbation(&signal, &binary(0.5, 1), sched, 3).unwrap();
        let ys: Vec<f64> = (0..r.pi[0]).map(|j| r.y_exp(&signal, 0, j)).collect();
        for (j, y) in ys.iter().enumerate() {
            assert_abs_diff_eq!(*y, 2.0 * r.xi[0][j], epsilon = 1e-15);
        }
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        // Exp(rate ½) has mean 2 and sd 2
        assert!((mean - 2.0).abs() < 3.0 * 2.0 / (ys.len() as f64).sqrt());
    }

    #[test]
    fn gaussian_hamiltonian_examples() {
        let h = gaussian_hamiltonian(&[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0], 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(h, 1.0, epsilon = 1e-15);
        assert_eq!(gaussian_hamiltonian(&[1.0, -1.0], &[1.0, 1.0], &[0.3, 2.0], 0.0, 0.5).unwrap(), 0.0);
        assert!(gaussian_hamiltonian(&[1.0], &[1.0], &[0.0], 1.0, -0.1).is_err());
        let soft =
            gaussian_hamiltonian_soft(&[0.0, 0.0], &[1.0, 0.5], &[0.1, 0.2, 0.3, 0.4], &[0.5, 0.25], 0.7).unwrap();
        assert_eq!(soft, 0.0);
    }

    fn one_term(lambda: f64, sigma_star: f64, xi: f64) -> PerturbationRealization {
        let channels = SideChannels::build(
            &LambdaVector::Binary { lambda0: 0.5, lambda_k: vec![lambda] },
            Schedules::explicit(0.5, 1.0).unwrap(),
            true,
            &MultiIndexSet::default(),
        )
        .unwrap();
        let _ = sigma_star;
        PerturbationRealization {
            channels,
            n: 1,
            z: vec![0.0],
            pi: vec![1],
            sites: vec![vec![0]],
            xi: vec![vec![xi]],
            seed: 0,
        }
    }

    #[test]
    fn exponential_hamiltonian_examples() {
        let r = one_term(0.5, 1.0, 1.0);
        let h = exponential_hamiltonian(&[1.0], &[1.0], &r).unwrap();
        assert_abs_diff_eq!(h, 1.5f64.ln() - 0.5 / 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(h, 0.072132, epsilon = 1e-6);
        let mut empty = r.clone();
        empty.pi = vec![0];
        empty.sites = vec![vec![]];
        empty.xi = vec![vec![]];
        assert_eq!(exponential_hamiltonian(&[1.0], &[1.0], &empty).unwrap(), 0.0);
        // ξ = 1+λσ* makes every observation equal to 1
        let r2 = one_term(0.25, -1.0, 0.75);
        let h2 = exponential_hamiltonian(&[-1.0], &[-1.0], &r2).unwrap();
        assert_abs_diff_eq!(h2, (0.75f64).ln() + 0.25, epsilon = 1e-15);
    }

    #[test]
    fn polynomial_examples() {
        let p = PolynomialIndex::new(vec![0.5], 0).unwrap();
        let f = polynomial_basis(&p);
        for x in [-1.0, -0.3, 0.0, 1.0] {
            assert_eq!(f(x), 0.25);
        }
        let q = PolynomialIndex { m: 3, coeffs: vec![0.5, 0.25, 0.125], iota: 2 };
        assert!(q.eval(0.0) == q.prefactor() * 0.5);
        assert!(PolynomialIndex::new(vec![0.3], 0).is_err());
    }

    #[test]
    fn index_set_ranks_are_a_bijection() {
        let set = MultiIndexSet::default();
        assert_eq!(set.len(), 39);
        for (r, idx) in set.indices.iter().enumerate() {
            assert_eq!(idx.iota, r);
        }
        let mut keys: Vec<Vec<u64>> =
            set.indices.iter().map(|i| i.coeffs.iter().map(|c| c.to_bits()).collect()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 39);
        assert_eq!(set.indices[0].coeffs, vec![0.5]);
        assert_eq!(set.indices[3].coeffs, vec![0.5, 0.5]);
        assert_eq!(set.indices[4].coeffs, vec![0.5, 0.25]);
    }

    #[test]
    fn schedules_defaults() {
        let cfg = PerturbationConfig::default();
        let s = cfg.schedules(16).unwrap();
        assert_abs_diff_eq!(s.eps_n, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s.s_n, 8.0, epsilon = 1e-12);
        let bad = PerturbationConfig { s_exponent: 0.4, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn lhs_covers_every_stratum() {
        let pts = latin_hypercube(16, 3, 5);
        for d in 0..3 {
            let mut bins: Vec<usize> = pts.iter().map(|p| (p[d] * 16.0).floor() as usize).collect();
            bins.sort();
            assert_eq!(bins, (0..16).collect::<Vec<_>>());
        }
    }

    fn binary_spins(bits: &[bool]) -> Vec<f64> {
        bits.iter().map(|b| if *b { 1.0 } else { -1.0 }).collect()
    }

    proptest! {
        #[test]
        fn gaussian_is_loglik_up_to_constant(
            bits in prop::collection::vec(any::<bool>(), 4),
            star in prop::collection::vec(any::<bool>(), 4),
            z in prop::collection::vec(-3.0f64..3.0, 4),
            l0 in 0.5f64..1.0,
        ) {
            let (sigma, signal) = (binary_spins(&bits), binary_spins(&star));
            let c = l0 * 0.4;
            let y: Vec<f64> = signal.iter().zip(&z).map(|(s, z)| c.sqrt() * s + z).collect();
            let ll = |s: &[f64]| -0.5 * y.iter().zip(s).map(|(y, s)| (y - c.sqrt() * s).powi(2)).sum::<f64>();
            let lhs = gaussian_hamiltonian(&signal, &signal, &z, l0, 0.4).unwrap()
                - gaussian_hamiltonian(&sigma, &signal, &z, l0, 0.4).unwrap();
            let rhs = ll(&signal) - ll(&sigma);
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }

        #[test]
        fn exponential_is_loglik_up_to_constant(
            s in -1.0f64..1.0, t in -1.0f64..1.0, star in -1.0f64..1.0,
            lambda in 0.0f64..0.5, xi in 0.01f64..10.0,
        ) {
            let r = one_term(lambda, star, xi);
            let y = xi / (1.0 + lambda * star);
            let logpdf = |v: f64| { let rate = 1.0 + lambda * v; rate.ln() - rate * y };
            let dh = exponential_hamiltonian(&[s], &[star], &r).unwrap() - exponential_hamiltonian(&[t], &[star], &r).unwrap();
            prop_assert!((dh - (logpdf(s) - logpdf(t))).abs() < 1e-10);
        }

        #[test]
        fn exponential_is_bounded(seed in 0u64..200) {
            let sched = Schedules::explicit(0.5, 5.0).unwrap();
            let signal = vec![1.0, -1.0, 1.0];
            let lam = draw_lambda(3, PerturbationMode::Binary, seed).unwrap();
            let r = sample_perturbation(&signal, &lam, sched, seed).unwrap();
            let LambdaVector::Binary { lambda_k, .. } = &lam else { unreachable!() };
            let bound: f64 = (0..3).map(|k| {
                let xmax = r.xi[k].iter().cloned().fold(0.0, f64::max);
                r.pi[k] as f64 * ((1.0 - lambda_k[k]).ln().abs() + 2.0 * lambda_k[k] * xmax)
            }).sum();
            for sigma in [[1.0, 1.0, 1.0], [-1.0, 1.0, -1.0]] {
                prop_assert!(exponential_hamiltonian(&sigma, &signal, &r).unwrap().abs() <= bound + 1e-12);
            }
        }

        #[test]
        fn site_tables_match_raw_hamiltonians(seed in 0u64..200, bits in prop::collection::vec(any::<bool>(), 3)) {
            let sched = Schedules::explicit(0.6, 4.0).unwrap();
            let signal = vec![1.0, -1.0, 1.0];
            let lam = draw_lambda(3, PerturbationMode::Binary, seed).unwrap();
            let r = sample_perturbation(&signal, &lam, sched, seed).unwrap();
            let side = r.side_data(&signal);
            let sigma = binary_spins(&bits);
            let vals: Vec<Vec<f64>> = sigma.iter().map(|v| vec![*v]).collect();
            let tab: f64 = site_tables(&r.channels, &side, &vals).iter().map(|t| t[0]).sum();
            let raw = gaussian_hamiltonian(&sigma, &signal, &r.z, lam.lambda0(), sched.eps_n).unwrap()
                + exponential_hamiltonian(&sigma, &signal, &r).unwrap();
            prop_assert!((tab - raw).abs() < 1e-9);
        }

        #[test]
        fn polynomial_within_bound(idx in 0usize..39, x in -1.0f64..1.0) {
            let set = MultiIndexSet::default();
            let p = &set.indices[idx];
            prop_assert!(p.eval(x).abs() <= p.bound() + 1e-15);
            prop_assert!(p.bound() <= 0.5);
        }
    }
}
