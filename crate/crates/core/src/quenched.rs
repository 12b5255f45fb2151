//! Quenched averages `𝔼[·]` over the signal, the base data and the side observations.
//!
//! Every strategy produces *units*: independent, equally weighted estimates of
//! a vector of per-node quantities. Inside a unit, nodes carry weights and are
//! self-normalised. The signal is integrated out in data space: at each node
//! the candidate signals are weighted by `P(σ*) p(W | σ*)` computed from the
//! generative densities, which is the exact conditional law of σ* given `W`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::likelihood::{log_density, log_gamma_ref, log_prior, log_std_normal};
use crate::model::{generate_data_with, sample_signal_with, Channel, ChannelFamily, ChannelSpec, ModelConfig, Prior};
use crate::observables::{batch_moments, exact_moments, ObservableSpec, SignalContext};
use crate::perturbation::{
    check_rates, draw_realization, LambdaVector, PerturbationConfig, PerturbationRealization, SideChannels, SideData,
};
use crate::posterior::{log_sum_exp, run_chains, ExactPosterior, Hamiltonian, McmcOptions, ReplicaBatch};
use crate::quadrature::{hermite, laguerre, poisson_cap, POISSON_TAIL};
use crate::rng::{derive_seed, stream_rng, streams};

/// Largest candidate set for which signal weights are computed exactly.
pub const CANDIDATE_LIMIT: usize = 4096;
pub const MAX_QUADRATURE_DIM: usize = 12;
pub const MAX_QUADRATURE_NODES: f64 = 1e7;
const CHUNK: usize = 2048;

fn default_order() -> usize {
    20
}

fn default_sweeps() -> usize {
    2000
}

fn default_burn_in() -> usize {
    500
}

fn default_one() -> usize {
    1
}

fn default_chains() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    /// Tensor-product rules over every noise coordinate and enumerated Poisson counts.
    Quadrature {
        #[serde(default = "default_order")]
        hermite: usize,
        #[serde(default = "default_order")]
        laguerre: usize,
    },
    /// `r` independent disorder draws.
    MonteCarlo { r: usize },
    /// `r` outer disorder draws with Gauss-Hermite integration over the
    /// power-one Gaussian side observations inside each draw.
    Hybrid {
        r: usize,
        #[serde(default = "default_order")]
        hermite: usize,
    },
    /// `r` disorder draws, brackets estimated from `chains` MCMC replicas.
    Mcmc {
        r: usize,
        #[serde(default = "default_chains")]
        chains: usize,
        #[serde(default = "default_sweeps")]
        sweeps: usize,
        #[serde(default = "default_burn_in")]
        burn_in: usize,
        #[serde(default = "default_one")]
        thin: usize,
    },
}

impl Strategy {
    pub fn is_exact(&self) -> bool {
        matches!(self, Strategy::Quadrature { .. })
    }

    pub fn mcmc_options(&self) -> Option<McmcOptions> {
        match *self {
            Strategy::Mcmc { chains, sweeps, burn_in, thin, .. } => Some(McmcOptions { chains, sweeps, burn_in, thin }),
            _ => None,
        }
    }
}

/// A model together with fixed side channels: everything needed to draw disorder.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ModelConfig,
    pub prior: Prior,
    pub channel: Arc<Channel>,
    /// Channel used by the posterior; differs from `channel` only in mismatch experiments.
    pub posterior_channel: Arc<Channel>,
    pub side: SideChannels,
    candidates: Option<Vec<Vec<f64>>>,
    candidate_log_prior: Vec<f64>,
}

impl Scenario {
    pub fn new(config: &ModelConfig, perturbation: &PerturbationConfig, lambda: &LambdaVector) -> Result<Scenario> {
        perturbation.validate()?;
        let side = perturbation.side_channels(config.n, lambda)?;
        Scenario::with_side(config, side)
    }

    pub fn with_side(config: &ModelConfig, side: SideChannels) -> Result<Scenario> {
        let (prior, channel) = config.materialize()?;
        let supports: Vec<Vec<f64>> = (0..prior.n).map(|i| prior.site_values(i)).collect();
        for s in &supports {
            check_rates(s, &side)?;
        }
        let count = prior.configuration_count();
        let candidates = (count <= CANDIDATE_LIMIT as f64).then(|| product(&supports));
        let candidate_log_prior =
            candidates.as_ref().map(|c| c.iter().map(|s| log_prior(&prior, s)).collect()).unwrap_or_default();
        let channel = Arc::new(channel);
        Ok(Scenario {
            config: config.clone(),
            prior,
            posterior_channel: channel.clone(),
            channel,
            side,
            candidates,
            candidate_log_prior,
        })
    }

    /// Same disorder, but the posterior uses `spec` for the base channel.
    pub fn with_posterior_channel(mut self, spec: &ChannelSpec) -> Result<Scenario> {
        let ch = spec.materialize(self.n())?;
        if ch.data_len() != self.channel.data_len() {
            return Err(LabError::Shape("posterior channel must read data of the same length".into()));
        }
        self.posterior_channel = Arc::new(ch);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.prior.n
    }

    pub fn lambda(&self) -> &LambdaVector {
        &self.side.lambda
    }

    /// Whether candidate signals are enumerated (exact signal weights).
    pub fn enumerates_signal(&self) -> bool {
        self.candidates.is_some()
    }

    fn hamiltonian(&self, data: &[f64], side: &SideData) -> Hamiltonian {
        Hamiltonian::new(&self.prior, self.posterior_channel.clone(), data.to_vec(), &self.side, side)
    }

    /// `ln P(σ*) + ln p(W | σ*)` for every candidate.
    fn candidate_log_weights(&self, data: &[f64], side: &SideData) -> Vec<f64> {
        let cands = self.candidates.as_ref().expect("enumerated candidates");
        cands
            .iter()
            .zip(&self.candidate_log_prior)
            .map(|(s, lp)| {
                if *lp == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                lp + log_density(&self.channel, &self.side, s, data, side)
            })
            .collect()
    }
}

/// Every configuration of the product support, site 0 varying fastest
/// (the enumeration order of exact posteriors).
fn product(supports: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let count: usize = supports.iter().map(|s| s.len()).product();
    (0..count)
        .map(|mut c| {
            supports
                .iter()
                .map(|s| {
                    let v = s[c % s.len()];
                    c /= s.len();
                    v
                })
                .collect()
        })
        .collect()
}

/// What an integrand sees at one node of an exact strategy.
pub struct NodeView<'a> {
    pub scenario: &'a Scenario,
    pub data: &'a [f64],
    pub side: &'a SideData,
    pub posterior: &'a ExactPosterior,
    /// Candidate signals with positive weight, and their normalised weights.
    pub signals: Vec<&'a [f64]>,
    pub weights: Vec<f64>,
}

impl<'a> NodeView<'a> {
    pub fn context(&self, c: usize) -> SignalContext<'_> {
        SignalContext { signal: self.signals[c], channels: &self.scenario.side, side: self.side }
    }

    /// `Σ_c w_c f(σ*_c)` over candidate signals.
    pub fn signal_average(&self, mut f: impl FnMut(&SignalContext) -> Result<f64>) -> Result<f64> {
        let mut acc = 0.0;
        for c in 0..self.signals.len() {
            acc += self.weights[c] * f(&self.context(c))?;
        }
        Ok(acc)
    }
}

/// What an integrand sees for one MCMC disorder draw.
pub struct McmcView<'a> {
    pub scenario: &'a Scenario,
    pub signal: &'a [f64],
    pub data: &'a [f64],
    pub side: &'a SideData,
    pub realization: &'a PerturbationRealization,
    pub batch: &'a ReplicaBatch,
}

impl McmcView<'_> {
    pub fn context(&self) -> SignalContext<'_> {
        SignalContext { signal: self.signal, channels: &self.scenario.side, side: self.side }
    }
}

/// Moments of `ln 𝒵` from coordinates that were fixed at their mean because
/// the posterior does not depend on them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InertShift {
    pub mean: f64,
    pub var: f64,
}

/// Per-unit vectors of node averages.
#[derive(Debug, Clone, PartialEq)]
pub struct Units {
    pub values: Vec<Vec<f64>>,
    pub inert: InertShift,
}

/// A value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Units {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> Vec<f64> {
        mean_of(self.values.iter().map(|v| v.as_slice()), self.values[0].len())
    }

    /// `f` applied to the unit mean, with a delete-one jackknife standard error.
    pub fn estimate(&self, f: impl Fn(&[f64]) -> f64) -> Estimate {
        let r = self.values.len();
        let dim = self.values[0].len();
        let total: Vec<f64> = (0..dim).map(|d| self.values.iter().map(|v| v[d]).sum()).collect();
        let value = f(&total.iter().map(|t| t / r as f64).collect::<Vec<_>>());
        if r < 2 {
            return Estimate { value, se: 0.0 };
        }
        let loo: Vec<f64> = self
            .values
            .iter()
            .map(|v| {
                let m: Vec<f64> = (0..dim).map(|d| (total[d] - v[d]) / (r - 1) as f64).collect();
                f(&m)
            })
            .collect();
        let bar = loo.iter().sum::<f64>() / r as f64;
        let var = (r - 1) as f64 / r as f64 * loo.iter().map(|x| (x - bar).powi(2)).sum::<f64>();
        Estimate { value, se: var.sqrt() }
    }
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        for (a, x) in acc.iter_mut().zip(r) {
            *a += x;
        }
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}

struct Draw {
    signal: Vec<f64>,
    data: Vec<f64>,
    realization: PerturbationRealization,
    side: SideData,
}

/// Signal-first draw of one disorder realisation.
fn draw(scn: &Scenario, seed: u64, unit: usize) -> Result<Draw> {
    let mut rng = stream_rng(derive_seed(seed, unit as u64), streams::DISORDER);
    let signal = sample_signal_with(&scn.prior, &mut rng)?;
    let data = generate_data_with(&signal, &scn.channel, &mut rng, true)?.values;
    let mut realization = draw_realization(scn.n(), &scn.side, &mut rng)?;
    realization.seed = derive_seed(seed, unit as u64);
    let side = realization.side_data(&signal);
    Ok(Draw { signal, data, realization, side })
}

fn normalise(logw: &[f64]) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logw);
    (lse, logw.iter().map(|w| (w - lse).exp()).collect())
}

fn evaluate<F>(
    scn: &Scenario,
    data: &[f64],
    side: &SideData,
    weights: Option<&[f64]>,
    truth: &[f64],
    f: &F,
) -> Result<Vec<f64>>
where
    F: Fn(&NodeView) -> Result<Vec<f64>>,
{
    let ham = scn.hamiltonian(data, side);
    let posterior = ExactPosterior::new(&ham)?;
    let (signals, weights): (Vec<&[f64]>, Vec<f64>) = match (weights, scn.candidates.as_ref()) {
        (Some(w), Some(c)) => c.iter().zip(w).filter(|(_, w)| **w > 0.0).map(|(s, w)| (s.as_slice(), *w)).unzip(),
        _ => (vec![truth], vec![1.0]),
    };
    f(&NodeView { scenario: scn, data, side, posterior: &posterior, signals, weights })
}

/// Integrates `f` over the disorder with an exact posterior at every node.
pub fn integrate<F>(scn: &Scenario, strategy: &Strategy, seed: u64, f: F) -> Result<Units>
where
    F: Fn(&NodeView) -> Result<Vec<f64>> + Sync,
{
    match *strategy {
        Strategy::MonteCarlo { r } => {
            check_units(r)?;
            let values = (0..r)
                .into_par_iter()
                .map(|u| {
                    let d = draw(scn, seed, u)?;
                    let w = scn.candidates.as_ref().map(|_| normalise(&scn.candidate_log_weights(&d.data, &d.side)).1);
                    evaluate(scn, &d.data, &d.side, w.as_deref(), &d.signal, &f)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Units { values, inert: InertShift::default() })
        }
        Strategy::Hybrid { r, hermite } => {
            check_units(r)?;
            let values =
                (0..r).into_par_iter().map(|u| hybrid_unit(scn, seed, u, hermite, &f)).collect::<Result<Vec<_>>>()?;
            Ok(Units { values, inert: InertShift::default() })
        }
        Strategy::Quadrature { hermite, laguerre } => quadrature(scn, hermite, laguerre, &f),
        Strategy::Mcmc { .. } => Err(LabError::Mode("use integrate_mcmc for the mcmc strategy".into())),
    }
}

fn check_units(r: usize) -> Result<()> {
    if r == 0 {
        return Err(LabError::Domain("need at least one disorder realisation".into()));
    }
    Ok(())
}

/// Integrates `f` over `r` disorder draws with MCMC replicas at each.
pub fn integrate_mcmc<F>(scn: &Scenario, r: usize, opts: &McmcOptions, seed: u64, f: F) -> Result<Units>
where
    F: Fn(&McmcView) -> Result<Vec<f64>> + Sync,
{
    check_units(r)?;
    let values = (0..r)
        .into_par_iter()
        .map(|u| {
            let d = draw(scn, seed, u)?;
            let ham = scn.hamiltonian(&d.data, &d.side);
            let batch = run_chains(&ham, opts, derive_seed(derive_seed(seed, u as u64), streams::MCMC))?;
            f(&McmcView {
                scenario: scn,
                signal: &d.signal,
                data: &d.data,
                side: &d.side,
                realization: &d.realization,
                batch: &batch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Units { values, inert: InertShift::default() })
}

fn hybrid_unit<F>(scn: &Scenario, seed: u64, unit: usize, order: usize, f: &F) -> Result<Vec<f64>>
where
    F: Fn(&NodeView) -> Result<Vec<f64>>,
{
    let cands = scn.candidates.as_ref().ok_or_else(|| {
        LabError::QuadratureTooLarge(format!("hybrid needs at most {CANDIDATE_LIMIT} candidate signals"))
    })?;
    let k1 = scn
        .side
        .gauss
        .iter()
        .position(|g| g.power == 1)
        .ok_or_else(|| LabError::Domain("hybrid needs a power-one Gaussian side channel".into()))?;
    let n = scn.n();
    let rule = hermite(order)?;
    let nodes = (order as f64).powi(n as i32);
    if nodes > MAX_QUADRATURE_NODES {
        return Err(LabError::QuadratureTooLarge(format!(
            "{nodes} inner nodes exceed {MAX_QUADRATURE_NODES}; use monte_carlo"
        )));
    }
    let d = draw(scn, seed, unit)?;
    let kg = d.side.kg;
    let root_c = scn.side.gauss[k1].coef.sqrt();
    let column = |s: &[f64], side: &SideData| -> f64 {
        (0..n).map(|i| log_std_normal(side.gauss_y[i * kg + k1] - root_c * s[i])).sum()
    };
    let outer: Vec<f64> = scn
        .candidate_log_weights(&d.data, &d.side)
        .iter()
        .zip(cands)
        .map(|(w, s)| if *w == f64::NEG_INFINITY { *w } else { w - column(s, &d.side) })
        .collect();
    let mut side = d.side.clone();
    let mut logw = Vec::with_capacity(nodes as usize);
    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(nodes as usize);
    let mut idx = vec![0usize; n];
    for _ in 0..nodes as usize {
        let mut ln_omega = 0.0;
        let mut ln_ref = 0.0;
        for i in 0..n {
            let x = rule.nodes[idx[i]];
            side.gauss_y[i * kg + k1] = x;
            ln_omega += rule.weights[idx[i]].ln();
            ln_ref += log_std_normal(x);
        }
        let cw: Vec<f64> = outer
            .iter()
            .zip(cands)
            .map(|(w, s)| if *w == f64::NEG_INFINITY { *w } else { w + column(s, &side) })
            .collect();
        let (lse, weights) = normalise(&cw);
        logw.push(ln_omega + lse - ln_ref);
        vals.push(evaluate(scn, &d.data, &side, Some(&weights), &d.signal, f)?);
        for v in idx.iter_mut() {
            *v += 1;
            if *v < order {
                break;
            }
            *v = 0;
        }
    }
    Ok(weighted_mean(&logw, &vals))
}

fn weighted_mean(logw: &[f64], vals: &[Vec<f64>]) -> Vec<f64> {
    let (_, w) = normalise(logw);
    let dim = vals[0].len();
    let mut acc = vec![0.0; dim];
    for (wi, v) in w.iter().zip(vals) {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += wi * x;
        }
    }
    acc
}

/// One noise coordinate of the quadrature grid.
#[derive(Debug, Clone, Copy)]
enum Coord {
    Base(usize),
    Gauss(usize),
}

fn quadrature<F>(scn: &Scenario, h_order: usize, l_order: usize, f: &F) -> Result<Units>
where
    F: Fn(&NodeView) -> Result<Vec<f64>> + Sync,
{
    let cands = scn
        .candidates
        .as_ref()
        .ok_or_else(|| LabError::QuadratureTooLarge(format!("more than {CANDIDATE_LIMIT} candidate signals")))?;
    let n = scn.n();
    let supports: Vec<Vec<f64>> = (0..n).map(|i| scn.prior.site_values(i)).collect();
    let ch = &scn.channel;
    let kg = scn.side.gauss.len();
    let kc = scn.side.exp.len();
    let mut inert = InertShift::default();
    let mut base_fixed = vec![0.0; ch.data_len()];
    let mut gauss_fixed = vec![0.0; n * kg];
    let mut coords = Vec::new();
    let mut sign_dim = 0;
    match ch.family() {
        ChannelFamily::Gaussian => {
            for j in 0..ch.data_len() {
                if ch.coordinate_is_inert(j, &supports) {
                    base_fixed[j] = ch.coordinate_mean(j, &cands[0]);
                    inert.mean -= 0.5;
                    inert.var += 0.5;
                } else {
                    coords.push(Coord::Base(j));
                }
            }
        }
        ChannelFamily::Sign => sign_dim = ch.data_len(),
        ChannelFamily::Null => {}
    }
    for i in 0..n {
        for (k, g) in scn.side.gauss.iter().enumerate() {
            let pw: Vec<f64> = supports[i].iter().map(|v| v.powi(g.power as i32)).collect();
            if g.power != 1 && pw.iter().all(|x| *x == pw[0]) {
                gauss_fixed[i * kg + k] = g.coef.sqrt() * pw[0];
                inert.var += g.coef * pw[0] * pw[0];
            } else {
                coords.push(Coord::Gauss(i * kg + k));
            }
        }
    }
    let cells = kc * n;
    let cap = if kc > 0 { poisson_cap(kc as f64 * scn.side.schedules.s_n, POISSON_TAIL) } else { 0 };
    let count_vectors = compositions(cells, cap);
    let max_gl = count_vectors.iter().map(|c| c.iter().filter(|x| **x > 0).count()).max().unwrap_or(0);
    let dim = coords.len() + max_gl;
    if dim > MAX_QUADRATURE_DIM {
        return Err(LabError::QuadratureTooLarge(format!(
            "{dim} continuous noise dimensions exceed {MAX_QUADRATURE_DIM}; use monte_carlo"
        )));
    }
    let gh_nodes = (h_order as f64).powi(coords.len() as i32) * 2f64.powi(sign_dim as i32);
    let total: f64 = count_vectors
        .iter()
        .map(|c| gh_nodes * (l_order as f64).powi(c.iter().filter(|x| **x > 0).count() as i32))
        .sum();
    if total > MAX_QUADRATURE_NODES {
        return Err(LabError::QuadratureTooLarge(format!(
            "{total} quadrature nodes exceed {MAX_QUADRATURE_NODES}; use monte_carlo"
        )));
    }
    let gh = hermite(h_order)?;
    let gl: Vec<_> = (1..=cap.max(1)).map(|m| laguerre(l_order, m as f64 - 1.0)).collect::<Result<_>>()?;
    let mut work = Vec::new();
    for (ci, c) in count_vectors.iter().enumerate() {
        let size = gh_nodes as usize * l_order.pow(c.iter().filter(|x| **x > 0).count() as u32);
        let mut start = 0;
        while start < size {
            work.push((ci, start, (start + CHUNK).min(size)));
            start += CHUNK;
        }
    }
    let partials = work
        .par_iter()
        .map(|&(ci, start, end)| -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
            let counts = &count_vectors[ci];
            let active: Vec<usize> = (0..cells).filter(|&c| counts[c] > 0).collect();
            let mut data = base_fixed.clone();
            let mut side = SideData {
                n,
                kg,
                gauss_y: gauss_fixed.clone(),
                kc,
                count: counts.iter().map(|&x| x as u32).collect(),
                sum: vec![0.0; cells],
            };
            let mut logw = Vec::with_capacity(end - start);
            let mut vals = Vec::with_capacity(end - start);
            for lin in start..end {
                let mut rem = lin;
                let mut ln_omega = 0.0;
                let mut ln_ref = 0.0;
                for c in &coords {
                    let a = rem % h_order;
                    rem /= h_order;
                    let x = gh.nodes[a];
                    ln_omega += gh.weights[a].ln();
                    ln_ref += log_std_normal(x);
                    match *c {
                        Coord::Base(j) => data[j] = x,
                        Coord::Gauss(j) => side.gauss_y[j] = x,
                    }
                }
                if sign_dim > 0 {
                    let pattern = rem % (1usize << sign_dim);
                    rem >>= sign_dim;
                    for (mu, y) in data.iter_mut().enumerate() {
                        *y = if pattern >> mu & 1 == 1 { 1.0 } else { -1.0 };
                    }
                }
                for &cell in &active {
                    let a = rem % l_order;
                    rem /= l_order;
                    let rule = &gl[counts[cell] - 1];
                    side.sum[cell] = rule.nodes[a];
                    ln_omega += rule.weights[a].ln();
                    ln_ref += log_gamma_ref(counts[cell] as u32, rule.nodes[a]);
                }
                let (lse, weights) = normalise(&scn.candidate_log_weights(&data, &side));
                if lse == f64::NEG_INFINITY {
                    continue;
                }
                logw.push(ln_omega + lse - ln_ref);
                vals.push(evaluate(scn, &data, &side, Some(&weights), &cands[0], f)?);
            }
            Ok((logw, vals))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut logw = Vec::new();
    let mut vals = Vec::new();
    for (l, v) in partials {
        logw.extend(l);
        vals.extend(v);
    }
    if vals.is_empty() {
        return Err(LabError::NotFinite("quadrature produced no node with positive weight"));
    }
    Ok(Units { values: vec![weighted_mean(&logw, &vals)], inert })
}

/// All vectors of `cells` nonnegative integers with sum at most `cap`, in lexicographic order.
fn compositions(cells: usize, cap: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; cells];
    fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if pos == cur.len() {
            out.push(cur.clone());
            return;
        }
        for v in 0..=left {
            cur[pos] = v;
            rec(pos + 1, left - v, cur, out);
        }
        cur[pos] = 0;
    }
    rec(0, cap, &mut cur, &mut out);
    out
}

/// An observable's quenched mean and its variance split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimate: f64,
    pub se: f64,
    pub thermal_var: f64,
    pub thermal_var_se: f64,
    pub quenched_var: f64,
    pub quenched_var_se: f64,
    pub total_var: f64,
    pub total_var_se: f64,
    pub units: usize,
}

impl EstimateRecord {
    /// From units whose first three entries are `⟨X⟩`, `⟨X²⟩`, `⟨X⟩²`.
    pub fn from_moment_units(units: &Units) -> EstimateRecord {
        let m = units.estimate(|v| v[0]);
        let th = units.estimate(|v| v[1] - v[2]);
        let qu = units.estimate(|v| v[2] - v[0] * v[0]);
        let to = units.estimate(|v| v[1] - v[0] * v[0]);
        EstimateRecord {
            estimate: m.value,
            se: m.se,
            thermal_var: th.value,
            thermal_var_se: th.se,
            quenched_var: qu.value,
            quenched_var_se: qu.se,
            total_var: to.value,
            total_var_se: to.se,
            units: units.len(),
        }
    }
}

/// `(⟨X⟩, ⟨X²⟩, ⟨X⟩²)` at an exact node, averaged over candidate signals.
pub fn node_moments(obs: &ObservableSpec, view: &NodeView) -> Result<[f64; 3]> {
    if !obs.uses_signal() {
        let (a, b) = exact_moments(obs, view.posterior, &view.context(0))?;
        return Ok([a, b, a * a]);
    }
    let mut acc = [0.0; 3];
    for c in 0..view.signals.len() {
        let (a, b) = exact_moments(obs, view.posterior, &view.context(c))?;
        let w = view.weights[c];
        acc[0] += w * a;
        acc[1] += w * b;
        acc[2] += w * a * a;
    }
    Ok(acc)
}

/// `𝔼⟨X⟩` and its thermal/quenched variance split for one λ.
pub fn quenched_average(
    model: &ModelConfig,
    perturbation: &PerturbationConfig,
    obs: &ObservableSpec,
    strategy: &Strategy,
    seed: u64,
) -> Result<EstimateRecord> {
    let lambda = perturbation.lambda_for_run()?;
    let scn = Scenario::new(model, perturbation, &lambda)?;
    observable_record(&scn, obs, strategy, seed)
}

pub fn observable_record(
    scn: &Scenario,
    obs: &ObservableSpec,
    strategy: &Strategy,
    seed: u64,
) -> Result<EstimateRecord> {
    Ok(observable_records(scn, std::slice::from_ref(obs), strategy, seed)?.remove(0))
}

/// Several observables from the same disorder draws (and the same replicas).
pub fn observable_records(
    scn: &Scenario,
    obs: &[ObservableSpec],
    strategy: &Strategy,
    seed: u64,
) -> Result<Vec<EstimateRecord>> {
    let units = match *strategy {
        Strategy::Mcmc { r, chains, sweeps, burn_in, thin } => {
            let opts = McmcOptions { chains, sweeps, burn_in, thin };
            integrate_mcmc(scn, r, &opts, seed, |v| {
                let mut out = Vec::with_capacity(3 * obs.len());
                for o in obs {
                    let (a, b, c) = batch_moments(o, v.batch, &v.context())?;
                    out.extend([a, b, c]);
                }
                Ok(out)
            })?
        }
        _ => integrate(scn, strategy, seed, |v| {
            let mut out = Vec::with_capacity(3 * obs.len());
            for o in obs {
                out.extend(node_moments(o, v)?);
            }
            Ok(out)
        })?,
    };
    Ok((0..obs.len())
        .map(|j| {
            let sub = Units {
                values: units.values.iter().map(|v| v[3 * j..3 * j + 3].to_vec()).collect(),
                inert: units.inert,
            };
            EstimateRecord::from_moment_units(&sub)
        })
        .collect())
}

/// `𝔼 ln 𝒵` with its quenched variance (`thermal_var` is zero).
pub fn free_entropy(scn: &Scenario, strategy: &Strategy, seed: u64) -> Result<EstimateRecord> {
    if strategy.mcmc_options().is_some() {
        return Err(LabError::Mode("free entropy needs an exact strategy".into()));
    }
    let units = integrate(scn, strategy, seed, |v| {
        let f = v.posterior.log_partition;
        Ok(vec![f, f * f])
    })?;
    let shift = units.inert;
    let m = units.estimate(|v| v[0] + shift.mean);
    let var = units.estimate(|v| v[1] - v[0] * v[0] + shift.var);
    Ok(EstimateRecord {
        estimate: m.value,
        se: m.se,
        thermal_var: 0.0,
        thermal_var_se: 0.0,
        quenched_var: var.value,
        quenched_var_se: var.se,
        total_var: var.value,
        total_var_se: var.se,
        units: units.len(),
    })
}

/// `v_N`: the largest `Var(ln 𝒵)/N` over `draws` Latin-hypercube λ.
pub fn empirical_v_n(
    model: &ModelConfig,
    perturbation: &PerturbationConfig,
    strategy: &Strategy,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut v: f64 = 0.0;
    for (j, lambda) in perturbation.lambda_draws(draws, derive_seed(seed, streams::LAMBDA)).iter().enumerate() {
        let scn = Scenario::new(model, perturbation, lambda)?;
        let rec = free_entropy(&scn, strategy, derive_seed(seed, j as u64))?;
        v = v.max(rec.quenched_var / model.n as f64);
    }
    Ok(v)
}

/// Mean of per-λ estimates; the standard error combines the independent ones.
pub fn lambda_average(items: &[Estimate]) -> Estimate {
    let k = items.len().max(1) as f64;
    Estimate {
        value: items.iter().map(|e| e.value).sum::<f64>() / k,
        se: items.iter().map(|e| e.se * e.se).sum::<f64>().sqrt() / k,
    }
}
