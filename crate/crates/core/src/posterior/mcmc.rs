use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Hamiltonian, PosteriorHandle, PosteriorMode};
use crate::error::{LabError, Result};
use crate::model::{sign, ChannelFamily, ChannelSpec, SIGN_SENTINEL};
use crate::rng::{derive_seed, stream_rng, streams, LabRng};

const INIT_TRIES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcOptions {
    pub chains: usize,
    pub sweeps: usize,
    pub burn_in: usize,
    pub thin: usize,
}

/// `L` chains of recorded states, stored `[chain][t][site]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaBatch {
    pub n: usize,
    pub chains: usize,
    pub samples: usize,
    pub states: Vec<f64>,
    pub acceptance: Vec<f64>,
    pub ess: Vec<f64>,
    /// `exact` (independent draws) or `mcmc`.
    pub provenance: String,
}

impl ReplicaBatch {
    pub(crate) fn from_exact(n: usize, draws: Vec<Vec<f64>>) -> ReplicaBatch {
        let chains = draws.len();
        ReplicaBatch {
            n,
            chains,
            samples: 1,
            states: draws.into_iter().flatten().collect(),
            acceptance: vec![1.0; chains],
            ess: vec![1.0; chains],
            provenance: "exact".into(),
        }
    }

    pub fn state(&self, chain: usize, t: usize) -> &[f64] {
        let o = (chain * self.samples + t) * self.n;
        &self.states[o..o + self.n]
    }

    /// The last recorded state of every chain, as an `L×N` matrix.
    pub fn replicas(&self) -> Vec<Vec<f64>> {
        (0..self.chains).map(|c| self.state(c, self.samples - 1).to_vec()).collect()
    }

    /// Per-site sample mean of `g(σᵢ)` over all chains and times.
    pub fn site_means(&self, g: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut m = vec![0.0; self.n];
        for c in 0..self.chains {
            for t in 0..self.samples {
                for (acc, &v) in m.iter_mut().zip(self.state(c, t)) {
                    *acc += g(v);
                }
            }
        }
        let tot = (self.chains * self.samples) as f64;
        m.iter_mut().for_each(|x| *x /= tot);
        m
    }

    /// Average over chains of the effective sample size.
    pub fn mean_ess(&self) -> f64 {
        self.ess.iter().sum::<f64>() / self.ess.len().max(1) as f64
    }
}

/// Geyer's initial positive sequence estimate.
pub fn effective_sample_size(trace: &[f64]) -> f64 {
    let t = trace.len();
    if t < 4 {
        return t as f64;
    }
    let mean = trace.iter().sum::<f64>() / t as f64;
    let c: Vec<f64> = trace.iter().map(|x| x - mean).collect();
    let var = c.iter().map(|x| x * x).sum::<f64>() / t as f64;
    if var <= 0.0 {
        return t as f64;
    }
    let rho = |k: usize| c[..t - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / (t as f64 * var);
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k + 1 < t {
        let g = rho(2 * k) + rho(2 * k + 1);
        if g <= 0.0 {
            break;
        }
        tau += 2.0 * g;
        k += 1;
    }
    (t as f64 / tau.max(1e-12)).min(t as f64)
}

/// Incremental view of the base log-likelihood.
enum Base {
    Null,
    Tensor { site_tuples: Vec<Vec<usize>> },
    Linear { u: Vec<f64>, sign: bool },
}

struct Chain<'a> {
    ham: &'a Hamiltonian,
    idx: Vec<usize>,
    sigma: Vec<f64>,
    base: Base,
    binary: bool,
}

impl<'a> Chain<'a> {
    fn new(ham: &'a Hamiltonian, rng: &mut LabRng) -> Result<Chain<'a>> {
        let n = ham.n();
        let ch = &ham.channel;
        let mut chain = Chain {
            ham,
            idx: vec![0; n],
            sigma: vec![0.0; n],
            base: Base::Null,
            binary: ham.values.iter().all(|v| v.iter().all(|x| *x == 1.0 || *x == -1.0)),
        };
        chain.base = match ch.spec {
            ChannelSpec::SpikedTensor { .. } => {
                let mut st = vec![Vec::new(); n];
                for (t, tuple) in ch.tuples.iter().enumerate() {
                    let mut seen: Vec<usize> = Vec::new();
                    for &i in tuple {
                        if !seen.contains(&i) {
                            seen.push(i);
                            st[i].push(t);
                        }
                    }
                }
                Base::Tensor { site_tuples: st }
            }
            ChannelSpec::GlmGaussian { .. } => Base::Linear { u: Vec::new(), sign: false },
            ChannelSpec::PerceptronSign { .. } => Base::Linear { u: Vec::new(), sign: true },
            ChannelSpec::Null => Base::Null,
        };
        for _ in 0..INIT_TRIES {
            chain.randomize(rng);
            if ch.family() != ChannelFamily::Sign || ch.log_lik(&chain.sigma, &ham.data) > SIGN_SENTINEL {
                return Ok(chain);
            }
        }
        Err(LabError::Domain("no initial state consistent with the sign observations".into()))
    }

    fn randomize(&mut self, rng: &mut LabRng) {
        for i in 0..self.sigma.len() {
            let w = &self.ham.site_log[i];
            let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p: Vec<f64> = w.iter().map(|x| (x - m).exp()).collect();
            let a = pick(&p, rng);
            self.idx[i] = a;
            self.sigma[i] = self.ham.values[i][a];
        }
        if let Base::Linear { u, .. } = &mut self.base {
            let ch = &self.ham.channel;
            *u = (0..ch.rows()).map(|mu| ch.dot(mu, &self.sigma)).collect();
        }
    }

    /// `base(σ with σᵢ = v) − base(σ)`.
    fn base_delta(&self, i: usize, v: f64) -> f64 {
        let ch = &self.ham.channel;
        let old = self.sigma[i];
        match &self.base {
            Base::Null => 0.0,
            Base::Tensor { site_tuples } => {
                let mut d = 0.0;
                for &t in &site_tuples[i] {
                    let mut p_old = ch.scale;
                    let mut p_new = ch.scale;
                    for &j in &ch.tuples[t] {
                        p_old *= self.sigma[j];
                        p_new *= if j == i { v } else { self.sigma[j] };
                    }
                    let y = self.ham.data[t];
                    d += -0.5 * ((y - p_new).powi(2) - (y - p_old).powi(2));
                }
                d
            }
            Base::Linear { u, sign: false } => {
                let mut d = 0.0;
                for (mu, &um) in u.iter().enumerate() {
                    let a = ch.design[mu * ch.n + i];
                    let y = self.ham.data[mu];
                    let un = um + a * (v - old);
                    d += -0.5 * ((y - ch.scale * un).powi(2) - (y - ch.scale * um).powi(2));
                }
                d
            }
            Base::Linear { u, sign: true } => {
                let ok = u.iter().enumerate().all(|(mu, &um)| {
                    let un = um + ch.design[mu * ch.n + i] * (v - old);
                    self.ham.data[mu] == sign(un)
                });
                if ok {
                    0.0
                } else {
                    SIGN_SENTINEL
                }
            }
        }
    }

    fn set(&mut self, i: usize, a: usize) {
        let v = self.ham.values[i][a];
        if let Base::Linear { u, .. } = &mut self.base {
            let ch = &self.ham.channel;
            let old = self.sigma[i];
            for (mu, um) in u.iter_mut().enumerate() {
                *um += ch.design[mu * ch.n + i] * (v - old);
            }
        }
        self.idx[i] = a;
        self.sigma[i] = v;
    }

    /// One single-site update; returns whether the state changed.
    fn update(&mut self, i: usize, rng: &mut LabRng) -> bool {
        let vals = &self.ham.values[i];
        if vals.len() < 2 {
            return false;
        }
        let cur = self.idx[i];
        if self.binary {
            let prop = 1 - cur;
            let d = self.ham.site_log[i][prop] - self.ham.site_log[i][cur] + self.base_delta(i, vals[prop]);
            if d >= 0.0 || rng.random::<f64>() < d.exp() {
                self.set(i, prop);
                return true;
            }
            false
        } else {
            let lw: Vec<f64> = (0..vals.len())
                .map(|a| {
                    if a == cur {
                        self.ham.site_log[i][a]
                    } else {
                        self.ham.site_log[i][a] + self.base_delta(i, vals[a])
                    }
                })
                .collect();
            let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p: Vec<f64> = lw.iter().map(|x| (x - m).exp()).collect();
            let a = pick(&p, rng);
            if a != cur {
                self.set(i, a);
                true
            } else {
                false
            }
        }
    }
}

fn pick(p: &[f64], rng: &mut LabRng) -> usize {
    let total: f64 = p.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (a, &x) in p.iter().enumerate() {
        if x > 0.0 {
            acc += x;
            last = a;
            if u < acc {
                return a;
            }
        }
    }
    last
}

/// Runs `opts.chains` independent random-scan chains on `ham`.
pub fn run_chains(ham: &Hamiltonian, opts: &McmcOptions, seed: u64) -> Result<ReplicaBatch> {
    if opts.chains == 0 || opts.sweeps == 0 || opts.thin == 0 {
        return Err(LabError::Domain("chains, sweeps and thin must be positive".into()));
    }
    let n = ham.n();
    let samples = opts.sweeps / opts.thin;
    let results: Vec<Result<(Vec<f64>, f64, f64)>> = (0..opts.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(derive_seed(seed, c as u64), streams::MCMC);
            let mut chain = Chain::new(ham, &mut rng)?;
            let mut accepted = 0usize;
            let mut proposals = 0usize;
            let mut states = Vec::with_capacity(samples * n);
            let mut trace = Vec::with_capacity(samples);
            for sweep in 0..opts.burn_in + samples * opts.thin {
                for _ in 0..n {
                    let i = rng.random_range(0..n);
                    if chain.update(i, &mut rng) {
                        accepted += 1;
                    }
                    proposals += 1;
                }
                if sweep >= opts.burn_in && (sweep - opts.burn_in + 1) % opts.thin == 0 {
                    states.extend_from_slice(&chain.sigma);
                    trace.push(chain.sigma.iter().sum::<f64>() / n as f64);
                }
            }
            Ok((states, accepted as f64 / proposals.max(1) as f64, effective_sample_size(&trace)))
        })
        .collect();
    let mut batch = ReplicaBatch {
        n,
        chains: opts.chains,
        samples,
        states: Vec::with_capacity(opts.chains * samples * n),
        acceptance: Vec::new(),
        ess: Vec::new(),
        provenance: "mcmc".into(),
    };
    for r in results {
        let (s, acc, ess) = r?;
        batch.states.extend(s);
        batch.acceptance.push(acc);
        batch.ess.push(ess);
    }
    Ok(batch)
}

/// `L` chains, `burn_in` discarded sweeps, then `sweeps` sweeps recorded every `thin`.
pub fn mcmc_sample(
    handle: &PosteriorHandle,
    l: usize,
    sweeps: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
) -> Result<ReplicaBatch> {
    if handle.mode != PosteriorMode::Mcmc {
        return Err(LabError::Mode("mcmc_sample needs a posterior built in mcmc mode".into()));
    }
    run_chains(&handle.hamiltonian, &McmcOptions { chains: l, sweeps, burn_in, thin }, seed)
}
