//! Order parameters and fluctuation quantities, evaluated on explicit replicas,
//! on exact posteriors (as bracket moments) and on MCMC replica batches.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::perturbation::{PerturbationRealization, SideChannels, SideData};
use crate::posterior::{ExactPosterior, ReplicaBatch};

/// `N⁻¹ Σᵢ Π_j (σᵢ^{ℓ_j})^{k_j}`; powers default to one.
pub fn multioverlap<R: AsRef<[f64]>>(replicas: &[R], powers: Option<&[u32]>) -> Result<f64> {
    if replicas.is_empty() {
        return Err(LabError::Domain("a multioverlap needs at least one replica".into()));
    }
    let n = replicas[0].as_ref().len();
    if n == 0 || replicas.iter().any(|r| r.as_ref().len() != n) {
        return Err(LabError::Shape("replicas must be non-empty rows of equal length".into()));
    }
    let ones = vec![1u32; replicas.len()];
    let powers = powers.unwrap_or(&ones);
    if powers.len() != replicas.len() || powers.contains(&0) {
        return Err(LabError::Domain("one power >= 1 per replica".into()));
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += replicas.iter().zip(powers).map(|(r, &k)| r.as_ref()[i].powi(k as i32)).product::<f64>();
    }
    Ok(acc / n as f64)
}

/// `𝓛 = N⁻¹(σ·σ* + σ·Z/(2√λ₀) − ‖σ‖²/2)` with `λ₀ = λ₀ε_N`.
pub fn l_gauss(sigma: &[f64], signal: &[f64], z: &[f64], lambda0n: f64) -> Result<f64> {
    if !(lambda0n > 0.0) {
        return Err(LabError::Domain(format!("lambda0N must be > 0, got {lambda0n}")));
    }
    if sigma.len() != signal.len() || z.len() != sigma.len() || sigma.is_empty() {
        return Err(LabError::Shape("sigma, signal and Z must share a positive length".into()));
    }
    let h: f64 = (0..sigma.len())
        .map(|i| sigma[i] * signal[i] + sigma[i] * z[i] / (2.0 * lambda0n.sqrt()) - 0.5 * sigma[i] * sigma[i])
        .sum();
    Ok(h / sigma.len() as f64)
}

/// `(𝓛_k, 𝓛̃_k)` for exponential channel `k` (1-based) of a realisation.
pub fn l_exp(k: usize, sigma: &[f64], signal: &[f64], r: &PerturbationRealization) -> Result<(f64, f64)> {
    if k == 0 || k > r.channels.exp.len() {
        return Err(LabError::Domain(format!("channel {k} outside 1..={}", r.channels.exp.len())));
    }
    if sigma.len() != r.n || signal.len() != r.n {
        return Err(LabError::Shape("sigma and signal must have length N".into()));
    }
    let c = k - 1;
    let ch = &r.channels.exp[c];
    let s = r.channels.schedules.s_n;
    let (mut first, mut tilde) = (0.0, 0.0);
    for j in 0..r.pi[c] {
        let i = r.sites[c][j];
        let p = ch.poly.eval(sigma[i]);
        first += p / ch.rate(sigma[i]);
        tilde += p * r.xi[c][j] / ch.rate(signal[i]).powi(2);
    }
    Ok(((first - tilde) / s, tilde / s))
}

/// Per-replica `θ` and `d` plus the shared `y` at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct FdsTerms {
    pub theta: Vec<f64>,
    pub y: f64,
    pub d: Vec<f64>,
}

/// `θ^ℓ = ln(1+λσᵢ^ℓ) − λyσᵢ^ℓ`, `y = ξ/(1+λσᵢ*)`, `d^ℓ = yσᵢ^ℓ/(1+λσᵢ*)`.
pub fn fds_terms<R: AsRef<[f64]>>(
    i: usize,
    replicas: &[R],
    signal: &[f64],
    xi: f64,
    lambda_k: f64,
) -> Result<FdsTerms> {
    if i >= signal.len() || replicas.iter().any(|r| r.as_ref().len() != signal.len()) {
        return Err(LabError::Shape("site index or replica length mismatch".into()));
    }
    if !(xi > 0.0) || !(0.0..=1.0).contains(&lambda_k) {
        return Err(LabError::Domain("need xi > 0 and lambda_k in [0, 1]".into()));
    }
    let rate = 1.0 + lambda_k * signal[i];
    let y = xi / rate;
    let mut theta = Vec::with_capacity(replicas.len());
    let mut d = Vec::with_capacity(replicas.len());
    for r in replicas {
        let s = r.as_ref()[i];
        theta.push((lambda_k * s).ln_1p() - lambda_k * y * s);
        d.push(y * s / rate);
    }
    Ok(FdsTerms { theta, y, d })
}

/// A named observable, addressable by string key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ObservableSpec {
    /// `R_{1,…,n}^{(k₁,…,k_n)}`; a single power-one replica is the magnetisation.
    Multioverlap(Vec<u32>),
    /// `R_{1,*}`.
    SignalOverlap,
    LGauss,
    LExp(usize),
    LExpTilde(usize),
    Fds(usize),
}

impl ObservableSpec {
    pub fn replica_arity(&self) -> usize {
        match self {
            ObservableSpec::Multioverlap(p) => p.len(),
            ObservableSpec::Fds(_) => 2,
            _ => 1,
        }
    }

    pub fn key(&self) -> String {
        self.to_string()
    }

    /// Whether the value depends on σ* (and so on the candidate signal).
    pub fn uses_signal(&self) -> bool {
        !matches!(self, ObservableSpec::Multioverlap(_))
    }
}

impl fmt::Display for ObservableSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObservableSpec::Multioverlap(p) if p.iter().all(|k| *k == 1) => {
                let idx: Vec<String> = (1..=p.len()).map(|l| l.to_string()).collect();
                write!(f, "R:{}", idx.join(","))
            }
            ObservableSpec::Multioverlap(p) => {
                write!(f, "Rk:")?;
                p.iter().try_for_each(|k| write!(f, "({k})"))
            }
            ObservableSpec::SignalOverlap => write!(f, "R:1,*"),
            ObservableSpec::LGauss => write!(f, "Lgauss"),
            ObservableSpec::LExp(k) => write!(f, "Lexp:{k}"),
            ObservableSpec::LExpTilde(k) => write!(f, "Lexp_tilde:{k}"),
            ObservableSpec::Fds(k) => write!(f, "fds:{k}"),
        }
    }
}

impl From<ObservableSpec> for String {
    fn from(o: ObservableSpec) -> String {
        o.to_string()
    }
}

impl TryFrom<String> for ObservableSpec {
    type Error = LabError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for ObservableSpec {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || LabError::Unknown(format!("observable '{s}'"));
        let channel = |rest: &str| -> Result<usize> {
            match rest.trim().parse::<usize>() {
                Ok(k) if k >= 1 => Ok(k),
                _ => Err(bad()),
            }
        };
        let s = s.trim();
        if s == "Lgauss" {
            return Ok(ObservableSpec::LGauss);
        }
        if let Some(rest) = s.strip_prefix("Lexp_tilde:") {
            return Ok(ObservableSpec::LExpTilde(channel(rest)?));
        }
        if let Some(rest) = s.strip_prefix("Lexp:") {
            return Ok(ObservableSpec::LExp(channel(rest)?));
        }
        if let Some(rest) = s.strip_prefix("fds:") {
            return Ok(ObservableSpec::Fds(channel(rest)?));
        }
        if let Some(rest) = s.strip_prefix("Rk:") {
            let inner = rest.strip_prefix('(').and_then(|r| r.strip_suffix(')')).ok_or_else(bad)?;
            let powers = inner
                .split(")(")
                .map(|t| t.trim().parse::<u32>().ok().filter(|k| *k >= 1))
                .collect::<Option<Vec<u32>>>()
                .ok_or_else(bad)?;
            return Ok(ObservableSpec::Multioverlap(powers));
        }
        if let Some(rest) = s.strip_prefix("R:") {
            let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
            if parts == ["1", "*"] {
                return Ok(ObservableSpec::SignalOverlap);
            }
            let idx = parts
                .iter()
                .map(|t| t.parse::<usize>().ok().filter(|l| *l >= 1))
                .collect::<Option<Vec<usize>>>()
                .ok_or_else(bad)?;
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != idx.len() {
                return Err(LabError::Domain(format!("'{s}': replica indices must be distinct")));
            }
            return Ok(ObservableSpec::Multioverlap(vec![1; idx.len()]));
        }
        Err(bad())
    }
}

/// What an observable needs to know about one quenched point besides the posterior.
#[derive(Debug, Clone, Copy)]
pub struct SignalContext<'a> {
    pub signal: &'a [f64],
    pub channels: &'a SideChannels,
    pub side: &'a SideData,
}

impl SignalContext<'_> {
    /// `(Z, λ₀ε_N)` of the power-one Gaussian side channel, recovered from the data.
    pub fn gauss_noise(&self) -> Result<(Vec<f64>, f64)> {
        let k = self
            .channels
            .gauss
            .iter()
            .position(|g| g.power == 1)
            .ok_or_else(|| LabError::Domain("Lgauss needs a power-one Gaussian side channel".into()))?;
        let c = self.channels.gauss[k].coef;
        let kg = self.side.kg;
        let z = (0..self.signal.len()).map(|i| self.side.gauss_y[i * kg + k] - c.sqrt() * self.signal[i]).collect();
        Ok((z, c))
    }

    fn exp_channel(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.channels.exp.len() {
            return Err(LabError::Domain(format!("channel {k} outside 1..={}", self.channels.exp.len())));
        }
        Ok(k - 1)
    }

    /// Site tables of `𝓛` over the supports.
    pub fn l_gauss_table(&self, values: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let (z, c) = self.gauss_noise()?;
        if !(c > 0.0) {
            return Err(LabError::Domain("lambda0N must be > 0".into()));
        }
        let n = values.len() as f64;
        Ok(values
            .iter()
            .enumerate()
            .map(|(i, vs)| {
                vs.iter().map(|&s| (s * self.signal[i] + s * z[i] / (2.0 * c.sqrt()) - 0.5 * s * s) / n).collect()
            })
            .collect())
    }

    /// Site tables of `(𝓗'_k, Σ P(σ)ξ/(1+λP(σ*))², 𝓗''_k)` for exponential channel `k`.
    pub fn exp_tables(&self, k: usize, values: &[Vec<f64>]) -> Result<[Vec<Vec<f64>>; 3]> {
        let c = self.exp_channel(k)?;
        let ch = &self.channels.exp[c];
        let n = values.len();
        let mut first = Vec::with_capacity(n);
        let mut tilde = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        for (i, vs) in values.iter().enumerate() {
            let cnt = self.side.count[c * n + i] as f64;
            let sum = self.side.sum[c * n + i];
            let rs = ch.rate(self.signal[i]);
            let ps = ch.poly.eval(self.signal[i]);
            let mut f = Vec::with_capacity(vs.len());
            let mut t = Vec::with_capacity(vs.len());
            let mut s2 = Vec::with_capacity(vs.len());
            for &v in vs {
                let p = ch.poly.eval(v);
                let r = ch.rate(v);
                // Σ_j ξ_j/(1+λP*)² = S/(1+λP*) since S sums y = ξ/(1+λP*).
                let tl = p * sum / rs;
                t.push(tl);
                f.push(cnt * p / r - tl);
                s2.push(-cnt * p * p / (r * r) + 2.0 * p * ps * sum / (rs * rs));
            }
            first.push(f);
            tilde.push(t);
            second.push(s2);
        }
        Ok([first, tilde, second])
    }
}

/// `(⟨X⟩, ⟨X²⟩)` for an observable under an exact posterior, with `X`
/// evaluated on `replica_arity` independent replicas.
pub fn exact_moments(obs: &ObservableSpec, post: &ExactPosterior, ctx: &SignalContext) -> Result<(f64, f64)> {
    let n = post.n as f64;
    match obs {
        ObservableSpec::Multioverlap(powers) => {
            let mut first = 0.0;
            let mut second = 0.0;
            let site: Vec<Vec<f64>> = powers.iter().map(|&k| post.site_means(|_, v| v.powi(k as i32))).collect();
            for i in 0..post.n {
                first += site.iter().map(|m| m[i]).product::<f64>();
            }
            let mut distinct: Vec<u32> = powers.clone();
            distinct.sort_unstable();
            distinct.dedup();
            let pairs: Vec<(u32, Vec<f64>)> = distinct
                .iter()
                .map(|&k| (k, post.pair_means(|_, v| v.powi(k as i32), |_, v| v.powi(k as i32))))
                .collect();
            for ij in 0..post.n * post.n {
                second += powers
                    .iter()
                    .map(|k| pairs.iter().find(|(kk, _)| kk == k).map(|(_, t)| t[ij]).unwrap_or(0.0))
                    .product::<f64>();
            }
            Ok((first / n, second / (n * n)))
        }
        ObservableSpec::SignalOverlap => {
            let table: Vec<Vec<f64>> = post
                .values
                .iter()
                .enumerate()
                .map(|(i, vs)| vs.iter().map(|v| v * ctx.signal[i] / n).collect())
                .collect();
            Ok((post.additive_mean(&table), post.additive_product(&table, &table)))
        }
        ObservableSpec::LGauss => {
            let t = ctx.l_gauss_table(&post.values)?;
            Ok((post.additive_mean(&t), post.additive_product(&t, &t)))
        }
        ObservableSpec::LExp(k) | ObservableSpec::LExpTilde(k) => {
            let [first, tilde, _] = ctx.exp_tables(*k, &post.values)?;
            let t = if matches!(obs, ObservableSpec::LExp(_)) { first } else { tilde };
            let s = ctx.channels.schedules.s_n;
            let t: Vec<Vec<f64>> = t.into_iter().map(|r| r.into_iter().map(|x| x / s).collect()).collect();
            Ok((post.additive_mean(&t), post.additive_product(&t, &t)))
        }
        ObservableSpec::Fds(_) => Err(LabError::Domain("fds terms are residuals, not bracket moments".into())),
    }
}

/// Unbiased bracket moments from `L` MCMC chains: `(⟨X⟩, ⟨X²⟩, ⟨X⟩²)`.
///
/// Replicas of one evaluation come from distinct chains at the same recorded
/// time; `⟨X⟩²` pairs disjoint chain groups when `2n ≤ L`, otherwise it is the
/// plug-in square.
pub fn batch_moments(obs: &ObservableSpec, batch: &ReplicaBatch, ctx: &SignalContext) -> Result<(f64, f64, f64)> {
    let arity = obs.replica_arity();
    if batch.chains < arity {
        return Err(LabError::Domain(format!("{obs} needs L >= {arity} distinct replicas, got {}", batch.chains)));
    }
    let l = batch.chains;
    let eval = |t: usize, g: usize| -> Result<f64> {
        match obs {
            ObservableSpec::Multioverlap(powers) => {
                let reps: Vec<&[f64]> = (0..arity).map(|j| batch.state((g + j) % l, t)).collect();
                multioverlap(&reps, Some(powers))
            }
            ObservableSpec::SignalOverlap => {
                let s = batch.state(g, t);
                Ok(s.iter().zip(ctx.signal).map(|(a, b)| a * b).sum::<f64>() / s.len() as f64)
            }
            ObservableSpec::LGauss => {
                let (z, c) = ctx.gauss_noise()?;
                l_gauss(batch.state(g, t), ctx.signal, &z, c)
            }
            ObservableSpec::LExp(k) | ObservableSpec::LExpTilde(k) => {
                let s = batch.state(g, t);
                let values: Vec<Vec<f64>> = s.iter().map(|v| vec![*v]).collect();
                let [first, tilde, _] = ctx.exp_tables(*k, &values)?;
                let t = if matches!(obs, ObservableSpec::LExp(_)) { first } else { tilde };
                Ok(t.iter().map(|r| r[0]).sum::<f64>() / ctx.channels.schedules.s_n)
            }
            ObservableSpec::Fds(_) => Err(LabError::Domain("fds terms are residuals, not bracket moments".into())),
        }
    };
    let mut vals = vec![0.0; batch.samples * l];
    for t in 0..batch.samples {
        for g in 0..l {
            vals[t * l + g] = eval(t, g)?;
        }
    }
    let m = vals.len() as f64;
    let first = vals.iter().sum::<f64>() / m;
    let second = vals.iter().map(|x| x * x).sum::<f64>() / m;
    let square = if 2 * arity <= l {
        let mut acc = 0.0;
        for t in 0..batch.samples {
            for g in 0..l {
                acc += vals[t * l + g] * vals[t * l + (g + arity) % l];
            }
        }
        acc / m
    } else {
        first * first
    };
    Ok((first, second, square))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use crate::model::{ModelConfig, PlantedInstance, PriorSpec};
    use crate::perturbation::{sample_perturbation, LambdaVector, Schedules};
    use crate::posterior::{build_posterior, PosteriorMode};

    #[test]
    fn multioverlap_examples() {
        let ones = vec![vec![1.0; 5]; 4];
        assert_eq!(multioverlap(&ones, None).unwrap(), 1.0);
        let a = [1.0, -1.0, 1.0, -1.0];
        let b = [1.0, 1.0, -1.0, -1.0];
        assert_eq!(multioverlap(&[a, b], None).unwrap(), 0.0);
        let s = [1.0, -1.0];
        assert_eq!(multioverlap(&[s, s, s], None).unwrap(), 0.0);
        assert!(multioverlap::<Vec<f64>>(&[], None).is_err());
    }

    #[test]
    fn l_gauss_examples() {
        assert_abs_diff_eq!(l_gauss(&[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0], 1.0).unwrap(), 0.5);
        let v = l_gauss(&[1.0, 1.0], &[1.0, -1.0], &[0.0, 0.0], 0.3).unwrap();
        assert_abs_diff_eq!(v, -0.5 * 2.0 / 2.0);
        assert!(l_gauss(&[1.0], &[1.0], &[0.0], 0.0).is_err());
    }

    fn one_term_realization(lambda: f64, xi: f64) -> PerturbationRealization {
        let lam = LambdaVector::Binary { lambda0: 1.0, lambda_k: vec![lambda] };
        let mut r = sample_perturbation(&[1.0], &lam, Schedules::explicit(0.5, 1.0).unwrap(), 0).unwrap();
        r.pi = vec![1];
        r.sites = vec![vec![0]];
        r.xi = vec![vec![xi]];
        r
    }

    #[test]
    fn l_exp_examples() {
        let r = one_term_realization(0.5, 1.0);
        let (l, lt) = l_exp(1, &[1.0], &[1.0], &r).unwrap();
        assert_abs_diff_eq!(l, 1.0 / 1.5 - 1.0 / 2.25, epsilon = 1e-15);
        assert_abs_diff_eq!(l, 0.222_222_222_222_222, epsilon = 1e-12);
        assert_abs_diff_eq!(lt, 0.444_444_444_444_444, epsilon = 1e-12);
        assert_abs_diff_eq!(l + lt, 1.0 / 1.5, epsilon = 1e-15);
        let mut empty = r.clone();
        empty.pi = vec![0];
        empty.sites = vec![vec![]];
        empty.xi = vec![vec![]];
        assert_eq!(l_exp(1, &[1.0], &[1.0], &empty).unwrap(), (0.0, 0.0));
        assert!(l_exp(2, &[1.0], &[1.0], &r).is_err());
    }

    #[test]
    fn fds_examples() {
        let t = fds_terms(0, &[[1.0]], &[1.0], 1.5, 0.5).unwrap();
        assert_abs_diff_eq!(t.y, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.theta[0], 1.5f64.ln() - 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(t.theta[0], -0.094_535, epsilon = 1e-6);
        assert_abs_diff_eq!(t.d[0], 2.0 / 3.0, epsilon = 1e-15);
        let soft = fds_terms(0, &[[0.0]], &[1.0], 1.5, 0.5).unwrap();
        assert_eq!((soft.theta[0], soft.d[0]), (0.0, 0.0));
    }

    #[test]
    fn parse_keys() {
        let cases = [
            ("R:1", ObservableSpec::Multioverlap(vec![1])),
            ("R:1,2", ObservableSpec::Multioverlap(vec![1, 1])),
            ("R:1,2,3", ObservableSpec::Multioverlap(vec![1, 1, 1])),
            ("Rk:(2)(1)", ObservableSpec::Multioverlap(vec![2, 1])),
            ("R:1,*", ObservableSpec::SignalOverlap),
            ("Lgauss", ObservableSpec::LGauss),
            ("Lexp:1", ObservableSpec::LExp(1)),
            ("Lexp_tilde:2", ObservableSpec::LExpTilde(2)),
        ];
        for (key, spec) in cases {
            let parsed: ObservableSpec = key.parse().unwrap();
            assert_eq!(parsed, spec);
            assert_eq!(parsed.key().parse::<ObservableSpec>().unwrap(), spec);
        }
        assert_eq!(ObservableSpec::Multioverlap(vec![1, 1]).key(), "R:1,2");
        for bad in ["R:", "R:1,1", "Rk:(0)", "Lexp:0", "Q", "Rk:2"] {
            assert!(bad.parse::<ObservableSpec>().is_err(), "{bad}");
        }
        let json = serde_json::to_string(&ObservableSpec::Multioverlap(vec![2, 1])).unwrap();
        assert_eq!(json, "\"Rk:(2)(1)\"");
    }

    fn perturbed(prior: PriorSpec, n: usize, seed: u64) -> crate::posterior::PosteriorHandle {
        let inst = PlantedInstance::generate(&ModelConfig {
            prior,
            channel: crate::model::ChannelSpec::SpikedTensor { p: 2, snr: 1.2 },
            n,
            seed,
        })
        .unwrap();
        let lam = LambdaVector::Binary { lambda0: 0.8, lambda_k: vec![0.4, 0.2] };
        let r = sample_perturbation(&inst.signal, &lam, Schedules::explicit(0.6, 3.0).unwrap(), seed + 1).unwrap();
        build_posterior(&inst, &r, PosteriorMode::ExactEnum).unwrap()
    }

    #[test]
    fn exact_moments_match_nested_brackets() {
        let grid = PriorSpec::GridSoft { points: vec![-1.0, 0.0, 1.0], weights: vec![0.25, 0.5, 0.25] };
        for prior in [PriorSpec::Rademacher, grid] {
            let h = perturbed(prior, 3, 4);
            let ex = h.exact().unwrap();
            let ctx = SignalContext { signal: &h.instance.signal, channels: &h.perturbation.channels, side: &h.side };
            for powers in [vec![1], vec![1, 1], vec![2, 1], vec![1, 1, 1]] {
                let obs = ObservableSpec::Multioverlap(powers.clone());
                let (m1, m2) = exact_moments(&obs, ex, &ctx).unwrap();
                let b1 = ex.bracket(powers.len(), |r| multioverlap(r, Some(&powers)).unwrap()).unwrap();
                let b2 = ex.bracket(powers.len(), |r| multioverlap(r, Some(&powers)).unwrap().powi(2)).unwrap();
                assert_abs_diff_eq!(m1, b1, epsilon = 1e-13);
                assert_abs_diff_eq!(m2, b2, epsilon = 1e-13);
            }
            let (z, c) = ctx.gauss_noise().unwrap();
            let (m1, m2) = exact_moments(&ObservableSpec::LGauss, ex, &ctx).unwrap();
            let b1 = ex.expect(|s| l_gauss(s, &h.instance.signal, &z, c).unwrap());
            let b2 = ex.expect(|s| l_gauss(s, &h.instance.signal, &z, c).unwrap().powi(2));
            assert_abs_diff_eq!(m1, b1, epsilon = 1e-12);
            assert_abs_diff_eq!(m2, b2, epsilon = 1e-12);
            for k in 1..=2 {
                let (m1, m2) = exact_moments(&ObservableSpec::LExp(k), ex, &ctx).unwrap();
                let (t1, _) = exact_moments(&ObservableSpec::LExpTilde(k), ex, &ctx).unwrap();
                let b1 = ex.expect(|s| l_exp(k, s, &h.instance.signal, &h.perturbation).unwrap().0);
                let b2 = ex.expect(|s| l_exp(k, s, &h.instance.signal, &h.perturbation).unwrap().0.powi(2));
                let bt = ex.expect(|s| l_exp(k, s, &h.instance.signal, &h.perturbation).unwrap().1);
                assert_abs_diff_eq!(m1, b1, epsilon = 1e-12);
                assert_abs_diff_eq!(m2, b2, epsilon = 1e-12);
                assert_abs_diff_eq!(t1, bt, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn batch_moments_on_exact_draws() {
        let h = perturbed(PriorSpec::Rademacher, 3, 9);
        let ex = h.exact().unwrap();
        let ctx = SignalContext { signal: &h.instance.signal, channels: &h.perturbation.channels, side: &h.side };
        let mut rng = crate::rng::stream_rng(3, 1);
        let obs = ObservableSpec::Multioverlap(vec![1, 1]);
        let (m1, _) = exact_moments(&obs, ex, &ctx).unwrap();
        let (mut acc1, mut acc3) = (0.0, 0.0);
        let reps = 4000;
        for _ in 0..reps {
            let b = ex.replica_batch(4, &mut rng);
            let (a, _, c) = batch_moments(&obs, &b, &ctx).unwrap();
            acc1 += a;
            acc3 += c;
        }
        assert_abs_diff_eq!(acc1 / reps as f64, m1, epsilon = 0.03);
        assert_abs_diff_eq!(acc3 / reps as f64, m1 * m1, epsilon = 0.03);
        let b = ex.replica_batch(1, &mut rng);
        assert!(batch_moments(&obs, &b, &ctx).is_err());
    }

    proptest! {
        #[test]
        fn multioverlaps_lie_in_unit_interval(
            rows in prop::collection::vec(prop::collection::vec(-1.0f64..=1.0, 6), 1..5),
            seed in 1u32..4,
        ) {
            let powers: Vec<u32> = (0..rows.len()).map(|j| 1 + (seed + j as u32) % 3).collect();
            let r = multioverlap(&rows, Some(&powers)).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
        }

        #[test]
        fn repeated_indices_merge_powers(
            a in prop::collection::vec(-1.0f64..=1.0, 5),
            b in prop::collection::vec(-1.0f64..=1.0, 5),
            k in prop::collection::vec(1u32..5, 3),
        ) {
            let repeated = multioverlap(&[a.clone(), a.clone(), b.clone()], Some(&k)).unwrap();
            let merged = multioverlap(&[a, b], Some(&[k[0] + k[1], k[2]])).unwrap();
            prop_assert!((repeated - merged).abs() < 1e-12);
        }
    }
}
