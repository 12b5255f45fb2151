use std::sync::OnceLock;

use rand::Rng;

use super::{Hamiltonian, ReplicaBatch};
use crate::error::{LabError, Result};
use crate::rng::LabRng;

pub const ENUMERATION_LIMIT: usize = 20_000_000;
const BRACKET_LIMIT: f64 = 5e7;

/// Gibbs weights over every configuration of the product support.
///
/// Configurations are numbered in mixed radix with site 0 varying fastest;
/// digit `a` at site `i` stands for `values[i][a]`.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    pub n: usize,
    pub radices: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
    pub log_partition: f64,
    pub probs: Vec<f64>,
    site_marginals: Vec<Vec<f64>>,
    pairs: OnceLock<Vec<f64>>,
    stride: usize,
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl ExactPosterior {
    pub fn new(ham: &Hamiltonian) -> Result<ExactPosterior> {
        let n = ham.n();
        let radices: Vec<usize> = ham.values.iter().map(|v| v.len()).collect();
        let count: f64 = radices.iter().map(|&r| r as f64).product();
        if count > ENUMERATION_LIMIT as f64 {
            return Err(LabError::EnumerationLimit { count, limit: ENUMERATION_LIMIT });
        }
        let total = count as usize;
        let mut log_weights = Vec::with_capacity(total);
        let mut idx = vec![0usize; n];
        let mut sigma = vec![0.0; n];
        for _ in 0..total {
            log_weights.push(ham.log_weight_idx(&idx, &mut sigma));
            increment(&mut idx, &radices);
        }
        if log_weights.iter().any(|w| w.is_nan()) {
            return Err(LabError::NotFinite("log-weights"));
        }
        let log_partition = log_sum_exp(&log_weights);
        if !log_partition.is_finite() {
            return Err(LabError::NotFinite("log-partition"));
        }
        let probs: Vec<f64> = log_weights.iter().map(|w| (w - log_partition).exp()).collect();
        let stride = radices.iter().copied().max().unwrap_or(1);
        let mut site_marginals: Vec<Vec<f64>> = radices.iter().map(|&r| vec![0.0; r]).collect();
        let mut idx = vec![0usize; n];
        for &p in &probs {
            for (i, &a) in idx.iter().enumerate() {
                site_marginals[i][a] += p;
            }
            increment(&mut idx, &radices);
        }
        Ok(ExactPosterior {
            n,
            radices,
            values: ham.values.clone(),
            log_weights,
            log_partition,
            probs,
            site_marginals,
            pairs: OnceLock::new(),
            stride,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn digits(&self, mut c: usize) -> Vec<usize> {
        self.radices
            .iter()
            .map(|&r| {
                let d = c % r;
                c /= r;
                d
            })
            .collect()
    }

    pub fn config(&self, c: usize) -> Vec<f64> {
        self.digits(c).iter().enumerate().map(|(i, &a)| self.values[i][a]).collect()
    }

    /// Index of a configuration given by values, if it lies in the support.
    pub fn index_of(&self, sigma: &[f64]) -> Option<usize> {
        let mut c = 0;
        let mut mult = 1;
        for (i, &v) in sigma.iter().enumerate() {
            let a = self.values[i].iter().position(|x| *x == v)?;
            c += a * mult;
            mult *= self.radices[i];
        }
        Some(c)
    }

    /// Calls `f(index, σ)` on every configuration in order.
    pub fn for_each_config(&self, mut f: impl FnMut(usize, &[f64])) {
        let mut idx = vec![0usize; self.n];
        let mut sigma: Vec<f64> = (0..self.n).map(|i| self.values[i][0]).collect();
        for c in 0..self.len() {
            f(c, &sigma);
            for i in 0..self.n {
                idx[i] += 1;
                if idx[i] < self.radices[i] {
                    sigma[i] = self.values[i][idx[i]];
                    break;
                }
                idx[i] = 0;
                sigma[i] = self.values[i][0];
            }
        }
    }

    pub fn expect(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let mut acc = 0.0;
        self.for_each_config(|c, s| acc += self.probs[c] * f(s));
        acc
    }

    /// `P(σᵢ = values[i][a])`.
    pub fn site_marginals(&self) -> &[Vec<f64>] {
        &self.site_marginals
    }

    /// `P(σᵢ = values[i][a], σⱼ = values[j][b])`, with `P_ii(a, b) = δ_ab P_i(a)`.
    pub fn pair(&self, i: usize, j: usize, a: usize, b: usize) -> f64 {
        let s = self.stride;
        self.pair_table()[((i * self.n + j) * s + a) * s + b]
    }

    fn pair_table(&self) -> &[f64] {
        self.pairs.get_or_init(|| {
            let n = self.n;
            let s = self.stride;
            let mut t = vec![0.0; n * n * s * s];
            let mut idx = vec![0usize; n];
            for &p in &self.probs {
                if p > 0.0 {
                    for i in 0..n {
                        let base = i * n * s * s + idx[i] * s;
                        for j in 0..n {
                            t[base + j * s * s + idx[j]] += p;
                        }
                    }
                }
                increment(&mut idx, &self.radices);
            }
            t
        })
    }

    /// `⟨g(σᵢ)⟩` for every site, with `g` given per site over the support.
    pub fn site_means(&self, g: impl Fn(usize, f64) -> f64) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.values[i].iter().zip(&self.site_marginals[i]).map(|(&v, &p)| p * g(i, v)).sum())
            .collect()
    }

    /// `⟨g(σᵢ) h(σⱼ)⟩` for all pairs, row-major `n×n`.
    pub fn pair_means(&self, g: impl Fn(usize, f64) -> f64, h: impl Fn(usize, f64) -> f64) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for (a, &va) in self.values[i].iter().enumerate() {
                    let ga = g(i, va);
                    if ga == 0.0 {
                        continue;
                    }
                    for (b, &vb) in self.values[j].iter().enumerate() {
                        acc += self.pair(i, j, a, b) * ga * h(j, vb);
                    }
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    /// For an additive observable `A(σ) = Σᵢ aᵢ(σᵢ)`: `⟨A⟩`.
    pub fn additive_mean(&self, a: &[Vec<f64>]) -> f64 {
        (0..self.n).map(|i| a[i].iter().zip(&self.site_marginals[i]).map(|(x, p)| x * p).sum::<f64>()).sum()
    }

    /// `⟨A B⟩` for additive observables given as per-site tables over the support.
    pub fn additive_product(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                for (ai, &xa) in a[i].iter().enumerate() {
                    if xa == 0.0 {
                        continue;
                    }
                    for (bj, &xb) in b[j].iter().enumerate() {
                        acc += self.pair(i, j, ai, bj) * xa * xb;
                    }
                }
            }
        }
        acc
    }

    /// Nested enumeration of `⟨f(σ¹,…,σᴸ)⟩` under the product measure.
    pub fn bracket(&self, l: usize, f: impl Fn(&[&[f64]]) -> f64) -> Result<f64> {
        if (self.len() as f64).powi(l as i32) > BRACKET_LIMIT {
            return Err(LabError::EnumerationLimit {
                count: (self.len() as f64).powi(l as i32),
                limit: BRACKET_LIMIT as usize,
            });
        }
        let configs: Vec<Vec<f64>> = (0..self.len()).map(|c| self.config(c)).collect();
        let support: Vec<usize> = (0..self.len()).filter(|&c| self.probs[c] > 0.0).collect();
        let mut choice = vec![0usize; l];
        let mut acc = 0.0;
        if l == 0 {
            let v = f(&[]);
            return if v.is_nan() { Err(LabError::NotFinite("observable")) } else { Ok(v) };
        }
        loop {
            let reps: Vec<&[f64]> = choice.iter().map(|&k| configs[support[k]].as_slice()).collect();
            let w: f64 = choice.iter().map(|&k| self.probs[support[k]]).product();
            let v = f(&reps);
            if v.is_nan() {
                return Err(LabError::NotFinite("observable"));
            }
            acc += w * v;
            let mut d = 0;
            loop {
                if d == l {
                    return Ok(acc);
                }
                choice[d] += 1;
                if choice[d] < support.len() {
                    break;
                }
                choice[d] = 0;
                d += 1;
            }
        }
    }

    /// `l` independent exact draws.
    pub fn sample(&self, l: usize, rng: &mut LabRng) -> Vec<Vec<f64>> {
        let mut cdf = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for &p in &self.probs {
            acc += p;
            cdf.push(acc);
        }
        (0..l)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let c = cdf.partition_point(|x| *x <= u).min(self.len() - 1);
                self.config(c)
            })
            .collect()
    }

    /// Exact draws packaged as a batch of `l` single-sample replicas.
    pub fn replica_batch(&self, l: usize, rng: &mut LabRng) -> ReplicaBatch {
        let draws = self.sample(l, rng);
        ReplicaBatch::from_exact(self.n, draws)
    }
}

fn increment(idx: &mut [usize], radices: &[usize]) {
    for (d, r) in idx.iter_mut().zip(radices) {
        *d += 1;
        if *d < *r {
            return;
        }
        *d = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelSpec, ModelConfig, PlantedInstance, PriorSpec};
    use crate::perturbation::{sample_perturbation, LambdaVector, Schedules};
    use crate::posterior::{build_posterior, PosteriorMode};
    use proptest::prelude::*;

    fn perturbed(n: usize, seed: u64, prior: PriorSpec) -> crate::posterior::PosteriorHandle {
        let inst = PlantedInstance::generate(&ModelConfig {
            prior,
            channel: ChannelSpec::SpikedTensor { p: 2, snr: 1.0 },
            n,
            seed,
        })
        .unwrap();
        let lam = LambdaVector::Binary { lambda0: 0.8, lambda_k: vec![0.4, 0.2] };
        let r = sample_perturbation(&inst.signal, &lam, Schedules::explicit(0.5, 3.0).unwrap(), seed).unwrap();
        build_posterior(&inst, &r, PosteriorMode::ExactEnum).unwrap()
    }

    #[test]
    fn marginals_match_bracket() {
        let h = perturbed(4, 3, PriorSpec::Rademacher);
        let ex = h.exact().unwrap();
        let m = ex.site_means(|_, v| v);
        for i in 0..4 {
            let b = ex.bracket(1, |s| s[0][i]).unwrap();
            assert!((b - m[i]).abs() < 1e-13);
        }
        let pm = ex.pair_means(|_, v| v, |_, v| v);
        let b = ex.bracket(1, |s| s[0][1] * s[0][3]).unwrap();
        assert!((pm[4 + 3] - b).abs() < 1e-13);
        assert!((pm[5] - 1.0).abs() < 1e-13);
    }

    #[test]
    fn index_roundtrip() {
        let h = perturbed(3, 1, PriorSpec::GridSoft { points: vec![-1.0, 0.0, 1.0], weights: vec![0.25, 0.5, 0.25] });
        let ex = h.exact().unwrap();
        for c in 0..ex.len() {
            assert_eq!(ex.index_of(&ex.config(c)), Some(c));
        }
        let mut seen = 0;
        ex.for_each_config(|c, s| {
            assert_eq!(s, ex.config(c).as_slice());
            seen += 1;
        });
        assert_eq!(seen, 27);
    }

    proptest! {
        #[test]
        fn weights_normalise(seed in 0u64..1000) {
            let h = perturbed(5, seed, PriorSpec::Rademacher);
            let total: f64 = h.exact().unwrap().probs.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn log_partition_is_permutation_invariant(seed in 0u64..300, shift in 1usize..4) {
            // relabel sites in σ*, the data tuples and the side observations
            let h = perturbed(4, seed, PriorSpec::Rademacher);
            let n = 4;
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let mut ham = h.hamiltonian.clone();
            let mut ch = (*ham.channel).clone();
            let old = ch.clone();
            ham.values = perm.iter().map(|&p| h.hamiltonian.values[p].clone()).collect();
            ham.site_log = perm.iter().map(|&p| h.hamiltonian.site_log[p].clone()).collect();
            let inv: Vec<usize> = (0..n).map(|i| perm.iter().position(|&p| p == i).unwrap()).collect();
            let mut data = vec![0.0; ham.data.len()];
            for (t, tuple) in old.tuples.iter().enumerate() {
                let mut mapped: Vec<usize> = tuple.iter().map(|&i| inv[i]).collect();
                mapped.sort();
                let pos = old.tuples.iter().position(|x| *x == mapped).unwrap();
                data[pos] = ham.data[t];
            }
            ch.tuples = old.tuples.clone();
            ham.channel = std::sync::Arc::new(ch);
            ham.data = data;
            let a = h.log_partition().unwrap();
            let b = ExactPosterior::new(&ham).unwrap().log_partition;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
