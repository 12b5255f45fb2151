//! Perturbed posteriors for a fixed quenched realisation.

mod exact;
mod mcmc;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use exact::{log_sum_exp, ExactPosterior, ENUMERATION_LIMIT};
pub use mcmc::{effective_sample_size, mcmc_sample, run_chains, McmcOptions, ReplicaBatch};

use crate::error::{LabError, Result};
use crate::model::{Channel, PlantedInstance, Prior};
use crate::perturbation::{site_tables, PerturbationRealization, SideChannels, SideData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorMode {
    ExactEnum,
    Mcmc,
}

/// `θ*·σ + 𝓗_N(σ) + 𝓗^gauss(σ) + 𝓗^exp(σ)` restricted to the prior support.
///
/// The prior and side-channel terms are site-separable and stored as tables
/// over each site's support; the base channel is evaluated on whole configurations.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    pub values: Vec<Vec<f64>>,
    pub site_log: Vec<Vec<f64>>,
    pub channel: Arc<Channel>,
    pub data: Vec<f64>,
}

impl Hamiltonian {
    pub fn new(
        prior: &Prior,
        channel: Arc<Channel>,
        data: Vec<f64>,
        side_channels: &SideChannels,
        side: &SideData,
    ) -> Hamiltonian {
        let values: Vec<Vec<f64>> = (0..prior.n).map(|i| prior.site_values(i)).collect();
        let mut site_log: Vec<Vec<f64>> = (0..prior.n)
            .map(|i| prior.site_support(i).into_iter().map(|a| prior.site_log_weights[i][a]).collect())
            .collect();
        if !side_channels.is_empty() {
            let side_tab = site_tables(side_channels, side, &values);
            for (row, extra) in site_log.iter_mut().zip(side_tab) {
                for (w, e) in row.iter_mut().zip(extra) {
                    *w += e;
                }
            }
        }
        Hamiltonian { values, site_log, channel, data }
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// Log-weight of a configuration given by support indices.
    pub fn log_weight_idx(&self, idx: &[usize], sigma: &mut [f64]) -> f64 {
        let mut h = 0.0;
        for (i, &a) in idx.iter().enumerate() {
            sigma[i] = self.values[i][a];
            h += self.site_log[i][a];
        }
        h + self.channel.log_lik(sigma, &self.data)
    }

    /// Log-weight of a configuration given by values; `-∞` outside the support.
    pub fn log_weight(&self, sigma: &[f64]) -> f64 {
        let mut h = 0.0;
        for (i, &v) in sigma.iter().enumerate() {
            match self.values[i].iter().position(|x| *x == v) {
                Some(a) => h += self.site_log[i][a],
                None => return f64::NEG_INFINITY,
            }
        }
        h + self.channel.log_lik(sigma, &self.data)
    }
}

/// An evaluable posterior for one instance and one perturbation realisation.
#[derive(Debug, Clone)]
pub struct PosteriorHandle {
    pub instance: PlantedInstance,
    pub perturbation: PerturbationRealization,
    pub side: SideData,
    pub mode: PosteriorMode,
    pub hamiltonian: Hamiltonian,
    pub exact: Option<ExactPosterior>,
}

impl PerturbationRealization {
    /// The empty realisation: no side observations.
    pub fn none(n: usize) -> PerturbationRealization {
        PerturbationRealization {
            channels: SideChannels::none(),
            n,
            z: Vec::new(),
            pi: Vec::new(),
            sites: Vec::new(),
            xi: Vec::new(),
            seed: 0,
        }
    }
}

pub fn build_posterior(
    instance: &PlantedInstance,
    perturbation: &PerturbationRealization,
    mode: PosteriorMode,
) -> Result<PosteriorHandle> {
    if perturbation.n != instance.n() {
        return Err(LabError::Shape(format!(
            "perturbation has N = {}, instance has N = {}",
            perturbation.n,
            instance.n()
        )));
    }
    crate::perturbation::check_rates(&instance.signal, &perturbation.channels)?;
    let side = perturbation.side_data(&instance.signal);
    let hamiltonian = Hamiltonian::new(
        &instance.prior,
        Arc::new(instance.channel.clone()),
        instance.data.values.clone(),
        &perturbation.channels,
        &side,
    );
    let exact = match mode {
        PosteriorMode::ExactEnum => Some(ExactPosterior::new(&hamiltonian)?),
        PosteriorMode::Mcmc => None,
    };
    Ok(PosteriorHandle {
        instance: instance.clone(),
        perturbation: perturbation.clone(),
        side,
        mode,
        hamiltonian,
        exact,
    })
}

impl PosteriorHandle {
    pub fn exact(&self) -> Result<&ExactPosterior> {
        self.exact.as_ref().ok_or_else(|| LabError::Mode("operation needs exact_enum mode".into()))
    }

    pub fn log_partition(&self) -> Result<f64> {
        Ok(self.exact()?.log_partition)
    }

    /// `⟨A(σ¹,…,σᴸ)⟩` by nested enumeration.
    pub fn bracket(&self, l: usize, f: impl Fn(&[&[f64]]) -> f64) -> Result<f64> {
        self.exact()?.bracket(l, f)
    }

    pub fn sample(&self, l: usize, sweeps: usize, burn_in: usize, thin: usize, seed: u64) -> Result<ReplicaBatch> {
        mcmc_sample(self, l, sweeps, burn_in, thin, seed)
    }
}
