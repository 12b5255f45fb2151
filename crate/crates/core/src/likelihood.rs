//! Generative densities of the data given σ*, written directly from the
//! sampling laws. The posterior code never calls into this module, so agreement
//! between the two is a real check of the Hamiltonians.

use statrs::distribution::{Continuous, Discrete, Gamma, Normal, Poisson};

use crate::model::{sign, Channel, ChannelFamily, Prior};
use crate::perturbation::{SideChannels, SideData};

/// `ln P*(σ*)` with normalised site marginals.
pub fn log_prior(prior: &Prior, sigma: &[f64]) -> f64 {
    sigma
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let probs = prior.site_probs(i);
            match prior.points.iter().position(|p| *p == v) {
                Some(a) if probs[a] > 0.0 => probs[a].ln(),
                _ => f64::NEG_INFINITY,
            }
        })
        .sum()
}

fn normal_logpdf(mean: f64, y: f64) -> f64 {
    Normal::new(mean, 1.0).expect("unit variance").ln_pdf(y)
}

/// `ln p(Y | σ*)` for the base channel.
pub fn log_density_base(channel: &Channel, signal: &[f64], data: &[f64]) -> f64 {
    match channel.family() {
        ChannelFamily::Null => 0.0,
        ChannelFamily::Gaussian => {
            data.iter().enumerate().map(|(j, &y)| normal_logpdf(channel.coordinate_mean(j, signal), y)).sum()
        }
        ChannelFamily::Sign => {
            let ok = data.iter().enumerate().all(|(mu, &y)| y == sign(channel.dot(mu, signal)));
            if ok {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
    }
}

/// `ln p(side data | σ*)`: Gaussian observations, Poisson site counts and
/// Gamma-distributed sums of the exponential observations.
pub fn log_density_side(channels: &SideChannels, signal: &[f64], side: &SideData) -> f64 {
    let n = signal.len();
    let mut total = 0.0;
    for i in 0..n {
        for (k, g) in channels.gauss.iter().enumerate() {
            let mean = g.coef.sqrt() * signal[i].powi(g.power as i32);
            total += normal_logpdf(mean, side.gauss_y[i * side.kg + k]);
        }
    }
    if channels.exp.is_empty() {
        return total;
    }
    let counts = Poisson::new(channels.site_rate(n)).expect("positive rate");
    for (c, ch) in channels.exp.iter().enumerate() {
        for i in 0..n {
            let cnt = side.count[c * n + i];
            total += counts.ln_pmf(cnt as u64);
            if cnt > 0 {
                let rate = ch.rate(signal[i]);
                total += Gamma::new(cnt as f64, rate).expect("positive rate").ln_pdf(side.sum[c * n + i]);
            }
        }
    }
    total
}

pub fn log_density(channel: &Channel, channels: &SideChannels, signal: &[f64], data: &[f64], side: &SideData) -> f64 {
    let b = log_density_base(channel, signal, data);
    if b == f64::NEG_INFINITY {
        return b;
    }
    b + log_density_side(channels, signal, side)
}

/// Reference density of a standard normal coordinate.
pub fn log_std_normal(y: f64) -> f64 {
    normal_logpdf(0.0, y)
}

/// Reference density `Gamma(n, 1)` used for summed exponential observations.
pub fn log_gamma_ref(count: u32, s: f64) -> f64 {
    Gamma::new(count as f64, 1.0).expect("positive shape").ln_pdf(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelSpec, PriorSpec};
    use crate::perturbation::{LambdaVector, MultiIndexSet, Schedules};
    use approx::assert_abs_diff_eq;

    #[test]
    fn prior_log_weights() {
        let p = PriorSpec::GridSoft { points: vec![-1.0, 0.0, 1.0], weights: vec![0.25, 0.5, 0.25] }
            .materialize(2, 0)
            .unwrap();
        assert_abs_diff_eq!(log_prior(&p, &[0.0, 1.0]), (0.125f64).ln(), epsilon = 1e-14);
        assert_eq!(log_prior(&p, &[0.5, 1.0]), f64::NEG_INFINITY);
    }

    #[test]
    fn side_density_single_observation() {
        let ch = SideChannels::build(
            &LambdaVector::Binary { lambda0: 1.0, lambda_k: vec![0.5] },
            Schedules::explicit(0.25, 1.0).unwrap(),
            true,
            &MultiIndexSet::default(),
        )
        .unwrap();
        let side = SideData { n: 1, kg: 1, gauss_y: vec![0.3], kc: 1, count: vec![1], sum: vec![0.8] };
        let got = log_density_side(&ch, &[1.0], &side);
        let gauss = -0.5 * (0.3f64 - 0.5).powi(2) - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let pois = -1.0; // Poisson(1) at 1
        let expo = 1.5f64.ln() - 1.5 * 0.8;
        assert_abs_diff_eq!(got, gauss + pois + expo, epsilon = 1e-12);
    }

    #[test]
    fn sign_density_is_indicator() {
        let mut ch = ChannelSpec::PerceptronSign { m: 1, design_seed: 0 }.materialize(2).unwrap();
        ch.design = vec![1.0, 0.5];
        assert_eq!(log_density_base(&ch, &[1.0, -1.0], &[1.0]), 0.0);
        assert_eq!(log_density_base(&ch, &[-1.0, 1.0], &[1.0]), f64::NEG_INFINITY);
    }
}
