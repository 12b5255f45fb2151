//! Priors, output channels and planted instances.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{ensure_finite, LabError, Result};
use crate::rng::{derive_seed, stream_rng, streams, LabRng};

/// Log-likelihood assigned to label vectors that the sign channel cannot produce.
pub const SIGN_SENTINEL: f64 = -1e30;

/// A per-site external field. JSON numbers, or the strings `"inf"` / `"-inf"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct FieldValue(pub f64);

impl<'de> Deserialize<'de> for FieldValue {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(v) => Ok(FieldValue(v)),
            Raw::Text(s) => match s.trim() {
                "inf" | "+inf" | "infinity" => Ok(FieldValue(f64::INFINITY)),
                "-inf" | "-infinity" => Ok(FieldValue(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!("invalid field value `{other}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    Rademacher,
    /// Ising prior with external fields. Explicit `fields` win; otherwise every
    /// site gets `field` plus `field_std` times a standard normal drawn from the seed.
    FieldRademacher {
        #[serde(default)]
        fields: Vec<FieldValue>,
        #[serde(default)]
        field: Option<FieldValue>,
        #[serde(default)]
        field_std: f64,
    },
    GridSoft {
        points: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Rademacher,
    FieldRademacher,
    GridSoft,
}

/// A materialised product prior on `n` sites.
///
/// `site_log_weights[i][a]` is the weight of `points[a]` at site `i` in the
/// Gibbs-measure convention: `θ*ᵢ·v` for Ising priors (counting base measure)
/// and `ln w` for grid priors. `-∞` marks a point outside the site's support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub kind: PriorKind,
    pub n: usize,
    pub points: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub site_log_weights: Vec<Vec<f64>>,
}

impl PriorSpec {
    pub fn kind(&self) -> PriorKind {
        match self {
            PriorSpec::Rademacher => PriorKind::Rademacher,
            PriorSpec::FieldRademacher { .. } => PriorKind::FieldRademacher,
            PriorSpec::GridSoft { .. } => PriorKind::GridSoft,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PriorSpec::Rademacher => Ok(()),
            PriorSpec::FieldRademacher { fields, field, field_std } => {
                if fields.iter().any(|f| f.0.is_nan()) || field.is_some_and(|f| f.0.is_nan()) {
                    return Err(LabError::InvalidPrior("NaN field".into()));
                }
                if !(field_std.is_finite() && *field_std >= 0.0) {
                    return Err(LabError::InvalidPrior("field_std must be finite and >= 0".into()));
                }
                Ok(())
            }
            PriorSpec::GridSoft { points, weights } => {
                if points.is_empty() {
                    return Err(LabError::InvalidPrior("empty support".into()));
                }
                if points.len() != weights.len() {
                    return Err(LabError::InvalidPrior(format!(
                        "{} points but {} weights",
                        points.len(),
                        weights.len()
                    )));
                }
                if points.iter().any(|p| !(-1.0..=1.0).contains(p)) {
                    return Err(LabError::InvalidPrior("grid points must lie in [-1, 1]".into()));
                }
                if points.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(LabError::InvalidPrior("grid points must be strictly increasing".into()));
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err(LabError::InvalidPrior("negative or non-finite weight".into()));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(LabError::InvalidPrior(format!("weights sum to {total}, not 1")));
                }
                if weights.iter().all(|w| *w == 0.0) {
                    return Err(LabError::InvalidPrior("empty support".into()));
                }
                Ok(())
            }
        }
    }

    /// Materialises the prior on `n` sites. Random fields are drawn from `seed`.
    pub fn materialize(&self, n: usize, seed: u64) -> Result<Prior> {
        self.validate()?;
        if n == 0 {
            return Err(LabError::InvalidPrior("N must be positive".into()));
        }
        match self {
            PriorSpec::Rademacher => Ok(Prior::ising(PriorKind::Rademacher, vec![0.0; n])),
            PriorSpec::FieldRademacher { fields, field, field_std } => {
                let theta = if !fields.is_empty() {
                    if fields.len() != n {
                        return Err(LabError::InvalidPrior(format!("{} fields for N = {n}", fields.len())));
                    }
                    fields.iter().map(|f| f.0).collect()
                } else {
                    let base = field.map_or(0.0, |f| f.0);
                    let mut rng = stream_rng(seed, streams::FIELDS);
                    (0..n)
                        .map(|_| {
                            let g: f64 = rng.sample(StandardNormal);
                            if *field_std > 0.0 {
                                base + field_std * g
                            } else {
                                base
                            }
                        })
                        .collect()
                };
                Ok(Prior::ising(PriorKind::FieldRademacher, theta))
            }
            PriorSpec::GridSoft { points, weights } => {
                let logw: Vec<f64> =
                    weights.iter().map(|&w| if w > 0.0 { w.ln() } else { f64::NEG_INFINITY }).collect();
                Ok(Prior {
                    kind: PriorKind::GridSoft,
                    n,
                    points: points.clone(),
                    theta_star: vec![0.0; n],
                    site_log_weights: vec![logw; n],
                })
            }
        }
    }
}

impl Prior {
    fn ising(kind: PriorKind, theta: Vec<f64>) -> Prior {
        let site_log_weights = theta
            .iter()
            .map(|&t| {
                if t == f64::INFINITY {
                    vec![f64::NEG_INFINITY, 0.0]
                } else if t == f64::NEG_INFINITY {
                    vec![0.0, f64::NEG_INFINITY]
                } else {
                    vec![-t, t]
                }
            })
            .collect();
        Prior { kind, n: theta.len(), points: vec![-1.0, 1.0], theta_star: theta, site_log_weights }
    }

    pub fn is_binary(&self) -> bool {
        self.kind != PriorKind::GridSoft
    }

    /// Indices into `points` with positive prior mass at site `i`.
    pub fn site_support(&self, i: usize) -> Vec<usize> {
        self.site_log_weights[i].iter().enumerate().filter(|(_, w)| w.is_finite()).map(|(a, _)| a).collect()
    }

    pub fn site_values(&self, i: usize) -> Vec<f64> {
        self.site_support(i).into_iter().map(|a| self.points[a]).collect()
    }

    /// Normalised probabilities over `points` at site `i`.
    pub fn site_probs(&self, i: usize) -> Vec<f64> {
        let w = &self.site_log_weights[i];
        let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = w.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    /// Total number of configurations of the product support.
    pub fn configuration_count(&self) -> f64 {
        (0..self.n).map(|i| self.site_support(i).len() as f64).product()
    }

    pub fn validate_signal(&self, sigma: &[f64]) -> Result<()> {
        if sigma.len() != self.n {
            return Err(LabError::Shape(format!("signal length {} != N = {}", sigma.len(), self.n)));
        }
        for (i, &s) in sigma.iter().enumerate() {
            if !self.site_values(i).contains(&s) {
                return Err(LabError::Domain(format!("site {i} value {s} outside prior support")));
            }
        }
        Ok(())
    }
}

/// Draws σ* site by site from the prior marginals.
pub fn sample_signal(prior: &Prior, seed: u64) -> Result<Vec<f64>> {
    let mut rng = stream_rng(seed, streams::SIGNAL);
    sample_signal_with(prior, &mut rng)
}

pub fn sample_signal_with(prior: &Prior, rng: &mut LabRng) -> Result<Vec<f64>> {
    if prior.points.is_empty() {
        return Err(LabError::InvalidPrior("empty support".into()));
    }
    (0..prior.n)
        .map(|i| {
            let p = prior.site_probs(i);
            if p.iter().any(|x| !(*x >= 0.0)) {
                return Err(LabError::InvalidPrior(format!("negative weight at site {i}")));
            }
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut last = 0;
            for (a, &pa) in p.iter().enumerate() {
                if pa > 0.0 {
                    last = a;
                    acc += pa;
                    if u < acc {
                        return Ok(prior.points[a]);
                    }
                }
            }
            Ok(prior.points[last])
        })
        .collect()
}

fn default_snr() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSpec {
    SpikedTensor {
        p: usize,
        #[serde(default = "default_snr")]
        snr: f64,
    },
    GlmGaussian {
        #[serde(rename = "M", alias = "m")]
        m: usize,
        #[serde(default = "default_snr")]
        snr: f64,
        #[serde(default)]
        design_seed: u64,
    },
    PerceptronSign {
        #[serde(rename = "M", alias = "m")]
        m: usize,
        #[serde(default)]
        design_seed: u64,
    },
    Null,
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ChannelSpec::SpikedTensor { p, snr } => {
                if *p < 2 {
                    return Err(LabError::InvalidChannel(format!("tensor order p = {p} < 2")));
                }
                if !(snr.is_finite() && *snr >= 0.0) {
                    return Err(LabError::InvalidChannel("snr must be finite and >= 0".into()));
                }
            }
            ChannelSpec::GlmGaussian { snr, .. } => {
                if !(snr.is_finite() && *snr >= 0.0) {
                    return Err(LabError::InvalidChannel("snr must be finite and >= 0".into()));
                }
            }
            ChannelSpec::PerceptronSign { .. } | ChannelSpec::Null => {}
        }
        Ok(())
    }

    /// Materialises the channel for `n` spins: index tuples or a design matrix.
    pub fn materialize(&self, n: usize) -> Result<Channel> {
        self.validate()?;
        let mut ch = Channel { spec: self.clone(), n, tuples: Vec::new(), scale: 0.0, design: Vec::new() };
        match self {
            ChannelSpec::SpikedTensor { p, snr } => {
                ch.tuples = ordered_tuples(n, *p);
                ch.scale = snr * (n as f64).powf((1.0 - *p as f64) / 2.0);
            }
            ChannelSpec::GlmGaussian { m, snr, design_seed } => {
                ch.design = gaussian_design(*m, n, *design_seed);
                ch.scale = *snr;
            }
            ChannelSpec::PerceptronSign { m, design_seed } => {
                ch.design = gaussian_design(*m, n, *design_seed);
                ch.scale = 1.0;
            }
            ChannelSpec::Null => {}
        }
        Ok(ch)
    }
}

fn gaussian_design(m: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, streams::DESIGN);
    let s = (n as f64).sqrt().recip();
    (0..m * n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// All tuples `i₁ ≤ … ≤ i_p` in lexicographic order.
pub fn ordered_tuples(n: usize, p: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; p];
    if n == 0 {
        return out;
    }
    loop {
        out.push(cur.clone());
        let mut j = p;
        while j > 0 && cur[j - 1] == n - 1 {
            j -= 1;
        }
        if j == 0 {
            return out;
        }
        cur[j - 1] += 1;
        let v = cur[j - 1];
        for c in cur.iter_mut().skip(j) {
            *c = v;
        }
    }
}

/// Sign with the convention `sign(0) = +1`.
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// A materialised output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub spec: ChannelSpec,
    pub n: usize,
    /// Index tuples for the spiked tensor, in data order.
    pub tuples: Vec<Vec<usize>>,
    /// `snr·N^{(1-p)/2}` for tensors, `snr` for the Gaussian GLM.
    pub scale: f64,
    /// Row-major `M×N` design with entries N(0, 1/N).
    pub design: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelFamily {
    Gaussian,
    Sign,
    Null,
}

impl Channel {
    pub fn family(&self) -> ChannelFamily {
        match self.spec {
            ChannelSpec::SpikedTensor { .. } | ChannelSpec::GlmGaussian { .. } => ChannelFamily::Gaussian,
            ChannelSpec::PerceptronSign { .. } => ChannelFamily::Sign,
            ChannelSpec::Null => ChannelFamily::Null,
        }
    }

    pub fn rows(&self) -> usize {
        match self.spec {
            ChannelSpec::GlmGaussian { m, .. } | ChannelSpec::PerceptronSign { m, .. } => m,
            _ => 0,
        }
    }

    pub fn data_len(&self) -> usize {
        match self.spec {
            ChannelSpec::SpikedTensor { .. } => self.tuples.len(),
            ChannelSpec::GlmGaussian { m, .. } | ChannelSpec::PerceptronSign { m, .. } => m,
            ChannelSpec::Null => 0,
        }
    }

    pub fn dot(&self, mu: usize, sigma: &[f64]) -> f64 {
        let row = &self.design[mu * self.n..(mu + 1) * self.n];
        row.iter().zip(sigma).map(|(a, b)| a * b).sum()
    }

    /// Mean of data coordinate `j` given spins `sigma` (Gaussian channels),
    /// or the noiseless label (sign channel).
    pub fn coordinate_mean(&self, j: usize, sigma: &[f64]) -> f64 {
        match self.spec {
            ChannelSpec::SpikedTensor { .. } => self.scale * self.tuples[j].iter().map(|&i| sigma[i]).product::<f64>(),
            ChannelSpec::GlmGaussian { .. } => self.scale * self.dot(j, sigma),
            ChannelSpec::PerceptronSign { .. } => sign(self.dot(j, sigma)),
            ChannelSpec::Null => 0.0,
        }
    }

    pub fn means(&self, sigma: &[f64]) -> Vec<f64> {
        (0..self.data_len()).map(|j| self.coordinate_mean(j, sigma)).collect()
    }

    /// Log-likelihood without input checks. Gaussian channels use the
    /// constant `-½Σ(Y - mean)²`; the sign channel is 0 or [`SIGN_SENTINEL`].
    pub fn log_lik(&self, sigma: &[f64], data: &[f64]) -> f64 {
        match self.family() {
            ChannelFamily::Null => 0.0,
            ChannelFamily::Gaussian => {
                -0.5 * data
                    .iter()
                    .enumerate()
                    .map(|(j, y)| {
                        let r = y - self.coordinate_mean(j, sigma);
                        r * r
                    })
                    .sum::<f64>()
            }
            ChannelFamily::Sign => {
                let ok = data.iter().enumerate().all(|(mu, &y)| y == sign(self.dot(mu, sigma)));
                if ok {
                    0.0
                } else {
                    SIGN_SENTINEL
                }
            }
        }
    }

    /// True when coordinate `j` has the same law for every configuration in
    /// the product of the per-site supports, so it carries no information.
    pub fn coordinate_is_inert(&self, j: usize, supports: &[Vec<f64>]) -> bool {
        match self.spec {
            ChannelSpec::SpikedTensor { .. } => {
                let mut distinct: Vec<(usize, u32)> = Vec::new();
                for &i in &self.tuples[j] {
                    match distinct.iter_mut().find(|(s, _)| *s == i) {
                        Some(e) => e.1 += 1,
                        None => distinct.push((i, 1)),
                    }
                }
                let mut first: Option<f64> = None;
                let mut idx = vec![0usize; distinct.len()];
                loop {
                    let v: f64 = distinct
                        .iter()
                        .zip(&idx)
                        .map(|((i, mult), &a)| supports[*i][a].powi(*mult as i32))
                        .product::<f64>()
                        * self.scale;
                    match first {
                        None => first = Some(v),
                        Some(f) if f != v => return false,
                        _ => {}
                    }
                    let mut d = 0;
                    loop {
                        if d == idx.len() {
                            return true;
                        }
                        idx[d] += 1;
                        if idx[d] < supports[distinct[d].0].len() {
                            break;
                        }
                        idx[d] = 0;
                        d += 1;
                    }
                }
            }
            ChannelSpec::GlmGaussian { .. } => (0..self.n).all(|i| {
                let a = self.design[j * self.n + i] * self.scale;
                let s = &supports[i];
                let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                a == 0.0 || lo == hi
            }),
            ChannelSpec::PerceptronSign { .. } | ChannelSpec::Null => false,
        }
    }
}

/// Observations of one base channel, flattened, with their shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelData {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
    /// `ordered_tuples`, `observations` or `empty`.
    pub layout: String,
}

impl ChannelData {
    pub fn for_channel(channel: &Channel, values: Vec<f64>) -> ChannelData {
        let (shape, layout) = match channel.spec {
            ChannelSpec::SpikedTensor { p, .. } => (vec![channel.tuples.len(), p], "ordered_tuples"),
            ChannelSpec::GlmGaussian { m, .. } | ChannelSpec::PerceptronSign { m, .. } => (vec![m], "observations"),
            ChannelSpec::Null => (vec![0], "empty"),
        };
        ChannelData { values, shape, layout: layout.to_string() }
    }
}

/// Samples `Y | σ*`. With `noise = false` returns the channel mean (debug mode).
pub fn generate_data(signal: &[f64], channel: &Channel, seed: u64) -> Result<ChannelData> {
    let mut rng = stream_rng(seed, streams::BASE_NOISE);
    generate_data_with(signal, channel, &mut rng, true)
}

pub fn generate_data_with(signal: &[f64], channel: &Channel, rng: &mut LabRng, noise: bool) -> Result<ChannelData> {
    if signal.len() != channel.n {
        return Err(LabError::Shape(format!("signal length {} != channel N = {}", signal.len(), channel.n)));
    }
    ensure_finite(signal, "signal")?;
    let mut values = channel.means(signal);
    if noise && channel.family() == ChannelFamily::Gaussian {
        for v in values.iter_mut() {
            *v += rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(ChannelData::for_channel(channel, values))
}

/// `ln P_out(Y | σ)` up to the fixed constant documented on [`Channel::log_lik`].
pub fn base_log_likelihood(sigma: &[f64], data: &ChannelData, channel: &Channel) -> Result<f64> {
    if sigma.len() != channel.n {
        return Err(LabError::Shape(format!("sigma length {} != N = {}", sigma.len(), channel.n)));
    }
    if data.values.len() != channel.data_len() {
        return Err(LabError::Shape(format!("data length {} != expected {}", data.values.len(), channel.data_len())));
    }
    ensure_finite(sigma, "sigma")?;
    ensure_finite(&data.values, "data")?;
    Ok(channel.log_lik(sigma, &data.values))
}

/// `{prior, channel, N, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub prior: PriorSpec,
    pub channel: ChannelSpec,
    #[serde(rename = "N", alias = "n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(LabError::InvalidPrior("N must be positive".into()));
        }
        self.prior.validate()?;
        self.channel.validate()
    }

    pub fn with_n(&self, n: usize) -> ModelConfig {
        ModelConfig { n, ..self.clone() }
    }

    /// Prior and channel, with fields drawn from the model seed.
    pub fn materialize(&self) -> Result<(Prior, Channel)> {
        self.validate()?;
        let prior = self.prior.materialize(self.n, derive_seed(self.seed, streams::FIELDS))?;
        let channel = self.channel.materialize(self.n)?;
        Ok((prior, channel))
    }
}

/// One model realisation: σ*, θ*, the design and the base data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedInstance {
    pub config: ModelConfig,
    pub prior: Prior,
    pub channel: Channel,
    pub signal: Vec<f64>,
    pub data: ChannelData,
    pub theta_star: Vec<f64>,
    pub theta_out: Vec<f64>,
    pub seed: u64,
}

impl PlantedInstance {
    pub fn generate(config: &ModelConfig) -> Result<PlantedInstance> {
        let (prior, channel) = config.materialize()?;
        let signal = sample_signal(&prior, derive_seed(config.seed, streams::SIGNAL))?;
        let data = generate_data(&signal, &channel, derive_seed(config.seed, streams::BASE_NOISE))?;
        Ok(PlantedInstance {
            config: config.clone(),
            theta_star: prior.theta_star.clone(),
            theta_out: channel.design.clone(),
            prior,
            channel,
            signal,
            data,
            seed: config.seed,
        })
    }

    pub fn n(&self) -> usize {
        self.prior.n
    }

    pub fn log_likelihood(&self, sigma: &[f64]) -> Result<f64> {
        base_log_likelihood(sigma, &self.data, &self.channel)
    }
}
