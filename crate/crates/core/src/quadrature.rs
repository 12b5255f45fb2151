//! Gauss–Hermite and generalised Gauss–Laguerre rules, normalised to
//! probability weights, and the Poisson truncation rule.
//!
//! Rules are cached in memory. When `NISHIMORI_LAB_CACHE` names a directory,
//! they are also stored there as JSON and reused across processes.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use gauss_quad::{GaussHermite, GaussLaguerre};
use serde::{Deserialize, Serialize};
use statrs::distribution::{DiscreteCDF, Poisson};

use crate::error::{LabError, Result};

pub const CACHE_ENV: &str = "NISHIMORI_LAB_CACHE";
pub const DEFAULT_ORDER: usize = 20;
pub const POISSON_TAIL: f64 = 1e-12;

/// Nodes and probability weights (summing to 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }

    fn normalised(pairs: impl Iterator<Item = (f64, f64)>, scale: f64) -> Rule {
        let (nodes, raw): (Vec<f64>, Vec<f64>) = pairs.map(|(x, w)| (x * scale, w)).unzip();
        let total: f64 = raw.iter().sum();
        Rule { nodes, weights: raw.into_iter().map(|w| w / total).collect() }
    }
}

type Key = (u8, usize, u64);

fn memory() -> &'static Mutex<HashMap<Key, Arc<Rule>>> {
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<Rule>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn disk_path(dir: Option<PathBuf>, key: &Key) -> Option<PathBuf> {
    let name = match key.0 {
        0 => format!("hermite-{}.json", key.1),
        _ => format!("laguerre-{}-{:016x}.json", key.1, key.2),
    };
    dir.map(|d| d.join(name))
}

fn load_or_build(path: Option<&Path>, build: impl FnOnce() -> Result<Rule>) -> Result<Rule> {
    if let Some(r) = path.and_then(|p| std::fs::read(p).ok()).and_then(|b| serde_json::from_slice::<Rule>(&b).ok()) {
        return Ok(r);
    }
    let r = build()?;
    if let Some(p) = path {
        if let Some(parent) = p.parent() {
            let _ = std::fs::create_dir_all(parent);
        }
        let _ = std::fs::write(p, serde_json::to_vec(&r)?);
    }
    Ok(r)
}

fn cached(key: Key, build: impl FnOnce() -> Result<Rule>) -> Result<Arc<Rule>> {
    if let Some(r) = memory().lock().expect("cache lock").get(&key) {
        return Ok(r.clone());
    }
    let path = disk_path(std::env::var_os(CACHE_ENV).map(PathBuf::from), &key);
    let rule = Arc::new(load_or_build(path.as_deref(), build)?);
    memory().lock().expect("cache lock").insert(key, rule.clone());
    Ok(rule)
}

/// Rule for `E f(X)`, `X ~ N(0, 1)`.
pub fn hermite(order: usize) -> Result<Arc<Rule>> {
    cached((0, order, 0), || {
        let gh = GaussHermite::new(order).map_err(|e| LabError::Domain(format!("Gauss-Hermite order {order}: {e}")))?;
        Ok(Rule::normalised(gh.as_node_weight_pairs().iter().copied(), std::f64::consts::SQRT_2))
    })
}

/// Rule for `E f(X)`, `X ~ Gamma(alpha + 1, 1)`.
pub fn laguerre(order: usize, alpha: f64) -> Result<Arc<Rule>> {
    cached((1, order, alpha.to_bits()), || {
        let gl = GaussLaguerre::new(order, alpha)
            .map_err(|e| LabError::Domain(format!("Gauss-Laguerre order {order}, alpha {alpha}: {e}")))?;
        Ok(Rule::normalised(gl.as_node_weight_pairs().iter().copied(), 1.0))
    })
}

/// Smallest `P` with `P(X > P) < tail` for `X ~ Poisson(mean)`.
pub fn poisson_cap(mean: f64, tail: f64) -> usize {
    let pois = Poisson::new(mean).expect("positive mean");
    let mut p = mean.floor() as u64;
    while pois.sf(p) >= tail {
        p += 1;
    }
    p as usize
}

/// Orders and truncation used by tensor-product quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub hermite_order: usize,
    pub laguerre_order: usize,
    pub poisson_cap: usize,
    /// `P(π > poisson_cap)` for one exponential channel.
    pub tail_mass: f64,
}

impl QuadratureGrid {
    pub fn new(hermite_order: usize, laguerre_order: usize, s_n: f64) -> QuadratureGrid {
        let cap = poisson_cap(s_n, POISSON_TAIL);
        let tail = Poisson::new(s_n).expect("positive mean").sf(cap as u64);
        QuadratureGrid { hermite_order, laguerre_order, poisson_cap: cap, tail_mass: tail }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hermite_moments() {
        let r = hermite(20).unwrap();
        assert_abs_diff_eq!(r.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.expect(|x| x * x), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.expect(|x| x.powi(4)), 3.0, epsilon = 1e-11);
        assert_abs_diff_eq!(r.expect(|x| (0.7 * x).exp()), (0.245f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn laguerre_gamma_moments() {
        let r = laguerre(20, 2.0).unwrap();
        // Gamma(3, 1): mean 3, second moment 12
        assert_abs_diff_eq!(r.expect(|x| x), 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(r.expect(|x| x * x), 12.0, epsilon = 1e-9);
    }

    #[test]
    fn poisson_cap_tail() {
        let g = QuadratureGrid::new(20, 20, 2.0);
        assert!(g.tail_mass < 1e-12);
        let below = Poisson::new(2.0).unwrap().sf(g.poisson_cap as u64 - 1);
        assert!(below >= 1e-12);
    }

    #[test]
    fn disk_cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = disk_path(Some(dir.path().to_path_buf()), &(0, 7, 0)).unwrap();
        let build = || Ok(Rule { nodes: vec![1.0], weights: vec![1.0] });
        let a = load_or_build(Some(&path), build).unwrap();
        assert!(path.exists());
        let b = load_or_build(Some(&path), || Err(LabError::Domain("not rebuilt".into()))).unwrap();
        assert_eq!(a, b);
    }
}
