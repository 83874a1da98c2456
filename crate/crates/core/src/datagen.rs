//! Simulation of clustered ordinal data with informative cluster size.
//!
//! Member random intercepts follow the bridge distribution, so the
//! conditional logit model `θ_c = expit(b + (η_c + xβ)/φ)` marginalizes to
//! a proportional-odds model with the original `η` and `β`. Correlation
//! between members comes from an exchangeable Gaussian copula (`tau`);
//! cluster size is binomial with a success rate driven by the cluster's
//! mean random effect (`nu`).

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{Category, Cluster, ClusteredDataset, Member, ParamVector, N_VARIABLES};
use crate::error::{Error, Result};
use crate::rng::{seeded, SimRng};
use crate::sampling::{expit, norm_cdf, std_normal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_clusters: usize,
    #[serde(default = "default_max_size")]
    pub max_size: usize,
    /// Exchangeable latent correlation between members.
    pub tau: f64,
    /// Degree of informative cluster size.
    pub nu: f64,
    #[serde(default = "default_phi")]
    pub phi: f64,
    #[serde(default = "default_true_params")]
    pub true_params: ParamVector,
    /// Cutpoints for `m1`, `m2`, `m3`; slopes are shared with `y`.
    #[serde(default = "default_aux_cutpoints")]
    pub aux_cutpoints: [Vec<f64>; 3],
}

fn default_max_size() -> usize {
    28
}

fn default_phi() -> f64 {
    0.6
}

pub fn default_true_params() -> ParamVector {
    ParamVector { cutpoints: vec![-0.4, 0.8, 1.6], slopes: vec![-0.2, -0.5] }
}

/// `y` cutpoints shifted by −0.3, 0 and +0.3.
pub fn default_aux_cutpoints() -> [Vec<f64>; 3] {
    let base = default_true_params().cutpoints;
    [-0.3, 0.0, 0.3].map(|s| base.iter().map(|c| c + s).collect())
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_clusters: 50,
            max_size: default_max_size(),
            tau: 0.3,
            nu: 0.1,
            phi: default_phi(),
            true_params: default_true_params(),
            aux_cutpoints: default_aux_cutpoints(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 1 {
            return Err(Error::Config("n_clusters must be at least 1".into()));
        }
        if self.max_size < 1 {
            return Err(Error::Config("max_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau={} outside [0, 1)", self.tau)));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::Config(format!("nu={} must be a nonnegative number", self.nu)));
        }
        check_phi(self.phi).map_err(|e| Error::Config(e.to_string()))?;
        self.true_params.check().map_err(|e| Error::Config(e.to_string()))?;
        if self.true_params.slopes.len() != 2 {
            return Err(Error::Config("true_params needs exactly two slopes (x, z)".into()));
        }
        if self.true_params.cutpoints.len() < 2 {
            return Err(Error::Config("the outcome needs at least three categories".into()));
        }
        for (k, cuts) in self.aux_cutpoints.iter().enumerate() {
            ParamVector { cutpoints: cuts.clone(), slopes: vec![] }
                .check()
                .map_err(|e| Error::Config(format!("aux_cutpoints[{k}]: {e}")))?;
        }
        if self.n_categories().iter().any(|&c| c > 100) {
            return Err(Error::Config("too many categories".into()));
        }
        Ok(())
    }

    pub fn n_categories(&self) -> [u8; N_VARIABLES] {
        [
            self.true_params.cutpoints.len() as u8 + 1,
            self.aux_cutpoints[0].len() as u8 + 1,
            self.aux_cutpoints[1].len() as u8 + 1,
            self.aux_cutpoints[2].len() as u8 + 1,
        ]
    }
}

fn check_phi(phi: f64) -> Result<()> {
    if phi > 0.0 && phi < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("phi={phi} outside (0, 1)")))
    }
}

/// Bridge density `sin(φπ) / (2π (cosh(φb) + cos(φπ)))`.
pub fn bridge_density(b: f64, phi: f64) -> Result<f64> {
    check_phi(phi)?;
    let c = (phi * b).cosh();
    if c.is_infinite() {
        return Ok(0.0);
    }
    Ok((phi * PI).sin() / (2.0 * PI * (c + (phi * PI).cos())))
}

/// Bridge quantile: `(1/φ) log(sin(φπu) / sin(φπ(1−u)))`.
pub fn bridge_quantile(u: f64, phi: f64) -> f64 {
    bridge_from_probabilities(u, 1.0 - u, phi)
}

/// Bridge quantile at `u = Φ(ω)`, computing `1 − u` as `Φ(−ω)` so that large
/// `|ω|` keeps full precision.
pub fn bridge_from_normal(omega: f64, phi: f64) -> f64 {
    bridge_from_probabilities(norm_cdf(omega), norm_cdf(-omega), phi)
}

fn bridge_from_probabilities(u: f64, one_minus_u: f64, phi: f64) -> f64 {
    ((phi * PI * u).sin().ln() - (phi * PI * one_minus_u).sin().ln()) / phi
}

/// `m` exchangeably correlated bridge(φ) draws.
///
/// `ω_j = √τ·g + √(1−τ)·e_j`, then `b_j = F_b⁻¹(Φ(ω_j))`.
pub fn sample_bridge_cluster<R: Rng + ?Sized>(m: usize, tau: f64, phi: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_phi(phi)?;
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Domain(format!("tau={tau} outside [0, 1)")));
    }
    if m < 1 {
        return Err(Error::Domain("cluster must have at least one member".into()));
    }
    let shared = tau.sqrt() * std_normal(rng);
    let own = (1.0 - tau).sqrt();
    Ok((0..m).map(|_| bridge_from_normal(shared + own * std_normal(rng), phi)).collect())
}

/// Binomial success rate `expit(ν b̄)` of the cluster-size model.
pub fn size_rate(b_bar: f64, nu: f64) -> f64 {
    expit(nu * b_bar)
}

/// Draw `n ~ Binomial(max_size, expit(ν b̄))` conditioned on `n ≥ 1`.
pub fn gen_cluster_size<R: Rng + ?Sized>(b_bar: f64, nu: f64, max_size: usize, rng: &mut R) -> usize {
    let lambda = size_rate(b_bar, nu);
    if max_size == 1 || lambda >= 1.0 {
        return max_size;
    }
    if lambda >= 0.05 {
        let dist = Binomial::new(max_size as u64, lambda).expect("valid binomial rate");
        loop {
            let n = dist.sample(rng) as usize;
            if n >= 1 {
                return n;
            }
        }
    }
    // inverse CDF of the zero-truncated binomial; pmf ratios avoid overflow
    let q = 1.0 - lambda;
    let ratio = lambda / q;
    let mut pmf = Vec::with_capacity(max_size);
    let mut p = max_size as f64 * ratio; // P(1) / P(0)
    for k in 1..=max_size {
        if k > 1 {
            p *= (max_size - k + 1) as f64 / k as f64 * ratio;
        }
        pmf.push(p);
    }
    let total: f64 = pmf.iter().sum();
    let mut u: f64 = rng.random::<f64>() * total;
    for (k, w) in pmf.iter().enumerate() {
        if u < *w {
            return k + 1;
        }
        u -= w;
    }
    max_size
}

/// Category probabilities `P_c` under the conditional bridge model.
///
/// `phi = 1` is accepted here and gives the plain logit model.
pub fn category_probabilities(
    b: f64,
    x: f64,
    z: f64,
    cutpoints: &[f64],
    slopes: &[f64],
    phi: f64,
) -> Result<Vec<f64>> {
    if !(phi > 0.0 && phi <= 1.0) {
        return Err(Error::Domain(format!("phi={phi} outside (0, 1]")));
    }
    let eta = slopes[0] * x + slopes[1] * z;
    let mut probs = Vec::with_capacity(cutpoints.len() + 1);
    let mut prev = 0.0;
    for &cut in cutpoints {
        let theta = expit(b + (cut + eta) / phi);
        probs.push(theta - prev);
        prev = theta;
    }
    probs.push(1.0 - prev);
    if let Some((c, &v)) = probs.iter().enumerate().find(|(_, &v)| v < -1e-12 || !v.is_finite()) {
        return Err(Error::InvalidProbability { category: c + 1, value: v });
    }
    Ok(probs)
}

/// One multinomial draw from [`category_probabilities`].
pub fn gen_ordinal_outcome<R: Rng + ?Sized>(
    b: f64,
    x: f64,
    z: f64,
    cutpoints: &[f64],
    slopes: &[f64],
    phi: f64,
    rng: &mut R,
) -> Result<Category> {
    let probs = category_probabilities(b, x, z, cutpoints, slopes, phi)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, p) in probs.iter().enumerate() {
        acc += p.max(0.0);
        if u < acc {
            return Ok(c as Category + 1);
        }
    }
    Ok(probs.len() as Category)
}

/// Simulate one complete dataset; deterministic in `seed`.
pub fn simulate_dataset(cfg: &GenConfig, seed: u64) -> Result<ClusteredDataset> {
    simulate_dataset_with(cfg, &mut seeded(seed))
}

pub fn simulate_dataset_with(cfg: &GenConfig, rng: &mut SimRng) -> Result<ClusteredDataset> {
    cfg.validate()?;
    let slopes = &cfg.true_params.slopes;
    let cutpoints: [&[f64]; N_VARIABLES] = [
        &cfg.true_params.cutpoints,
        &cfg.aux_cutpoints[0],
        &cfg.aux_cutpoints[1],
        &cfg.aux_cutpoints[2],
    ];
    let mut clusters = Vec::with_capacity(cfg.n_clusters);
    for i in 0..cfg.n_clusters {
        let mut b = sample_bridge_cluster(cfg.max_size, cfg.tau, cfg.phi, rng)?;
        // b̄ over every latent draw, then the size, then keep the first n
        let b_bar = b.iter().sum::<f64>() / b.len() as f64;
        let n = gen_cluster_size(b_bar, cfg.nu, cfg.max_size, rng);
        b.truncate(n);
        let x = 2.0 * std_normal(rng);
        let z = if rng.random::<bool>() { 1.0 } else { 0.0 };
        let mut members = Vec::with_capacity(n);
        for &bij in &b {
            let mut values = [0; N_VARIABLES];
            for (v, cuts) in values.iter_mut().zip(cutpoints) {
                *v = gen_ordinal_outcome(bij, x, z, cuts, slopes, cfg.phi, rng)?;
            }
            members.push(Member::complete(values));
        }
        clusters.push(Cluster::new(i as u64 + 1, x, z, members));
    }
    Ok(ClusteredDataset::new(clusters, cfg.n_categories()))
}
