//! Joint-model imputation with latent normals.
//!
//! A variable with `C` categories is represented by `C - 1` latent normals.
//! Category `c < C` means latent `c` is positive and larger than its
//! siblings; category `C` means every latent is negative. All latents of a
//! member follow
//!
//! ```text
//! w_ij = Bᵀ f_i + u_i + e_ij,   u_i ~ N(0, Σ_u),   e_ij ~ N(0, Σ_e)
//! ```
//!
//! where `f_i` holds the intercept, `x_i`, `z_i` and optionally the
//! standardized cluster size. The within-variable blocks of `Σ_e` are fixed
//! at unit variance and 0.5 covariance; the cross-variable entries are
//! sampled by random-walk Metropolis.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_identifiable, standardized_sizes, ChainSettings, ChainTrace};
use crate::data::{Category, ClusteredDataset, Variable, N_VARIABLES};
use crate::error::{Error, Result};
use crate::sampling::{cholesky, inverse_wishart, normal_from_precision, spd_inverse, std_normal, truncated_normal};

/// Prior precision added to every fixed-effect coefficient. Small enough to
/// act as a flat prior, but keeps the design identified when the standardized
/// cluster size is constant.
const COEF_PRIOR_PRECISION: f64 = 1e-6;
const WITHIN_COVARIANCE: f64 = 0.5;
const ADAPT_EVERY: usize = 50;
const TARGET_ACCEPTANCE: f64 = 0.3;

/// Inverse-Wishart prior for the random-intercept covariance:
/// `Σ_u ~ IW(scale · I, dim + extra_df)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JmPrior {
    pub scale: f64,
    pub extra_df: f64,
}

impl Default for JmPrior {
    fn default() -> Self {
        JmPrior { scale: 1.0, extra_df: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JmSpec {
    pub m_imputations: usize,
    pub burn_in: usize,
    pub between: usize,
    pub include_cluster_size: bool,
    pub prior: JmPrior,
}

impl Default for JmSpec {
    fn default() -> Self {
        let chain = ChainSettings::default();
        JmSpec {
            m_imputations: chain.m_imputations,
            burn_in: chain.burn_in,
            between: chain.between,
            include_cluster_size: false,
            prior: JmPrior::default(),
        }
    }
}

impl JmSpec {
    pub fn chain(&self) -> ChainSettings {
        ChainSettings { m_imputations: self.m_imputations, burn_in: self.burn_in, between: self.between }
    }

    pub fn check(&self) -> Result<()> {
        self.chain().check()?;
        if !(self.prior.scale > 0.0) || !(self.prior.extra_df > 0.0) {
            return Err(Error::Config("JM prior scale and extra_df must be positive".into()));
        }
        Ok(())
    }
}

/// Where the latents of one variable may lie given its observed category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentRegion {
    /// Reference category: every latent is negative.
    AllNegative,
    /// Latent `index` (0-based) is positive and the largest.
    MaxPositive { index: usize },
}

impl LatentRegion {
    pub fn contains(&self, latents: &[f64]) -> bool {
        match *self {
            LatentRegion::AllNegative => latents.iter().all(|&w| w < 0.0),
            LatentRegion::MaxPositive { index } => {
                let top = latents[index];
                top > 0.0 && latents.iter().enumerate().all(|(t, &w)| t == index || w < top)
            }
        }
    }

    /// Bounds for latent `t` holding the others fixed.
    pub fn bounds(&self, t: usize, latents: &[f64]) -> (f64, f64) {
        match *self {
            LatentRegion::AllNegative => (f64::NEG_INFINITY, 0.0),
            LatentRegion::MaxPositive { index } if index == t => {
                let others = latents
                    .iter()
                    .enumerate()
                    .filter(|&(s, _)| s != t)
                    .fold(0.0f64, |acc, (_, &w)| acc.max(w));
                (others, f64::INFINITY)
            }
            LatentRegion::MaxPositive { index } => (f64::NEG_INFINITY, latents[index]),
        }
    }
}

pub fn jm_category_to_latent_constraint(category: Category, n_categories: u8) -> Result<LatentRegion> {
    if n_categories < 2 || category < 1 || category > n_categories {
        return Err(Error::CategoryRange { category, max: n_categories });
    }
    if category == n_categories {
        Ok(LatentRegion::AllNegative)
    } else {
        Ok(LatentRegion::MaxPositive { index: category as usize - 1 })
    }
}

/// Maximum-latent rule: the category of the largest positive latent, or the
/// reference category when none is positive.
pub fn latent_to_category(latents: &[f64]) -> Category {
    let (arg, max) = latents
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (t, &w)| if w > best.1 { (t, w) } else { best });
    if max > 0.0 {
        arg as Category + 1
    } else {
        latents.len() as Category + 1
    }
}

/// Full state of one JM chain, including the data layout it was built from.
#[derive(Debug, Clone)]
pub struct JmState {
    n_categories: [u8; N_VARIABLES],
    offsets: [usize; N_VARIABLES + 1],
    /// Member index ranges per cluster.
    cluster_start: Vec<usize>,
    observed: Vec<[Option<Category>; N_VARIABLES]>,
    /// Cluster-level design, one row per cluster.
    design: DMatrix<f64>,
    /// Lower Cholesky factor of `Σ_i n_i f_i f_iᵀ` plus the coefficient prior.
    gram_chol: DMatrix<f64>,
    prior: JmPrior,
    pub latents: Vec<f64>,
    pub coefficients: DMatrix<f64>,
    pub intercepts: DMatrix<f64>,
    pub sigma_u: DMatrix<f64>,
    pub sigma_e: DMatrix<f64>,
    precision_e: DMatrix<f64>,
    step: f64,
    accepted: usize,
    proposed: usize,
}

impl JmState {
    pub fn new<R: Rng + ?Sized>(d: &ClusteredDataset, spec: &JmSpec, rng: &mut R) -> Result<Self> {
        let mut offsets = [0usize; N_VARIABLES + 1];
        for v in 0..N_VARIABLES {
            if d.n_categories[v] < 2 {
                return Err(Error::Config(format!("{} needs at least 2 categories", Variable::ALL[v])));
            }
            offsets[v + 1] = offsets[v] + d.n_categories[v] as usize - 1;
        }
        let k = offsets[N_VARIABLES];

        let sizes = standardized_sizes(d);
        let p = if spec.include_cluster_size { 4 } else { 3 };
        let n_clusters = d.clusters.len();
        let design = DMatrix::from_fn(n_clusters, p, |i, j| match j {
            0 => 1.0,
            1 => d.clusters[i].x,
            2 => d.clusters[i].z,
            _ => sizes[i],
        });
        let mut gram = DMatrix::<f64>::identity(p, p) * COEF_PRIOR_PRECISION;
        let mut cluster_start = Vec::with_capacity(n_clusters + 1);
        let mut observed = Vec::with_capacity(d.n_members());
        cluster_start.push(0);
        for (i, c) in d.clusters.iter().enumerate() {
            let f = design.row(i).transpose();
            gram += (&f * f.transpose()) * c.members.len() as f64;
            observed.extend(c.members.iter().map(|m| m.values));
            cluster_start.push(observed.len());
        }
        let gram_chol = cholesky(&gram)?;

        let mut sigma_e = DMatrix::<f64>::identity(k, k);
        for v in 0..N_VARIABLES {
            for a in offsets[v]..offsets[v + 1] {
                for b in offsets[v]..offsets[v + 1] {
                    if a != b {
                        sigma_e[(a, b)] = WITHIN_COVARIANCE;
                    }
                }
            }
        }
        let precision_e = spd_inverse(&sigma_e)?;

        let mut state = JmState {
            n_categories: d.n_categories,
            offsets,
            cluster_start,
            observed,
            design,
            gram_chol,
            prior: spec.prior,
            latents: vec![0.0; 0],
            coefficients: DMatrix::zeros(p, k),
            intercepts: DMatrix::zeros(n_clusters, k),
            sigma_u: DMatrix::identity(k, k),
            sigma_e,
            precision_e,
            step: 0.02,
            accepted: 0,
            proposed: 0,
        };
        state.latents = state.initial_latents(rng);
        Ok(state)
    }

    pub fn dim(&self) -> usize {
        self.offsets[N_VARIABLES]
    }

    pub fn n_members(&self) -> usize {
        self.observed.len()
    }

    pub fn n_predictors(&self) -> usize {
        self.design.ncols()
    }

    /// Fraction of accepted `Σ_e` proposals since the last adaptation.
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn region(&self, member: usize, v: usize) -> Option<LatentRegion> {
        self.observed[member][v].map(|c| {
            if c == self.n_categories[v] {
                LatentRegion::AllNegative
            } else {
                LatentRegion::MaxPositive { index: c as usize - 1 }
            }
        })
    }

    fn initial_latents<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.dim();
        let mut w = vec![0.0; self.n_members() * k];
        for r in 0..self.n_members() {
            for v in 0..N_VARIABLES {
                let block = &mut w[r * k + self.offsets[v]..r * k + self.offsets[v + 1]];
                let region = self.region(r, v);
                for (t, x) in block.iter_mut().enumerate() {
                    let centre = match region {
                        None => 0.0,
                        Some(LatentRegion::AllNegative) => -0.5,
                        Some(LatentRegion::MaxPositive { index }) if index == t => 1.0,
                        Some(LatentRegion::MaxPositive { .. }) => -0.5,
                    };
                    *x = centre + 0.1 * std_normal(rng);
                }
                if let Some(region) = region {
                    if !region.contains(block) {
                        for (t, x) in block.iter_mut().enumerate() {
                            *x = match region {
                                LatentRegion::MaxPositive { index } if index == t => 1.0,
                                _ => -0.5,
                            };
                        }
                    }
                }
            }
        }
        w
    }

    /// Linear predictor `Bᵀ f_i + u_i` for cluster `i`.
    fn cluster_mean(&self, i: usize) -> DVector<f64> {
        let f = self.design.row(i).transpose();
        self.coefficients.transpose() * f + self.intercepts.row(i).transpose()
    }

    fn update_latents<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let k = self.dim();
        let q = &self.precision_e;
        let mut var_of = vec![0usize; k];
        for v in 0..N_VARIABLES {
            for slot in var_of.iter_mut().take(self.offsets[v + 1]).skip(self.offsets[v]) {
                *slot = v;
            }
        }
        let sd: Vec<f64> = (0..k).map(|a| 1.0 / q[(a, a)].sqrt()).collect();
        let mut resid = vec![0.0; k];
        for i in 0..self.cluster_start.len() - 1 {
            let mu = self.cluster_mean(i);
            for r in self.cluster_start[i]..self.cluster_start[i + 1] {
                let regions: [Option<LatentRegion>; N_VARIABLES] = std::array::from_fn(|v| self.region(r, v));
                let w = &mut self.latents[r * k..(r + 1) * k];
                for a in 0..k {
                    resid[a] = w[a] - mu[a];
                }
                for a in 0..k {
                    let mut s = 0.0;
                    for b in 0..k {
                        if b != a {
                            s += q[(a, b)] * resid[b];
                        }
                    }
                    let mean = mu[a] - s / q[(a, a)];
                    let v = var_of[a];
                    let new = match regions[v] {
                        None => mean + sd[a] * std_normal(rng),
                        Some(region) => {
                            let block = &w[self.offsets[v]..self.offsets[v + 1]];
                            let (lo, hi) = region.bounds(a - self.offsets[v], block);
                            truncated_normal(rng, mean, sd[a], lo, hi)
                        }
                    };
                    w[a] = new;
                    resid[a] = new - mu[a];
                }
            }
        }
    }

    /// Per-cluster latent sums.
    fn cluster_sums(&self) -> DMatrix<f64> {
        let k = self.dim();
        let n = self.cluster_start.len() - 1;
        let mut sums = DMatrix::zeros(n, k);
        for i in 0..n {
            for r in self.cluster_start[i]..self.cluster_start[i + 1] {
                for a in 0..k {
                    sums[(i, a)] += self.latents[r * k + a];
                }
            }
        }
        sums
    }

    fn update_coefficients<R: Rng + ?Sized>(&mut self, rng: &mut R, sums: &DMatrix<f64>) -> Result<()> {
        let k = self.dim();
        let p = self.n_predictors();
        let mut cross = DMatrix::<f64>::zeros(p, k);
        for i in 0..sums.nrows() {
            let n_i = (self.cluster_start[i + 1] - self.cluster_start[i]) as f64;
            let resid = sums.row(i) - self.intercepts.row(i) * n_i;
            cross += self.design.row(i).transpose() * resid;
        }
        let l = &self.gram_chol;
        let half = l.solve_lower_triangular(&cross).ok_or_else(|| Error::Sampler("coefficient solve failed".into()))?;
        let mean = l
            .transpose()
            .solve_upper_triangular(&half)
            .ok_or_else(|| Error::Sampler("coefficient solve failed".into()))?;
        let z = DMatrix::from_fn(p, k, |_, _| std_normal(rng));
        let row_noise = l
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::Sampler("coefficient solve failed".into()))?;
        let le = cholesky(&self.sigma_e).map_err(|_| Error::Sampler("Σ_e lost positive definiteness".into()))?;
        self.coefficients = mean + row_noise * le.transpose();
        Ok(())
    }

    fn update_intercepts<R: Rng + ?Sized>(&mut self, rng: &mut R, sums: &DMatrix<f64>) -> Result<()> {
        let prior_prec = spd_inverse(&self.sigma_u).map_err(|_| Error::Sampler("Σ_u lost positive definiteness".into()))?;
        let bt = self.coefficients.transpose();
        for i in 0..sums.nrows() {
            let n_i = (self.cluster_start[i + 1] - self.cluster_start[i]) as f64;
            let fixed = &bt * self.design.row(i).transpose();
            let resid = sums.row(i).transpose() - fixed * n_i;
            let precision = &prior_prec + &self.precision_e * n_i;
            let b = &self.precision_e * resid;
            let u = normal_from_precision(rng, &precision, &b)?;
            self.intercepts.set_row(i, &u.transpose());
        }
        Ok(())
    }

    fn update_sigma_u<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let k = self.dim();
        let n = self.intercepts.nrows() as f64;
        let scale = DMatrix::<f64>::identity(k, k) * self.prior.scale + self.intercepts.transpose() * &self.intercepts;
        self.sigma_u = inverse_wishart(rng, &scale, k as f64 + self.prior.extra_df + n)
            .map_err(|e| Error::Sampler(format!("Σ_u draw failed: {e}")))?;
        Ok(())
    }

    fn residual_crossproduct(&self) -> DMatrix<f64> {
        let k = self.dim();
        let mut s = DMatrix::<f64>::zeros(k, k);
        let mut e = DVector::<f64>::zeros(k);
        for i in 0..self.cluster_start.len() - 1 {
            let mu = self.cluster_mean(i);
            for r in self.cluster_start[i]..self.cluster_start[i + 1] {
                for a in 0..k {
                    e[a] = self.latents[r * k + a] - mu[a];
                }
                s.syger(1.0, &e, &e, 1.0);
            }
        }
        s.fill_upper_triangle_with_lower_triangle();
        s
    }

    /// Log-likelihood of `n` residuals with cross-product `s` under `sigma`,
    /// or `None` when `sigma` is not positive definite.
    fn sigma_loglik(sigma: &DMatrix<f64>, s: &DMatrix<f64>, n: f64) -> Option<f64> {
        let chol = sigma.clone().cholesky()?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let trace = chol.solve(s).trace();
        Some(-0.5 * n * log_det - 0.5 * trace)
    }

    fn update_sigma_e<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let k = self.dim();
        let s = self.residual_crossproduct();
        let n = self.n_members() as f64;
        let mut current = Self::sigma_loglik(&self.sigma_e, &s, n)
            .ok_or_else(|| Error::Sampler("Σ_e lost positive definiteness".into()))?;
        let var_of = |a: usize| (0..N_VARIABLES).find(|&v| a < self.offsets[v + 1]).unwrap_or(N_VARIABLES - 1);
        for a in 0..k {
            for b in 0..a {
                if var_of(a) == var_of(b) {
                    continue;
                }
                let delta = self.step * std_normal(rng);
                let mut proposal = self.sigma_e.clone();
                proposal[(a, b)] += delta;
                proposal[(b, a)] += delta;
                self.proposed += 1;
                if let Some(ll) = Self::sigma_loglik(&proposal, &s, n) {
                    if rng.random::<f64>().ln() < ll - current {
                        self.sigma_e = proposal;
                        current = ll;
                        self.accepted += 1;
                    }
                }
            }
        }
        self.precision_e = spd_inverse(&self.sigma_e).map_err(|_| Error::Sampler("Σ_e lost positive definiteness".into()))?;
        Ok(())
    }

    fn adapt(&mut self) {
        if self.proposed == 0 {
            return;
        }
        let rate = self.acceptance_rate();
        self.step = if rate > TARGET_ACCEPTANCE { self.step * 1.25 } else { self.step * 0.8 }.clamp(1e-5, 1.0);
        self.accepted = 0;
        self.proposed = 0;
    }

    /// One full Gibbs sweep.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.update_latents(rng);
        let sums = self.cluster_sums();
        self.update_coefficients(rng, &sums)?;
        self.update_intercepts(rng, &sums)?;
        self.update_sigma_u(rng)?;
        if self.dim() > self.offsets[1] {
            self.update_sigma_e(rng)?;
        }
        Ok(())
    }

    /// Whether every observed cell is reproduced by the maximum-latent rule.
    pub fn reconversion_consistent(&self) -> bool {
        let k = self.dim();
        (0..self.n_members()).all(|r| {
            (0..N_VARIABLES).all(|v| match self.observed[r][v] {
                None => true,
                Some(c) => latent_to_category(&self.latents[r * k + self.offsets[v]..r * k + self.offsets[v + 1]]) == c,
            })
        })
    }

    /// `d` with its missing cells filled from the current latents.
    pub fn completed(&self, d: &ClusteredDataset) -> ClusteredDataset {
        let k = self.dim();
        let mut out = d.clone();
        let mut r = 0;
        for c in &mut out.clusters {
            for m in &mut c.members {
                for (v, var) in Variable::ALL.into_iter().enumerate() {
                    if m.get(var).is_none() {
                        let block = &self.latents[r * k + self.offsets[v]..r * k + self.offsets[v + 1]];
                        m.set(var, Some(latent_to_category(block)));
                    }
                }
                r += 1;
            }
        }
        out
    }

    fn trace_columns(&self) -> Vec<String> {
        let predictors = ["intercept", "x", "z", "size"];
        let mut cols = vec!["sweep".to_string()];
        for v in Variable::ALL {
            for t in 0..self.offsets[v.index() + 1] - self.offsets[v.index()] {
                for name in predictors.iter().take(self.n_predictors()) {
                    cols.push(format!("{name}:{}_{}", v.name(), t + 1));
                }
            }
        }
        cols.push("log_det_sigma_u".into());
        cols
    }

    fn trace_row(&self, sweep: usize) -> Vec<f64> {
        let mut row = vec![sweep as f64];
        for a in 0..self.dim() {
            row.extend(self.coefficients.column(a).iter());
        }
        let log_det = self
            .sigma_u
            .clone()
            .cholesky()
            .map(|c| 2.0 * c.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
            .unwrap_or(f64::NAN);
        row.push(log_det);
        row
    }
}

/// One sweep of the JM chain.
pub fn jm_gibbs_step<R: Rng + ?Sized>(state: &mut JmState, rng: &mut R) -> Result<()> {
    state.step(rng)
}

pub fn jm_impute<R: Rng + ?Sized>(d: &ClusteredDataset, spec: &JmSpec, rng: &mut R) -> Result<Vec<ClusteredDataset>> {
    run(d, spec, rng, false).map(|(out, _)| out)
}

/// As [`jm_impute`], also returning the per-sweep coefficient trace.
pub fn jm_impute_traced<R: Rng + ?Sized>(
    d: &ClusteredDataset,
    spec: &JmSpec,
    rng: &mut R,
) -> Result<(Vec<ClusteredDataset>, ChainTrace)> {
    run(d, spec, rng, true)
}

fn run<R: Rng + ?Sized>(
    d: &ClusteredDataset,
    spec: &JmSpec,
    rng: &mut R,
    traced: bool,
) -> Result<(Vec<ClusteredDataset>, ChainTrace)> {
    spec.check()?;
    let chain = spec.chain();
    if !d.has_missing() {
        return Ok((vec![d.clone(); chain.m_imputations], ChainTrace::default()));
    }
    check_identifiable(d)?;
    let mut state = JmState::new(d, spec, rng)?;
    let mut trace = ChainTrace::default();
    if traced {
        trace.columns = state.trace_columns();
    }
    let mut out = Vec::with_capacity(chain.m_imputations);
    for sweep in 1..=chain.total_sweeps() {
        state.step(rng)?;
        if sweep <= chain.burn_in && sweep % ADAPT_EVERY == 0 {
            state.adapt();
        }
        if traced {
            trace.rows.push(state.trace_row(sweep));
        }
        if chain.retains(sweep) {
            out.push(state.completed(d));
        }
    }
    Ok((out, trace))
}
