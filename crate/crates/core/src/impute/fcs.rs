//! Fully conditional specification with cumulative-probit models.
//!
//! Each variable in turn is the outcome of
//!
//! ```text
//! y*_ij = β₀ + βᵀ (other codes, x, z[, size]) + u_i + ε_ij,   ε_ij ~ N(0, 1)
//! y_ij = c  iff  τ_{c-1} < y*_ij ≤ τ_c,   τ_1 = 0
//! ```
//!
//! with `u_i ~ N(0, σ²_u)`. The other variables enter as their current
//! category codes. The model is fitted to the observed cells of the outcome
//! and its missing cells are then redrawn from the posterior predictive.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_identifiable, standardized_sizes, ChainSettings, ChainTrace};
use crate::data::{Category, ClusteredDataset, Variable, N_VARIABLES};
use crate::error::{Error, Result};
use crate::sampling::{inverse_gamma, norm_cdf, norm_ppf, normal_from_precision, std_normal, truncated_normal};

const COEF_PRIOR_PRECISION: f64 = 1e-6;
const COLLAPSE_GAP: f64 = 1e-10;
const ADAPT_EVERY: usize = 50;
const TARGET_ACCEPTANCE: f64 = 0.35;

/// How the free thresholds are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdSampler {
    /// Metropolis–Hastings on the thresholds with the latents integrated out.
    #[default]
    Cowles,
    /// Uniform full conditionals given the latents.
    AlbertChib,
}

impl FromStr for ThresholdSampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cowles" => Ok(ThresholdSampler::Cowles),
            "albert-chib" => Ok(ThresholdSampler::AlbertChib),
            other => Err(Error::Config(format!("unknown threshold sampler `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcsSpec {
    pub m_imputations: usize,
    pub burn_in: usize,
    pub between: usize,
    pub include_cluster_size: bool,
    pub visit_order: Vec<Variable>,
    pub threshold_sampler: ThresholdSampler,
    /// Inverse-gamma `(shape, scale)` prior on the random-intercept variance.
    pub variance_prior: (f64, f64),
}

impl Default for FcsSpec {
    fn default() -> Self {
        let chain = ChainSettings::default();
        FcsSpec {
            m_imputations: chain.m_imputations,
            burn_in: chain.burn_in,
            between: chain.between,
            include_cluster_size: false,
            visit_order: Variable::ALL.to_vec(),
            threshold_sampler: ThresholdSampler::default(),
            variance_prior: (1.0, 0.1),
        }
    }
}

impl FcsSpec {
    pub fn chain(&self) -> ChainSettings {
        ChainSettings { m_imputations: self.m_imputations, burn_in: self.burn_in, between: self.between }
    }

    pub fn check(&self) -> Result<()> {
        self.chain().check()?;
        let mut seen = [false; N_VARIABLES];
        for v in &self.visit_order {
            if std::mem::replace(&mut seen[v.index()], true) {
                return Err(Error::Config(format!("{v} appears twice in visit_order")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("visit_order must list all four variables".into()));
        }
        let (shape, scale) = self.variance_prior;
        if !(shape > 0.0 && scale > 0.0) {
            return Err(Error::Config("variance_prior shape and scale must be positive".into()));
        }
        Ok(())
    }
}

/// Category whose threshold interval contains `y_star`; ties go to the
/// lower category.
pub fn fcs_latent_to_category(y_star: f64, thresholds: &[f64]) -> Category {
    1 + thresholds.iter().filter(|&&t| t < y_star).count() as Category
}

/// `P(lo < Z ≤ hi)` for a standard normal, accurate in both tails.
fn interval_prob(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        norm_cdf(-lo) - norm_cdf(-hi)
    } else {
        norm_cdf(hi) - norm_cdf(lo)
    }
}

/// Parameters of one variable's conditional model.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableModel {
    pub coefficients: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub variance: f64,
    /// `C - 1` thresholds, the first fixed at zero.
    pub thresholds: Vec<f64>,
    latents: Vec<f64>,
    step: f64,
    accepted: usize,
    proposed: usize,
}

impl VariableModel {
    fn threshold_bounds(&self, c: Category) -> (f64, f64) {
        let c = c as usize;
        let lo = if c == 1 { f64::NEG_INFINITY } else { self.thresholds[c - 2] };
        let hi = if c > self.thresholds.len() { f64::INFINITY } else { self.thresholds[c - 1] };
        (lo, hi)
    }
}

#[derive(Debug, Clone)]
pub struct FcsState {
    n_categories: [u8; N_VARIABLES],
    cluster_of: Vec<usize>,
    n_clusters: usize,
    observed: Vec<[Option<Category>; N_VARIABLES]>,
    /// Observed values plus the current imputations.
    pub current: Vec<[Category; N_VARIABLES]>,
    /// Centered `x`, centered `z` and standardized size per cluster.
    cluster_covariates: Vec<[f64; 3]>,
    code_means: [f64; N_VARIABLES],
    include_cluster_size: bool,
    sampler: ThresholdSampler,
    variance_prior: (f64, f64),
    pub models: Vec<VariableModel>,
}

impl FcsState {
    pub fn new<R: Rng + ?Sized>(d: &ClusteredDataset, spec: &FcsSpec, rng: &mut R) -> Result<Self> {
        let mut cluster_of = Vec::with_capacity(d.n_members());
        let mut observed = Vec::with_capacity(d.n_members());
        for (i, c) in d.clusters.iter().enumerate() {
            for m in &c.members {
                cluster_of.push(i);
                observed.push(m.values);
            }
        }
        let n = observed.len();
        let sizes = standardized_sizes(d);
        let x_mean = cluster_of.iter().map(|&i| d.clusters[i].x).sum::<f64>() / n as f64;
        let z_mean = cluster_of.iter().map(|&i| d.clusters[i].z).sum::<f64>() / n as f64;
        let cluster_covariates =
            d.clusters.iter().zip(&sizes).map(|(c, &s)| [c.x - x_mean, c.z - z_mean, s]).collect();

        let mut counts: Vec<Vec<usize>> = d.n_categories.iter().map(|&c| vec![0; c as usize]).collect();
        for row in &observed {
            for v in 0..N_VARIABLES {
                if let Some(c) = row[v] {
                    counts[v][c as usize - 1] += 1;
                }
            }
        }
        let mut code_means = [0.0; N_VARIABLES];
        for v in 0..N_VARIABLES {
            let total: usize = counts[v].iter().sum();
            if total > 0 {
                code_means[v] =
                    counts[v].iter().enumerate().map(|(c, &k)| (c + 1) as f64 * k as f64).sum::<f64>() / total as f64;
            }
        }

        // Missing cells start as draws from the observed marginals.
        let current = observed
            .iter()
            .map(|row| {
                std::array::from_fn(|v| {
                    row[v].unwrap_or_else(|| {
                        let total: usize = counts[v].iter().sum();
                        let mut pick = rng.random_range(0..total.max(1));
                        for (c, &k) in counts[v].iter().enumerate() {
                            if pick < k {
                                return c as Category + 1;
                            }
                            pick -= k;
                        }
                        1
                    })
                })
            })
            .collect();

        let p = if spec.include_cluster_size { 7 } else { 6 };
        let models = (0..N_VARIABLES)
            .map(|v| {
                let total: usize = counts[v].iter().sum::<usize>().max(1);
                let q = d.n_categories[v] as usize - 1;
                let mut cum = 0;
                let probits: Vec<f64> = (0..q)
                    .map(|c| {
                        cum += counts[v][c];
                        norm_ppf((cum as f64 / total as f64).clamp(1e-4, 1.0 - 1e-4))
                    })
                    .collect();
                let mut thresholds: Vec<f64> = probits.iter().map(|&t| t - probits[0]).collect();
                for k in 1..q {
                    if thresholds[k] <= thresholds[k - 1] {
                        thresholds[k] = thresholds[k - 1] + 0.1;
                    }
                }
                let mut coefficients = vec![0.0; p];
                coefficients[0] = -probits[0];
                VariableModel {
                    coefficients,
                    intercepts: vec![0.0; d.clusters.len()],
                    variance: 1.0,
                    thresholds,
                    latents: vec![0.0; n],
                    step: 0.05,
                    accepted: 0,
                    proposed: 0,
                }
            })
            .collect();

        Ok(FcsState {
            n_categories: d.n_categories,
            cluster_of,
            n_clusters: d.clusters.len(),
            observed,
            current,
            cluster_covariates,
            code_means,
            include_cluster_size: spec.include_cluster_size,
            sampler: spec.threshold_sampler,
            variance_prior: spec.variance_prior,
            models,
        })
    }

    /// Number of regression coefficients per conditional model, intercept included.
    pub fn n_predictors(&self) -> usize {
        if self.include_cluster_size {
            7
        } else {
            6
        }
    }

    fn design_row(&self, r: usize, v: usize, row: &mut [f64]) {
        row[0] = 1.0;
        let mut j = 1;
        for w in 0..N_VARIABLES {
            if w != v {
                row[j] = self.current[r][w] as f64 - self.code_means[w];
                j += 1;
            }
        }
        let cov = &self.cluster_covariates[self.cluster_of[r]];
        row[4] = cov[0];
        row[5] = cov[1];
        if self.include_cluster_size {
            row[6] = cov[2];
        }
    }

    fn design(&self, v: usize) -> DMatrix<f64> {
        let p = self.n_predictors();
        let mut x = DMatrix::zeros(self.current.len(), p);
        let mut row = vec![0.0; p];
        for r in 0..self.current.len() {
            self.design_row(r, v, &mut row);
            for j in 0..p {
                x[(r, j)] = row[j];
            }
        }
        x
    }

    fn linear_predictor(&self, v: usize, x: &DMatrix<f64>) -> Vec<f64> {
        let m = &self.models[v];
        let beta = DVector::from_column_slice(&m.coefficients);
        let xb = x * beta;
        (0..x.nrows()).map(|r| xb[r] + m.intercepts[self.cluster_of[r]]).collect()
    }

    fn observed_loglik(&self, v: usize, eta: &[f64], thresholds: &[f64]) -> f64 {
        let mut ll = 0.0;
        for (r, row) in self.observed.iter().enumerate() {
            if let Some(c) = row[v] {
                let c = c as usize;
                let lo = if c == 1 { f64::NEG_INFINITY } else { thresholds[c - 2] };
                let hi = if c > thresholds.len() { f64::INFINITY } else { thresholds[c - 1] };
                ll += interval_prob(lo - eta[r], hi - eta[r]).ln();
            }
        }
        ll
    }

    fn cowles_step<R: Rng + ?Sized>(&mut self, v: usize, eta: &[f64], rng: &mut R) {
        let q = self.models[v].thresholds.len();
        if q < 2 {
            return;
        }
        let old = self.models[v].thresholds.clone();
        let s = self.models[v].step;
        let mut new = old.clone();
        for k in 1..q {
            let hi = if k + 1 < q { old[k + 1] } else { f64::INFINITY };
            new[k] = truncated_normal(rng, old[k], s, new[k - 1], hi);
        }
        // Hastings correction for the truncated proposals
        let mut log_ratio = 0.0;
        for k in 1..q {
            let (old_hi, new_hi) = if k + 1 < q { (old[k + 1], new[k + 1]) } else { (f64::INFINITY, f64::INFINITY) };
            log_ratio += interval_prob((new[k - 1] - old[k]) / s, (old_hi - old[k]) / s).ln();
            log_ratio -= interval_prob((old[k - 1] - new[k]) / s, (new_hi - new[k]) / s).ln();
        }
        log_ratio += self.observed_loglik(v, eta, &new) - self.observed_loglik(v, eta, &old);
        let m = &mut self.models[v];
        m.proposed += 1;
        if log_ratio.is_finite() && rng.random::<f64>().ln() < log_ratio {
            m.thresholds = new;
            m.accepted += 1;
        }
    }

    fn draw_observed_latents<R: Rng + ?Sized>(&mut self, v: usize, eta: &[f64], rng: &mut R) {
        let m = &mut self.models[v];
        for (r, row) in self.observed.iter().enumerate() {
            if let Some(c) = row[v] {
                let (lo, hi) = m.threshold_bounds(c);
                m.latents[r] = truncated_normal(rng, eta[r], 1.0, lo, hi);
            }
        }
    }

    fn albert_chib_step<R: Rng + ?Sized>(&mut self, v: usize, rng: &mut R) {
        let q = self.models[v].thresholds.len();
        let mut top = vec![f64::NEG_INFINITY; q + 1];
        let mut bottom = vec![f64::INFINITY; q + 1];
        let m = &self.models[v];
        for (r, row) in self.observed.iter().enumerate() {
            if let Some(c) = row[v] {
                let c = c as usize - 1;
                top[c] = top[c].max(m.latents[r]);
                bottom[c] = bottom[c].min(m.latents[r]);
            }
        }
        let m = &mut self.models[v];
        for k in 1..q {
            let lo = m.thresholds[k - 1].max(top[k]);
            let hi = if k + 1 < q { m.thresholds[k + 1] } else { f64::INFINITY }.min(bottom[k + 1]);
            if lo < hi {
                m.thresholds[k] = lo + (hi - lo) * rng.random::<f64>();
            }
        }
    }

    fn check_thresholds(&self, v: usize) -> Result<()> {
        let t = &self.models[v].thresholds;
        for k in 1..t.len() {
            if !(t[k] - t[k - 1] > COLLAPSE_GAP) {
                return Err(Error::Sampler(format!(
                    "thresholds of {} collapsed: {:?}",
                    Variable::ALL[v],
                    t
                )));
            }
        }
        Ok(())
    }

    /// One Bayesian update of `variable`'s model followed by a refill of its
    /// missing cells.
    pub fn update_variable<R: Rng + ?Sized>(&mut self, variable: Variable, rng: &mut R) -> Result<()> {
        let v = variable.index();
        if self.observed.iter().all(|row| row[v].is_some()) {
            return Ok(());
        }
        let x = self.design(v);
        let eta = self.linear_predictor(v, &x);
        match self.sampler {
            ThresholdSampler::Cowles => {
                self.cowles_step(v, &eta, rng);
                self.draw_observed_latents(v, &eta, rng);
            }
            ThresholdSampler::AlbertChib => {
                self.draw_observed_latents(v, &eta, rng);
                self.albert_chib_step(v, rng);
            }
        }
        self.check_thresholds(v)?;

        let p = self.n_predictors();
        let obs_rows: Vec<usize> = (0..self.observed.len()).filter(|&r| self.observed[r][v].is_some()).collect();

        // coefficients given latents and intercepts
        let mut precision = DMatrix::<f64>::identity(p, p) * COEF_PRIOR_PRECISION;
        let mut b = DVector::<f64>::zeros(p);
        {
            let m = &self.models[v];
            for &r in &obs_rows {
                let row = x.row(r);
                let target = m.latents[r] - m.intercepts[self.cluster_of[r]];
                precision.ger(1.0, &row.transpose(), &row.transpose(), 1.0);
                b.axpy(target, &row.transpose(), 1.0);
            }
        }
        let beta = normal_from_precision(rng, &precision, &b)?;
        let xb = &x * &beta;

        // random intercepts
        let mut n_obs = vec![0.0; self.n_clusters];
        let mut resid_sum = vec![0.0; self.n_clusters];
        {
            let m = &self.models[v];
            for &r in &obs_rows {
                let i = self.cluster_of[r];
                n_obs[i] += 1.0;
                resid_sum[i] += m.latents[r] - xb[r];
            }
        }
        let m = &mut self.models[v];
        m.coefficients = beta.iter().copied().collect();
        for i in 0..self.n_clusters {
            let prec = n_obs[i] + 1.0 / m.variance;
            m.intercepts[i] = resid_sum[i] / prec + std_normal(rng) / prec.sqrt();
        }
        let (shape, scale) = self.variance_prior;
        let ss: f64 = m.intercepts.iter().map(|u| u * u).sum();
        m.variance = inverse_gamma(rng, shape + 0.5 * self.n_clusters as f64, scale + 0.5 * ss);

        // posterior-predictive refill
        for r in 0..self.observed.len() {
            if self.observed[r][v].is_none() {
                let y_star = xb[r] + m.intercepts[self.cluster_of[r]] + std_normal(rng);
                self.current[r][v] = fcs_latent_to_category(y_star, &m.thresholds);
            }
        }
        Ok(())
    }

    fn adapt(&mut self) {
        for m in &mut self.models {
            if m.proposed == 0 {
                continue;
            }
            let rate = m.accepted as f64 / m.proposed as f64;
            m.step = if rate > TARGET_ACCEPTANCE { m.step * 1.25 } else { m.step * 0.8 }.clamp(1e-4, 2.0);
            m.accepted = 0;
            m.proposed = 0;
        }
    }

    pub fn completed(&self, d: &ClusteredDataset) -> ClusteredDataset {
        let mut out = d.clone();
        let mut r = 0;
        for c in &mut out.clusters {
            for m in &mut c.members {
                for var in Variable::ALL {
                    if m.get(var).is_none() {
                        m.set(var, Some(self.current[r][var.index()]));
                    }
                }
                r += 1;
            }
        }
        out
    }

    fn trace_columns(&self) -> Vec<String> {
        let mut cols = vec!["sweep".to_string()];
        for v in Variable::ALL {
            let mut names = vec!["intercept".to_string()];
            names.extend(Variable::ALL.iter().filter(|&&w| w != v).map(|w| w.name().to_string()));
            names.extend(["x", "z"].map(String::from));
            if self.include_cluster_size {
                names.push("size".into());
            }
            for t in 0..self.n_categories[v.index()] as usize - 1 {
                names.push(format!("tau_{}", t + 1));
            }
            names.push("sigma2_u".into());
            cols.extend(names.into_iter().map(|n| format!("{}:{n}", v.name())));
        }
        cols
    }

    fn trace_row(&self, sweep: usize) -> Vec<f64> {
        let mut row = vec![sweep as f64];
        for m in &self.models {
            row.extend(&m.coefficients);
            row.extend(&m.thresholds);
            row.push(m.variance);
        }
        row
    }
}

/// One update of `variable`'s conditional model.
pub fn fcs_update_variable<R: Rng + ?Sized>(state: &mut FcsState, variable: Variable, rng: &mut R) -> Result<()> {
    state.update_variable(variable, rng)
}

pub fn fcs_impute<R: Rng + ?Sized>(d: &ClusteredDataset, spec: &FcsSpec, rng: &mut R) -> Result<Vec<ClusteredDataset>> {
    run(d, spec, rng, false).map(|(out, _)| out)
}

/// As [`fcs_impute`], also returning the per-sweep parameter trace.
pub fn fcs_impute_traced<R: Rng + ?Sized>(
    d: &ClusteredDataset,
    spec: &FcsSpec,
    rng: &mut R,
) -> Result<(Vec<ClusteredDataset>, ChainTrace)> {
    run(d, spec, rng, true)
}

fn run<R: Rng + ?Sized>(
    d: &ClusteredDataset,
    spec: &FcsSpec,
    rng: &mut R,
    traced: bool,
) -> Result<(Vec<ClusteredDataset>, ChainTrace)> {
    spec.check()?;
    let chain = spec.chain();
    if !d.has_missing() {
        return Ok((vec![d.clone(); chain.m_imputations], ChainTrace::default()));
    }
    check_identifiable(d)?;
    let mut state = FcsState::new(d, spec, rng)?;
    let mut trace = ChainTrace::default();
    if traced {
        trace.columns = state.trace_columns();
    }
    let mut out = Vec::with_capacity(chain.m_imputations);
    for sweep in 1..=chain.total_sweeps() {
        for &v in &spec.visit_order {
            state.update_variable(v, rng)?;
        }
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
