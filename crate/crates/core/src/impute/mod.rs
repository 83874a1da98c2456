//! Multiple imputation of the four member-level ordinal variables.
//!
//! Both samplers follow the same outer loop: run `burn_in` sweeps, then keep
//! a completed dataset every `between` sweeps until `m_imputations` have been
//! collected. Observed cells, covariates and cluster sizes are never changed.
//! With `include_cluster_size`, the standardized cluster size enters every
//! imputation regression as an extra cluster-level predictor.

pub mod fcs;
pub mod jm;

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClusteredDataset, Variable};
use crate::error::{Error, Result};

pub use fcs::{
    fcs_impute, fcs_impute_traced, fcs_latent_to_category, fcs_update_variable, FcsSpec, FcsState, ThresholdSampler,
};
pub use jm::{
    jm_category_to_latent_constraint, jm_gibbs_step, jm_impute, jm_impute_traced, latent_to_category, JmPrior, JmSpec,
    JmState, LatentRegion,
};

/// Chain length settings shared by both samplers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSettings {
    pub m_imputations: usize,
    pub burn_in: usize,
    pub between: usize,
}

impl Default for ChainSettings {
    fn default() -> Self {
        ChainSettings { m_imputations: 10, burn_in: 500, between: 100 }
    }
}

impl ChainSettings {
    pub fn check(&self) -> Result<()> {
        if self.m_imputations < 2 {
            return Err(Error::Config("m_imputations must be at least 2".into()));
        }
        if self.burn_in < 1 || self.between < 1 {
            return Err(Error::Config("burn_in and between must be at least 1".into()));
        }
        Ok(())
    }

    /// Total sweeps: the last retained dataset is drawn at this sweep.
    pub fn total_sweeps(&self) -> usize {
        self.burn_in + (self.m_imputations - 1) * self.between
    }

    /// Whether the dataset after `sweep` (1-based) is retained.
    pub fn retains(&self, sweep: usize) -> bool {
        sweep >= self.burn_in && (sweep - self.burn_in) % self.between == 0
    }
}

/// Either imputation model, for callers that pick one at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum Imputer {
    Jm(JmSpec),
    Fcs(FcsSpec),
}

impl Imputer {
    pub fn impute<R: Rng + ?Sized>(&self, d: &ClusteredDataset, rng: &mut R) -> Result<Vec<ClusteredDataset>> {
        match self {
            Imputer::Jm(spec) => jm_impute(d, spec, rng),
            Imputer::Fcs(spec) => fcs_impute(d, spec, rng),
        }
    }

    pub fn m_imputations(&self) -> usize {
        match self {
            Imputer::Jm(s) => s.m_imputations,
            Imputer::Fcs(s) => s.m_imputations,
        }
    }
}

/// Every category of every variable with missing cells must be observed
/// somewhere, otherwise its parameters are unidentified.
pub(crate) fn check_identifiable(d: &ClusteredDataset) -> Result<()> {
    for v in Variable::ALL {
        if d.n_missing(v) == 0 {
            continue;
        }
        let n_cat = d.n_categories[v.index()] as usize;
        let mut seen = vec![false; n_cat];
        for (_, m) in d.members() {
            if let Some(c) = m.get(v) {
                seen[c as usize - 1] = true;
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Unidentified(format!("category {} of {v} is never observed", c + 1)));
        }
    }
    Ok(())
}

/// Cluster sizes centered and scaled by their mean and SD across clusters.
/// Constant sizes map to zero.
pub(crate) fn standardized_sizes(d: &ClusteredDataset) -> Vec<f64> {
    let n = d.clusters.len() as f64;
    let mean = d.clusters.iter().map(|c| c.size as f64).sum::<f64>() / n;
    let var = d.clusters.iter().map(|c| (c.size as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let sd = var.sqrt();
    d.clusters.iter().map(|c| if sd > 0.0 { (c.size as f64 - mean) / sd } else { 0.0 }).collect()
}

/// Per-sweep parameter trace for convergence diagnostics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChainTrace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ChainTrace {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}
