//! Rubin's rules and Monte Carlo performance metrics.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Normal 97.5% quantile used for nominal 95% intervals.
pub const Z_975: f64 = 1.96;

#[derive(Debug, Clone, PartialEq)]
pub struct PooledFit {
    /// `Q̄`, the mean of the per-imputation estimates.
    pub estimates: Vec<f64>,
    /// `Ū`, the mean within-imputation covariance.
    pub within: DMatrix<f64>,
    /// `B`, the between-imputation covariance (divisor `M − 1`).
    pub between: DMatrix<f64>,
    /// `T = Ū + (1 + 1/M) B`.
    pub total: DMatrix<f64>,
    pub m: usize,
}

impl PooledFit {
    pub fn se(&self) -> Vec<f64> {
        self.total.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// Barnard–Rubin degrees of freedom per parameter given the complete-data
    /// degrees of freedom.
    pub fn barnard_rubin_df(&self, complete_df: f64) -> Vec<f64> {
        let m = self.m as f64;
        (0..self.estimates.len())
            .map(|k| {
                let b = self.between[(k, k)];
                let t = self.total[(k, k)];
                if b <= 0.0 || t <= 0.0 {
                    return complete_df;
                }
                let gamma = (1.0 + 1.0 / m) * b / t;
                let df_old = (m - 1.0) / (gamma * gamma);
                let df_obs = (complete_df + 1.0) / (complete_df + 3.0) * complete_df * (1.0 - gamma);
                df_old * df_obs / (df_old + df_obs)
            })
            .collect()
    }
}

/// Pools `M ≥ 2` (estimate, covariance) pairs by Rubin's rules.
pub fn rubin_pool(fits: &[(Vec<f64>, DMatrix<f64>)]) -> Result<PooledFit> {
    let m = fits.len();
    if m < 2 {
        return Err(Error::Dimension(format!("need at least two fits to pool, got {m}")));
    }
    let dim = fits[0].0.len();
    for (est, cov) in fits {
        if est.len() != dim || cov.nrows() != dim || cov.ncols() != dim {
            return Err(Error::Dimension(format!("fits of dimension {dim} and {}", est.len())));
        }
    }
    let mf = m as f64;
    let estimates: Vec<f64> = (0..dim).map(|k| fits.iter().map(|(e, _)| e[k]).sum::<f64>() / mf).collect();
    let mut within = DMatrix::zeros(dim, dim);
    let mut between = DMatrix::zeros(dim, dim);
    for (est, cov) in fits {
        within += cov;
        for i in 0..dim {
            for j in 0..dim {
                between[(i, j)] += (est[i] - estimates[i]) * (est[j] - estimates[j]);
            }
        }
    }
    within /= mf;
    between /= mf - 1.0;
    let total = &within + &between * (1.0 + 1.0 / mf);
    Ok(PooledFit { estimates, within, between, total, m })
}

/// One parameter's Monte Carlo summary for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub parameter: String,
    pub method: String,
    pub mean_est: f64,
    pub mean_se: f64,
    pub empirical_se: f64,
    pub rel_bias_pct: f64,
    pub cov_prob_pct: f64,
    pub mse: f64,
    pub n_reps_used: usize,
}

/// One replication's estimates and standard errors, with an optional
/// per-parameter critical value (defaults to 1.96).
#[derive(Debug, Clone, PartialEq)]
pub struct RepEstimate {
    pub estimates: Vec<f64>,
    pub ses: Vec<f64>,
    pub critical: Option<Vec<f64>>,
}

impl RepEstimate {
    pub fn new(estimates: Vec<f64>, ses: Vec<f64>) -> Self {
        RepEstimate { estimates, ses, critical: None }
    }
}

/// Two-sided 95% t critical values for the given degrees of freedom.
pub fn t_critical(df: &[f64]) -> Vec<f64> {
    df.iter()
        .map(|&v| match StudentsT::new(0.0, 1.0, v) {
            Ok(t) if v.is_finite() => t.inverse_cdf(0.975),
            _ => Z_975,
        })
        .collect()
}

/// Mean estimate, mean SE, empirical SE, relative bias `100 (mean − θ)/|θ|`,
/// 95% coverage and MSE for every parameter.
///
/// A single replication gives an empirical SE of zero.
pub fn compute_metrics(method: &str, names: &[String], reps: &[RepEstimate], truth: &[f64]) -> Result<Vec<MetricsRow>> {
    let dim = truth.len();
    if names.len() != dim {
        return Err(Error::Dimension(format!("{} names for {dim} parameters", names.len())));
    }
    if reps.is_empty() {
        return Err(Error::Data(format!("no usable replications for method {method}")));
    }
    for r in reps {
        if r.estimates.len() != dim || r.ses.len() != dim {
            return Err(Error::Dimension("replication dimension mismatch".into()));
        }
        if r.ses.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Data("standard errors must be positive".into()));
        }
    }
    let n = reps.len() as f64;
    Ok((0..dim)
        .map(|k| {
            let theta = truth[k];
            let mean_est = reps.iter().map(|r| r.estimates[k]).sum::<f64>() / n;
            let mean_se = reps.iter().map(|r| r.ses[k]).sum::<f64>() / n;
            let empirical_se = if reps.len() > 1 {
                (reps.iter().map(|r| (r.estimates[k] - mean_est).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            let covered = reps
                .iter()
                .filter(|r| {
                    let crit = r.critical.as_ref().map_or(Z_975, |c| c[k]);
                    (r.estimates[k] - theta).abs() <= crit * r.ses[k]
                })
                .count();
            let mse = reps.iter().map(|r| (r.estimates[k] - theta).powi(2)).sum::<f64>() / n;
            MetricsRow {
                parameter: names[k].clone(),
                method: method.to_string(),
                mean_est,
                mean_se,
                empirical_se,
                rel_bias_pct: 100.0 * (mean_est - theta) / theta.abs(),
                cov_prob_pct: 100.0 * covered as f64 / n,
                mse,
                n_reps_used: reps.len(),
            }
        })
        .collect())
}

/// Replications that produced no usable fit for a method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attrition {
    pub method: String,
    pub failed: usize,
    pub attempted: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub attrition: Vec<Attrition>,
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "parameter",
    "method",
    "mean_est",
    "mean_se",
    "empirical_se",
    "rel_bias_pct",
    "cov_prob_pct",
    "mse",
    "n_reps_used",
];

impl MetricsTable {
    pub fn row(&self, parameter: &str, method: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.parameter == parameter && r.method == method)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(METRICS_COLUMNS)?;
        for r in &self.rows {
            w.write_record(metrics_fields(r))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub(crate) fn metrics_fields(r: &MetricsRow) -> [String; 9] {
    [
        r.parameter.clone(),
        r.method.clone(),
        r.mean_est.to_string(),
        r.mean_se.to_string(),
        r.empirical_se.to_string(),
        r.rel_bias_pct.to_string(),
        r.cov_prob_pct.to_string(),
        r.mse.to_string(),
        r.n_reps_used.to_string(),
    ]
}
