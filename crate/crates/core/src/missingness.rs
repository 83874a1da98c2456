//! Logistic missingness models for deleting values from complete data.
//!
//! `logit P(R = 1) = α₀ + α₁x + α₂z + α₃y + α₄m₁ + α₅m₂ + α₆m₃`, with category
//! codes entering as their integers. `α₀` is calibrated on a pilot dataset to
//! hit a target missing rate.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Cluster, ClusteredDataset, Member, Variable, N_VARIABLES};
use crate::error::{Error, Result};
use crate::sampling::{expit, logit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Mcar,
    Mar,
    Mnar,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Mcar => "mcar",
            Mechanism::Mar => "mar",
            Mechanism::Mnar => "mnar",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcar" => Ok(Mechanism::Mcar),
            "mar" => Ok(Mechanism::Mar),
            "mnar" => Ok(Mechanism::Mnar),
            other => Err(Error::Config(format!("unknown mechanism {other:?} (expected mcar|mar|mnar)"))),
        }
    }
}

/// Missingness model for one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingnessSpec {
    pub mechanism: Mechanism,
    pub target_rate: f64,
    /// Coefficients on `(x, z, y, m1, m2, m3)`.
    #[serde(default)]
    pub alpha: [f64; 6],
    /// Intercept; `None` until calibrated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha0: Option<f64>,
}

/// Magnitude of every active coefficient in [`MissingnessSpec::mar`] and
/// [`MissingnessSpec::mnar`].
pub const DEFAULT_COEFFICIENT: f64 = 0.2;

const MAX_BRACKET: f64 = 160.0;

/// Outcome coefficients for the reference MAR scenarios: deletion leans
/// hard on the auxiliaries, which share the outcome's random effect, and on
/// both covariates. Complete-case fits of the default scenario are then
/// biased by roughly 40% for `eta1` and 47% for `beta1`.
pub const REFERENCE_MAR_ALPHA: [f64; 6] = [1.0, 1.0, 0.0, 1.8, 1.8, 1.8];

/// [`REFERENCE_MAR_ALPHA`] with the outcome's own coefficient switched on.
pub const REFERENCE_MNAR_ALPHA: [f64; 6] = [1.0, 1.0, 1.8, 1.8, 1.8, 1.8];

impl MissingnessSpec {
    pub fn none() -> Self {
        Self::mcar(0.0)
    }

    pub fn mcar(target_rate: f64) -> Self {
        MissingnessSpec { mechanism: Mechanism::Mcar, target_rate, alpha: [0.0; 6], alpha0: None }
    }

    /// MAR for `y`: every coefficient except the one on `y` set to `magnitude`.
    pub fn mar(target_rate: f64, magnitude: f64) -> Self {
        let m = magnitude;
        MissingnessSpec { mechanism: Mechanism::Mar, target_rate, alpha: [m, m, 0.0, m, m, m], alpha0: None }
    }

    /// MNAR for `y`: the MAR coefficients plus `magnitude` on `y` itself.
    pub fn mnar(target_rate: f64, magnitude: f64) -> Self {
        MissingnessSpec { mechanism: Mechanism::Mnar, target_rate, alpha: [magnitude; 6], alpha0: None }
    }

    pub fn with_alpha(mechanism: Mechanism, target_rate: f64, alpha: [f64; 6]) -> Self {
        MissingnessSpec { mechanism, target_rate, alpha, alpha0: None }
    }

    /// Checks the mechanism against the coefficients for the variable the
    /// spec deletes from: its own coefficient must be zero unless MNAR.
    pub fn check_for(&self, target: Variable) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_rate) {
            return Err(Error::Config(format!("target_rate={} outside [0, 1)", self.target_rate)));
        }
        if self.alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("alpha coefficients must be finite".into()));
        }
        let own = 2 + target.index();
        let others_active = self.alpha.iter().enumerate().any(|(k, &a)| k != own && a != 0.0);
        let ok = match self.mechanism {
            Mechanism::Mcar => self.alpha.iter().all(|&a| a == 0.0),
            Mechanism::Mar => self.alpha[own] == 0.0 && others_active,
            Mechanism::Mnar => self.alpha[own] != 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "alpha {:?} is inconsistent with mechanism {} for {target}",
                self.alpha, self.mechanism
            )))
        }
    }

    pub fn is_active(&self) -> bool {
        self.target_rate > 0.0
    }
}

/// Specs for `y`, `m1`, `m2`, `m3`. Variables left out of a config take
/// their value from [`MissingnessSet::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissingnessSet {
    pub y: MissingnessSpec,
    pub m1: MissingnessSpec,
    pub m2: MissingnessSpec,
    pub m3: MissingnessSpec,
}

impl Default for MissingnessSet {
    /// Reference MAR deletion of 20% of `y`.
    fn default() -> Self {
        Self::reference(Mechanism::Mar, 0.2)
    }
}

impl MissingnessSet {
    /// Outcome under `mechanism` at `y_rate`; auxiliaries MCAR at 30%, 30%, 10%.
    pub fn standard(mechanism: Mechanism, y_rate: f64, magnitude: f64) -> Self {
        Self::with_outcome(match mechanism {
            Mechanism::Mcar => MissingnessSpec::mcar(y_rate),
            Mechanism::Mar => MissingnessSpec::mar(y_rate, magnitude),
            Mechanism::Mnar => MissingnessSpec::mnar(y_rate, magnitude),
        })
    }

    /// Outcome under `mechanism` with the reference coefficients; auxiliaries
    /// as in [`MissingnessSet::standard`].
    pub fn reference(mechanism: Mechanism, y_rate: f64) -> Self {
        Self::with_outcome(match mechanism {
            Mechanism::Mcar => MissingnessSpec::mcar(y_rate),
            Mechanism::Mar => MissingnessSpec::with_alpha(Mechanism::Mar, y_rate, REFERENCE_MAR_ALPHA),
            Mechanism::Mnar => MissingnessSpec::with_alpha(Mechanism::Mnar, y_rate, REFERENCE_MNAR_ALPHA),
        })
    }

    fn with_outcome(y: MissingnessSpec) -> Self {
        MissingnessSet {
            y,
            m1: MissingnessSpec::mcar(0.3),
            m2: MissingnessSpec::mcar(0.3),
            m3: MissingnessSpec::mcar(0.1),
        }
    }

    pub fn none() -> Self {
        let s = MissingnessSpec::none();
        MissingnessSet { y: s.clone(), m1: s.clone(), m2: s.clone(), m3: s }
    }

    pub fn get(&self, v: Variable) -> &MissingnessSpec {
        match v {
            Variable::Y => &self.y,
            Variable::M1 => &self.m1,
            Variable::M2 => &self.m2,
            Variable::M3 => &self.m3,
        }
    }

    pub fn get_mut(&mut self, v: Variable) -> &mut MissingnessSpec {
        match v {
            Variable::Y => &mut self.y,
            Variable::M1 => &mut self.m1,
            Variable::M2 => &mut self.m2,
            Variable::M3 => &mut self.m3,
        }
    }

    pub fn check(&self) -> Result<()> {
        Variable::ALL.iter().try_for_each(|&v| self.get(v).check_for(v))
    }

    /// Fills in `alpha0` for every active spec that lacks one.
    pub fn calibrate(&mut self, pilot: &ClusteredDataset) -> Result<()> {
        for v in Variable::ALL {
            let spec = self.get_mut(v);
            if spec.is_active() && spec.alpha0.is_none() {
                spec.alpha0 = Some(calibrate_alpha0(pilot, &spec.alpha, spec.target_rate)?);
            }
        }
        Ok(())
    }
}

fn covariate_row(c: &Cluster, m: &Member) -> Option<[f64; 6]> {
    let mut row = [c.x, c.z, 0.0, 0.0, 0.0, 0.0];
    for k in 0..N_VARIABLES {
        row[2 + k] = f64::from(m.values[k]?);
    }
    Some(row)
}

fn linear_part(alpha: &[f64; 6], row: &[f64; 6]) -> f64 {
    alpha.iter().zip(row).map(|(a, v)| a * v).sum()
}

/// Deletion probability for one member given complete values.
#[allow(clippy::too_many_arguments)]
pub fn missing_prob(x: f64, z: f64, y: f64, m1: f64, m2: f64, m3: f64, alpha0: f64, alpha: &[f64; 6]) -> f64 {
    expit(alpha0 + linear_part(alpha, &[x, z, y, m1, m2, m3]))
}

/// Finds `α₀` so that the mean deletion probability over the pilot's members
/// equals `target_rate`.
///
/// With all slopes zero this is `logit(target_rate)` exactly; otherwise the
/// strictly increasing mean probability is bisected, starting from the
/// bracket `[−20, 20]` and doubling it (up to `±160`) if needed.
pub fn calibrate_alpha0(pilot: &ClusteredDataset, alpha: &[f64; 6], target_rate: f64) -> Result<f64> {
    if !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(Error::Calibration(format!("target rate {target_rate} outside (0, 1)")));
    }
    if alpha.iter().all(|&a| a == 0.0) {
        return Ok(logit(target_rate));
    }
    let linear: Vec<f64> = pilot
        .members()
        .map(|(c, m)| covariate_row(c, m).map(|row| linear_part(alpha, &row)))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Calibration("pilot dataset has missing values".into()))?;
    if linear.is_empty() {
        return Err(Error::Calibration("pilot dataset is empty".into()));
    }
    let mean_rate = |a0: f64| linear.iter().map(|l| expit(a0 + l)).sum::<f64>() / linear.len() as f64;
    // Start from [-20, 20] and widen when strong slopes push the root outside.
    let (mut lo, mut hi) = (-20.0, 20.0);
    while (mean_rate(lo) > target_rate || mean_rate(hi) < target_rate) && hi < MAX_BRACKET {
        lo *= 2.0;
        hi *= 2.0;
    }
    if mean_rate(lo) > target_rate || mean_rate(hi) < target_rate {
        return Err(Error::Calibration(format!(
            "target rate {target_rate} not attainable with alpha0 in [{lo}, {hi}] (range {:.4}..{:.4})",
            mean_rate(lo),
            mean_rate(hi)
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_rate(mid) < target_rate {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Deletes values independently per variable with probabilities computed from
/// the complete, pre-deletion values. Covariates and sizes are never touched.
///
/// Every active spec must be calibrated.
pub fn apply_missingness<R: Rng + ?Sized>(
    d: &ClusteredDataset,
    specs: &MissingnessSet,
    rng: &mut R,
) -> Result<ClusteredDataset> {
    let active: Vec<(Variable, f64, [f64; 6])> = Variable::ALL
        .iter()
        .filter_map(|&v| {
            let s = specs.get(v);
            s.is_active().then_some((v, s))
        })
        .map(|(v, s)| {
            s.alpha0
                .map(|a0| (v, a0, s.alpha))
                .ok_or_else(|| Error::Config(format!("missingness spec for {v} is not calibrated")))
        })
        .collect::<Result<_>>()?;
    let mut out = d.clone();
    if active.is_empty() {
        return Ok(out);
    }
    for c in &mut out.clusters {
        let (x, z) = (c.x, c.z);
        for m in &mut c.members {
            let complete = m.values;
            let mut row = [x, z, 0.0, 0.0, 0.0, 0.0];
            for k in 0..N_VARIABLES {
                row[2 + k] = complete[k]
                    .map(f64::from)
                    .ok_or_else(|| Error::Data("missingness must be applied to complete data".into()))?;
            }
            for (v, a0, alpha) in &active {
                let p = expit(a0 + linear_part(alpha, &row));
                if rng.random::<f64>() < p {
                    m.set(*v, None);
                }
            }
        }
    }
    Ok(out)
}
