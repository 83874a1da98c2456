//! Cluster-weighted GEE for the marginal proportional-odds model.
//!
//! Each ordinal response `y` is expanded into `C − 1` cumulative indicators
//! `U_c = 1{y ≤ c}` with means `μ_c = expit(η_c + β₁x + β₂z)`. Members within a
//! cluster are treated as independent (working independence); the `C − 1`
//! indicators of one member use their exact multinomial covariance. Each
//! cluster's contribution is weighted by `1/n_i`, and the robust covariance
//! is the sandwich `H⁻¹ M H⁻¹`.
//!
//! The analysis covariates are cluster level, so `μ`, `D` and `V⁻¹` are
//! computed once per cluster and only the indicator sums vary by member.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{param_names, strictly_increasing, Category, ClusteredDataset, ParamVector};
use crate::error::{Error, Result};
use crate::sampling::{expit, logit, symmetrize};

/// Number of cluster-level analysis covariates (`x`, `z`).
pub const N_SLOPES: usize = 2;

const MU_EPS: f64 = 1e-12;
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `1/n_i` with the cluster's recorded size.
    #[default]
    InverseClusterSize,
    /// `1/n_i` with the size before complete-case reduction.
    InverseOriginalSize,
    /// Plain GEE.
    Unweighted,
}

impl Weighting {
    fn weight(self, size: usize, original_size: usize) -> f64 {
        match self {
            Weighting::InverseClusterSize => 1.0 / size as f64,
            Weighting::InverseOriginalSize => 1.0 / original_size as f64,
            Weighting::Unweighted => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CwgeeOptions {
    pub weighting: Weighting,
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for CwgeeOptions {
    fn default() -> Self {
        CwgeeOptions { weighting: Weighting::InverseClusterSize, tol: 1e-8, max_iter: 100, max_halvings: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CwgeeFit {
    pub params: ParamVector,
    pub robust_cov: DMatrix<f64>,
    pub n_iterations: usize,
    pub converged: bool,
    pub weighting: Weighting,
    /// Largest absolute component of the estimating function at `params`.
    pub max_abs_score: f64,
}

impl CwgeeFit {
    pub fn robust_se(&self) -> Vec<f64> {
        self.robust_cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    pub fn report(&self) -> FitReport {
        let dim = self.params.len();
        FitReport {
            parameters: self.params.names(),
            estimates: self.params.to_vec(),
            robust_se: self.robust_se(),
            covariance: (0..dim).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|ij| self.robust_cov[ij]).collect(),
            dim,
            n_iterations: self.n_iterations,
            converged: self.converged,
            weighting: self.weighting,
        }
    }
}

/// JSON form of a fit; `covariance` is row-major `dim × dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub parameters: Vec<String>,
    pub estimates: Vec<f64>,
    pub robust_se: Vec<f64>,
    pub covariance: Vec<f64>,
    pub dim: usize,
    pub n_iterations: usize,
    pub converged: bool,
    pub weighting: Weighting,
}

/// Cumulative indicators `1{y ≤ c}` for `c = 1..C−1`.
pub fn binary_expand(y: Category, n_categories: u8) -> Result<Vec<u8>> {
    if y < 1 || y > n_categories {
        return Err(Error::CategoryRange { category: y, max: n_categories });
    }
    Ok((1..n_categories).map(|c| u8::from(y <= c)).collect())
}

/// `μ_c = expit(η_c + β₁x + β₂z)`.
pub fn marginal_means(params: &ParamVector, x: f64, z: f64) -> Vec<f64> {
    let eta = params.slopes[0] * x + params.slopes[1] * z;
    params.cutpoints.iter().map(|c| expit(c + eta)).collect()
}

/// Covariance of the cumulative indicators of one multinomial draw:
/// `V[c, c'] = μ_min(c,c') (1 − μ_max(c,c'))`.
pub fn multinomial_cov(mu: &[f64]) -> Result<DMatrix<f64>> {
    if let Some(m) = mu.iter().find(|&&m| !(m > MU_EPS && m < 1.0 - MU_EPS)) {
        return Err(Error::Singular(format!("mean {m} too close to 0 or 1")));
    }
    let q = mu.len();
    Ok(DMatrix::from_fn(q, q, |i, j| mu[i.min(j)] * (1.0 - mu[i.max(j)])))
}

/// Starting values: pooled observed cumulative log-odds, zero slopes.
pub fn initial_params(d: &ClusteredDataset) -> Result<ParamVector> {
    let counts = category_counts(d);
    let n_cat = counts.len();
    let total: usize = counts.iter().sum();
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Unidentified(format!("outcome category {} is never observed", c + 1)));
    }
    let mut cum = 0;
    let cutpoints = counts[..n_cat - 1]
        .iter()
        .map(|&k| {
            cum += k;
            logit(cum as f64 / total as f64)
        })
        .collect();
    Ok(ParamVector { cutpoints, slopes: vec![0.0; N_SLOPES] })
}

fn category_counts(d: &ClusteredDataset) -> Vec<usize> {
    let mut counts = vec![0usize; d.n_categories_y() as usize];
    for (_, m) in d.members() {
        if let Some(y) = m.y() {
            counts[y as usize - 1] += 1;
        }
    }
    counts
}

/// Weighted estimating function, its Fisher information `H`, and the
/// per-cluster score contributions.
struct Evaluation {
    score: DVector<f64>,
    info: DMatrix<f64>,
    cluster_scores: Vec<DVector<f64>>,
}

fn evaluate(d: &ClusteredDataset, params: &ParamVector, weighting: Weighting) -> Result<Evaluation> {
    let q = params.cutpoints.len();
    let dim = q + N_SLOPES;
    let mut score = DVector::zeros(dim);
    let mut info = DMatrix::zeros(dim, dim);
    let mut cluster_scores = Vec::with_capacity(d.clusters.len());
    let mut resid_sum = DVector::zeros(q);
    for c in &d.clusters {
        let mut n_obs = 0usize;
        resid_sum.fill(0.0);
        for y in c.members.iter().filter_map(|m| m.y()) {
            n_obs += 1;
            for k in 0..q {
                if (y as usize) <= k + 1 {
                    resid_sum[k] += 1.0;
                }
            }
        }
        if n_obs == 0 {
            cluster_scores.push(DVector::zeros(dim));
            continue;
        }
        let mu = marginal_means(params, c.x, c.z);
        for k in 0..q {
            resid_sum[k] -= n_obs as f64 * mu[k];
        }
        let v = multinomial_cov(&mu)?;
        let v_inv = v
            .cholesky()
            .ok_or_else(|| Error::Singular("working covariance is not positive definite".into()))?
            .inverse();
        // D[c, ·] = μ_c(1 − μ_c) · (e_c, x, z)
        let mut dmat = DMatrix::zeros(q, dim);
        for k in 0..q {
            let g = mu[k] * (1.0 - mu[k]);
            dmat[(k, k)] = g;
            dmat[(k, q)] = g * c.x;
            dmat[(k, q + 1)] = g * c.z;
        }
        let dt_vinv = dmat.transpose() * v_inv;
        let w = weighting.weight(c.size, c.original_size);
        let s_i = &dt_vinv * &resid_sum * w;
        info += (&dt_vinv * &dmat) * (w * n_obs as f64);
        score += &s_i;
        cluster_scores.push(s_i);
    }
    symmetrize(&mut info);
    Ok(Evaluation { score, info, cluster_scores })
}

/// Value of the weighted estimating function at `params`.
pub fn estimating_function(d: &ClusteredDataset, params: &ParamVector, weighting: Weighting) -> Result<Vec<f64>> {
    Ok(evaluate(d, params, weighting)?.score.iter().copied().collect())
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = eig.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let min = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn solve_info(info: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let cond = condition_number(info);
    if cond > MAX_CONDITION {
        return Err(Error::Singular(format!("information matrix condition number {cond:.3e} (separation?)")));
    }
    let chol = info
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("information matrix is not positive definite".into()))?;
    Ok(chol.solve(rhs))
}

fn check_solvable(d: &ClusteredDataset) -> Result<()> {
    let usable = d.clusters.iter().filter(|c| c.members.iter().any(|m| m.y().is_some())).count();
    if usable < 2 {
        return Err(Error::TooFewClusters { needed: 2, found: usable });
    }
    if d.n_categories_y() < 2 {
        return Err(Error::Data("outcome needs at least two categories".into()));
    }
    Ok(())
}

/// Fisher scoring for the CWGEE.
///
/// Steps are halved (up to `max_halvings` times) when they would break the
/// cutpoint ordering or increase the estimating-function norm. A fit that
/// runs out of iterations is returned with `converged = false`.
pub fn cwgee_solve(d: &ClusteredDataset, init: Option<&ParamVector>, opts: &CwgeeOptions) -> Result<CwgeeFit> {
    check_solvable(d)?;
    let start = initial_params(d)?;
    let mut params = match init {
        Some(p) => {
            p.check()?;
            if p.cutpoints.len() != start.cutpoints.len() || p.slopes.len() != N_SLOPES {
                return Err(Error::Dimension("initial values do not match the data".into()));
            }
            p.clone()
        }
        None => start,
    };
    let q = params.cutpoints.len();
    let mut eval = evaluate(d, &params, opts.weighting)?;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let delta = solve_info(&eval.info, &eval.score)?;
        let norm = eval.score.norm();
        let mut step = 1.0;
        let mut accepted = None;
        for h in 0..=opts.max_halvings {
            let values: Vec<f64> = params.to_vec().iter().zip(delta.iter()).map(|(p, d)| p + step * d).collect();
            let cand = ParamVector::from_slice(&values, q);
            if values.iter().all(|v| v.is_finite()) && strictly_increasing(&cand.cutpoints) {
                if let Ok(e) = evaluate(d, &cand, opts.weighting) {
                    if e.score.norm() <= norm * (1.0 + 1e-6) + 1e-12 || h == opts.max_halvings {
                        accepted = Some((cand, e));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((cand, e)) = accepted else {
            break;
        };
        params = cand;
        eval = e;
        if delta.amax() * step < opts.tol {
            converged = true;
            break;
        }
    }
    let robust_cov = sandwich_from(&eval)?;
    Ok(CwgeeFit {
        params,
        robust_cov,
        n_iterations: iterations,
        converged,
        weighting: opts.weighting,
        max_abs_score: eval.score.amax(),
    })
}

fn sandwich_from(eval: &Evaluation) -> Result<DMatrix<f64>> {
    let dim = eval.score.len();
    let mut meat = DMatrix::zeros(dim, dim);
    for s in &eval.cluster_scores {
        meat += s * s.transpose();
    }
    let identity = DMatrix::identity(dim, dim);
    let cond = condition_number(&eval.info);
    if cond > MAX_CONDITION {
        return Err(Error::Singular(format!("information matrix condition number {cond:.3e}")));
    }
    let h_inv = eval
        .info
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("information matrix is not positive definite".into()))?
        .solve(&identity);
    let mut psi = &h_inv * meat * &h_inv;
    symmetrize(&mut psi);
    Ok(psi)
}

/// Sandwich covariance `H⁻¹ M H⁻¹` evaluated at `params`.
pub fn sandwich_variance(d: &ClusteredDataset, params: &ParamVector, weighting: Weighting) -> Result<DMatrix<f64>> {
    sandwich_from(&evaluate(d, params, weighting)?)
}

/// Parameter labels for a fit on `d`.
pub fn parameter_names(d: &ClusteredDataset) -> Vec<String> {
    param_names(d.n_categories_y() as usize - 1, N_SLOPES)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cluster, Member};
    use crate::datagen::{simulate_dataset, GenConfig};
    use proptest::prelude::*;

    #[test]
    fn expansion_examples() {
        assert_eq!(binary_expand(1, 4).unwrap(), vec![1, 1, 1]);
        assert_eq!(binary_expand(4, 4).unwrap(), vec![0, 0, 0]);
        assert_eq!(binary_expand(2, 4).unwrap(), vec![0, 1, 1]);
        assert!(binary_expand(0, 4).is_err());
        assert!(binary_expand(5, 4).is_err());
    }

    proptest! {
        #[test]
        fn expansion_roundtrip(c in 2u8..10, y_off in 0u8..10) {
            let y = 1 + y_off % c;
            let u = binary_expand(y, c).unwrap();
            prop_assert!(u.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(1 + u.iter().filter(|&&b| b == 0).count() as u8, y);
        }

        #[test]
        fn cov_symmetric(mut mu in proptest::collection::vec(0.001f64..0.999, 1..6)) {
            mu.sort_by(f64::total_cmp);
            let v = multinomial_cov(&mu).unwrap();
            prop_assert_eq!(v.clone(), v.transpose());
        }
    }

    #[test]
    fn means_reference_point() {
        let p = ParamVector { cutpoints: vec![-0.4, 0.8, 1.6], slopes: vec![-0.2, -0.5] };
        let mu = marginal_means(&p, 0.0, 0.0);
        let expected = [0.401_312_339_887_548, 0.689_974_481_127_612, 0.832_018_385_133_924];
        for (a, e) in mu.iter().zip(expected) {
            assert!((a - e).abs() < 1e-14);
        }
        let flat = ParamVector { cutpoints: vec![-0.4, 0.8], slopes: vec![0.0, 0.0] };
        assert_eq!(marginal_means(&flat, 3.0, 1.0), marginal_means(&flat, -2.0, 0.0));
        let big = ParamVector { cutpoints: vec![0.0, 50.0], slopes: vec![0.0, 0.0] };
        assert!(1.0 - marginal_means(&big, 0.0, 0.0)[1] < 1e-20);
    }

    #[test]
    fn cov_examples() {
        let v = multinomial_cov(&[0.3, 0.6, 0.8]).unwrap();
        assert!((v[(0, 1)] - 0.12).abs() < 1e-15);
        assert!((v[(0, 0)] - 0.21).abs() < 1e-15);
        let b = multinomial_cov(&[0.25]).unwrap();
        assert_eq!(b[(0, 0)], 0.1875);
        assert!(multinomial_cov(&[0.0, 0.5]).is_err());
        assert!(multinomial_cov(&[0.5, 1.0]).is_err());
    }

    fn data(n: usize, seed: u64) -> ClusteredDataset {
        simulate_dataset(&GenConfig { n_clusters: n, ..GenConfig::default() }, seed).unwrap()
    }

    #[test]
    fn converged_fit_solves_the_equations() {
        let d = data(150, 1);
        let fit = cwgee_solve(&d, None, &CwgeeOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.max_abs_score < 1e-6);
        let s = estimating_function(&d, &fit.params, Weighting::InverseClusterSize).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-6));
        assert!(strictly_increasing(&fit.params.cutpoints));
        let cov = &fit.robust_cov;
        assert!((cov - cov.transpose()).amax() < 1e-12);
        assert!(cov.diagonal().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn equal_sizes_make_weighting_irrelevant() {
        let mut d = data(80, 2);
        for c in &mut d.clusters {
            c.members.truncate(1);
            while c.members.len() < 3 {
                let m = c.members[0].clone();
                c.members.push(m);
            }
            c.members[1].values[0] = Some(1 + (c.id % 4) as u8);
            c.size = 3;
            c.original_size = 3;
        }
        let w = cwgee_solve(&d, None, &CwgeeOptions::default()).unwrap();
        let u = cwgee_solve(&d, None, &CwgeeOptions { weighting: Weighting::Unweighted, ..Default::default() }).unwrap();
        for (a, b) in w.params.to_vec().iter().zip(u.params.to_vec()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn duplicating_clusters_halves_the_sandwich() {
        let d = data(60, 3);
        let fit = cwgee_solve(&d, None, &CwgeeOptions::default()).unwrap();
        let mut doubled = d.clone();
        for c in &d.clusters {
            let mut copy = c.clone();
            copy.id += 10_000;
            doubled.clusters.push(copy);
        }
        let psi = sandwich_variance(&doubled, &fit.params, Weighting::InverseClusterSize).unwrap();
        let expected = &fit.robust_cov * 0.5;
        assert!((psi - &expected).amax() < 1e-12 * (1.0 + expected.amax()));
    }

    #[test]
    fn rescaling_x_rescales_its_slope() {
        let d = data(120, 4);
        let s = 3.0;
        let mut scaled = d.clone();
        for c in &mut scaled.clusters {
            c.x *= s;
        }
        let a = cwgee_solve(&d, None, &CwgeeOptions::default()).unwrap();
        let b = cwgee_solve(&scaled, None, &CwgeeOptions::default()).unwrap();
        assert!((a.params.slopes[0] / s - b.params.slopes[0]).abs() < 1e-6);
        for (x, y) in a.params.cutpoints.iter().zip(&b.params.cutpoints) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_outcomes_only_affect_weights() {
        let mut d = data(40, 5);
        d.clusters[0].members.push(Member::new(None, Some(1), Some(1), Some(1)));
        d.clusters[0].size += 1;
        d.clusters[0].original_size += 1;
        let fit = cwgee_solve(&d, None, &CwgeeOptions::default()).unwrap();
        assert!(fit.converged);
    }

    #[test]
    fn unobserved_category_is_unidentified() {
        let clusters = (0..5)
            .map(|i| Cluster::new(i, i as f64, 0.0, vec![Member::new(Some(1 + (i % 3) as u8), None, None, None)]))
            .collect();
        let d = ClusteredDataset::new(clusters, [4, 4, 4, 4]);
        assert!(matches!(cwgee_solve(&d, None, &CwgeeOptions::default()), Err(Error::Unidentified(_))));
    }

    #[test]
    fn needs_two_clusters() {
        let d = ClusteredDataset::new(
            vec![Cluster::new(1, 0.0, 0.0, (1..=4).map(|y| Member::new(Some(y), None, None, None)).collect())],
            [4, 4, 4, 4],
        );
        assert!(matches!(cwgee_solve(&d, None, &CwgeeOptions::default()), Err(Error::TooFewClusters { .. })));
    }

    #[test]
    fn report_is_row_major() {
        let d = data(50, 6);
        let fit = cwgee_solve(&d, None, &CwgeeOptions::default()).unwrap();
        let r = fit.report();
        assert_eq!(r.parameters, vec!["eta1", "eta2", "eta3", "beta1", "beta2"]);
        assert_eq!(r.covariance.len(), 25);
        assert_eq!(r.covariance[1], fit.robust_cov[(0, 1)]);
        assert_eq!(r.covariance[5], fit.robust_cov[(1, 0)]);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"converged\":true"));
    }
}
