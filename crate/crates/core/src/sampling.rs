//! Distribution helpers shared by the generator and the Gibbs samplers.

use std::f64::consts::SQRT_2;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

/// Standard normal CDF, accurate in both tails.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal quantile.
pub fn norm_ppf(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else if p < 0.5 {
        -SQRT_2 * erfc_inv(2.0 * p)
    } else {
        SQRT_2 * erfc_inv(2.0 * (1.0 - p))
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draw from `N(mean, sd²)` restricted to `(lo, hi)`; either bound may be infinite.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    let z = std_truncated(rng, a, b);
    (mean + sd * z).clamp(lo, hi)
}

/// Standard normal restricted to `(a, b)`.
pub fn std_truncated<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    if !(a < b) {
        // empty or degenerate interval; collapse onto the boundary
        return if a.is_finite() { a } else { b };
    }
    if a >= 0.0 {
        right_tail(rng, a, b)
    } else if b <= 0.0 {
        -right_tail(rng, -b, -a)
    } else {
        let pa = norm_cdf(a);
        let pb = norm_cdf(b);
        let u: f64 = rng.random();
        norm_ppf(pa + u * (pb - pa)).clamp(a, b)
    }
}

/// `0 <= c < d <= inf`.
fn right_tail<R: Rng + ?Sized>(rng: &mut R, c: f64, d: f64) -> f64 {
    if c < 5.0 {
        // upper-tail probabilities keep full relative precision
        let qc = norm_cdf(-c);
        let qd = norm_cdf(-d);
        let u: f64 = rng.random();
        return (-norm_ppf(qd + u * (qc - qd))).clamp(c, d);
    }
    if d - c < 1.0 / c {
        // narrow far-tail interval: uniform proposal, acceptance >= e^-1.5
        loop {
            let z = c + (d - c) * rng.random::<f64>();
            let u: f64 = rng.random();
            if u.ln() <= -0.5 * (z * z - c * c) {
                return z;
            }
        }
    }
    // Robert (1995) translated-exponential rejection
    let lambda = 0.5 * (c + (c * c + 4.0).sqrt());
    loop {
        let u: f64 = rng.random();
        let z = c - (1.0 - u).ln() / lambda;
        if z > d {
            continue;
        }
        let v: f64 = rng.random();
        if v.ln() <= -0.5 * (z - lambda) * (z - lambda) {
            return z;
        }
    }
}

/// Inverse-gamma draw with density ∝ x^{-shape-1} exp(-scale/x).
pub fn inverse_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, scale: f64) -> f64 {
    let g = Gamma::new(shape, 1.0 / scale).expect("positive inverse-gamma parameters");
    1.0 / g.sample(rng)
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Singular("matrix is not positive definite".into()))
}

/// Wishart draw `W ~ W(scale, df)` via the Bartlett decomposition.
pub fn wishart<R: Rng + ?Sized>(rng: &mut R, scale: &DMatrix<f64>, df: f64) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    if df <= (p as f64) - 1.0 {
        return Err(Error::Domain(format!("Wishart df {df} too small for dimension {p}")));
    }
    let l = cholesky(scale)?;
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).expect("positive chi-square df");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = std_normal(rng);
        }
    }
    let la = l * a;
    Ok(&la * la.transpose())
}

/// Inverse-Wishart draw `Σ ~ IW(scale, df)`, i.e. `Σ⁻¹ ~ W(scale⁻¹, df)`.
pub fn inverse_wishart<R: Rng + ?Sized>(rng: &mut R, scale: &DMatrix<f64>, df: f64) -> Result<DMatrix<f64>> {
    let scale_inv = spd_inverse(scale)?;
    let w = wishart(rng, &scale_inv, df)?;
    let mut sigma = spd_inverse(&w)?;
    symmetrize(&mut sigma);
    Ok(sigma)
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("matrix is not positive definite".into()))?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Draw from `N(P⁻¹ b, P⁻¹)` given a precision matrix `P` and vector `b`.
pub fn normal_from_precision<R: Rng + ?Sized>(
    rng: &mut R,
    precision: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Sampler("precision matrix lost positive definiteness".into()))?;
    let mean = chol.solve(b);
    let z = DVector::from_fn(b.len(), |_, _| std_normal(rng));
    // L Lᵀ = P, so Lᵀ x = z gives Cov(x) = P⁻¹
    let x = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Sampler("triangular solve failed".into()))?;
    Ok(mean + x)
}
