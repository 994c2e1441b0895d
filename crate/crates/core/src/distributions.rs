//! Concrete, Dirichlet and Gumbel distributions on (or feeding) the probability simplex.
//!
//! Densities are evaluated in log space throughout. A Concrete location is carried as
//! its logarithm (the classifier logits), so `α = exp(logits)` is never formed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::special::{ln_gamma_raw, lse};
use crate::numcore::{ln_factorial, Rng};

/// Smallest value a sampled simplex coordinate is allowed to take.
pub const PROB_FLOOR: f64 = 1e-300;

const SUM_TOLERANCE: f64 = 1e-9;

/// A point on the probability simplex with at least two coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVector::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::arg(format!(
                "probability vector needs K >= 2, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("probability entry {v} outside [0, 1]")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::domain(format!("probabilities sum to {sum}")));
        }
        Ok(ProbVector(values))
    }

    pub(crate) fn new_unchecked(values: Vec<f64>) -> Self {
        debug_assert!((values.iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
        ProbVector(values)
    }

    pub fn uniform(k: usize) -> Result<Self> {
        ProbVector::new(vec![1.0 / k as f64; k])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn is_interior(&self) -> bool {
        self.0.iter().all(|&v| v > 0.0)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Location (as `ln α`) and temperature `λ` of a Concrete distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcreteParams {
    log_location: Vec<f64>,
    temperature: f64,
}

impl ConcreteParams {
    pub fn new(log_location: Vec<f64>, temperature: f64) -> Result<Self> {
        if log_location.len() < 2 {
            return Err(Error::arg("Concrete distribution needs K >= 2"));
        }
        if log_location.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite log-location"));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::domain(format!("temperature must be > 0, got {temperature}")));
        }
        Ok(ConcreteParams {
            log_location,
            temperature,
        })
    }

    pub fn log_location(&self) -> &[f64] {
        &self.log_location
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn dim(&self) -> usize {
        self.log_location.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    concentration: Vec<f64>,
}

impl DirichletParams {
    pub fn new(concentration: Vec<f64>) -> Result<Self> {
        if concentration.len() < 2 {
            return Err(Error::arg("Dirichlet distribution needs K >= 2"));
        }
        if concentration.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::domain("Dirichlet concentrations must be finite and > 0"));
        }
        Ok(DirichletParams { concentration })
    }

    /// `β · 1_K`
    pub fn symmetric(k: usize, beta: f64) -> Result<Self> {
        DirichletParams::new(vec![beta; k])
    }

    pub fn concentration(&self) -> &[f64] {
        &self.concentration
    }
}

fn check_dims(pi: &ProbVector, k: usize) -> Result<()> {
    if pi.len() != k {
        return Err(Error::arg(format!(
            "probability vector has {} entries, parameters have {k}",
            pi.len()
        )));
    }
    Ok(())
}

/// `ln Cn(π | α, λ)`.
///
/// Every `π_k` must be strictly positive: the density is undefined on the boundary.
pub fn concrete_log_density(pi: &ProbVector, params: &ConcreteParams) -> Result<f64> {
    check_dims(pi, params.dim())?;
    if let Some(v) = pi.values().iter().find(|&&v| v <= 0.0) {
        return Err(Error::domain(format!("Concrete density needs interior points, got {v}")));
    }
    let log_pi: Vec<f64> = pi.values().iter().map(|v| v.ln()).collect();
    Ok(concrete_log_density_from_logs(&log_pi, params))
}

/// Same as [`concrete_log_density`] but from `ln π`, which lets samples that would
/// underflow in probability space still be scored exactly.
pub(crate) fn concrete_log_density_from_logs(log_pi: &[f64], params: &ConcreteParams) -> f64 {
    let k = log_pi.len();
    let lambda = params.temperature;
    let mut per_factor = 0.0;
    let mut inner = Vec::with_capacity(k);
    for (&la, &lp) in params.log_location.iter().zip(log_pi) {
        per_factor += la - (lambda + 1.0) * lp;
        inner.push(la - lambda * lp);
    }
    ln_factorial(k - 1) + (k as f64 - 1.0) * lambda.ln() + per_factor - k as f64 * lse(&inner)
}

/// Draws `ln π` with `π = softmax((ln α + G) / λ)`, `G` standard Gumbel.
pub(crate) fn concrete_sample_log(params: &ConcreteParams, rng: &mut Rng) -> Vec<f64> {
    let mut z: Vec<f64> = params
        .log_location
        .iter()
        .map(|&la| (la + gumbel_one(rng)) / params.temperature)
        .collect();
    let norm = lse(&z);
    for v in &mut z {
        *v -= norm;
    }
    z
}

/// One draw from the Concrete distribution via the Gumbel reparameterization.
///
/// Coordinates that underflow are floored at [`PROB_FLOOR`].
pub fn concrete_sample(params: &ConcreteParams, rng: &mut Rng) -> ProbVector {
    let log_pi = concrete_sample_log(params, rng);
    ProbVector::new_unchecked(log_pi.iter().map(|v| v.exp().max(PROB_FLOOR)).collect())
}

/// Monte-Carlo mean of `p` Concrete draws.
pub fn concrete_mean_mc(params: &ConcreteParams, p: usize, rng: &mut Rng) -> Result<ProbVector> {
    if p == 0 {
        return Err(Error::arg("sample count must be at least 1"));
    }
    let mut acc = vec![0.0; params.dim()];
    for _ in 0..p {
        let s = concrete_sample(params, rng);
        for (a, v) in acc.iter_mut().zip(s.values()) {
            *a += v;
        }
    }
    Ok(ProbVector::new_unchecked(acc.into_iter().map(|a| a / p as f64).collect()))
}

/// `ln Dir(π | μ)`.
pub fn dirichlet_log_density(pi: &ProbVector, params: &DirichletParams) -> Result<f64> {
    check_dims(pi, params.concentration.len())?;
    if !pi.is_interior() {
        return Err(Error::domain("Dirichlet density needs interior points"));
    }
    let mu = &params.concentration;
    let total: f64 = mu.iter().sum();
    let mut out = ln_gamma_raw(total);
    for (&m, &p) in mu.iter().zip(pi.values()) {
        out += (m - 1.0) * p.ln() - ln_gamma_raw(m);
    }
    Ok(out)
}

/// Gamma(shape, 1) by Marsaglia–Tsang; shapes below one are boosted by `U^{1/shape}`.
fn sample_gamma(shape: f64, rng: &mut Rng) -> f64 {
    if shape < 1.0 {
        let u = rng.uniform();
        return sample_gamma(shape + 1.0, rng) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.normal();
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = rng.uniform();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// One Dirichlet draw: normalized independent gamma variates. Draws with an exactly
/// zero coordinate are rejected so every output is interior.
pub fn dirichlet_sample(params: &DirichletParams, rng: &mut Rng) -> ProbVector {
    loop {
        let g: Vec<f64> = params
            .concentration
            .iter()
            .map(|&m| sample_gamma(m, rng))
            .collect();
        let total: f64 = g.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            continue;
        }
        let p: Vec<f64> = g.iter().map(|v| v / total).collect();
        if p.iter().all(|&v| v > 0.0) {
            return ProbVector::new_unchecked(p);
        }
    }
}

#[inline]
fn gumbel_one(rng: &mut Rng) -> f64 {
    let u = rng.uniform().max(PROB_FLOOR);
    -(-u.ln()).ln()
}

/// `n` standard Gumbel draws, `−ln(−ln U)` with `U` floored away from zero.
pub fn gumbel_sample(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gumbel_one(rng)).collect()
}
