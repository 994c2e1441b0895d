use crate::distributions::ProbVector;
use crate::error::{Error, Result};
use crate::numcore::special::{ln_gamma_raw, lse};
use crate::numcore::{GradTape, Tensor, Var};

/// Bound on `|ĝ_k / t|` before exponentiation in the Dirichlet baseline.
pub const DIRICHLET_EXPONENT_CLAMP: f64 = 300.0;

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::arg(format!("{} label(s) for {} logit row(s)", labels.len(), logits.rows())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::arg(format!("label {y} out of range for {} classes", logits.cols())));
    }
    Ok(())
}

/// `−mean_n (ĝ_{y_n} − ln Σ_k e^{ĝ_k})`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    scaled_nll(logits, labels, 1.0)
}

/// Cross-entropy of `softmax(logits / t)`.
pub fn scaled_nll(logits: &Tensor, labels: &[usize], t: f64) -> Result<f64> {
    check_labels(logits, labels)?;
    let mut scaled = vec![0.0; logits.cols()];
    let mut total = 0.0;
    for (row, &y) in logits.row_iter().zip(labels) {
        for (s, g) in scaled.iter_mut().zip(row) {
            *s = g / t;
        }
        let top = scaled[y];
        total += if scaled.iter().all(|&v| v <= top) {
            // ln(1 + Σ_{i≠y} e^{s_i − s_y}) keeps precision for confident rows
            let rest: f64 = scaled.iter().enumerate().filter(|(i, _)| *i != y).map(|(_, v)| (v - top).exp()).sum();
            rest.ln_1p()
        } else {
            lse(&scaled) - top
        };
    }
    Ok(total / labels.len() as f64)
}

fn check_simplex_batch(labels: &[ProbVector], logits: &Tensor, temps: &[f64]) -> Result<()> {
    if labels.is_empty() || labels.len() != logits.rows() || temps.len() != labels.len() {
        return Err(Error::arg("labels, logits and temperatures disagree in length"));
    }
    for p in labels {
        if p.len() != logits.cols() {
            return Err(Error::arg("label width differs from logit width"));
        }
        if !p.is_interior() {
            return Err(Error::domain("label lies on the simplex boundary"));
        }
    }
    if temps.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(Error::domain("temperatures must be positive"));
    }
    Ok(())
}

/// Concrete negative log-likelihood of interior labels, without the `ln (K−1)!`
/// constant:
///
/// `−(K−1) ln λ − Σ_k ĝ_k + (λ+1) Σ_k ln π̃_k + K · ln Σ_i exp(ĝ_i − λ ln π̃_i)`,
/// averaged over the batch.
pub fn sts_nll(labels: &[ProbVector], logits: &Tensor, temperatures: &[f64]) -> Result<f64> {
    check_simplex_batch(labels, logits, temperatures)?;
    let k = logits.cols() as f64;
    let mut z = vec![0.0; logits.cols()];
    let mut total = 0.0;
    for ((p, g), &lam) in labels.iter().zip(logits.row_iter()).zip(temperatures) {
        let mut sum_ln_pi = 0.0;
        for ((zi, &gi), &pi) in z.iter_mut().zip(g).zip(p.values()) {
            let l = pi.ln();
            sum_ln_pi += l;
            *zi = gi - lam * l;
        }
        total += -(k - 1.0) * lam.ln() - g.iter().sum::<f64>() + (lam + 1.0) * sum_ln_pi + k * lse(&z);
    }
    Ok(total / labels.len() as f64)
}

/// Dirichlet negative log-likelihood with concentrations `μ_k = exp(ĝ_k / t)`:
///
/// `−ln Γ(Σ μ) + Σ ln Γ(μ_k) − Σ (μ_k − 1) ln π̃_k`, averaged over the batch.
pub fn dirichlet_ts_nll(labels: &[ProbVector], logits: &Tensor, temperatures: &[f64]) -> Result<f64> {
    check_simplex_batch(labels, logits, temperatures)?;
    let c = DIRICHLET_EXPONENT_CLAMP;
    let mut total = 0.0;
    for ((p, g), &t) in labels.iter().zip(logits.row_iter()).zip(temperatures) {
        let mut sum_mu = 0.0;
        let mut row = 0.0;
        for (&gi, &pi) in g.iter().zip(p.values()) {
            let mu = (gi / t).clamp(-c, c).exp();
            sum_mu += mu;
            row += ln_gamma_raw(mu) - (mu - 1.0) * pi.ln();
        }
        total += row - ln_gamma_raw(sum_mu);
    }
    let v = total / labels.len() as f64;
    if v.is_nan() {
        return Err(Error::numeric("Dirichlet loss is NaN"));
    }
    Ok(v)
}

pub(crate) fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        data[i * k + y] = 1.0;
    }
    Tensor::from_parts(labels.len(), k, data)
}

/// Records the cross-entropy of tape logits against one-hot targets.
pub(crate) fn cross_entropy_tape(tape: &mut GradTape, logits: Var, targets: &Tensor) -> Var {
    let t = tape.constant(targets.clone());
    let picked = tape.mul(t, logits);
    let picked = tape.row_sum(picked);
    let norm = tape.row_log_sum_exp(logits);
    let per = tape.sub(norm, picked);
    tape.mean(per)
}

/// Records the Concrete loss for a `[n, 1]` temperature column.
pub(crate) fn sts_nll_tape(tape: &mut GradTape, logits: &Tensor, log_labels: &Tensor, lam: Var) -> Var {
    let k = logits.cols() as f64;
    let n = logits.rows();
    let mut fixed = Vec::with_capacity(n);
    let mut sum_ln_pi = Vec::with_capacity(n);
    for (g, l) in logits.row_iter().zip(log_labels.row_iter()) {
        fixed.push(-g.iter().sum::<f64>());
        sum_ln_pi.push(l.iter().sum::<f64>());
    }
    let fixed = tape.constant(Tensor::from_parts(n, 1, fixed));
    let sum_ln_pi = tape.constant(Tensor::from_parts(n, 1, sum_ln_pi));
    let g = tape.constant(logits.clone());
    let l = tape.constant(log_labels.clone());

    let ln_lam = tape.ln(lam);
    let t1 = tape.scale(ln_lam, -(k - 1.0));
    let lam1 = tape.add_scalar(lam, 1.0);
    let t3 = tape.mul(lam1, sum_ln_pi);
    let lam_l = tape.mul_col(l, lam);
    let z = tape.sub(g, lam_l);
    let z = tape.row_log_sum_exp(z);
    let t4 = tape.scale(z, k);
    let a = tape.add(t1, fixed);
    let a = tape.add(a, t3);
    let a = tape.add(a, t4);
    tape.mean(a)
}

/// Records the Dirichlet baseline loss for a `[n, 1]` temperature column.
pub(crate) fn dirichlet_ts_tape(tape: &mut GradTape, logits: &Tensor, log_labels: &Tensor, t: Var) -> Var {
    let c = DIRICHLET_EXPONENT_CLAMP;
    let g = tape.constant(logits.clone());
    let l = tape.constant(log_labels.clone());
    let e = tape.div_col(g, t);
    let e = tape.clamp_max(e, c);
    let e = tape.clamp_min(e, -c);
    let mu = tape.exp(e);
    let sum_mu = tape.row_sum(mu);
    let lg_sum = tape.ln_gamma(sum_mu);
    let lg = tape.ln_gamma(mu);
    let lg = tape.row_sum(lg);
    let mu1 = tape.add_scalar(mu, -1.0);
    let cross = tape.mul(mu1, l);
    let cross = tape.row_sum(cross);
    let a = tape.sub(lg, lg_sum);
    let a = tape.sub(a, cross);
    tape.mean(a)
}

pub(crate) fn log_label_matrix(labels: &[ProbVector]) -> Tensor {
    let k = labels.first().map_or(0, ProbVector::len);
    let data = labels.iter().flat_map(|p| p.values().iter().map(|v| v.ln())).collect();
    Tensor::from_parts(labels.len(), k, data)
}
