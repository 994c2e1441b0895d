//! Confidence, calibration error, simplex uncertainty, and OOD ranking scores.

use serde::{Deserialize, Serialize};

use crate::calibrate::DIRICHLET_EXPONENT_CLAMP;
use crate::distributions::{concrete_log_density_from_logs, concrete_sample_log, ConcreteParams};
use crate::error::{Error, Result};
use crate::models::StsModel;
use crate::numcore::special::softmax_into;
use crate::numcore::{Rng, Tensor};

/// Default number of Concrete draws per input.
pub const DEFAULT_CONFIDENCE_SAMPLES: usize = 30;
pub const DEFAULT_BINS: usize = 10;

fn check_samples(p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::arg("sample count must be positive"));
    }
    Ok(())
}

/// Max coordinate of the mean of `p` Concrete draws for one input.
pub fn confidence_from_params(params: &ConcreteParams, p: usize, rng: &mut Rng) -> Result<f64> {
    check_samples(p)?;
    let k = params.dim();
    let mut mean = vec![0.0; k];
    for _ in 0..p {
        for (m, l) in mean.iter_mut().zip(concrete_sample_log(params, rng)) {
            *m += l.exp();
        }
    }
    Ok(mean.iter().fold(0.0f64, |a, &b| a.max(b)) / p as f64)
}

/// Sampled confidence for every row of `x`. Logits and temperatures come from a
/// single forward pass; draws are consumed in row order from `rng`.
pub fn sts_confidence(model: &StsModel, x: &Tensor, p: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    check_samples(p)?;
    model
        .concrete_params(x)?
        .iter()
        .map(|params| confidence_from_params(params, p, rng))
        .collect()
}

/// `max softmax(logits / t)` per row.
pub fn softmax_confidence(logits: &Tensor, t: f64) -> Vec<f64> {
    let mut p = vec![0.0; logits.cols()];
    let mut scaled = vec![0.0; logits.cols()];
    logits
        .row_iter()
        .map(|row| {
            for (s, g) in scaled.iter_mut().zip(row) {
                *s = g / t;
            }
            softmax_into(&scaled, &mut p);
            p.iter().fold(0.0f64, |a, &b| a.max(b))
        })
        .collect()
}

/// Confidence of the Dirichlet baseline: the largest coordinate of the posterior
/// mean `μ / Σ μ` with `μ_k = exp(ĝ_k / t(x))`.
pub fn dirichlet_ts_confidence(model: &StsModel, x: &Tensor) -> Result<Vec<f64>> {
    let (logits, temps) = model.logits_and_temperatures(x)?;
    let c = DIRICHLET_EXPONENT_CLAMP;
    let mut p = vec![0.0; logits.cols()];
    let mut e = vec![0.0; logits.cols()];
    Ok(logits
        .row_iter()
        .zip(temps)
        .map(|(row, t)| {
            for (ei, g) in e.iter_mut().zip(row) {
                *ei = (g / t).clamp(-c, c);
            }
            softmax_into(&e, &mut p);
            p.iter().fold(0.0f64, |a, &b| a.max(b))
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub bins: Vec<ReliabilityBin>,
}

impl ReliabilityTable {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `Σ_b (n_b / N) |acc_b − conf_b|` over non-empty bins.
    pub fn ece(&self) -> f64 {
        let n = self.total() as f64;
        self.bins
            .iter()
            .filter_map(|b| Some(b.count as f64 / n * (b.accuracy? - b.mean_confidence?).abs()))
            .sum()
    }

    /// `bin_low,bin_high,count,mean_confidence,accuracy`; empty bins leave the last two blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count,mean_confidence,accuracy\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.low,
                b.high,
                b.count,
                opt(b.mean_confidence),
                opt(b.accuracy)
            ));
        }
        out
    }
}

/// Equal-width right-closed bins `[0, 1/B], (1/B, 2/B], …`.
pub fn reliability_table(confidences: &[f64], correct: &[bool], bins: usize) -> Result<ReliabilityTable> {
    if confidences.len() != correct.len() {
        return Err(Error::arg(format!(
            "{} confidence(s) but {} correctness flag(s)",
            confidences.len(),
            correct.len()
        )));
    }
    if bins == 0 {
        return Err(Error::arg("need at least one bin"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::arg(format!("confidence {c} outside [0, 1]")));
    }
    let nb = bins as f64;
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        // smallest b with c ≤ (b+1)/B, comparing against the same edge values the table prints
        let mut b = ((c * nb).ceil() as usize).saturating_sub(1).min(bins - 1);
        while b > 0 && c <= b as f64 / nb {
            b -= 1;
        }
        while b + 1 < bins && c > (b + 1) as f64 / nb {
            b += 1;
        }
        count[b] += 1;
        conf[b] += c;
        hits[b] += ok as usize;
    }
    let table = (0..bins)
        .map(|b| {
            let n = count[b];
            ReliabilityBin {
                low: b as f64 / nb,
                high: (b + 1) as f64 / nb,
                count: n,
                mean_confidence: (n > 0).then(|| conf[b] / n as f64),
                accuracy: (n > 0).then(|| hits[b] as f64 / n as f64),
            }
        })
        .collect();
    Ok(ReliabilityTable { bins: table })
}

pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    Ok(reliability_table(confidences, correct, bins)?.ece())
}

/// Sample mean and its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

impl McEstimate {
    fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        McEstimate {
            mean,
            std_error: (var / n).sqrt(),
        }
    }
}

/// Mean entropy `−Σ π_k ln π_k` over `p` Concrete draws.
pub fn expected_entropy(params: &ConcreteParams, p: usize, rng: &mut Rng) -> Result<McEstimate> {
    check_samples(p)?;
    let k = params.dim() as f64;
    let values: Vec<f64> = (0..p)
        .map(|_| {
            let h: f64 = concrete_sample_log(params, rng).iter().map(|&l| -l.exp() * l).sum();
            h.clamp(0.0, k.ln())
        })
        .collect();
    Ok(McEstimate::from_values(&values))
}

const DIFFERENTIAL_ENTROPY_RETRIES: usize = 10;

/// `−mean ln Cn(π)` over `p` draws, scored in log space so coordinates that
/// underflow in linear space still give a finite density.
pub fn differential_entropy(params: &ConcreteParams, p: usize, rng: &mut Rng) -> Result<McEstimate> {
    check_samples(p)?;
    let mut values = Vec::with_capacity(p);
    for _ in 0..p {
        let mut attempt = 0;
        let v = loop {
            let l = concrete_sample_log(params, rng);
            let ld = concrete_log_density_from_logs(&l, params);
            if ld.is_finite() {
                break -ld;
            }
            attempt += 1;
            if attempt > DIFFERENTIAL_ENTROPY_RETRIES {
                return Err(Error::numeric("Concrete draw has a non-finite density after retries"));
            }
        };
        values.push(v);
    }
    Ok(McEstimate::from_values(&values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScores {
    pub confidence: Vec<f64>,
    pub expected_entropy: Vec<f64>,
    pub differential_entropy: Vec<f64>,
}

/// All three per-sample scores, each from `p` draws per input.
pub fn uncertainty_scores(model: &StsModel, x: &Tensor, p: usize, rng: &mut Rng) -> Result<UncertaintyScores> {
    let params = model.concrete_params(x)?;
    let mut out = UncertaintyScores {
        confidence: Vec::with_capacity(params.len()),
        expected_entropy: Vec::with_capacity(params.len()),
        differential_entropy: Vec::with_capacity(params.len()),
    };
    for cp in &params {
        out.confidence.push(confidence_from_params(cp, p, rng)?);
        out.expected_entropy.push(expected_entropy(cp, p, rng)?.mean);
        out.differential_entropy.push(differential_entropy(cp, p, rng)?.mean);
    }
    Ok(out)
}

/// AUROC by rank statistic (ties count one half) and AUPR as average precision,
/// with OOD as the positive class and larger scores meaning "more OOD".
pub fn auroc_aupr(in_dist: &[f64], ood: &[f64]) -> Result<(f64, f64)> {
    if in_dist.is_empty() || ood.is_empty() {
        return Err(Error::arg("both score sets must be nonempty"));
    }
    if in_dist.iter().chain(ood).any(|v| v.is_nan()) {
        return Err(Error::numeric("score is NaN"));
    }
    let mut all: Vec<(f64, bool)> = in_dist.iter().map(|&s| (s, false)).chain(ood.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Mann–Whitney: positives outranking negatives, ties half
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let pos = all[i..j].iter().filter(|e| e.1).count();
        let neg = (j - i) - pos;
        wins += pos as f64 * (neg_below as f64 + 0.5 * neg as f64);
        neg_below += neg;
        i = j;
    }
    let auroc = wins / (in_dist.len() as f64 * ood.len() as f64);

    // thresholds from high to low; tied scores enter together
    let total_pos = ood.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut aupr = 0.0;
    let mut j = all.len();
    while j > 0 {
        let mut i = j;
        while i > 0 && all[i - 1].0 == all[j - 1].0 {
            i -= 1;
        }
        for e in &all[i..j] {
            if e.1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / total_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        aupr += (recall - prev_recall) * precision;
        prev_recall = recall;
        j = i;
    }
    Ok((auroc, aupr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::concrete_log_density;
    use crate::distributions::ProbVector;
    use crate::models::{Activation, Dense, MlpModel, TemperatureBranch};
    use proptest::prelude::*;
    use crate::numcore::Rng;

    fn hand_model(logits: [f64; 3], raw_temperature: f64) -> StsModel {
        // input is ignored: zero weights, biases carry the outputs
        let l1 = Dense::zeros(1, 2, Activation::Relu);
        let mut l2 = Dense::zeros(2, 3, Activation::Identity);
        l2.bias = Tensor::matrix(1, 3, logits.to_vec()).unwrap();
        let classifier = MlpModel::new(vec![l1, l2], 1).unwrap();
        let mut h = Dense::zeros(2, 1, Activation::Identity);
        h.bias = Tensor::scalar(raw_temperature);
        StsModel::new(classifier, TemperatureBranch::new(vec![h]).unwrap(), 1e-4).unwrap()
    }

    #[test]
    fn cold_temperature_confidence_is_max_softmax() {
        let m = hand_model([1.0, 0.3, -0.5], -100.0);
        let x = Tensor::zeros(1, 1);
        let s = softmax_confidence(&m.classifier().forward_logits(&x).unwrap(), 1.0)[0];
        // near-one-hot draws: the sample mean has standard error ≈ 0.016 at p = 1000
        let c = sts_confidence(&m, &x, 1000, &mut Rng::new(1)).unwrap()[0];
        assert!((c - s).abs() < 0.05, "{c} vs {s}");
        let c = sts_confidence(&m, &x, 100_000, &mut Rng::new(1)).unwrap()[0];
        assert!((c - s).abs() < 0.01, "{c} vs {s}");
    }

    #[test]
    fn symmetric_logits_give_one_over_k() {
        let m = hand_model([0.0; 3], 0.5);
        for p in [100, 2500] {
            let c = sts_confidence(&m, &Tensor::zeros(1, 1), p, &mut Rng::new(2)).unwrap()[0];
            assert!((c - 1.0 / 3.0).abs() < 2.0 / (p as f64).sqrt(), "p={p}: {c}");
        }
    }

    #[test]
    fn confidence_is_seed_deterministic() {
        let m = hand_model([0.4, 0.1, -0.2], 0.0);
        let x = Tensor::zeros(3, 1);
        let a = sts_confidence(&m, &x, 30, &mut Rng::new(3)).unwrap();
        let b = sts_confidence(&m, &x, 30, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        assert!(sts_confidence(&m, &x, 0, &mut Rng::new(3)).is_err());
    }

    #[test]
    fn confidence_k2_matches_quadrature() {
        // E[max(π, 1−π)] under Cn on Δ_1 by trapezoid in π ∈ (0, 1)
        let params = ConcreteParams::new(vec![0.7, 0.0], 1.3).unwrap();
        let n = 200_000;
        let mut num = 0.0;
        let mut mean1 = 0.0;
        for i in 1..n {
            let x = i as f64 / n as f64;
            let pv = ProbVector::new(vec![x, 1.0 - x]).unwrap();
            let d = concrete_log_density(&pv, &params).unwrap().exp();
            num += d / n as f64;
            mean1 += x * d / n as f64;
        }
        let oracle = mean1.max(1.0 - mean1) / num;
        let c = confidence_from_params(&params, 100_000, &mut Rng::new(4)).unwrap();
        assert!((c - oracle).abs() < 0.01, "{c} vs {oracle}");
    }

    #[test]
    fn ece_examples() {
        assert_eq!(ece(&[1.0; 5], &[true; 5], 10).unwrap(), 0.0);
        let v = ece(&[0.95, 0.95, 0.55, 0.55], &[true, false, true, false], 10).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        assert!(matches!(ece(&[0.5], &[true, false], 10), Err(Error::Argument(_))));

        let t = reliability_table(&[0.0, 0.1, 0.1000001, 1.0, 0.3], &[true; 5], 10).unwrap();
        let counts: Vec<usize> = t.bins.iter().map(|b| b.count).collect();
        assert_eq!(counts, vec![2, 1, 1, 0, 0, 0, 0, 0, 0, 1]);
        assert_eq!(t.bins[5].accuracy, None);
        assert!(t.to_csv().starts_with("bin_low,bin_high,count,mean_confidence,accuracy\n0,0.1,2,"));
        assert!(t.to_csv().contains("\n0.5,0.6,0,,\n"));
    }

    #[test]
    fn calibrated_stream_has_small_ece() {
        let mut rng = Rng::new(5);
        let n = 50_000;
        let conf: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 1.0)).collect();
        let correct: Vec<bool> = conf.iter().map(|&c| rng.uniform() < c).collect();
        assert!(ece(&conf, &correct, 10).unwrap() < 0.02);
    }

    #[test]
    fn constant_predictor_matching_accuracy_is_exact_zero() {
        let conf = vec![0.75; 8];
        let correct = [true, true, false, true, true, true, false, true];
        assert_eq!(ece(&conf, &correct, 10).unwrap(), 0.0);
    }

    #[test]
    fn entropy_limits() {
        let sym = ConcreteParams::new(vec![0.0; 4], 50.0).unwrap();
        let e = expected_entropy(&sym, 5000, &mut Rng::new(6)).unwrap();
        assert!((e.mean - 4f64.ln()).abs() < 0.05, "{e:?}");
        let peaked = ConcreteParams::new(vec![5.0, 0.0, 0.0, 0.0], 0.01).unwrap();
        let e = expected_entropy(&peaked, 5000, &mut Rng::new(6)).unwrap();
        assert!(e.mean < 0.01, "{e:?}");
    }

    #[test]
    fn expected_entropy_rises_with_temperature() {
        let mut prev: Option<McEstimate> = None;
        for lam in [0.1, 1.0, 10.0, 50.0] {
            let params = ConcreteParams::new(vec![3.0, 0.0, -1.0], lam).unwrap();
            let e = expected_entropy(&params, 20_000, &mut Rng::new(7)).unwrap();
            if let Some(p) = prev {
                assert!(e.mean >= p.mean - e.std_error.max(p.std_error), "{p:?} → {e:?}");
            }
            prev = Some(e);
        }
    }

    #[test]
    fn differential_entropy_matches_quadrature() {
        // Cn with α = (1, 1), λ = 1 on Δ_1 is uniform in π₁, so −∫ Cn ln Cn = 0
        let params = ConcreteParams::new(vec![0.0, 0.0], 1.0).unwrap();
        let n = 100_000;
        let mut oracle = 0.0;
        for i in 1..n {
            let x = i as f64 / n as f64;
            let ld = concrete_log_density(&ProbVector::new(vec![x, 1.0 - x]).unwrap(), &params).unwrap();
            oracle -= ld.exp() * ld / n as f64;
        }
        let d = differential_entropy(&params, 200_000, &mut Rng::new(8)).unwrap();
        assert!((d.mean - oracle).abs() < 0.02, "{d:?} vs {oracle}");
    }

    #[test]
    fn differential_entropy_ordering_and_seed_stability() {
        let mut prev = f64::NEG_INFINITY;
        for lam in [0.1, 0.5, 1.0] {
            let params = ConcreteParams::new(vec![2.0, 0.0, 0.0], lam).unwrap();
            let d = differential_entropy(&params, 20_000, &mut Rng::new(9)).unwrap();
            assert!(d.mean > prev, "λ={lam}: {d:?}");
            prev = d.mean;
        }
        let params = ConcreteParams::new(vec![1.0, 0.0, -1.0], 0.7).unwrap();
        let a = differential_entropy(&params, 20_000, &mut Rng::new(10)).unwrap();
        let b = differential_entropy(&params, 20_000, &mut Rng::new(11)).unwrap();
        assert!((a.mean - b.mean).abs() < 3.0 * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt());
    }

    #[test]
    fn auroc_examples() {
        let (roc, pr) = auroc_aupr(&[0.1, 0.2, 0.3], &[0.7, 0.8, 0.9]).unwrap();
        assert_eq!((roc, pr), (1.0, 1.0));
        // one inversion among 3 × 3 pairs
        let (roc, _) = auroc_aupr(&[0.1, 0.2, 0.6], &[0.5, 0.8, 0.9]).unwrap();
        assert!((roc - 8.0 / 9.0).abs() < 1e-15);
        let (roc, _) = auroc_aupr(&[0.5, 0.5], &[0.5]).unwrap();
        assert_eq!(roc, 0.5);
        assert!(auroc_aupr(&[], &[1.0]).is_err());

        let mut rng = Rng::new(12);
        let a: Vec<f64> = (0..5000).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..5000).map(|_| rng.normal()).collect();
        let (roc, pr) = auroc_aupr(&a, &b).unwrap();
        assert!((roc - 0.5).abs() < 0.03);
        assert!((pr - 0.5).abs() < 0.03);
    }

    #[test]
    fn aupr_hand_case() {
        // ranked: 0.9(+) 0.8(−) 0.7(+) 0.1(−): AP = ½·1 + ½·⅔
        let (_, pr) = auroc_aupr(&[0.8, 0.1], &[0.9, 0.7]).unwrap();
        assert!((pr - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn ece_is_permutation_invariant(
            pairs in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..60),
            seed in any::<u64>(),
        ) {
            let (c, k): (Vec<f64>, Vec<bool>) = pairs.iter().cloned().unzip();
            let mut idx: Vec<usize> = (0..c.len()).collect();
            Rng::new(seed).shuffle(&mut idx);
            let c2: Vec<f64> = idx.iter().map(|&i| c[i]).collect();
            let k2: Vec<bool> = idx.iter().map(|&i| k[i]).collect();
            let a = ece(&c, &k, 10).unwrap();
            let b = ece(&c2, &k2, 10).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert_eq!(reliability_table(&c, &k, 10).unwrap().total(), c.len());
        }

        #[test]
        fn entropy_and_confidence_bounds(
            logits in proptest::collection::vec(-6.0f64..6.0, 2..6),
            lam in 0.05f64..20.0,
            seed in any::<u64>(),
        ) {
            let k = logits.len() as f64;
            let params = ConcreteParams::new(logits, lam).unwrap();
            let mut rng = Rng::new(seed);
            let e = expected_entropy(&params, 20, &mut rng).unwrap();
            prop_assert!(e.mean >= 0.0 && e.mean <= k.ln() + 1e-12);
            let c = confidence_from_params(&params, 20, &mut rng).unwrap();
            prop_assert!(c >= 1.0 / k - 1e-12 && c <= 1.0);
        }
    }
}
