//! Logloss, AUC and the lift metrics relative to a baseline model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped this far from 0 and 1 before taking logs.
pub const PROB_CLAMP: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub logloss: f64,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_auc_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_logloss_pct: Option<f64>,
}

impl EvalReport {
    /// Scores predictions `probs` against 0/1 labels.
    pub fn compute(probs: &[f64], labels: &[f64]) -> Result<Self> {
        let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
        Ok(EvalReport {
            logloss: eval_logloss(probs, labels)?,
            auc: eval_auc(probs, labels)?,
            n_pos,
            n_neg: labels.len() - n_pos,
            relative_auc_pct: None,
            relative_logloss_pct: None,
        })
    }

    /// Fills the relative fields against `baseline`.
    pub fn with_baseline(mut self, baseline: &EvalReport) -> Result<Self> {
        self.relative_auc_pct = Some(relative_auc(self.auc, baseline.auc)?);
        self.relative_logloss_pct = Some(relative_logloss(self.logloss, baseline.logloss)?);
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("eval report: {}", e)))
    }
}

fn check_inputs(pred: &[f64], labels: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    if pred.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid(format!("label {} is not 0 or 1", y)));
    }
    if pred.iter().any(|p| p.is_nan()) {
        return Err(Error::NonFinite("prediction is NaN".into()));
    }
    Ok(())
}

/// Mean negative log-likelihood of 0/1 labels under probabilities `probs`.
pub fn eval_logloss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    check_inputs(probs, labels)?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y == 1.0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Area under the ROC curve via the rank-sum statistic; tied scores count half.
pub fn eval_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of 1-based average ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos = order[i..j].iter().filter(|&&r| labels[r] == 1.0).count();
        rank_sum += avg_rank * pos as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC lift over a baseline after removing the 0.5 chance level, in percent.
pub fn relative_auc(auc_method: f64, auc_baseline: f64) -> Result<f64> {
    if !(auc_baseline > 0.5) {
        return Err(Error::invalid(format!("baseline AUC {} must exceed 0.5", auc_baseline)));
    }
    Ok(((auc_method - 0.5) / (auc_baseline - 0.5) - 1.0) * 100.0)
}

/// Logloss change relative to a baseline in percent; negative is better.
pub fn relative_logloss(ll_method: f64, ll_baseline: f64) -> Result<f64> {
    if !(ll_baseline > 0.0) {
        return Err(Error::invalid(format!(
            "baseline logloss {} must be positive",
            ll_baseline
        )));
    }
    Ok((ll_method / ll_baseline - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(s: &[f64], y: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1.0 && y[j] == 0.0 {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0;
                    } else if s[i] == s[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn logloss_half_is_ln2() {
        let y = [0.0, 1.0, 1.0, 0.0, 1.0];
        let l = eval_logloss(&[0.5; 5], &y).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(eval_logloss(&y, &y).unwrap() < 1e-13);
        assert!(eval_logloss(&[], &[]).is_err());
    }

    #[test]
    fn logloss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..300).map(|_| rng.random_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..300).map(|_| f64::from(rng.random_bool(0.3))).collect();
        let mut acc = 0.0;
        for i in 0..300 {
            acc -= y[i] * p[i].ln() + (1.0 - y[i]) * (1.0 - p[i]).ln();
        }
        assert!((eval_logloss(&p, &y).unwrap() - acc / 300.0).abs() < 1e-12);
    }

    #[test]
    fn auc_trivial_cases() {
        let y = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(eval_auc(&[0.1, 0.2, 0.3, 0.4], &y).unwrap(), 1.0);
        assert_eq!(eval_auc(&[0.4, 0.3, 0.2, 0.1], &y).unwrap(), 0.0);
        assert_eq!(eval_auc(&[0.7; 4], &y).unwrap(), 0.5);
        assert!(eval_auc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.random_range(2..200);
            // coarse scores force plenty of ties
            let s: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..10u8))).collect();
            let mut y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.4))).collect();
            y[0] = 1.0;
            y[1] = 0.0;
            assert!((eval_auc(&s, &y).unwrap() - pairwise_auc(&s, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_invariant_under_monotone_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<f64> = (0..100).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..100).map(|i| f64::from(i % 3 == 0)).collect();
        let a = eval_auc(&s, &y).unwrap();
        let sig: Vec<f64> = s.iter().map(|&v| crate::nn::sigmoid(v)).collect();
        let aff: Vec<f64> = s.iter().map(|&v| 3.0 * v + 1.0).collect();
        assert_eq!(eval_auc(&sig, &y).unwrap(), a);
        assert_eq!(eval_auc(&aff, &y).unwrap(), a);
    }

    #[test]
    fn relative_metrics() {
        assert_eq!(relative_auc(0.7, 0.7).unwrap(), 0.0);
        assert!((relative_auc(0.65, 0.6).unwrap() - 50.0).abs() < 1e-9);
        assert!((relative_auc(0.71014, 0.70).unwrap() - 5.07).abs() < 1e-9);
        assert!(relative_auc(0.7, 0.5).is_err());
        assert!(relative_auc(0.72, 0.7).unwrap() > relative_auc(0.71, 0.7).unwrap());
        assert_eq!(relative_logloss(0.3, 0.3).unwrap(), 0.0);
        assert!((relative_logloss(0.98 * 0.25, 0.25).unwrap() + 2.0).abs() < 1e-9);
        assert!((relative_logloss(0.19778, 0.2).unwrap() + 1.11).abs() < 1e-9);
        assert!(relative_logloss(0.1, 0.0).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let y = [0.0, 1.0, 1.0, 0.0];
        let base = EvalReport::compute(&[0.4, 0.6, 0.5, 0.3], &y).unwrap();
        let r = EvalReport::compute(&[0.2, 0.9, 0.8, 0.1], &y)
            .unwrap()
            .with_baseline(&base)
            .unwrap();
        assert_eq!((r.n_pos, r.n_neg), (2, 2));
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        let same = base.clone().with_baseline(&base).unwrap();
        assert_eq!(same.relative_auc_pct, Some(0.0));
    }
}
