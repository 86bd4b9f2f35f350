//! OOD evaluation metrics and the logit-based baseline scores.
//!
//! Scores follow the convention "higher means more in-distribution".

use crate::embeddings::{argmax, log_sum_exp, softmax};
use crate::error::{Error, Result};

/// ID and OOD scores of one detector on one test split.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        let s = Self { id_scores, ood_scores };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.id_scores.is_empty() || self.ood_scores.is_empty() {
            return Err(Error::invalid("score set needs nonempty ID and OOD sides"));
        }
        if self.id_scores.iter().chain(&self.ood_scores).any(|s| !s.is_finite()) {
            return Err(Error::invalid("scores must be finite"));
        }
        Ok(())
    }
}

/// Area under the ROC curve via the Mann–Whitney rank sum:
/// `P(id > ood) + ½·P(id = ood)`.
pub fn auroc(s: &ScoreSet) -> Result<f64> {
    s.validate()?;
    let n_id = s.id_scores.len();
    let n_ood = s.ood_scores.len();
    let mut all: Vec<(f64, bool)> = s
        .id_scores
        .iter()
        .map(|&x| (x, true))
        .chain(s.ood_scores.iter().map(|&x| (x, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Midranks over tie groups; ranks are 1-based. Work with doubled ranks
    // so everything stays integral.
    let mut id_rank_sum2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let doubled_midrank = (i + 1 + j) as u128;
        let ids = all[i..j].iter().filter(|e| e.1).count() as u128;
        id_rank_sum2 += ids * doubled_midrank;
        i = j;
    }
    let n_id_u = n_id as u128;
    // U·2 = 2·R − n_id(n_id+1)
    let u2 = id_rank_sum2 - n_id_u * (n_id_u + 1);
    Ok(u2 as f64 / (2.0 * n_id as f64 * n_ood as f64))
}

/// Threshold used by [`fpr_at_95_tpr`]: the largest τ with at least 95% of
/// ID scores `≥ τ`.
pub fn tpr95_threshold(id_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::invalid("no ID scores"));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    let needed = (95 * n).div_ceil(100);
    Ok(sorted[needed - 1])
}

/// Fraction of OOD scores at or above the 95%-TPR threshold.
pub fn fpr_at_95_tpr(s: &ScoreSet) -> Result<f64> {
    s.validate()?;
    let tau = tpr95_threshold(&s.id_scores)?;
    let fp = s.ood_scores.iter().filter(|&&x| x >= tau).count();
    Ok(fp as f64 / s.ood_scores.len() as f64)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn id_accuracy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: logits.len(),
        });
    }
    if logits.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(l, &y)| argmax(l) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Maximum softmax probability.
pub fn msp_score(logits: &[f64]) -> f64 {
    softmax(logits).into_iter().fold(0.0, f64::max)
}

/// Negative energy, `log Σ exp(logitⱼ)`.
pub fn energy_baseline_score(logits: &[f64]) -> f64 {
    log_sum_exp(logits)
}

/// Threshold at the 5th percentile of ID validation scores, i.e. the one
/// that keeps 95% of them.
pub fn threshold_at_95_tpr(id_validation: &[f64]) -> Result<f64> {
    tpr95_threshold(id_validation)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(id: &[f64], ood: &[f64]) -> ScoreSet {
        ScoreSet::new(id.to_vec(), ood.to_vec()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&set(&[2.0, 3.0], &[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(auroc(&set(&[0.0, 1.0], &[2.0, 3.0])).unwrap(), 0.0);
        assert_eq!(auroc(&set(&[1.0; 4], &[1.0; 7])).unwrap(), 0.5);
        // one tie out of four pairs
        assert_eq!(auroc(&set(&[1.0, 3.0], &[1.0, 0.0])).unwrap(), 0.875);
        assert!(ScoreSet::new(vec![], vec![1.0]).is_err());
        assert!(ScoreSet::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_95_tpr(&set(&[5.0, 6.0, 7.0], &[0.0, 1.0])).unwrap(), 0.0);
        let scores: Vec<f64> = (0..40).map(|i| i as f64).collect();
        assert!(fpr_at_95_tpr(&set(&scores, &scores)).unwrap() >= 0.95);
        // 20 ID scores: 19 must pass, τ is the 19th largest = 1.0
        let id: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert_eq!(tpr95_threshold(&id).unwrap(), 1.0);
        assert_eq!(fpr_at_95_tpr(&set(&id, &[0.5, 1.0, 2.0, -3.0])).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_examples() {
        let labels = [0usize, 2, 1, 1];
        let one_hot = |c: usize| (0..3).map(|j| f64::from(u8::from(j == c))).collect::<Vec<_>>();
        let right: Vec<_> = labels.iter().map(|&y| one_hot(y)).collect();
        let wrong: Vec<_> = labels.iter().map(|&y| one_hot((y + 1) % 3)).collect();
        assert_eq!(id_accuracy(&right, &labels).unwrap(), 1.0);
        assert_eq!(id_accuracy(&wrong, &labels).unwrap(), 0.0);
        // ties go to the lowest index
        assert_eq!(id_accuracy(&[vec![1.0, 1.0]], &[0]).unwrap(), 1.0);
        assert!(id_accuracy(&right, &labels[..2]).is_err());
    }

    #[test]
    fn baseline_score_examples() {
        assert!((msp_score(&[0.3; 4]) - 0.25).abs() < 1e-15);
        assert!((msp_score(&[100.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
        let l = [0.2, -1.3, 2.5];
        let shifted: Vec<f64> = l.iter().map(|x| x + 17.0).collect();
        assert!((msp_score(&l) - msp_score(&shifted)).abs() < 1e-12);
        assert!((energy_baseline_score(&[0.0; 10]) - 10f64.ln()).abs() < 1e-15);
        assert_eq!(energy_baseline_score(&[-4.0]), -4.0);
        assert!((energy_baseline_score(&[1000.0, 1000.0]) - 1000.0 - 2f64.ln()).abs() < 1e-12);
    }
}
