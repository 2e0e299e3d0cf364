use crate::error::{Error, Result};

/// Area under the ROC curve via the Mann-Whitney rank statistic. Tied
/// scores share their average rank, so a tied positive/negative pair counts
/// one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "auc: {} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("auc: NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid("auc: labels contain a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let rank = (i + j + 1) as f64 / 2.0;
        let pos = order[i..j].iter().filter(|&&k| labels[k] > 0.5).count();
        rank_sum_pos += rank * pos as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC for 0/1 byte labels.
pub fn auc_u8(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let l: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    auc(scores, &l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_reversed() {
        let y = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &y).unwrap(), 1.0);
        assert_eq!(auc(&[0.4, 0.3, 0.2, 0.1], &y).unwrap(), 0.0);
    }

    #[test]
    fn constant_scores_give_half() {
        assert_eq!(
            auc(&[0.7; 6], &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap(),
            0.5
        );
    }

    #[test]
    fn partial_tie_counts_half() {
        // pairs (pos, neg): (0.5, 0.5) tie, (0.5, 0.1) win, (0.9, 0.5) win, (0.9, 0.1) win
        let a = auc(&[0.5, 0.9, 0.5, 0.1], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((a - 3.5 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(auc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
    }
}
