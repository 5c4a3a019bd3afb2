//! Evaluation metrics: accuracy, ROC AUC (Mann-Whitney) and Harrell's
//! concordance index.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error("no comparable pairs for the concordance index")]
    NoComparablePairs,
    #[error("empty input")]
    Empty,
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64, MetricError> {
    if predicted.len() != labels.len() {
        return Err(MetricError::LengthMismatch(predicted.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of (positive, negative) pairs ranked correctly; ties count half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let mut neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricError::SingleClass);
    }
    neg.sort_by(f64::total_cmp);
    let mut wins = 0u64;
    let mut ties = 0u64;
    for s in pos {
        let below = neg.partition_point(|&n| n < s);
        let not_above = neg.partition_point(|&n| n <= s);
        wins += below as u64;
        ties += (not_above - below) as u64;
    }
    let pairs = (neg.len() as u64) * (labels.len() as u64 - neg.len() as u64);
    Ok((wins as f64 + 0.5 * ties as f64) / pairs as f64)
}

/// Harrell's c-index. A pair (i, j) is comparable when `t_i < t_j` and i
/// is uncensored; it is concordant when `risk_i > risk_j`, ties count half.
pub fn c_index(risks: &[f64], times: &[f64], censored: &[bool]) -> Result<f64, MetricError> {
    let n = risks.len();
    if times.len() != n {
        return Err(MetricError::LengthMismatch(n, times.len()));
    }
    if censored.len() != n {
        return Err(MetricError::LengthMismatch(n, censored.len()));
    }
    // Sweep from the latest time down, keeping the risks of everyone seen at
    // a strictly later time in sorted order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut later: Vec<f64> = Vec::with_capacity(n);
    let (mut conc, mut ties, mut comparable) = (0u64, 0u64, 0u64);
    let mut k = 0;
    while k < n {
        let t = times[order[k]];
        let mut end = k;
        while end < n && times[order[end]] == t {
            end += 1;
        }
        for &i in &order[k..end] {
            if censored[i] {
                continue;
            }
            let r = risks[i];
            let below = later.partition_point(|&x| x < r);
            let not_above = later.partition_point(|&x| x <= r);
            conc += below as u64;
            ties += (not_above - below) as u64;
            comparable += later.len() as u64;
        }
        for &i in &order[k..end] {
            let pos = later.partition_point(|&x| x < risks[i]);
            later.insert(pos, risks[i]);
        }
        k = end;
    }
    if comparable == 0 {
        return Err(MetricError::NoComparablePairs);
    }
    Ok((conc as f64 + 0.5 * ties as f64) / comparable as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.4, 0.6], &[true, false, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.2, 0.1, 0.8, 0.7], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(auc(&[0.1, 0.9], &[true, true]), Err(MetricError::SingleClass));
    }

    #[test]
    fn c_index_examples() {
        let t = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(c_index(&[4.0, 3.0, 2.0, 1.0], &t, &[false; 4]).unwrap(), 1.0);
        assert_eq!(c_index(&[0.7; 4], &t, &[false; 4]).unwrap(), 0.5);
        assert_eq!(
            c_index(&[4.0, 3.0, 2.0, 1.0], &t, &[false, false, true, false]).unwrap(),
            1.0
        );
        assert_eq!(
            c_index(&[1.0, 2.0], &[1.0, 2.0], &[true, true]),
            Err(MetricError::NoComparablePairs)
        );
        // equal times are never comparable
        assert_eq!(
            c_index(&[1.0, 2.0], &[3.0, 3.0], &[false, false]),
            Err(MetricError::NoComparablePairs)
        );
    }

    #[test]
    fn accuracy_counts_hits() {
        assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 1, 1, 0]).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
    }
}
