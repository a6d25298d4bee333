//! Ranking metrics: AUROC (Mann–Whitney with midranks) and average precision.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("non-finite score {s}")));
    }
    Ok(())
}

/// AUROC where positives should score higher; ties count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!("AUROC needs both classes ({pos} positive, {neg} negative)")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based) midranks of positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Per-video scores: the mean of each video's clip scores. Returns
/// `(video_id, score, label)` sorted by id.
pub fn video_scores(scores: &[f64], video_ids: &[String], labels: &[bool]) -> Result<Vec<(String, f64, bool)>> {
    check(scores, labels)?;
    if video_ids.len() != scores.len() {
        return Err(Error::Metric(format!("{} scores for {} video ids", scores.len(), video_ids.len())));
    }
    let mut acc: BTreeMap<&str, (f64, usize, bool)> = BTreeMap::new();
    for ((s, id), &l) in scores.iter().zip(video_ids).zip(labels) {
        let e = acc.entry(id).or_insert((0.0, 0, l));
        if e.2 != l {
            return Err(Error::Metric(format!("video `{id}` has clips with conflicting labels")));
        }
        e.0 += s;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(id, (s, n, l))| (id.to_string(), s / n as f64, l)).collect())
}

/// Video-level AUROC from clip scores.
pub fn video_auroc(scores: &[f64], video_ids: &[String], labels: &[bool]) -> Result<f64> {
    let v = video_scores(scores, video_ids, labels)?;
    let (s, l): (Vec<f64>, Vec<bool>) = v.into_iter().map(|(_, s, l)| (s, l)).unzip();
    auroc(&s, &l)
}

/// `Σ (R_k − R_{k−1})·P_k` over distinct thresholds in descending order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::Metric("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&k| labels[k]).count();
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let ids: Vec<String> = ["a", "a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let s = [0.9, 0.7, 0.8, 0.2, 0.1];
        let l = [true, true, true, false, false];
        assert_eq!(video_auroc(&s, &ids, &l).unwrap(), 1.0);
    }

    #[test]
    fn all_equal_scores_give_half() {
        assert_eq!(auroc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
        assert!(matches!(average_precision(&[0.1, 0.2], &[false, false]), Err(Error::Metric(_))));
    }

    #[test]
    fn conflicting_video_labels_rejected() {
        let ids = vec!["a".to_string(), "a".to_string()];
        assert!(video_scores(&[0.1, 0.2], &ids, &[true, false]).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let n = 7;
        let s: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / n as f64).collect();
        let l: Vec<bool> = (0..n).map(|i| i == n - 1).collect();
        assert!((average_precision(&s, &l).unwrap() - 1.0 / n as f64).abs() < 1e-15);
    }
}
