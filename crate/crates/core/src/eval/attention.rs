use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight at or above which an instance counts as highly attended.
pub const HIGH_ATTENTION: f64 = 0.5;

/// Histogram resolution used by reports.
pub const ATTENTION_BINS: usize = 20;

/// How well the most-attended instances hit ground-truth positives, over
/// bags that contain at least one positive instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionAlignment {
    pub bags: usize,
    /// Share of bags whose top-1 instance is positive.
    pub top1: f64,
    /// Share of bags with a positive among their top-5 instances.
    pub top5: f64,
    /// Share of highly attended instances that are positive, if any exist.
    pub high: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    /// Largest weight in each bag.
    pub maxima: Vec<f64>,
    pub threshold: f64,
    /// Share of bags whose largest weight is at least `threshold`.
    pub share_at_or_above: f64,
    pub median_max: f64,
    /// Counts of `maxima` over equal-width bins of `[0, 1]`.
    pub histogram: Vec<usize>,
    pub alignment: Option<AttentionAlignment>,
}

impl AttentionStats {
    /// `bin_low,bin_high,count` rows.
    pub fn histogram_csv(&self) -> String {
        let bins = self.histogram.len();
        let mut out = String::from("bin_low,bin_high,count\n");
        for (b, c) in self.histogram.iter().enumerate() {
            out.push_str(&format!("{},{},{c}\n", b as f64 / bins as f64, (b + 1) as f64 / bins as f64));
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Summarizes per-bag attention vectors, each of which must lie on the simplex.
///
/// With `instance_labels`, entries past the end of a bag's labels (such as a
/// pooling node's self weight) are treated as non-instances.
pub fn attention_stats(
    vectors: &[Vec<f64>],
    threshold: f64,
    bins: usize,
    instance_labels: Option<&[Vec<bool>]>,
) -> Result<AttentionStats> {
    if bins == 0 {
        return Err(Error::Argument("histogram needs at least one bin".into()));
    }
    for (b, v) in vectors.iter().enumerate() {
        let sum: f64 = v.iter().sum();
        if v.is_empty() || (sum - 1.0).abs() > 1e-6 || v.iter().any(|&a| !(0.0..=1.0 + 1e-12).contains(&a)) {
            return Err(Error::Data(format!("attention vector {b} is not on the simplex (sum {sum})")));
        }
    }
    let maxima: Vec<f64> = vectors.iter().map(|v| v.iter().copied().fold(0.0, f64::max)).collect();
    let mut histogram = vec![0usize; bins];
    for &m in &maxima {
        let b = ((m * bins as f64) as usize).min(bins - 1);
        histogram[b] += 1;
    }
    let above = maxima.iter().filter(|&&m| m >= threshold).count();
    let share_at_or_above = if maxima.is_empty() {
        0.0
    } else {
        above as f64 / maxima.len() as f64
    };
    let alignment = match instance_labels {
        Some(labels) => Some(alignment(vectors, labels, threshold)?),
        None => None,
    };
    Ok(AttentionStats {
        median_max: median(&maxima),
        maxima,
        threshold,
        share_at_or_above,
        histogram,
        alignment,
    })
}

fn alignment(vectors: &[Vec<f64>], labels: &[Vec<bool>], threshold: f64) -> Result<AttentionAlignment> {
    if labels.len() != vectors.len() {
        return Err(Error::Argument(format!(
            "{} label sets for {} attention vectors",
            labels.len(),
            vectors.len()
        )));
    }
    let (mut bags, mut top1, mut top5, mut high, mut high_pos) = (0, 0, 0, 0, 0);
    for (v, y) in vectors.iter().zip(labels) {
        if y.len() > v.len() {
            return Err(Error::Argument(format!("{} labels for {} weights", y.len(), v.len())));
        }
        let positive = |i: usize| y.get(i).copied().unwrap_or(false);
        for (i, &a) in v.iter().enumerate() {
            if a >= threshold {
                high += 1;
                high_pos += usize::from(positive(i));
            }
        }
        if !y.iter().any(|&p| p) {
            continue;
        }
        bags += 1;
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        top1 += usize::from(positive(order[0]));
        top5 += usize::from(order.iter().take(5).any(|&i| positive(i)));
    }
    let share = |k: usize| if bags == 0 { 0.0 } else { k as f64 / bags as f64 };
    Ok(AttentionAlignment {
        bags,
        top1: share(top1),
        top5: share(top5),
        high: (high > 0).then(|| high_pos as f64 / high as f64),
    })
}

/// `rank / n × 100` with 1-based ascending ranks, ties sharing their average rank.
pub fn percentile_transform(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            out[k] = rank / n as f64 * 100.0;
        }
        i = j;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_examples() {
        let mut v = vec![0.087 / 9.0; 9];
        v.push(0.913);
        let s = attention_stats(&[v], HIGH_ATTENTION, 10, None).unwrap();
        assert_eq!(s.maxima, vec![0.913]);
        assert_eq!(s.histogram[9], 1);

        let s = attention_stats(&[vec![0.01; 100]], HIGH_ATTENTION, 10, None).unwrap();
        assert!((s.maxima[0] - 0.01).abs() < 1e-15);
        assert_eq!(s.share_at_or_above, 0.0);

        let bags = vec![vec![0.9, 0.1], vec![0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]];
        let s = attention_stats(&bags, 0.5, 4, None).unwrap();
        assert_eq!(s.share_at_or_above, 0.5);
        assert_eq!(s.histogram.iter().sum::<usize>(), 2);
        assert!((s.median_max - 0.5).abs() < 1e-12);
        assert_eq!(s.histogram_csv().lines().count(), 5);
    }

    #[test]
    fn off_simplex_is_rejected() {
        assert!(matches!(attention_stats(&[vec![0.5, 0.4]], 0.5, 4, None), Err(Error::Data(_))));
        assert!(matches!(attention_stats(&[vec![]], 0.5, 4, None), Err(Error::Data(_))));
        assert!(attention_stats(&[vec![0.5, 0.5 + 5e-7]], 0.5, 4, None).is_ok());
    }

    #[test]
    fn alignment_counts() {
        let vectors = vec![
            vec![0.6, 0.2, 0.1, 0.1],
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.25, 0.25, 0.25, 0.25],
        ];
        let labels = vec![vec![true, false, false], vec![true, false, false, false], vec![false; 4]];
        let s = attention_stats(&vectors, 0.5, 4, Some(&labels)).unwrap();
        let a = s.alignment.unwrap();
        assert_eq!(a.bags, 2);
        assert_eq!(a.top1, 0.5);
        assert_eq!(a.top5, 1.0);
        assert_eq!(a.high, Some(1.0));
    }

    #[test]
    fn percentile_examples() {
        let p = percentile_transform(&[0.1, 0.9, 0.5]);
        let expected = [100.0 / 3.0, 100.0, 200.0 / 3.0];
        assert!(p.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(percentile_transform(&[0.3]), vec![100.0]);
        assert_eq!(percentile_transform(&[0.2, 0.2]), vec![75.0, 75.0]);
        let spread = percentile_transform(&[1e-9, 2e-9, 0.5, 0.99]);
        assert_eq!(spread, vec![25.0, 50.0, 75.0, 100.0]);
    }
}
