use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::metrics::{accuracy_recall_f1, BinaryMetrics};

/// Default neighbor count of the embedding probe.
pub const PROBE_K: usize = 5;

/// Majority vote among the `k` nearest training rows (Euclidean).
///
/// Distance ties go to the lower training index, vote ties to the smaller class.
pub fn knn_predict(train: &Tensor, train_labels: &[usize], test: &Tensor, k: usize) -> Result<Vec<usize>> {
    let n = train.rows();
    if train_labels.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} training rows", train_labels.len())));
    }
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k = {k} with {n} training rows")));
    }
    if train.cols() != test.cols() {
        return Err(Error::shape(
            "knn_predict",
            format!("train width {} vs test width {}", train.cols(), test.cols()),
        ));
    }
    if !train.is_finite() || !test.is_finite() {
        return Err(Error::NonFinite("probe embeddings".into()));
    }
    let classes = train_labels.iter().max().map_or(1, |&m| m + 1);
    let preds = (0..test.rows())
        .into_par_iter()
        .map(|t| {
            let q = test.row(t);
            let mut dist: Vec<(f64, usize)> = (0..n)
                .map(|i| {
                    let d = train.row(i).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    (d, i)
                })
                .collect();
            let by = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < n {
                dist.select_nth_unstable_by(k - 1, by);
            }
            let mut votes = vec![0usize; classes];
            for &(_, i) in &dist[..k] {
                votes[train_labels[i]] += 1;
            }
            let mut best = 0;
            for (c, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(preds)
}

/// Instance-level probe: KNN on embeddings, scored for the positive class.
pub fn knn_probe(train: &Tensor, train_labels: &[bool], test: &Tensor, test_labels: &[bool], k: usize) -> Result<BinaryMetrics> {
    let ty: Vec<usize> = train_labels.iter().map(|&b| usize::from(b)).collect();
    let preds = knn_predict(train, &ty, test, k)?;
    let truth: Vec<usize> = test_labels.iter().map(|&b| usize::from(b)).collect();
    accuracy_recall_f1(&preds, &truth, 1)
}
