//! Evaluation metrics: class-balanced accuracy and assignment-weight histograms.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 20;

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    scores
        .data()
        .chunks(scores.cols())
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Mean per-class recall plus the individual recalls.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAccuracy {
    pub average: f64,
    /// `None` for classes without any labelled sample.
    pub per_class: Vec<Option<f64>>,
}

/// Average over present classes of the fraction of that class predicted correctly.
pub fn avg_class_accuracy(predictions: &[usize], labels: &[usize], classes: usize) -> Result<ClassAccuracy> {
    if labels.is_empty() {
        return Err(Error::Contract("accuracy of an empty label set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::dim("avg_class_accuracy", &[predictions.len()], &[labels.len()]));
    }
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= classes {
            return Err(Error::Label { label: y, classes });
        }
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let average = present.iter().sum::<f64>() / present.len() as f64;
    Ok(ClassAccuracy { average, per_class })
}

/// Binned distribution of first-column assignment weights for one source domain.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightHistogram {
    /// `None` when the evaluation set has no domain labels.
    pub domain: Option<usize>,
    pub counts: [u64; HISTOGRAM_BINS],
    pub mean_weight: f64,
    pub samples: usize,
}

impl WeightHistogram {
    pub fn fractions(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| c as f64 / self.samples.max(1) as f64)
            .collect()
    }
}

/// Histograms of `w[:, 0]` grouped by the true source domain of each sample.
pub fn weight_histogram<T: Scalar>(
    weights: &Tensor<T>,
    domain_labels: Option<&[usize]>,
) -> Result<Vec<WeightHistogram>> {
    let n = weights.rows();
    if let Some(d) = domain_labels {
        if d.len() != n {
            return Err(Error::dim("weight_histogram", &[n], &[d.len()]));
        }
    }
    let mut groups: Vec<Option<usize>> = match domain_labels {
        Some(d) => d.iter().map(|&x| Some(x)).collect(),
        None => vec![None],
    };
    groups.sort();
    groups.dedup();
    let cols = weights.cols();
    Ok(groups
        .into_iter()
        .map(|group| {
            let mut counts = [0u64; HISTOGRAM_BINS];
            let mut sum = 0.0;
            let mut samples = 0;
            for i in 0..n {
                if group.is_some() && domain_labels.map(|d| d[i]) != group {
                    continue;
                }
                let v = weights.data()[i * cols].to_f64_lossy();
                counts[bin_of(v)] += 1;
                sum += v;
                samples += 1;
            }
            WeightHistogram {
                domain: group,
                counts,
                mean_weight: sum / samples.max(1) as f64,
                samples,
            }
        })
        .collect())
}

fn bin_of(v: f64) -> usize {
    ((v * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

/// Largest difference in mean first-column weight between any two domains.
pub fn mean_weight_gap(hists: &[WeightHistogram]) -> f64 {
    let means = hists.iter().map(|h| h.mean_weight);
    let max = means.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = means.fold(f64::INFINITY, f64::min);
    if hists.is_empty() {
        0.0
    } else {
        max - min
    }
}
