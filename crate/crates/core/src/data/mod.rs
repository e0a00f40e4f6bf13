//! Multi-domain datasets: in-memory representation, synthetic generation with
//! per-domain affine shifts, binary file I/O and batching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

mod batch;
pub(crate) mod io;

pub use batch::{make_batches, BatchStream, Batcher};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};

/// Labelled samples with optional domain labels. Labels are zero-based.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub features: Vec<f64>,
    pub num_features: usize,
    pub class_labels: Vec<usize>,
    pub domain_labels: Option<Vec<usize>>,
    pub meta: DatasetMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub num_domains: usize,
    /// Free-form description of how the data was produced.
    pub descriptor: String,
    pub seed: u64,
}

impl DomainDataset {
    pub fn new(
        features: Vec<f64>,
        num_features: usize,
        class_labels: Vec<usize>,
        domain_labels: Option<Vec<usize>>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let ds = DomainDataset {
            features,
            num_features,
            class_labels,
            domain_labels,
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.class_labels.len();
        if self.num_features == 0 || self.features.len() != n * self.num_features {
            return Err(Error::dim(
                "dataset features",
                &[n, self.num_features],
                &[self.features.len()],
            ));
        }
        if let Some(&y) = self.class_labels.iter().find(|&&y| y >= self.meta.num_classes) {
            return Err(Error::Label {
                label: y,
                classes: self.meta.num_classes,
            });
        }
        if let Some(d) = &self.domain_labels {
            if d.len() != n {
                return Err(Error::dim("dataset domain labels", &[n], &[d.len()]));
            }
            if let Some(&bad) = d.iter().find(|&&x| x >= self.meta.num_domains) {
                return Err(Error::Domain {
                    index: bad,
                    count: self.meta.num_domains,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    /// Feature rows `idx` as a `[idx.len(), F]` tensor.
    pub fn features_of<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(idx.len() * self.num_features);
        for &i in idx {
            data.extend(self.sample(i).iter().map(|&v| T::of(v)));
        }
        Tensor::from_parts(vec![idx.len(), self.num_features], data)
    }

    pub fn all_features<T: Scalar>(&self) -> Tensor<T> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.features_of(&idx)
    }

    pub fn classes_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.class_labels[i]).collect()
    }

    pub fn domains_of(&self, idx: &[usize]) -> Option<Vec<usize>> {
        self.domain_labels.as_ref().map(|d| idx.iter().map(|&i| d[i]).collect())
    }

    pub fn without_domain_labels(&self) -> DomainDataset {
        DomainDataset {
            domain_labels: None,
            ..self.clone()
        }
    }

    /// Rows `idx` with metadata unchanged.
    pub fn select(&self, idx: &[usize]) -> DomainDataset {
        let mut features = Vec::with_capacity(idx.len() * self.num_features);
        for &i in idx {
            features.extend_from_slice(self.sample(i));
        }
        DomainDataset {
            features,
            num_features: self.num_features,
            class_labels: self.classes_of(idx),
            domain_labels: self.domains_of(idx),
            meta: self.meta.clone(),
        }
    }

    /// Samples labelled with domain `j`; empty when there are no domain labels.
    pub fn domain_subset(&self, j: usize) -> DomainDataset {
        let idx: Vec<usize> = match &self.domain_labels {
            Some(d) => (0..self.len()).filter(|&i| d[i] == j).collect(),
            None => Vec::new(),
        };
        self.select(&idx)
    }

    /// Concatenates datasets, labelling every sample of `parts[j]` with domain `j`.
    pub fn concat_as_domains(parts: &[&DomainDataset]) -> Result<DomainDataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("nothing to concatenate".into()))?;
        let f = first.num_features;
        let mut features = Vec::new();
        let mut classes = Vec::new();
        let mut domains = Vec::new();
        let mut num_classes = 0;
        for (j, p) in parts.iter().enumerate() {
            if p.num_features != f {
                return Err(Error::dim("concat", &[f], &[p.num_features]));
            }
            num_classes = num_classes.max(p.meta.num_classes);
            features.extend_from_slice(&p.features);
            classes.extend_from_slice(&p.class_labels);
            domains.extend(std::iter::repeat_n(j, p.len()));
        }
        DomainDataset::new(
            features,
            f,
            classes,
            Some(domains),
            DatasetMeta {
                num_classes,
                num_domains: parts.len(),
                descriptor: format!("concat of {} domains", parts.len()),
                seed: first.meta.seed,
            },
        )
    }
}

/// Class-conditional Gaussian mixture with diagonal covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
    /// Class proportions; balanced round-robin labels when absent.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
}

impl GaussianMixture {
    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn num_features(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        let f = self.num_features();
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {k}")));
        }
        if f == 0 {
            return Err(Error::Config("class means must be non-empty".into()));
        }
        if self.stds.len() != k || self.means.iter().chain(&self.stds).any(|v| v.len() != f) {
            return Err(Error::Config("means and stds must all be K x F".into()));
        }
        if self.stds.iter().flatten().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(
                "degenerate covariance: every std must be positive".into(),
            ));
        }
        for a in 0..k {
            for b in a + 1..k {
                if self.means[a] == self.means[b] {
                    return Err(Error::Config(format!("classes {a} and {b} share a mean")));
                }
            }
        }
        if let Some(w) = &self.class_weights {
            if w.len() != k || w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("class_weights must be K nonnegative values".into()));
            }
        }
        Ok(())
    }
}

/// Per-domain transform `x -> scale * x + offset (+ class_offsets[y])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    #[serde(default)]
    pub class_offsets: Option<Vec<Vec<f64>>>,
}

impl ShiftSpec {
    pub fn identity(features: usize) -> Self {
        ShiftSpec {
            scale: vec![1.0; features],
            offset: vec![0.0; features],
            class_offsets: None,
        }
    }

    pub fn validate(&self, features: usize, classes: usize) -> Result<()> {
        if self.scale.len() != features || self.offset.len() != features {
            return Err(Error::Config("shift scale/offset length must equal F".into()));
        }
        if self.scale.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::Config("shift scale must be positive".into()));
        }
        if let Some(co) = &self.class_offsets {
            if co.len() != classes || co.iter().any(|v| v.len() != features) {
                return Err(Error::Config("class_offsets must be K x F".into()));
            }
        }
        Ok(())
    }
}

/// Draws `n_per_domain` samples for each shift. Domain `j` is generated from its own
/// random stream, so its samples do not depend on how many other domains exist.
pub fn gen_synthetic(
    base: &GaussianMixture,
    shifts: &[ShiftSpec],
    n_per_domain: usize,
    seed: u64,
) -> Result<DomainDataset> {
    base.validate()?;
    let (k, f) = (base.num_classes(), base.num_features());
    if shifts.is_empty() {
        return Err(Error::Config("need at least one domain shift".into()));
    }
    if n_per_domain == 0 {
        return Err(Error::Config("n_per_domain must be positive".into()));
    }
    for s in shifts {
        s.validate(f, k)?;
    }
    let total = shifts.len() * n_per_domain;
    let mut features = Vec::with_capacity(total * f);
    let mut classes = Vec::with_capacity(total);
    let mut domains = Vec::with_capacity(total);
    for (j, shift) in shifts.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        for i in 0..n_per_domain {
            let y = match &base.class_weights {
                None => i % k,
                Some(w) => sample_categorical(w, &mut rng),
            };
            for c in 0..f {
                let z: f64 = StandardNormal.sample(&mut rng);
                let x = base.means[y][c] + base.stds[y][c] * z;
                let extra = shift.class_offsets.as_ref().map_or(0.0, |co| co[y][c]);
                features.push(shift.scale[c] * x + shift.offset[c] + extra);
            }
            classes.push(y);
            domains.push(j);
        }
    }
    DomainDataset::new(
        features,
        f,
        classes,
        Some(domains),
        DatasetMeta {
            num_classes: k,
            num_domains: shifts.len(),
            descriptor: format!("gaussian mixture K={k} F={f}, {} affine domains", shifts.len()),
            seed,
        },
    )
}

fn sample_categorical<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixture() -> GaussianMixture {
        GaussianMixture {
            means: vec![vec![0.0, 1.0], vec![3.0, -1.0]],
            stds: vec![vec![1.0, 0.5], vec![0.7, 1.0]],
            class_weights: None,
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let shifts = vec![ShiftSpec::identity(2), ShiftSpec::identity(2)];
        let a = gen_synthetic(&mixture(), &shifts, 50, 7).unwrap();
        let b = gen_synthetic(&mixture(), &shifts, 50, 7).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&mixture(), &shifts, 50, 8).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn domain_stream_independent_of_domain_count() {
        let one = gen_synthetic(&mixture(), &[ShiftSpec::identity(2)], 20, 3).unwrap();
        let two = gen_synthetic(&mixture(), &[ShiftSpec::identity(2), ShiftSpec::identity(2)], 20, 3).unwrap();
        assert_eq!(one.features[..], two.features[..one.features.len()]);
    }

    #[test]
    fn degenerate_covariance_rejected() {
        let mut m = mixture();
        m.stds[1][0] = 0.0;
        assert!(matches!(
            gen_synthetic(&m, &[ShiftSpec::identity(2)], 10, 0),
            Err(Error::Config(_))
        ));
        let mut m = mixture();
        m.means[1] = m.means[0].clone();
        assert!(gen_synthetic(&m, &[ShiftSpec::identity(2)], 10, 0).is_err());
        let bad_shift = ShiftSpec {
            scale: vec![1.0, -1.0],
            offset: vec![0.0, 0.0],
            class_offsets: None,
        };
        assert!(gen_synthetic(&mixture(), &[bad_shift], 10, 0).is_err());
    }

    #[test]
    fn shifted_means_match_affine_image() {
        // moment check: per-domain, per-class sample means within 3 standard errors of
        // scale * mean + offset
        let m = mixture();
        let shift = ShiftSpec {
            scale: vec![2.0, 0.5],
            offset: vec![-3.0, 4.0],
            class_offsets: None,
        };
        let n = 4000;
        let ds = gen_synthetic(&m, &[ShiftSpec::identity(2), shift.clone()], n, 21).unwrap();
        for (j, s) in [ShiftSpec::identity(2), shift].iter().enumerate() {
            for y in 0..2 {
                let idx: Vec<usize> = (0..ds.len())
                    .filter(|&i| ds.class_labels[i] == y && ds.domain_labels.as_ref().unwrap()[i] == j)
                    .collect();
                for c in 0..2 {
                    let mean = idx.iter().map(|&i| ds.sample(i)[c]).sum::<f64>() / idx.len() as f64;
                    let expected = s.scale[c] * m.means[y][c] + s.offset[c];
                    let se = s.scale[c] * m.stds[y][c] / (idx.len() as f64).sqrt();
                    assert!((mean - expected).abs() < 3.0 * se, "domain {j} class {y} ch {c}");
                }
            }
        }
    }

    #[test]
    fn identity_shifts_give_identical_distributions() {
        let ds = gen_synthetic(&mixture(), &[ShiftSpec::identity(2), ShiftSpec::identity(2)], 3000, 5).unwrap();
        let d = ds.domain_labels.as_ref().unwrap();
        for c in 0..2 {
            let m: Vec<f64> = (0..2)
                .map(|j| {
                    let v: Vec<f64> = (0..ds.len()).filter(|&i| d[i] == j).map(|i| ds.sample(i)[c]).collect();
                    v.iter().sum::<f64>() / v.len() as f64
                })
                .collect();
            assert!((m[0] - m[1]).abs() < 0.15);
        }
    }

    #[test]
    fn weighted_classes_follow_proportions() {
        let mut m = mixture();
        m.class_weights = Some(vec![0.9, 0.1]);
        let ds = gen_synthetic(&m, &[ShiftSpec::identity(2)], 2000, 1).unwrap();
        let ones = ds.class_labels.iter().filter(|&&y| y == 1).count() as f64 / 2000.0;
        assert!((ones - 0.1).abs() < 0.03);
    }

    #[test]
    fn concat_relabels_domains() {
        let a = gen_synthetic(&mixture(), &[ShiftSpec::identity(2)], 4, 1).unwrap();
        let b = gen_synthetic(&mixture(), &[ShiftSpec::identity(2)], 3, 2).unwrap();
        let c = DomainDataset::concat_as_domains(&[&a, &b]).unwrap();
        assert_eq!(c.len(), 7);
        assert_eq!(c.domain_labels.unwrap(), vec![0, 0, 0, 0, 1, 1, 1]);
        assert_eq!(c.meta.num_domains, 2);
    }
}
