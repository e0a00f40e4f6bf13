//! Synthetic domain-generalization benchmark, leave-one-domain-out protocol and the
//! side-by-side method comparison.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::branch::BranchConfig;
use crate::data::{gen_synthetic, DomainDataset, GaussianMixture, ShiftSpec};
use crate::error::{Error, Result};
use crate::metrics::{
    argmax_rows, avg_class_accuracy, mean_weight_gap, weight_histogram, ClassAccuracy, WeightHistogram,
};
use crate::model::{build_model, EvalWeights, Model, ModelConfig, NormMode};
use crate::norm::DEFAULT_EPSILON;
use crate::scalar::Scalar;
use crate::train::{train_loop, TrainConfig};

/// One domain of the benchmark: isotropic scale and an offset vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub scale: f64,
    pub offset: Vec<f64>,
}

/// Class-conditional Gaussians shared by all domains, each domain an affine image of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub classes: usize,
    pub features: usize,
    /// Standard deviation of the class-mean coordinates.
    pub class_separation: f64,
    pub noise_std: f64,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    /// Seed of the class means.
    pub layout_seed: u64,
    pub domains: Vec<DomainSpec>,
}

impl BenchmarkSpec {
    /// Four classes, sixteen features and four domains in two pairs. Members of a pair
    /// have nearly equal scale and offset; the pairs differ by a factor of four in scale
    /// and sit on opposite sides of the origin. Every held-out domain therefore has a
    /// close relative among the sources, while the pooled source statistics match none.
    pub fn default_desk() -> Self {
        let features = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let direction: Vec<f64> = (0..features)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let layout = [(0.5, 3.0), (0.525, 3.0), (2.0, -3.0), (1.9, -3.0)];
        let domains = layout
            .iter()
            .map(|&(scale, shift)| DomainSpec {
                scale,
                offset: direction
                    .iter()
                    .map(|&d| {
                        let jitter: f64 = StandardNormal.sample(&mut rng);
                        shift * d + 0.15 * jitter
                    })
                    .collect(),
            })
            .collect();
        BenchmarkSpec {
            classes: 4,
            features,
            class_separation: 0.8,
            noise_std: 1.0,
            train_per_domain: 500,
            test_per_domain: 500,
            layout_seed: 7,
            domains,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.features == 0 {
            return Err(Error::Config("features must be positive".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("need at least one domain".into()));
        }
        if !(self.class_separation > 0.0) || !(self.noise_std > 0.0) {
            return Err(Error::Config("class_separation and noise_std must be positive".into()));
        }
        if self.train_per_domain < 2 || self.test_per_domain < 1 {
            return Err(Error::Config("too few samples per domain".into()));
        }
        for (j, d) in self.domains.iter().enumerate() {
            if !(d.scale > 0.0 && d.scale.is_finite()) {
                return Err(Error::Config(format!("domain {j}: scale must be positive")));
            }
            if d.offset.len() != self.features {
                return Err(Error::Config(format!(
                    "domain {j}: offset has {} entries, expected {}",
                    d.offset.len(),
                    self.features
                )));
            }
        }
        Ok(())
    }

    pub fn mixture(&self) -> GaussianMixture {
        let mut rng = ChaCha8Rng::seed_from_u64(self.layout_seed);
        let means = (0..self.classes)
            .map(|_| {
                (0..self.features)
                    .map(|_| {
                        self.class_separation * {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z
                        }
                    })
                    .collect()
            })
            .collect();
        GaussianMixture {
            means,
            stds: vec![vec![self.noise_std; self.features]; self.classes],
            class_weights: None,
        }
    }

    pub fn shifts(&self) -> Vec<ShiftSpec> {
        self.domains
            .iter()
            .map(|d| ShiftSpec {
                scale: vec![d.scale; self.features],
                offset: d.offset.clone(),
                class_offsets: None,
            })
            .collect()
    }
}

/// Train and test samples of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplit {
    pub train: DomainDataset,
    pub test: DomainDataset,
}

/// Draws every domain's train and test splits for one seed.
pub fn generate_benchmark(spec: &BenchmarkSpec, seed: u64) -> Result<Vec<DomainSplit>> {
    spec.validate()?;
    let mixture = spec.mixture();
    let shifts = spec.shifts();
    let train = gen_synthetic(&mixture, &shifts, spec.train_per_domain, seed.wrapping_mul(2))?;
    let test = gen_synthetic(
        &mixture,
        &shifts,
        spec.test_per_domain,
        seed.wrapping_mul(2).wrapping_add(1),
    )?;
    Ok((0..shifts.len())
        .map(|j| DomainSplit {
            train: single_domain(train.domain_subset(j)),
            test: single_domain(test.domain_subset(j)),
        })
        .collect())
}

fn single_domain(mut ds: DomainDataset) -> DomainDataset {
    ds.domain_labels = Some(vec![0; ds.len()]);
    ds.meta.num_domains = 1;
    ds
}

/// Architecture shared by every method of a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub branch: BranchConfig,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub cumulative_stats: bool,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden: vec![32, 32],
            branch: BranchConfig::default(),
            epsilon: DEFAULT_EPSILON,
            cumulative_stats: false,
        }
    }
}

impl ModelSpec {
    /// Model configuration for `mode` with `sources` domains; plain BN always has one.
    pub fn config(
        &self,
        mode: NormMode,
        features: usize,
        classes: usize,
        sources: usize,
        momentum: f64,
    ) -> ModelConfig {
        let domains = if mode == NormMode::Bn { 1 } else { sources };
        ModelConfig {
            input_dim: features,
            hidden: self.hidden.clone(),
            num_classes: classes,
            num_domains: domains,
            norm_mode: mode,
            branch: self.branch.clone(),
            epsilon: self.epsilon,
            momentum,
            cumulative_stats: self.cumulative_stats,
        }
    }
}

/// Predicted classes for `ds` under the given eval weights.
pub fn predict_classes<T: Scalar>(model: &Model<T>, ds: &DomainDataset, weights: EvalWeights) -> Result<Vec<usize>> {
    let p = model.predict(&ds.all_features(), weights)?;
    Ok(argmax_rows(&p.logits))
}

pub fn accuracy<T: Scalar>(model: &Model<T>, ds: &DomainDataset, weights: EvalWeights) -> Result<ClassAccuracy> {
    let preds = predict_classes(model, ds, weights)?;
    avg_class_accuracy(&preds, &ds.class_labels, model.config.num_classes)
}

/// Accuracy on labelled source data, each sample normalized with its own domain's
/// statistics where the model has per-domain statistics tied to labels.
pub fn in_domain_accuracy<T: Scalar>(model: &Model<T>, sources: &DomainDataset) -> Result<ClassAccuracy> {
    let mode = model.config.norm_mode;
    let per_domain = matches!(mode, NormMode::Dabn | NormMode::WbnHard | NormMode::WbnSoftSupervised);
    let Some(labels) = sources.domain_labels.as_ref().filter(|_| per_domain) else {
        return accuracy(model, sources, EvalWeights::Auto);
    };
    let mut preds = vec![0; sources.len()];
    for j in 0..model.num_domains() {
        let idx: Vec<usize> = (0..sources.len()).filter(|&i| labels[i] == j).collect();
        if idx.is_empty() {
            continue;
        }
        let p = predict_classes(model, &sources.select(&idx), EvalWeights::Domain(j))?;
        for (&i, y) in idx.iter().zip(p) {
            preds[i] = y;
        }
    }
    avg_class_accuracy(&preds, &sources.class_labels, model.config.num_classes)
}

/// Metrics of one trained model on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: NormMode,
    pub accuracy: ClassAccuracy,
    pub histograms: Vec<WeightHistogram>,
    pub weight_gap: f64,
    pub samples: usize,
}

pub fn evaluate<T: Scalar>(model: &Model<T>, ds: &DomainDataset) -> Result<EvalReport> {
    if ds.num_features != model.config.input_dim {
        return Err(Error::Config(format!(
            "dataset has {} features, model expects {}",
            ds.num_features, model.config.input_dim
        )));
    }
    let p = model.predict(&ds.all_features(), EvalWeights::Auto)?;
    let preds = argmax_rows(&p.logits);
    let acc = avg_class_accuracy(&preds, &ds.class_labels, model.config.num_classes)?;
    let histograms = weight_histogram(&p.weights, ds.domain_labels.as_deref())?;
    Ok(EvalReport {
        mode: model.config.norm_mode,
        accuracy: acc,
        weight_gap: mean_weight_gap(&histograms),
        histograms,
        samples: ds.len(),
    })
}

impl EvalReport {
    /// Line-oriented text: accuracy, per-class recall, one histogram row per domain.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode {}", self.mode);
        let _ = writeln!(s, "samples {}", self.samples);
        let _ = writeln!(s, "avg_class_accuracy {:.6}", self.accuracy.average);
        for (k, r) in self.accuracy.per_class.iter().enumerate() {
            match r {
                Some(r) => {
                    let _ = writeln!(s, "recall class={k} {r:.6}");
                }
                None => {
                    let _ = writeln!(s, "recall class={k} absent");
                }
            }
        }
        let _ = writeln!(s, "weight_gap {:.6}", self.weight_gap);
        for h in &self.histograms {
            let dom = h.domain.map_or("all".to_string(), |d| d.to_string());
            let counts: Vec<String> = h.counts.iter().map(u64::to_string).collect();
            let _ = writeln!(
                s,
                "histogram domain={dom} samples={} mean_w0={:.6} bins={}",
                h.samples,
                h.mean_weight,
                counts.join(",")
            );
        }
        s
    }
}

/// Outcome of training on all domains but one.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub held_out: usize,
    /// Held-out test accuracy with the method's own inference weights.
    pub target: f64,
    /// Source test accuracy with each source's own statistics where applicable.
    pub in_domain: f64,
    /// Held-out accuracy when normalizing with the held-out set's own batch statistics.
    pub oracle: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodResult {
    pub mode: NormMode,
    pub folds: Vec<FoldResult>,
}

impl MethodResult {
    pub fn mean_target(&self) -> f64 {
        mean(self.folds.iter().map(|f| f.target))
    }
    pub fn mean_in_domain(&self) -> f64 {
        mean(self.folds.iter().map(|f| f.in_domain))
    }
    pub fn mean_oracle(&self) -> f64 {
        mean(self.folds.iter().map(|f| f.oracle))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Settings of a leave-one-domain-out run.
#[derive(Clone, Debug, PartialEq)]
pub struct LodoConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Treat all sources as one domain, which reduces every method to plain BN.
    pub merge_sources: bool,
}

/// Trains `mode` on every domain except `held_out` and evaluates on it.
pub fn run_fold(splits: &[DomainSplit], held_out: usize, mode: NormMode, cfg: &LodoConfig) -> Result<FoldResult> {
    if held_out >= splits.len() {
        return Err(Error::Domain {
            index: held_out,
            count: splits.len(),
        });
    }
    let train_parts: Vec<&DomainDataset> = splits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != held_out)
        .map(|(_, s)| &s.train)
        .collect();
    let test_parts: Vec<&DomainDataset> = splits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != held_out)
        .map(|(_, s)| &s.test)
        .collect();
    let mut train = DomainDataset::concat_as_domains(&train_parts)?;
    let mut source_test = DomainDataset::concat_as_domains(&test_parts)?;
    if cfg.merge_sources {
        for ds in [&mut train, &mut source_test] {
            ds.domain_labels = Some(vec![0; ds.len()]);
            ds.meta.num_domains = 1;
        }
    }
    if mode == NormMode::WbnSoftLatent {
        train = train.without_domain_labels();
    }
    let sources = if cfg.merge_sources { 1 } else { train_parts.len() };
    let target = &splits[held_out].test;
    let mc = cfg.model.config(
        mode,
        target.num_features,
        target.meta.num_classes,
        sources,
        cfg.train.momentum,
    );
    let model: Model<f64> = build_model(&mc, cfg.train.seed)?;
    let run = train_loop(model, &train, &cfg.train)?;
    let model = run.checkpoint.model;
    let tail = run.trace.len().clamp(1, 20);
    let final_loss = mean(run.trace.iter().rev().take(tail).map(|r| r.loss));
    Ok(FoldResult {
        held_out,
        target: accuracy(&model, target, EvalWeights::Auto)?.average,
        in_domain: in_domain_accuracy(&model, &source_test)?.average,
        oracle: accuracy(&model, target, EvalWeights::BatchStats)?.average,
        final_loss,
    })
}

/// One fold per domain, in domain order.
pub fn lodo_protocol(splits: &[DomainSplit], mode: NormMode, cfg: &LodoConfig) -> Result<MethodResult> {
    if splits.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-domain-out needs at least 2 domains, got {}",
            splits.len()
        )));
    }
    let folds = parallel_map((0..splits.len()).collect(), |&k| run_fold(splits, k, mode, cfg))?;
    Ok(MethodResult { mode, folds })
}

/// Runs `f` over `items` on scoped threads, preserving order.
fn parallel_map<I: Sync, O: Send>(items: Vec<I>, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Result<Vec<O>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Methods of the comparison table, in column order.
pub const COMPARE_METHODS: [NormMode; 5] = [
    NormMode::Bn,
    NormMode::Dabn,
    NormMode::WbnHard,
    NormMode::WbnSoftSupervised,
    NormMode::WbnSoftLatent,
];

/// Per-seed, per-method leave-one-domain-out results.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub methods: Vec<NormMode>,
    pub seeds: Vec<u64>,
    /// `runs[s][m]` for seed `s` and method `m`.
    pub runs: Vec<Vec<MethodResult>>,
    pub domains: usize,
}

/// Runs every method on every seed. Each seed regenerates the data and reseeds
/// initialization and batching.
pub fn compare(spec: &BenchmarkSpec, methods: &[NormMode], seeds: &[u64], cfg: &LodoConfig) -> Result<Comparison> {
    spec.validate()?;
    if seeds.is_empty() || methods.is_empty() {
        return Err(Error::Config("need at least one seed and one method".into()));
    }
    let data = seeds
        .iter()
        .map(|&s| generate_benchmark(spec, s))
        .collect::<Result<Vec<_>>>()?;
    let domains = spec.domains.len();
    let mut jobs = Vec::new();
    for s in 0..seeds.len() {
        for m in 0..methods.len() {
            for k in 0..domains {
                jobs.push((s, m, k));
            }
        }
    }
    let folds = parallel_map(jobs.clone(), |&(s, m, k)| {
        let c = LodoConfig {
            train: TrainConfig {
                seed: seeds[s],
                ..cfg.train.clone()
            },
            ..cfg.clone()
        };
        run_fold(&data[s], k, methods[m], &c)
    })?;
    let mut runs: Vec<Vec<MethodResult>> = (0..seeds.len())
        .map(|_| {
            methods
                .iter()
                .map(|&mode| MethodResult {
                    mode,
                    folds: Vec::new(),
                })
                .collect()
        })
        .collect();
    for ((s, m, _), f) in jobs.into_iter().zip(folds) {
        runs[s][m].folds.push(f);
    }
    Ok(Comparison {
        methods: methods.to_vec(),
        seeds: seeds.to_vec(),
        runs,
        domains,
    })
}

impl Comparison {
    fn column(&self, m: usize, pick: impl Fn(&FoldResult) -> f64) -> Vec<f64> {
        (0..self.domains)
            .map(|k| mean(self.runs.iter().map(|seed| pick(&seed[m].folds[k]))))
            .collect()
    }

    /// Held-out accuracy per domain, averaged over seeds.
    pub fn target_column(&self, m: usize) -> Vec<f64> {
        self.column(m, |f| f.target)
    }

    /// Mean over domains and seeds.
    pub fn mean_target(&self, mode: NormMode) -> Option<f64> {
        let m = self.methods.iter().position(|&x| x == mode)?;
        Some(mean(self.target_column(m).into_iter()))
    }

    pub fn mean_in_domain(&self, mode: NormMode) -> Option<f64> {
        let m = self.methods.iter().position(|&x| x == mode)?;
        Some(mean(self.column(m, |f| f.in_domain).into_iter()))
    }

    pub fn mean_oracle(&self, mode: NormMode) -> Option<f64> {
        let m = self.methods.iter().position(|&x| x == mode)?;
        Some(mean(self.column(m, |f| f.oracle).into_iter()))
    }

    /// One row per held-out domain plus a mean row, one column per method, in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "held_out");
        for m in &self.methods {
            let _ = write!(s, " {:>10}", m.label());
        }
        s.push('\n');
        let cols: Vec<Vec<f64>> = (0..self.methods.len()).map(|m| self.target_column(m)).collect();
        for k in 0..self.domains {
            let _ = write!(s, "{:<10}", format!("domain_{k}"));
            for c in &cols {
                let _ = write!(s, " {:>10.2}", 100.0 * c[k]);
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<10}", "mean");
        for c in &cols {
            let _ = write!(s, " {:>10.2}", 100.0 * mean(c.iter().copied()));
        }
        s.push('\n');
        s
    }

    /// Tab-separated rows: seed, method, held-out domain, target, in-domain, oracle, loss.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("seed\tmethod\theld_out\ttarget\tin_domain\toracle\tfinal_loss\n");
        for (seed, runs) in self.seeds.iter().zip(&self.runs) {
            for r in runs {
                for f in &r.folds {
                    let _ = writeln!(
                        s,
                        "{seed}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                        r.mode.key(),
                        f.held_out,
                        f.target,
                        f.in_domain,
                        f.oracle,
                        f.final_loss
                    );
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> BenchmarkSpec {
        let mut s = BenchmarkSpec::default_desk();
        s.features = 4;
        s.class_separation = 1.5;
        s.train_per_domain = 60;
        s.test_per_domain = 40;
        s.domains.truncate(3);
        for d in &mut s.domains {
            d.offset.truncate(4);
        }
        s
    }

    fn tiny_cfg() -> LodoConfig {
        LodoConfig {
            model: ModelSpec {
                hidden: vec![8],
                ..ModelSpec::default()
            },
            train: TrainConfig {
                iterations: 60,
                batch_size: 24,
                ..TrainConfig::desk(1)
            },
            merge_sources: false,
        }
    }

    #[test]
    fn default_spec_is_valid() {
        let s = BenchmarkSpec::default_desk();
        s.validate().unwrap();
        assert_eq!((s.classes, s.features, s.domains.len()), (4, 16, 4));
    }

    #[test]
    fn splits_are_deterministic_and_sized() {
        let s = tiny_spec();
        let a = generate_benchmark(&s, 3).unwrap();
        assert_eq!(a, generate_benchmark(&s, 3).unwrap());
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].train.len(), 60);
        assert_eq!(a[2].test.len(), 40);
        assert_ne!(a[0].train.features, a[0].test.features);
    }

    #[test]
    fn lodo_has_one_row_per_domain() {
        let s = tiny_spec();
        let splits = generate_benchmark(&s, 0).unwrap();
        let r = lodo_protocol(&splits, NormMode::WbnSoftSupervised, &tiny_cfg()).unwrap();
        assert_eq!(r.folds.len(), 3);
        assert!(r.folds.iter().enumerate().all(|(k, f)| f.held_out == k));
        assert!(r.mean_target() > 0.0 && r.mean_target() <= 1.0);
    }

    #[test]
    fn lodo_needs_two_domains() {
        let s = tiny_spec();
        let splits = generate_benchmark(&s, 0).unwrap();
        assert!(lodo_protocol(&splits[..1], NormMode::Bn, &tiny_cfg()).is_err());
    }

    #[test]
    fn merged_sources_make_methods_agree() {
        let s = tiny_spec();
        let cfg = LodoConfig {
            merge_sources: true,
            ..tiny_cfg()
        };
        let c = compare(&s, &COMPARE_METHODS, &[5], &cfg).unwrap();
        let base = c.target_column(0);
        for m in 1..COMPARE_METHODS.len() {
            for (a, b) in c.target_column(m).iter().zip(&base) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let table = c.to_table();
        assert_eq!(table.lines().count(), 1 + 3 + 1);
        assert!(table.lines().last().unwrap().starts_with("mean"));
    }

    #[test]
    fn report_lists_one_histogram_per_domain() {
        let s = tiny_spec();
        let splits = generate_benchmark(&s, 0).unwrap();
        let train = DomainDataset::concat_as_domains(&[&splits[0].train, &splits[1].train]).unwrap();
        let test = DomainDataset::concat_as_domains(&[&splits[0].test, &splits[1].test]).unwrap();
        let cfg = tiny_cfg();
        let mc = cfg.model.config(NormMode::WbnSoftLatent, 4, 4, 2, 0.1);
        let run = train_loop(
            build_model::<f64>(&mc, 0).unwrap(),
            &train.without_domain_labels(),
            &cfg.train,
        )
        .unwrap();
        let rep = evaluate(&run.checkpoint.model, &test).unwrap();
        assert_eq!(rep.histograms.len(), 2);
        assert_eq!(rep, evaluate(&run.checkpoint.model, &test).unwrap());
        let text = rep.to_text();
        assert_eq!(text.lines().filter(|l| l.starts_with("histogram")).count(), 2);
    }
}
