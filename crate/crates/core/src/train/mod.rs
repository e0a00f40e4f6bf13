//! Plain SGD training with a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{make_batches, DomainDataset};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ForwardOptions, Model, NormMode, ParamGroup};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

mod checkpoint;

pub use checkpoint::{
    checkpoint_digest, decode_model_config, encode_model_config, load_checkpoint, read_checkpoint, save_checkpoint,
    write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    /// Rate for trunk parameters.
    pub base_lr: f64,
    /// Rate for the classifier head and the domain branch.
    pub head_lr: f64,
    pub weight_decay: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_at_fraction: f64,
    pub lambda: f64,
    /// Running-statistics momentum copied into the model configuration.
    pub momentum: f64,
    pub seed: u64,
    /// Draw batches with per-domain quotas when domain labels are available.
    #[serde(default = "yes")]
    pub stratify: bool,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    /// Schedule and rates of the reference fine-tuning setup at desk-scale length.
    pub fn reference(seed: u64) -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 64,
            base_lr: 0.001,
            head_lr: 0.01,
            weight_decay: 0.0005,
            lr_drop_factor: 0.1,
            lr_drop_at_fraction: 0.9,
            lambda: crate::losses::DEFAULT_LAMBDA,
            momentum: crate::norm::DEFAULT_MOMENTUM,
            seed,
            stratify: true,
        }
    }

    /// Calibrated defaults for from-scratch trunks on the synthetic benchmark.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            base_lr: 0.05,
            head_lr: 0.05,
            ..Self::reference(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("iterations", self.iterations as f64),
            ("base_lr", self.base_lr),
            ("head_lr", self.head_lr),
            ("lr_drop_factor", self.lr_drop_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.lr_drop_at_fraction > 0.0 && self.lr_drop_at_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "lr_drop_at_fraction must lie in (0, 1], got {}",
                self.lr_drop_at_fraction
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }

    /// First iteration that runs at the dropped rate.
    pub fn drop_iteration(&self) -> u64 {
        (self.lr_drop_at_fraction * self.iterations as f64).round() as u64
    }
}

/// Learning rates for one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    pub base: f64,
    pub head: f64,
}

pub fn lr_schedule(iter: u64, cfg: &TrainConfig) -> Rates {
    let f = if iter >= cfg.drop_iteration() {
        cfg.lr_drop_factor
    } else {
        1.0
    };
    Rates {
        base: cfg.base_lr * f,
        head: cfg.head_lr * f,
    }
}

/// `p <- p - lr * (g + weight_decay * p)` for one tensor.
pub fn sgd_update<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64, weight_decay: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::dim("sgd_update", param.shape(), grad.shape()));
    }
    let lr = T::of(lr);
    let wd = T::of(weight_decay);
    for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p = *p - lr * (g + wd * *p);
    }
    Ok(())
}

/// Applies one SGD step to every trainable tensor of `model`.
///
/// `grads` follows [`Model::params`] order. Affine terms skip weight decay. Nothing is
/// modified when any gradient is non-finite.
pub fn sgd_step<T: Scalar>(model: &mut Model<T>, grads: &[Tensor<T>], rates: Rates, weight_decay: f64) -> Result<()> {
    let infos: Vec<_> = model.params().into_iter().map(|(i, _)| i).collect();
    if infos.len() != grads.len() {
        return Err(Error::dim("sgd_step", &[infos.len()], &[grads.len()]));
    }
    for (info, g) in infos.iter().zip(grads) {
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {}", info.name)));
        }
    }
    for ((info, p), g) in infos.iter().zip(model.params_mut()).zip(grads) {
        let lr = match info.group {
            ParamGroup::Shared => rates.base,
            ParamGroup::Classifier | ParamGroup::Branch => rates.head,
        };
        let wd = if info.decay { weight_decay } else { 0.0 };
        sgd_update(p, g, lr, wd)?;
    }
    Ok(())
}

/// One row of the metrics trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub loss: f64,
    pub class_loss: f64,
    pub domain_loss: Option<f64>,
    pub lr: f64,
    pub collapsed: usize,
}

#[derive(Clone, Debug)]
pub struct TrainRun<T> {
    pub checkpoint: Checkpoint<T>,
    pub trace: Vec<TraceRow>,
}

/// Checks the dataset against the model's mode and shapes.
pub fn check_dataset<T: Scalar>(model: &Model<T>, ds: &DomainDataset) -> Result<()> {
    let cfg = &model.config;
    if ds.num_features != cfg.input_dim {
        return Err(Error::Config(format!(
            "dataset has {} features, model expects {}",
            ds.num_features, cfg.input_dim
        )));
    }
    if ds.meta.num_classes > cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            ds.meta.num_classes, cfg.num_classes
        )));
    }
    if cfg.norm_mode.needs_domain_labels() {
        let Some(d) = &ds.domain_labels else {
            return Err(Error::Config(format!(
                "mode {} needs domain labels but the dataset has none",
                cfg.norm_mode
            )));
        };
        if let Some(&bad) = d.iter().find(|&&x| x >= cfg.num_domains) {
            return Err(Error::Config(format!(
                "domain label {bad} out of range for {} domains",
                cfg.num_domains
            )));
        }
    }
    Ok(())
}

/// One forward, backward and update on the given sample indices.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    ds: &DomainDataset,
    idx: &[usize],
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<TraceRow> {
    let mode = model.config.norm_mode;
    let x = ds.features_of::<T>(idx);
    let y = ds.classes_of(idx);
    let d = if mode.needs_domain_labels() {
        ds.domains_of(idx)
    } else {
        None
    };
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &x, ForwardOptions::train(d.as_deref()))?;
    let loss_cfg = LossConfig::new(cfg.lambda, mode.includes_domain_loss())?;
    let terms = crate::losses::total_loss(&mut g, fwd.class_logits, &y, fwd.domain_logits, d.as_deref(), &loss_cfg)?;
    let loss = g.value(terms.total).item().to_f64_lossy();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at iteration {iteration}")));
    }
    let class_loss = g.value(terms.class).item().to_f64_lossy();
    let domain_loss = terms.domain.map(|v| g.value(v).item().to_f64_lossy());
    g.backward(terms.total)?;
    let grads: Vec<Tensor<T>> = fwd
        .params
        .iter()
        .map(|&p| g.grad(p).cloned().unwrap_or_else(|| Tensor::zeros(g.value(p).shape())))
        .collect();
    let rates = lr_schedule(iteration, cfg);
    sgd_step(model, &grads, rates, cfg.weight_decay)?;
    model.apply_running_updates(&fwd.layer_batches)?;
    if !model.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite parameter or running statistic after iteration {iteration}"
        )));
    }
    Ok(TraceRow {
        iteration,
        loss,
        class_loss,
        domain_loss,
        lr: rates.base,
        collapsed: fwd.layer_batches.iter().map(|b| b.collapsed).sum(),
    })
}

/// Runs iterations `start..end` on a batch stream positioned by `cfg.seed`.
fn run_range<T: Scalar>(
    model: &mut Model<T>,
    ds: &DomainDataset,
    cfg: &TrainConfig,
    start: u64,
    end: u64,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    check_dataset(model, ds)?;
    let stratify = cfg.stratify && model.config.norm_mode != NormMode::WbnSoftLatent;
    let mut stream = make_batches(ds, cfg.batch_size, cfg.seed, stratify)?.stream();
    stream.skip_batches(start);
    let mut trace = Vec::with_capacity((end - start) as usize);
    for (iteration, idx) in (start..end).zip(stream) {
        trace.push(train_step(model, ds, &idx, cfg, iteration)?);
    }
    Ok(trace)
}

/// Trains for `cfg.iterations` steps from the model's current parameters.
pub fn train_loop<T: Scalar>(mut model: Model<T>, ds: &DomainDataset, cfg: &TrainConfig) -> Result<TrainRun<T>> {
    let trace = run_range(&mut model, ds, cfg, 0, cfg.iterations)?;
    Ok(TrainRun {
        checkpoint: Checkpoint {
            model,
            train: cfg.clone(),
            iteration: cfg.iterations,
        },
        trace,
    })
}

/// Continues a checkpoint up to iteration `until`, replaying the same batch stream.
pub fn resume<T: Scalar>(ckpt: Checkpoint<T>, ds: &DomainDataset, until: u64) -> Result<TrainRun<T>> {
    let Checkpoint {
        mut model,
        train,
        iteration,
    } = ckpt;
    if until < iteration {
        return Err(Error::Contract(format!(
            "cannot resume to iteration {until} from {iteration}"
        )));
    }
    let trace = run_range(&mut model, ds, &train, iteration, until)?;
    Ok(TrainRun {
        checkpoint: Checkpoint {
            model,
            train,
            iteration: until,
        },
        trace,
    })
}

/// Trains only up to `until`, leaving the schedule defined by `cfg.iterations`.
pub fn train_partial<T: Scalar>(
    mut model: Model<T>,
    ds: &DomainDataset,
    cfg: &TrainConfig,
    until: u64,
) -> Result<TrainRun<T>> {
    let trace = run_range(&mut model, ds, cfg, 0, until)?;
    Ok(TrainRun {
        checkpoint: Checkpoint {
            model,
            train: cfg.clone(),
            iteration: until,
        },
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, GaussianMixture, ShiftSpec};
    use crate::model::{build_model, ModelConfig};

    fn data(domains: usize) -> DomainDataset {
        let m = GaussianMixture {
            means: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            stds: vec![vec![0.3; 3]; 3],
            class_weights: None,
        };
        let shifts: Vec<_> = (0..domains)
            .map(|j| ShiftSpec {
                scale: vec![1.0 + j as f64; 3],
                offset: vec![j as f64; 3],
                class_offsets: None,
            })
            .collect();
        gen_synthetic(&m, &shifts, 60, 3).unwrap()
    }

    fn small(iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 16,
            ..TrainConfig::desk(7)
        }
    }

    #[test]
    fn schedule_matches_reference_constants() {
        let cfg = TrainConfig::reference(0);
        assert_eq!(lr_schedule(0, &cfg).base, 0.001);
        assert!((lr_schedule(950, &cfg).base - 0.0001).abs() < 1e-15);
        assert_eq!(lr_schedule(899, &cfg).base, 0.001);
        assert!((lr_schedule(900, &cfg).head - 0.001).abs() < 1e-15);
        let flat = TrainConfig {
            lr_drop_factor: 1.0,
            ..cfg
        };
        assert_eq!(lr_schedule(999, &flat).base, 0.001);
    }

    #[test]
    fn sgd_update_arithmetic() {
        let mut p = Tensor::vector(vec![1.0f64]);
        sgd_update(&mut p, &Tensor::vector(vec![0.0]), 1.0, 0.5).unwrap();
        assert_eq!(p.data(), &[0.5]);
        let mut q = Tensor::vector(vec![3.0f64, -2.0]);
        sgd_update(&mut q, &Tensor::zeros(&[2]), 0.1, 0.0).unwrap();
        assert_eq!(q.data(), &[3.0, -2.0]);
    }

    #[test]
    fn sgd_step_rejects_non_finite_without_touching_params() {
        let mut m = build_model::<f64>(&ModelConfig::new(3, vec![4], 3, 1, NormMode::Bn), 0).unwrap();
        let before = m.clone();
        let mut grads: Vec<_> = m.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        grads[1].data_mut()[0] = f64::NAN;
        let rates = Rates { base: 0.1, head: 0.1 };
        assert!(matches!(sgd_step(&mut m, &grads, rates, 0.0), Err(Error::Numeric(_))));
        assert_eq!(m, before);
    }

    #[test]
    fn affine_terms_skip_decay() {
        let mut m = build_model::<f64>(&ModelConfig::new(3, vec![4], 3, 1, NormMode::Bn), 0).unwrap();
        let grads: Vec<_> = m.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        sgd_step(&mut m, &grads, Rates { base: 1.0, head: 1.0 }, 0.5).unwrap();
        assert!(m.norms[0].affine.gamma.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk(0).validate().is_ok());
        for bad in [
            TrainConfig {
                base_lr: 0.0,
                ..TrainConfig::desk(0)
            },
            TrainConfig {
                lr_drop_at_fraction: 0.0,
                ..TrainConfig::desk(0)
            },
            TrainConfig {
                lr_drop_at_fraction: 1.5,
                ..TrainConfig::desk(0)
            },
            TrainConfig {
                lambda: -1.0,
                ..TrainConfig::desk(0)
            },
            TrainConfig {
                batch_size: 1,
                ..TrainConfig::desk(0)
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn training_reduces_loss_and_stays_finite() {
        let ds = data(2);
        for mode in NormMode::ALL {
            let n = if mode == NormMode::Bn { 1 } else { 2 };
            let m = build_model::<f64>(&ModelConfig::new(3, vec![8], 3, n, mode), 1).unwrap();
            let run = train_loop(m, &ds, &small(150)).unwrap();
            let first: f64 = run.trace[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
            let last: f64 = run.trace[140..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
            assert!(last < first, "{mode}: {first} -> {last}");
            assert!(run.checkpoint.model.all_finite());
        }
    }

    #[test]
    fn supervised_mode_needs_labels() {
        let ds = data(2).without_domain_labels();
        let m = build_model::<f64>(&ModelConfig::new(3, vec![8], 3, 2, NormMode::WbnHard), 1).unwrap();
        assert!(matches!(train_loop(m, &ds, &small(5)), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_runs() {
        let ds = data(2);
        let cfg = ModelConfig::new(3, vec![8], 3, 2, NormMode::WbnSoftSupervised);
        let a = train_loop(build_model::<f64>(&cfg, 4).unwrap(), &ds, &small(40)).unwrap();
        let b = train_loop(build_model::<f64>(&cfg, 4).unwrap(), &ds, &small(40)).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.checkpoint.model, b.checkpoint.model);
    }

    #[test]
    fn resume_equals_uninterrupted() {
        let ds = data(2);
        let cfg = ModelConfig::new(3, vec![8], 3, 2, NormMode::WbnSoftLatent);
        let full = train_loop(build_model::<f64>(&cfg, 4).unwrap(), &ds, &small(30)).unwrap();
        let half = train_partial(build_model::<f64>(&cfg, 4).unwrap(), &ds, &small(30), 13).unwrap();
        let rest = resume(half.checkpoint, &ds, 30).unwrap();
        assert_eq!(rest.checkpoint.model, full.checkpoint.model);
        assert_eq!(rest.trace, full.trace[13..]);
    }
}
