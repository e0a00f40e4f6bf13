//! Binary checkpoints, little-endian like the dataset files.
//!
//! ```text
//! "WBNC" | version u16 | config digest [32] | iteration u64
//! | model config | train config
//! | params: count u32, each ndim u32 + dims u32 + f64 data
//! | layers: count u32, each domains u32 + channels u32
//! |         + per domain (mean f64*C, var f64*C, seen mass f64) + collapse events u64
//! | optimizer state: length u32 + bytes (empty for plain SGD)
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::branch::BranchConfig;
use crate::data::io::{to_u32, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig, NormMode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WBNC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Trained state plus everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub train: TrainConfig,
    /// Number of completed iterations.
    pub iteration: u64,
}

pub fn encode_model_config(cfg: &ModelConfig) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    put_model_config(&mut w, cfg)?;
    Ok(w.buf)
}

pub fn decode_model_config(bytes: &[u8]) -> Result<ModelConfig> {
    let mut r = ByteReader::new(bytes);
    let cfg = get_model_config(&mut r)?;
    r.finish()?;
    Ok(cfg)
}

fn put_model_config(w: &mut ByteWriter, cfg: &ModelConfig) -> Result<()> {
    w.u32(to_u32(cfg.input_dim, "input_dim")?);
    w.u32(to_u32(cfg.hidden.len(), "hidden layers")?);
    for &h in &cfg.hidden {
        w.u32(to_u32(h, "hidden width")?);
    }
    w.u32(to_u32(cfg.num_classes, "num_classes")?);
    w.u32(to_u32(cfg.num_domains, "num_domains")?);
    w.u8(cfg.norm_mode.code());
    w.u32(to_u32(cfg.branch.tap_point, "tap_point")?);
    match cfg.branch.hidden_width {
        None => w.u8(0),
        Some(h) => {
            w.u8(1);
            w.u32(to_u32(h, "branch hidden width")?);
        }
    }
    w.u8(cfg.branch.detach_input as u8);
    w.f64(cfg.epsilon);
    w.f64(cfg.momentum);
    w.u8(cfg.cumulative_stats as u8);
    Ok(())
}

fn flag(r: &mut ByteReader<'_>, what: &str) -> Result<bool> {
    match r.u8(what)? {
        0 => Ok(false),
        1 => Ok(true),
        v => r.fail(format!("invalid {what} flag {v}")),
    }
}

fn get_model_config(r: &mut ByteReader<'_>) -> Result<ModelConfig> {
    let input_dim = r.u32("input_dim")? as usize;
    let layers = r.u32("hidden layers")? as usize;
    if layers > 1 << 16 {
        return r.fail(format!("implausible hidden layer count {layers}"));
    }
    let hidden = (0..layers)
        .map(|_| r.u32("hidden width").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let num_classes = r.u32("num_classes")? as usize;
    let num_domains = r.u32("num_domains")? as usize;
    let code = r.u8("norm mode")?;
    let Some(norm_mode) = NormMode::from_code(code) else {
        return r.fail(format!("unknown norm mode code {code}"));
    };
    let tap_point = r.u32("tap_point")? as usize;
    let hidden_width = if flag(r, "branch hidden width")? {
        Some(r.u32("branch hidden width")? as usize)
    } else {
        None
    };
    let detach_input = flag(r, "detach_input")?;
    let epsilon = r.f64("epsilon")?;
    let momentum = r.f64("momentum")?;
    let cumulative_stats = flag(r, "cumulative_stats")?;
    Ok(ModelConfig {
        input_dim,
        hidden,
        num_classes,
        num_domains,
        norm_mode,
        branch: BranchConfig {
            tap_point,
            hidden_width,
            detach_input,
        },
        epsilon,
        momentum,
        cumulative_stats,
    })
}

fn put_train_config(w: &mut ByteWriter, cfg: &TrainConfig) -> Result<()> {
    w.u64(cfg.iterations);
    w.u32(to_u32(cfg.batch_size, "batch_size")?);
    for v in [
        cfg.base_lr,
        cfg.head_lr,
        cfg.weight_decay,
        cfg.lr_drop_factor,
        cfg.lr_drop_at_fraction,
        cfg.lambda,
        cfg.momentum,
    ] {
        w.f64(v);
    }
    w.u64(cfg.seed);
    w.u8(cfg.stratify as u8);
    Ok(())
}

fn get_train_config(r: &mut ByteReader<'_>) -> Result<TrainConfig> {
    Ok(TrainConfig {
        iterations: r.u64("iterations")?,
        batch_size: r.u32("batch_size")? as usize,
        base_lr: r.f64("base_lr")?,
        head_lr: r.f64("head_lr")?,
        weight_decay: r.f64("weight_decay")?,
        lr_drop_factor: r.f64("lr_drop_factor")?,
        lr_drop_at_fraction: r.f64("lr_drop_at_fraction")?,
        lambda: r.f64("lambda")?,
        momentum: r.f64("momentum")?,
        seed: r.u64("seed")?,
        stratify: flag(r, "stratify")?,
    })
}

fn config_digest(model: &[u8], train: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(model);
    h.update(train);
    h.finalize().into()
}

/// Hex SHA-256 of arbitrary bytes, used to compare checkpoints.
pub fn checkpoint_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut mc = ByteWriter::default();
    put_model_config(&mut mc, &ckpt.model.config)?;
    let mut tc = ByteWriter::default();
    put_train_config(&mut tc, &ckpt.train)?;

    let mut w = ByteWriter::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.bytes(&config_digest(&mc.buf, &tc.buf));
    w.u64(ckpt.iteration);
    w.bytes(&mc.buf);
    w.bytes(&tc.buf);

    let params = ckpt.model.params();
    w.u32(to_u32(params.len(), "parameter count")?);
    for (_, t) in &params {
        w.u32(to_u32(t.ndim(), "rank")?);
        for &d in t.shape() {
            w.u32(to_u32(d, "dimension")?);
        }
        w.f64s(&t.to_f64_vec());
    }

    w.u32(to_u32(ckpt.model.norms.len(), "layer count")?);
    for layer in &ckpt.model.norms {
        w.u32(to_u32(layer.domains(), "domains")?);
        w.u32(to_u32(layer.channels(), "channels")?);
        for (s, &mass) in layer.running.per_domain.iter().zip(&layer.running.seen_mass) {
            for v in s.mean.iter().chain(&s.var) {
                w.f64(v.to_f64_lossy());
            }
            w.f64(mass.to_f64_lossy());
        }
        w.u64(layer.collapse_events);
    }
    w.u32(0);
    Ok(w.buf)
}

pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let digest_at = r.offset();
    let mut stored = [0u8; 32];
    for b in &mut stored {
        *b = r.u8("config digest")?;
    }
    let iteration = r.u64("iteration")?;
    let mc_start = r.offset() as usize;
    let config = get_model_config(&mut r)?;
    let tc_start = r.offset() as usize;
    let train = get_train_config(&mut r)?;
    let tc_end = r.offset() as usize;
    if config_digest(&bytes[mc_start..tc_start], &bytes[tc_start..tc_end]) != stored {
        return Err(Error::Format {
            offset: digest_at,
            msg: "configuration digest mismatch".into(),
        });
    }
    let invalid = |e: Error, at: u64| Error::Format {
        offset: at,
        msg: format!("invalid stored configuration: {e}"),
    };
    let mut model: Model<T> = build_model(&config, 0).map_err(|e| invalid(e, mc_start as u64))?;
    train.validate().map_err(|e| invalid(e, tc_start as u64))?;

    let count = r.u32("parameter count")? as usize;
    let expected = model.params().len();
    if count != expected {
        return r.fail(format!("{count} parameter tensors, model has {expected}"));
    }
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    for (slot, shape) in model.params_mut().into_iter().zip(shapes) {
        let rank = r.u32("rank")? as usize;
        if rank != shape.len() {
            return r.fail(format!("parameter rank {rank}, expected {}", shape.len()));
        }
        let dims = (0..rank)
            .map(|_| r.u32("dimension").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return r.fail(format!("parameter shape {dims:?}, expected {shape:?}"));
        }
        let data = r.f64s(shape.iter().product(), "parameter values")?;
        *slot = Tensor::from_f64(shape, &data)?;
    }

    let layers = r.u32("layer count")? as usize;
    if layers != model.norms.len() {
        return r.fail(format!(
            "{layers} normalization layers, model has {}",
            model.norms.len()
        ));
    }
    for layer in &mut model.norms {
        let domains = r.u32("domains")? as usize;
        let channels = r.u32("channels")? as usize;
        if domains != layer.domains() || channels != layer.channels() {
            return r.fail(format!(
                "running statistics {domains}x{channels}, expected {}x{}",
                layer.domains(),
                layer.channels()
            ));
        }
        for j in 0..domains {
            let mean = r.f64s(channels, "running mean")?;
            let var = r.f64s(channels, "running variance")?;
            let mass = r.f64("seen mass")?;
            let s = &mut layer.running.per_domain[j];
            s.mean = mean.into_iter().map(T::of).collect();
            s.var = var.into_iter().map(T::of).collect();
            layer.running.seen_mass[j] = T::of(mass);
        }
        layer.collapse_events = r.u64("collapse events")?;
    }
    let opt_len = r.u32("optimizer state length")?;
    if opt_len != 0 {
        return r.fail(format!("unexpected optimizer state of {opt_len} bytes for plain SGD"));
    }
    r.finish()?;
    Ok(Checkpoint {
        model,
        train,
        iteration,
    })
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    read_checkpoint(&std::fs::read(path)?)
}
