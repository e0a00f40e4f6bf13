use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use wbn_core::data::{load_dataset, save_dataset, DomainDataset};
use wbn_core::experiment::{compare, evaluate, generate_benchmark, LodoConfig};
use wbn_core::gradcheck::suite::{format_table, run_suite, SuiteOptions};
use wbn_core::train::{checkpoint_digest, read_checkpoint, train_loop, write_checkpoint, TraceRow};
use wbn_core::{build_model, Error, Model64, NormMode};

use crate::config::ExperimentConfig;

pub const TARGET_FILE: &str = "target.wbnd";
pub const CHECKPOINT_FILE: &str = "checkpoint.wbnc";
pub const TRACE_FILE: &str = "trace.tsv";
pub const REPORT_FILE: &str = "report.txt";
pub const COMPARE_TABLE: &str = "compare.txt";
pub const COMPARE_TSV: &str = "compare.tsv";

/// Whether a verification command found a failure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

fn source_file(j: usize) -> String {
    format!("source_{j}.wbnd")
}

/// Sources (training splits) and the held-out target (test split).
struct Domains {
    sources: Vec<DomainDataset>,
    target: DomainDataset,
    held_out: Option<usize>,
}

fn generated_domains(cfg: &ExperimentConfig) -> Result<Domains> {
    let spec = cfg.benchmark();
    let mut splits = generate_benchmark(&spec, cfg.seed)?;
    let held_out = cfg.held_out_of(splits.len());
    let target = splits.remove(held_out).test;
    Ok(Domains {
        sources: splits.into_iter().map(|s| s.train).collect(),
        target,
        held_out: Some(held_out),
    })
}

fn load_domains(dir: &Path) -> Result<Domains> {
    let mut sources = Vec::new();
    while dir.join(source_file(sources.len() + 1)).exists() {
        let path = dir.join(source_file(sources.len() + 1));
        sources.push(load_dataset(&path).with_context(|| format!("loading {}", path.display()))?);
    }
    if sources.is_empty() {
        return Err(Error::Config(format!("no {} in {}", source_file(1), dir.display())).into());
    }
    let path = dir.join(TARGET_FILE);
    let target = load_dataset(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Domains {
        sources,
        target,
        held_out: None,
    })
}

fn domains(cfg: &ExperimentConfig) -> Result<Domains> {
    match &cfg.data.path {
        Some(dir) => load_domains(dir),
        None => generated_domains(cfg),
    }
}

/// Writes `source_1..N.wbnd` and `target.wbnd` plus the resolved config.
pub fn gen(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    if cfg.data.path.is_some() {
        return Err(Error::Config("gen needs a benchmark description, not data.path".into()).into());
    }
    let d = generated_domains(cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    for (j, ds) in d.sources.iter().enumerate() {
        let path = out.join(source_file(j + 1));
        save_dataset(ds, &path)?;
        written.push(path);
    }
    let path = out.join(TARGET_FILE);
    save_dataset(&d.target, &path)?;
    written.push(path);
    written.push(cfg.write_resolved(out)?);
    Ok(written)
}

fn trace_tsv(seed: u64, trace: &[TraceRow]) -> String {
    let mut s = format!("# seed={seed}\niteration\tloss\tclass_loss\tdomain_loss\tlr\tcollapsed\n");
    for r in trace {
        let domain = r.domain_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.9}"));
        let _ = writeln!(
            s,
            "{}\t{:.9}\t{:.9}\t{domain}\t{}\t{}",
            r.iteration, r.loss, r.class_loss, r.lr, r.collapsed
        );
    }
    s
}

pub struct TrainOutputs {
    pub dir: PathBuf,
    pub report: String,
}

/// Trains the configured mode on the sources and evaluates on the target.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutputs> {
    let d = domains(cfg)?;
    let parts: Vec<&DomainDataset> = d.sources.iter().collect();
    let mut ds = DomainDataset::concat_as_domains(&parts)?;
    if !cfg.data.domain_labels || cfg.mode == NormMode::WbnSoftLatent {
        ds = ds.without_domain_labels();
    }
    let tc = cfg.train_config();
    let sources = d.sources.len();
    let mc = cfg
        .model
        .config(cfg.mode, ds.num_features, ds.meta.num_classes, sources, tc.momentum);
    let model: Model64 = build_model(&mc, cfg.seed)?;
    let run = train_loop(model, &ds, &tc)?;

    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let bytes = write_checkpoint(&run.checkpoint)?;
    fs::write(dir.join(CHECKPOINT_FILE), &bytes)?;
    fs::write(dir.join(TRACE_FILE), trace_tsv(cfg.seed, &run.trace))?;
    cfg.write_resolved(&dir)?;

    let eval = evaluate(&run.checkpoint.model, &d.target)?;
    let mut report = format!(
        "seed={}\nmode={}\nsources={sources}\niterations={}\nbatch_size={}\nlambda={}\n",
        cfg.seed,
        cfg.mode.key(),
        tc.iterations,
        tc.batch_size,
        tc.lambda
    );
    if let Some(h) = d.held_out {
        let _ = writeln!(report, "held_out={h}");
    }
    if let Some(last) = run.trace.last() {
        let _ = writeln!(report, "final_loss={:.6}", last.loss);
    }
    let _ = writeln!(report, "checkpoint_sha256={}", checkpoint_digest(&bytes));
    report.push_str(&eval.to_text());
    fs::write(dir.join(REPORT_FILE), &report)?;
    Ok(TrainOutputs { dir, report })
}

/// Metrics of a saved checkpoint on a dataset file.
pub fn eval(ckpt: &Path, data: &Path) -> Result<String> {
    let bytes = fs::read(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let checkpoint = read_checkpoint::<f64>(&bytes)?;
    let ds = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let report = evaluate(&checkpoint.model, &ds)?;
    Ok(format!(
        "seed={}\ncheckpoint_sha256={}\n{}",
        checkpoint.train.seed,
        checkpoint_digest(&bytes),
        report.to_text()
    ))
}

pub fn gradcheck(inject_sign_error: bool) -> (String, Verdict) {
    let opts = SuiteOptions {
        inject_sign_error,
        ..SuiteOptions::default()
    };
    let rows = run_suite(&opts);
    let table = format!("seed={}\n{}", opts.seed, format_table(&rows, opts.tolerance));
    let verdict = if rows.iter().all(|r| r.passed) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    (table, verdict)
}

pub struct CompareOutputs {
    pub dir: PathBuf,
    pub table: String,
}

/// Leave-one-domain-out comparison of the configured methods over the configured seeds.
pub fn compare_methods(cfg: &ExperimentConfig) -> Result<CompareOutputs> {
    if cfg.data.path.is_some() {
        return Err(
            Error::Config("compare regenerates data per seed; use data.benchmark, not data.path".into()).into(),
        );
    }
    let seeds = cfg.compare_seeds();
    let lodo = LodoConfig {
        model: cfg.model.clone(),
        train: cfg.train_config(),
        merge_sources: cfg.compare.merge_sources,
    };
    let result = compare(&cfg.benchmark(), &cfg.compare.methods, &seeds, &lodo)?;
    let seed_list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let mut table = format!("seeds={}\n", seed_list.join(","));
    table.push_str(&result.to_table());
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(COMPARE_TABLE), &table)?;
    fs::write(dir.join(COMPARE_TSV), result.to_tsv())?;
    cfg.write_resolved(&dir)?;
    Ok(CompareOutputs { dir, table })
}
