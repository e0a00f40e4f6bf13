//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Thresholds for the benchmark and latent-discovery criteria were fixed by a
//! calibration run over seeds 0..5 before this runner existed; they are regression
//! floors, not tuned to the latest numbers.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use wbn_core::data::DomainDataset;
use wbn_core::experiment::{compare, evaluate, generate_benchmark, BenchmarkSpec, LodoConfig, ModelSpec};
use wbn_core::gradcheck::suite::{run_suite, SuiteOptions, DEFAULT_TOLERANCE};
use wbn_core::norm::{
    batch_stats, bn_forward, dabn_forward, one_hot, wbn_hard_forward, wbn_soft_forward, weighted_domain_stats,
    AffineParams, DomainBatch, Momentum, RunningStats,
};
use wbn_core::train::{
    checkpoint_digest, read_checkpoint, resume, train_loop, train_partial, write_checkpoint, TrainConfig,
};
use wbn_core::{build_model, Graph64, Model64, NormMode, Tensor64};

const EQUIV_TOL: f64 = 1e-12;
const EPS: f64 = 1e-5;

// Frozen after calibration (WBN* - BN = +0.76 points, oracle gap 0.30, latent +1.0).
const MIN_WBN_STAR_MARGIN: f64 = 0.0;
const MAX_ORACLE_GAP: f64 = 0.02;
const LATENT_SLACK: f64 = 0.01;
// Frozen after calibration (per-seed gaps 0.91..0.97).
const MIN_WEIGHT_GAP: f64 = 0.5;

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(id: u32, name: &str, outcome: Outcome) -> bool {
    let tag = if outcome.passed { "PASS" } else { "FAIL" };
    println!("{tag} criterion {id} ({name}): {}", outcome.detail);
    outcome.passed
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor64 {
    let data = (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect();
    Tensor64::new(vec![rows, cols], data).unwrap()
}

fn random_affine(rng: &mut ChaCha8Rng, c: usize) -> AffineParams<f64> {
    AffineParams::new(
        (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
        (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Labels with at least two samples per domain, in shuffled order.
fn random_labels(rng: &mut ChaCha8Rng, n: usize, domains: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n)
        .map(|i| {
            if i < 2 * domains {
                i % domains
            } else {
                rng.random_range(0..domains)
            }
        })
        .collect();
    for i in (1..n).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    labels
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let rows = run_suite(&SuiteOptions::default());
    let elapsed = start.elapsed();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    Outcome {
        passed: failed.is_empty() && worst < DEFAULT_TOLERANCE && elapsed < Duration::from_secs(60),
        detail: format!(
            "{} operations, worst rel error {worst:.2e} (< {DEFAULT_TOLERANCE:.0e}), failed {failed:?}, {:.2}s (< 60s)",
            rows.len(),
            elapsed.as_secs_f64()
        ),
    }
}

fn equivalence_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut soft_hard, mut hard_dabn, mut single_bn, mut stats_gap) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let domains = rng.random_range(1..=4);
        let c = rng.random_range(1..=6);
        let n = rng.random_range(2 * domains + 2..=48);
        let x = random_matrix(&mut rng, n, c);
        let labels = random_labels(&mut rng, n, domains);
        let affine = random_affine(&mut rng, c);

        let mut g = Graph64::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(one_hot(&labels, domains).unwrap());
        let params = affine.bind(&mut g, false);
        let ws = weighted_domain_stats(&mut g, xv, wv).unwrap();
        let soft = wbn_soft_forward(&mut g, xv, wv, &ws.per_domain, params, EPS).unwrap();
        let hard = wbn_hard_forward(&mut g, xv, &labels, &ws.per_domain, params, EPS).unwrap();
        soft_hard = soft_hard.max(g.value(soft).max_abs_diff(g.value(hard)));

        let mut h = Graph64::new();
        let hp = affine.bind(&mut h, false);
        let subsets: Vec<(Vec<usize>, _)> = (0..domains)
            .map(|j| {
                let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == j).collect();
                let sub = h.constant(x.gather_rows(&idx));
                (idx, sub)
            })
            .collect();
        let own: Vec<_> = subsets
            .iter()
            .map(|&(_, sub)| batch_stats(&mut h, sub).unwrap())
            .collect();
        for (j, (idx, sub)) in subsets.iter().enumerate() {
            stats_gap = stats_gap
                .max(max_diff(
                    h.value(own[j].mean).data(),
                    g.value(ws.per_domain[j].mean).data(),
                ))
                .max(max_diff(
                    h.value(own[j].var).data(),
                    g.value(ws.per_domain[j].var).data(),
                ));
            let da = dabn_forward(&mut h, *sub, j, &own, hp, EPS).unwrap();
            hard_dabn = hard_dabn.max(h.value(da).max_abs_diff(&g.value(hard).gather_rows(idx)));
        }

        let mut s = Graph64::new();
        let xs = s.constant(x.clone());
        let ones = s.constant(Tensor64::ones(&[n, 1]));
        let sp = affine.bind(&mut s, false);
        let single = weighted_domain_stats(&mut s, xs, ones).unwrap();
        let wbn = wbn_soft_forward(&mut s, xs, ones, &single.per_domain, sp, EPS).unwrap();
        let plain = batch_stats(&mut s, xs).unwrap();
        let bn = bn_forward(&mut s, xs, plain, sp, EPS).unwrap();
        single_bn = single_bn.max(s.value(wbn).max_abs_diff(s.value(bn)));
    }
    let worst = soft_hard.max(hard_dabn).max(single_bn).max(stats_gap);
    Outcome {
        passed: worst <= EQUIV_TOL,
        detail: format!(
            "100 batches; soft-vs-hard {soft_hard:.1e}, hard-vs-DA-BN {hard_dabn:.1e}, N=1-vs-BN {single_bn:.1e}, \
             weighted-vs-subset stats {stats_gap:.1e} (each <= {EQUIV_TOL:.0e})"
        ),
    }
}

fn normalization_invariant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (domains, c, n) = (3, 5, 90);
    let labels = random_labels(&mut rng, n, domains);
    let mut x = random_matrix(&mut rng, n, c);
    let cols = x.cols();
    for (i, row) in x.data_mut().chunks_mut(cols).enumerate() {
        let d = labels[i] as f64;
        for v in row.iter_mut() {
            *v = *v * (0.2 + 2.0 * d) + 4.0 * d - 3.0;
        }
    }
    let mut g = Graph64::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(one_hot(&labels, domains).unwrap());
    let ws = weighted_domain_stats(&mut g, xv, wv).unwrap();
    let params = AffineParams::identity(c).bind(&mut g, false);
    let y = wbn_hard_forward(&mut g, xv, &labels, &ws.per_domain, params, EPS).unwrap();
    let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
    for j in 0..domains {
        let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == j).collect();
        let yj = g.value(y).gather_rows(&idx);
        let xj = x.gather_rows(&idx);
        let m = idx.len() as f64;
        for ch in 0..c {
            let col = |t: &Tensor64| (0..idx.len()).map(|r| t.at(r, ch)).collect::<Vec<f64>>();
            let (yc, xc) = (col(&yj), col(&xj));
            let ymean = yc.iter().sum::<f64>() / m;
            let yvar = yc.iter().map(|v| (v - ymean).powi(2)).sum::<f64>() / m;
            let xmean = xc.iter().sum::<f64>() / m;
            let sigma2 = xc.iter().map(|v| (v - xmean).powi(2)).sum::<f64>() / m;
            mean_err = mean_err.max(ymean.abs());
            var_err = var_err.max((yvar - sigma2 / (sigma2 + EPS)).abs());
        }
    }
    Outcome {
        passed: mean_err < 1e-9 && var_err <= 1e-6,
        detail: format!("max |mean| {mean_err:.1e} (< 1e-9), max variance error {var_err:.1e} (<= 1e-6)"),
    }
}

struct StreamResult {
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    sample_mean: Vec<f64>,
    sample_var: Vec<f64>,
}

/// Feeds `batches` Gaussian batches through the weighted-stats path into running stats.
fn stream_running_stats(
    momentum: Momentum<f64>,
    means: &[f64],
    stds: &[f64],
    batches: usize,
    size: usize,
) -> StreamResult {
    let c = means.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dists: Vec<Normal<f64>> = means
        .iter()
        .zip(stds)
        .map(|(&m, &s)| Normal::new(m, s).unwrap())
        .collect();
    let mut running = RunningStats::new(1, c, EPS, momentum).unwrap();
    let mut all = Vec::with_capacity(batches * size * c);
    for _ in 0..batches {
        let data: Vec<f64> = (0..size)
            .flat_map(|_| dists.iter().map(|d| d.sample(&mut rng)).collect::<Vec<_>>())
            .collect();
        all.extend_from_slice(&data);
        let mut g = Graph64::new();
        let xv = g.constant(Tensor64::new(vec![size, c], data).unwrap());
        let wv = g.constant(Tensor64::ones(&[size, 1]));
        let ws = weighted_domain_stats(&mut g, xv, wv).unwrap();
        let batch = DomainBatch {
            stats: ws.per_domain[0].read(&g, EPS),
            mass: ws.mass[0],
            variance_retention: ws.variance_retention[0],
        };
        running.update(&[batch], size).unwrap();
    }
    let total = (batches * size) as f64;
    let sample_mean: Vec<f64> = (0..c)
        .map(|ch| all.iter().skip(ch).step_by(c).sum::<f64>() / total)
        .collect();
    let sample_var = (0..c)
        .map(|ch| {
            all.iter()
                .skip(ch)
                .step_by(c)
                .map(|v| (v - sample_mean[ch]).powi(2))
                .sum::<f64>()
                / (total - 1.0)
        })
        .collect();
    let s = &running.per_domain[0];
    StreamResult {
        running_mean: s.mean.clone(),
        running_var: s.var.clone(),
        sample_mean,
        sample_var,
    }
}

fn relative_errors(est: &[f64], truth: &[f64]) -> f64 {
    est.iter()
        .zip(truth)
        .map(|(e, t)| ((e - t) / t).abs())
        .fold(0.0, f64::max)
}

fn running_stats_convergence() -> Outcome {
    let means = [1.0, -2.0, 5.0];
    let stds: [f64; 3] = [1.0, 0.5, 2.0];
    let vars: Vec<f64> = stds.iter().map(|s| s * s).collect();
    let cum = stream_running_stats(Momentum::Cumulative, &means, &stds, 500, 64);
    let mean_err = relative_errors(&cum.running_mean, &means);
    let var_err = relative_errors(&cum.running_var, &vars);
    println!(
        "INFO criterion 4: drawn stream itself deviates from the population by {:.3}% (mean), {:.3}% (variance)",
        100.0 * relative_errors(&cum.sample_mean, &means),
        100.0 * relative_errors(&cum.sample_var, &vars)
    );
    println!(
        "INFO criterion 4: cumulative estimate vs drawn stream: {:.2e} (mean), {:.2e} (variance)",
        relative_errors(&cum.running_mean, &cum.sample_mean),
        relative_errors(&cum.running_var, &cum.sample_var)
    );
    let exp = stream_running_stats(Momentum::Exponential(0.1), &means, &stds, 500, 64);
    println!(
        "INFO criterion 4: exponential momentum 0.1 gives mean rel error {:.3}%, variance rel error {:.3}%",
        100.0 * relative_errors(&exp.running_mean, &means),
        100.0 * relative_errors(&exp.running_var, &vars)
    );
    Outcome {
        passed: mean_err <= 0.01 && var_err <= 0.01,
        detail: format!(
            "cumulative, 500x64 samples; mean rel error {:.3}%, variance rel error {:.3}% (each <= 1%)",
            100.0 * mean_err,
            100.0 * var_err
        ),
    }
}

fn benchmark() -> Outcome {
    let spec = BenchmarkSpec::default_desk();
    let methods = [
        NormMode::Bn,
        NormMode::Dabn,
        NormMode::WbnSoftSupervised,
        NormMode::WbnSoftLatent,
    ];
    let cfg = LodoConfig {
        model: ModelSpec::default(),
        train: TrainConfig::desk(0),
        merge_sources: false,
    };
    let start = Instant::now();
    let result = match compare(&spec, &methods, &[0, 1, 2, 3, 4], &cfg) {
        Ok(r) => r,
        Err(e) => {
            return Outcome {
                passed: false,
                detail: format!("benchmark failed to run: {e}"),
            }
        }
    };
    let elapsed = start.elapsed();
    println!("{}", result.to_table());
    let bn = result.mean_target(NormMode::Bn).unwrap();
    let star = result.mean_target(NormMode::WbnSoftSupervised).unwrap();
    let latent = result.mean_target(NormMode::WbnSoftLatent).unwrap();
    let dabn_in = result.mean_in_domain(NormMode::Dabn).unwrap();
    let dabn_oracle = result.mean_oracle(NormMode::Dabn).unwrap();
    let margin = star - bn;
    let oracle_gap = (dabn_oracle - dabn_in).abs();
    let latent_margin = latent - bn;
    let a = margin >= MIN_WBN_STAR_MARGIN;
    let b = oracle_gap <= MAX_ORACLE_GAP;
    let c = latent_margin >= -LATENT_SLACK;
    let fast = elapsed < Duration::from_secs(300);
    let mark = |ok: bool| if ok { "ok" } else { "FAILED" };
    Outcome {
        passed: a && b && c && fast,
        detail: format!(
            "(a) WBN* - BN = {:+.2} pts [{}]; (b) DA-BN oracle vs in-domain gap {:.2} pts (<= {:.0}) [{}]; \
             (c) WBN - BN = {:+.2} pts (>= -{:.0}) [{}]; {:.1}s (< 300s) [{}]",
            100.0 * margin,
            mark(a),
            100.0 * oracle_gap,
            100.0 * MAX_ORACLE_GAP,
            mark(b),
            100.0 * latent_margin,
            100.0 * LATENT_SLACK,
            mark(c),
            elapsed.as_secs_f64(),
            mark(fast)
        ),
    }
}

fn latent_discovery() -> Outcome {
    let spec = BenchmarkSpec::default_desk();
    let mut gaps = Vec::new();
    for seed in 0..5u64 {
        let splits = generate_benchmark(&spec, seed).unwrap();
        let train = DomainDataset::concat_as_domains(&[&splits[0].train, &splits[2].train]).unwrap();
        let test = DomainDataset::concat_as_domains(&[&splits[0].test, &splits[2].test]).unwrap();
        let config = ModelSpec::default().config(NormMode::WbnSoftLatent, spec.features, spec.classes, 2, 0.1);
        let model = build_model::<f64>(&config, seed).unwrap();
        let run = train_loop(model, &train.without_domain_labels(), &TrainConfig::desk(seed)).unwrap();
        gaps.push(evaluate(&run.checkpoint.model, &test).unwrap().weight_gap);
    }
    let worst = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    Outcome {
        passed: worst >= MIN_WEIGHT_GAP,
        detail: format!("first-column weight gap per seed {gaps:.3?}, minimum {worst:.3} (>= {MIN_WEIGHT_GAP})"),
    }
}

fn model_gap(a: &Model64, b: &Model64) -> f64 {
    let mut worst = 0.0f64;
    for ((_, pa), (_, pb)) in a.params().iter().zip(b.params().iter()) {
        worst = worst.max(pa.max_abs_diff(pb));
    }
    for (la, lb) in a.norms.iter().zip(&b.norms) {
        for (sa, sb) in la.running.per_domain.iter().zip(&lb.running.per_domain) {
            worst = worst.max(max_diff(&sa.mean, &sb.mean)).max(max_diff(&sa.var, &sb.var));
        }
        worst = worst.max(max_diff(&la.running.seen_mass, &lb.running.seen_mass));
    }
    worst
}

fn determinism_and_resume() -> Result<Outcome, wbn_core::Error> {
    let spec = BenchmarkSpec::default_desk();
    let splits = generate_benchmark(&spec, 3)?;
    let train = DomainDataset::concat_as_domains(&[&splits[0].train, &splits[1].train, &splits[2].train])?;
    let config = ModelSpec::default().config(NormMode::WbnSoftSupervised, spec.features, spec.classes, 3, 0.1);
    let cfg = TrainConfig {
        iterations: 200,
        ..TrainConfig::desk(3)
    };
    let first = train_loop(build_model::<f64>(&config, 3)?, &train, &cfg)?;
    let second = train_loop(build_model::<f64>(&config, 3)?, &train, &cfg)?;
    let bytes = write_checkpoint(&first.checkpoint)?;
    let digest = checkpoint_digest(&bytes);
    let same_digest = digest == checkpoint_digest(&write_checkpoint(&second.checkpoint)?);
    let same_trace = first.trace == second.trace;

    let half = train_partial(build_model::<f64>(&config, 3)?, &train, &cfg, 100)?;
    let restored = read_checkpoint::<f64>(&write_checkpoint(&half.checkpoint)?)?;
    let resumed = resume(restored, &train, 200)?;
    let gap = model_gap(&resumed.checkpoint.model, &first.checkpoint.model);
    let trace_tail = resumed.trace.as_slice() == &first.trace[100..];
    let finite = first.checkpoint.model.all_finite();
    let same_iteration = resumed.checkpoint.iteration == 200 && first.checkpoint.iteration == 200;
    Ok(Outcome {
        passed: same_digest && same_trace && gap <= EQUIV_TOL && trace_tail && finite && same_iteration,
        detail: format!(
            "repeat run digest match {same_digest}, trace match {same_trace}; resume at 100 vs uninterrupted: \
             max gap {gap:.1e} (<= {EQUIV_TOL:.0e}), trace match {trace_tail}; finite {finite}; digest {}",
            &digest[..16]
        ),
    })
}

type Check = fn() -> Outcome;

fn determinism_check() -> Outcome {
    determinism_and_resume().unwrap_or_else(|e| Outcome {
        passed: false,
        detail: format!("run failed: {e}"),
    })
}

const CHECKS: [(u32, &str, Check); 7] = [
    (1, "gradient suite", gradient_suite),
    (2, "equivalence oracles", equivalence_oracles),
    (3, "normalization invariant", normalization_invariant),
    (4, "running-stats convergence", running_stats_convergence),
    (5, "shifted-domain benchmark", benchmark),
    (6, "latent-domain discovery", latent_discovery),
    (7, "determinism and checkpoint round trip", determinism_check),
];

/// Runs every criterion, or only the ids given as arguments (`cargo test --test verify -- 4 7`).
fn main() -> ExitCode {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ok = true;
    for (id, name, check) in CHECKS {
        if only.is_empty() || only.contains(&id) {
            ok &= report(id, name, check());
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
