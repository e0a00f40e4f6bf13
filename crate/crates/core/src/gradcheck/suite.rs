//! Gradient checks over every differentiable operation, layer and loss.
//!
//! Each case packs all of its inputs into one flat vector, builds the operation on
//! slices of it and reduces the output with a fixed random projection, so every output
//! coordinate contributes to the checked gradient. Assignment matrices are produced by
//! a softmax over packed logits to keep them row-stochastic under perturbation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::grad_check;
use crate::autodiff::{Graph, Var};
use crate::branch::{assign_weights, global_pool, BranchVars};
use crate::error::{Error, Result};
use crate::linear::LinearVars;
use crate::losses::{log_loss, total_loss, LossConfig};
use crate::norm::{
    batch_stats, bn_forward, dabn_forward, one_hot, wbn_hard_forward, wbn_soft_forward, weighted_domain_stats,
    AffineVars, NormStats, StatVars,
};
use crate::tensor::Tensor;

pub const DEFAULT_POINTS: usize = 10;
pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Points with any coordinate closer than this to zero are redrawn (relu kinks).
pub const KINK_MARGIN: f64 = 1e-3;
/// Case whose output passes through a sign-flipped backward rule when fault
/// injection is enabled.
pub const INJECTION_TARGET: &str = "wbn_soft_forward (weighted stats)";

const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub points: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Negative control: corrupt one backward rule so the suite must fail.
    pub inject_sign_error: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            points: DEFAULT_POINTS,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            inject_sign_error: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub points: usize,
    pub passed: bool,
}

type Build = fn(&mut Graph<f64>, &mut Unpack) -> Result<Vec<Var>>;

struct Case {
    name: &'static str,
    build: Build,
}

/// Sequential reader of named slices from the packed input vector.
struct Unpack {
    x: Var,
    offset: usize,
}

impl Unpack {
    fn take(&mut self, g: &mut Graph<f64>, shape: &[usize]) -> Result<Var> {
        let v = g.slice(self.x, self.offset, shape)?;
        self.offset += shape.iter().product::<usize>();
        Ok(v)
    }

    /// Row-stochastic `[rows, cols]` weights from packed logits.
    fn weights(&mut self, g: &mut Graph<f64>, rows: usize, cols: usize) -> Result<Var> {
        let l = self.take(g, &[rows, cols])?;
        g.softmax(l)
    }

    /// Strictly positive values `v^2 + 0.5`.
    fn positive(&mut self, g: &mut Graph<f64>, shape: &[usize]) -> Result<Var> {
        let v = self.take(g, shape)?;
        let s = g.square(v);
        Ok(g.add_scalar(s, 0.5))
    }

    fn affine(&mut self, g: &mut Graph<f64>, channels: usize) -> Result<AffineVars> {
        Ok(AffineVars {
            gamma: self.take(g, &[channels])?,
            beta: self.take(g, &[channels])?,
        })
    }
}

fn stats_list(s: &[StatVars]) -> Vec<Var> {
    s.iter().flat_map(|s| [s.mean, s.var]).collect()
}

macro_rules! case {
    ($name:expr, |$g:ident, $u:ident| $body:expr) => {
        Case {
            name: $name,
            build: |$g: &mut Graph<f64>, $u: &mut Unpack| -> Result<Vec<Var>> { $body },
        }
    };
}

fn cases() -> Vec<Case> {
    vec![
        case!("matmul", |g, u| {
            let a = u.take(g, &[2, 3])?;
            let b = u.take(g, &[3, 2])?;
            Ok(vec![g.matmul(a, b)?])
        }),
        case!("transpose", |g, u| {
            let a = u.take(g, &[2, 3])?;
            Ok(vec![g.transpose(a)?])
        }),
        case!("add", |g, u| {
            let a = u.take(g, &[2, 3])?;
            let b = u.take(g, &[2, 3])?;
            Ok(vec![g.add(a, b)?])
        }),
        case!("sub", |g, u| {
            let a = u.take(g, &[2, 3])?;
            let b = u.take(g, &[2, 3])?;
            Ok(vec![g.sub(a, b)?])
        }),
        case!("mul", |g, u| {
            let a = u.take(g, &[2, 3])?;
            let b = u.take(g, &[2, 3])?;
            Ok(vec![g.mul(a, b)?])
        }),
        case!("scale", |g, u| {
            let a = u.take(g, &[2, 3])?;
            Ok(vec![g.scale(a, -1.7)])
        }),
        case!("add_scalar", |g, u| {
            let a = u.take(g, &[2, 3])?;
            Ok(vec![g.add_scalar(a, 0.3)])
        }),
        case!("add_row", |g, u| {
            let a = u.take(g, &[2, 3])?;
            let v = u.take(g, &[3])?;
            Ok(vec![g.add_row(a, v)?])
        }),
        case!("sub_row", |g, u| {
            let a = u.take(g, &[2, 3])?;
            let v = u.take(g, &[3])?;
            Ok(vec![g.sub_row(a, v)?])
        }),
        case!("mul_row", |g, u| {
            let a = u.take(g, &[2, 3])?;
            let v = u.take(g, &[3])?;
            Ok(vec![g.mul_row(a, v)?])
        }),
        case!("div_row", |g, u| {
            let a = u.take(g, &[2, 3])?;
            let v = u.positive(g, &[3])?;
            Ok(vec![g.div_row(a, v)?])
        }),
        case!("mul_col", |g, u| {
            let a = u.take(g, &[3, 2])?;
            let v = u.take(g, &[3])?;
            Ok(vec![g.mul_col(a, v)?])
        }),
        case!("relu", |g, u| {
            let a = u.take(g, &[2, 3])?;
            Ok(vec![g.relu(a)])
        }),
        case!("square", |g, u| {
            let a = u.take(g, &[2, 3])?;
            Ok(vec![g.square(a)])
        }),
        case!("sqrt", |g, u| {
            let a = u.positive(g, &[2, 3])?;
            Ok(vec![g.sqrt(a)?])
        }),
        case!("softmax", |g, u| {
            let a = u.take(g, &[2, 3])?;
            Ok(vec![g.softmax(a)?])
        }),
        case!("log_softmax", |g, u| {
            let a = u.take(g, &[2, 3])?;
            Ok(vec![g.log_softmax(a)?])
        }),
        case!("pick", |g, u| {
            let a = u.take(g, &[3, 3])?;
            Ok(vec![g.pick(a, &[0, 2, 1])?])
        }),
        case!("sum", |g, u| {
            let a = u.take(g, &[2, 3])?;
            Ok(vec![g.sum(a)])
        }),
        case!("mean", |g, u| {
            let a = u.take(g, &[2, 3])?;
            Ok(vec![g.mean(a)])
        }),
        case!("sum_rows", |g, u| {
            let a = u.take(g, &[3, 2])?;
            Ok(vec![g.sum_rows(a)?])
        }),
        case!("mean_rows", |g, u| {
            let a = u.take(g, &[3, 2])?;
            Ok(vec![g.mean_rows(a)?])
        }),
        case!("mean_last_axis", |g, u| {
            let a = u.take(g, &[2, 2, 3])?;
            Ok(vec![g.mean_last_axis(a)?])
        }),
        case!("select_row", |g, u| {
            let a = u.take(g, &[3, 2])?;
            Ok(vec![g.select_row(a, 1)?])
        }),
        case!("select_col", |g, u| {
            let a = u.take(g, &[3, 2])?;
            Ok(vec![g.select_col(a, 1)?])
        }),
        case!("slice", |g, u| {
            let a = u.take(g, &[3, 2])?;
            Ok(vec![g.slice(a, 1, &[2, 2])?])
        }),
        case!("reshape", |g, u| {
            let a = u.take(g, &[3, 2])?;
            Ok(vec![g.reshape(a, &[2, 3])?])
        }),
        case!("linear", |g, u| {
            let x = u.take(g, &[4, 3])?;
            let lin = LinearVars {
                weight: u.take(g, &[3, 2])?,
                bias: u.take(g, &[2])?,
            };
            Ok(vec![lin.forward(g, x)?])
        }),
        case!("batch_stats", |g, u| {
            let x = u.take(g, &[4, 3])?;
            let s = batch_stats(g, x)?;
            Ok(vec![s.mean, s.var])
        }),
        case!("bn_forward (batch stats)", |g, u| {
            let x = u.take(g, &[4, 3])?;
            let a = u.affine(g, 3)?;
            let s = batch_stats(g, x)?;
            Ok(vec![bn_forward(g, x, s, a, EPS)?])
        }),
        case!("dabn_forward", |g, u| {
            let x0 = u.take(g, &[3, 3])?;
            let x1 = u.take(g, &[3, 3])?;
            let a = u.affine(g, 3)?;
            let stats = [batch_stats(g, x0)?, batch_stats(g, x1)?];
            Ok(vec![
                dabn_forward(g, x0, 0, &stats, a, EPS)?,
                dabn_forward(g, x1, 1, &stats, a, EPS)?,
            ])
        }),
        case!("wbn_hard_forward", |g, u| {
            let x = u.take(g, &[6, 3])?;
            let a = u.affine(g, 3)?;
            let labels = [0, 1, 0, 1, 1, 0];
            let w = g.constant(one_hot(&labels, 2)?);
            let ws = weighted_domain_stats(g, x, w)?;
            Ok(vec![wbn_hard_forward(g, x, &labels, &ws.per_domain, a, EPS)?])
        }),
        case!("weighted_domain_stats", |g, u| {
            let x = u.take(g, &[5, 3])?;
            let w = u.weights(g, 5, 2)?;
            let ws = weighted_domain_stats(g, x, w)?;
            let mut out = stats_list(&ws.per_domain);
            out.push(ws.w_hat);
            Ok(out)
        }),
        case!(INJECTION_TARGET, |g, u| {
            let x = u.take(g, &[5, 3])?;
            let w = u.weights(g, 5, 2)?;
            let a = u.affine(g, 3)?;
            let ws = weighted_domain_stats(g, x, w)?;
            Ok(vec![wbn_soft_forward(g, x, w, &ws.per_domain, a, EPS)?])
        }),
        case!("wbn_soft_forward (running stats)", |g, u| {
            let x = u.take(g, &[4, 3])?;
            let w = u.weights(g, 4, 2)?;
            let a = u.affine(g, 3)?;
            let running = [
                NormStats::new(vec![0.2, -0.4, 1.0], vec![0.5, 1.5, 0.9], EPS)?.bind(g),
                NormStats::new(vec![-1.0, 0.3, 0.0], vec![2.0, 0.7, 1.1], EPS)?.bind(g),
            ];
            Ok(vec![wbn_soft_forward(g, x, w, &running, a, EPS)?])
        }),
        case!("assign_weights (branch)", |g, u| {
            let f = u.take(g, &[4, 3])?;
            let params = BranchVars {
                layers: vec![LinearVars {
                    weight: u.take(g, &[3, 2])?,
                    bias: u.take(g, &[2])?,
                }],
            };
            let out = assign_weights(g, f, &params, false)?;
            Ok(vec![out.weights])
        }),
        case!("global_pool", |g, u| {
            let f = u.take(g, &[2, 3, 4])?;
            Ok(vec![global_pool(g, f)?])
        }),
        case!("log_loss", |g, u| {
            let l = u.take(g, &[4, 3])?;
            Ok(vec![log_loss(g, l, &[0, 2, 1, 2])?])
        }),
        case!("total_loss", |g, u| {
            let c = u.take(g, &[4, 3])?;
            let d = u.take(g, &[4, 2])?;
            let cfg = LossConfig::new(0.3, true)?;
            let t = total_loss(g, c, &[0, 2, 1, 2], Some(d), Some(&[1, 0, 0, 1]), &cfg)?;
            Ok(vec![t.total])
        }),
    ]
}

/// Names of all checked operations, in table order.
pub fn operation_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Fixed random projection of `v` to a scalar, determined by the value's length and `seed`.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let len = g.value(v).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (len as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let r: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let r = g.constant(Tensor::new(shape, r)?);
    let m = g.mul(v, r)?;
    Ok(g.sum(m))
}

/// Identity whose backward rule has the wrong sign.
fn sign_flip(g: &mut Graph<f64>, v: Var) -> Var {
    let value = g.value(v).clone();
    g.custom(&[v], value, |_, up| vec![up.map(|x| -x)])
}

fn input_size(case: &Case) -> Result<usize> {
    let mut g = Graph::new();
    let probe = g.constant(Tensor::full(&[4096], 0.5));
    let mut u = Unpack { x: probe, offset: 0 };
    (case.build)(&mut g, &mut u)?;
    Ok(u.offset)
}

fn draw_point(rng: &mut ChaCha8Rng, size: usize) -> Result<Tensor<f64>> {
    for _ in 0..10_000 {
        let v: Vec<f64> = (0..size).map(|_| StandardNormal.sample(&mut *rng)).collect();
        if v.iter().all(|x: &f64| x.abs() >= KINK_MARGIN) {
            return Tensor::new(vec![size], v);
        }
    }
    Err(Error::Numeric("could not draw a point away from relu kinks".into()))
}

fn check_case(case: &Case, opts: &SuiteOptions, index: usize) -> Result<CheckRow> {
    let size = input_size(case)?;
    let inject = opts.inject_sign_error && case.name == INJECTION_TARGET;
    let proj_seed = opts.seed.wrapping_add(index as u64);
    let f = |g: &mut Graph<f64>, x: Var| -> Result<Var> {
        let mut u = Unpack { x, offset: 0 };
        let outs = (case.build)(g, &mut u)?;
        let mut total: Option<Var> = None;
        for (k, o) in outs.into_iter().enumerate() {
            let o = if inject { sign_flip(g, o) } else { o };
            let p = project(g, o, proj_seed.wrapping_add(k as u64 * 7919))?;
            total = Some(match total {
                None => p,
                Some(t) => g.add(t, p)?,
            });
        }
        total.ok_or_else(|| Error::Contract(format!("case {} produced no outputs", case.name)))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.points {
        let point = draw_point(&mut rng, size)?;
        worst = worst.max(grad_check(f, &point, opts.step)?);
    }
    Ok(CheckRow {
        name: case.name,
        max_rel_error: worst,
        points: opts.points,
        passed: worst < opts.tolerance,
    })
}

/// Runs every case; numeric failures inside a case become failed rows.
pub fn run_suite(opts: &SuiteOptions) -> Vec<CheckRow> {
    cases()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            check_case(c, opts, i).unwrap_or(CheckRow {
                name: c.name,
                max_rel_error: f64::INFINITY,
                points: opts.points,
                passed: false,
            })
        })
        .collect()
}

/// Plain-text table, one line per operation.
pub fn format_table(rows: &[CheckRow], tolerance: f64) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(9).max(9);
    let mut s = format!(
        "{:<width$}  {:>12}  {:>6}  result (tolerance {tolerance:e})\n",
        "operation", "max rel err", "points"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<width$}  {:>12.3e}  {:>6}  {}\n",
            r.name,
            r.max_rel_error,
            r.points,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    s
}
