//! The full classifier: a multilayer trunk with a normalization layer after every hidden
//! linear layer, a lateral branch producing domain weights, and a linear head.
//!
//! Parameters split three ways. The trunk (including every normalization layer's
//! `gamma`/`beta`) is shared by the classification and branch paths, the branch owns
//! the layers that compute domain weights, and the head feeds only the class logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::branch::{assign_weights, Branch, BranchConfig, BranchOutput, BranchVars};
use crate::error::{Error, Result};
use crate::linear::{Linear, LinearVars};
use crate::norm::{
    batch_stats, bn_forward, one_hot, wbn_soft_forward, weighted_domain_stats, DomainBatch, Momentum, WbnLayer,
    DEFAULT_EPSILON, DEFAULT_MOMENTUM,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which normalization scheme the trunk uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Single set of batch statistics.
    Bn,
    /// Per-domain statistics selected by the domain label, no branch.
    Dabn,
    /// Training normalizes with the label indicator; the branch learns the domain and
    /// supplies weights at inference.
    WbnHard,
    /// Training normalizes with branch weights over label-grouped statistics, plus the
    /// domain loss.
    WbnSoftSupervised,
    /// No domain labels: branch weights define both the blending and the statistics.
    WbnSoftLatent,
}

impl NormMode {
    pub const ALL: [NormMode; 5] = [
        NormMode::Bn,
        NormMode::Dabn,
        NormMode::WbnHard,
        NormMode::WbnSoftSupervised,
        NormMode::WbnSoftLatent,
    ];

    pub fn has_branch(self) -> bool {
        matches!(
            self,
            NormMode::WbnHard | NormMode::WbnSoftSupervised | NormMode::WbnSoftLatent
        )
    }

    pub fn needs_domain_labels(self) -> bool {
        matches!(self, NormMode::Dabn | NormMode::WbnHard | NormMode::WbnSoftSupervised)
    }

    pub fn includes_domain_loss(self) -> bool {
        matches!(self, NormMode::WbnHard | NormMode::WbnSoftSupervised)
    }

    /// Short name used in reports.
    pub fn label(self) -> &'static str {
        match self {
            NormMode::Bn => "BN",
            NormMode::Dabn => "DA-BN",
            NormMode::WbnHard => "WBN-hard",
            NormMode::WbnSoftSupervised => "WBN*",
            NormMode::WbnSoftLatent => "WBN",
        }
    }

    /// Configuration-file spelling.
    pub fn key(self) -> &'static str {
        match self {
            NormMode::Bn => "bn",
            NormMode::Dabn => "dabn",
            NormMode::WbnHard => "wbn_hard",
            NormMode::WbnSoftSupervised => "wbn_soft_supervised",
            NormMode::WbnSoftLatent => "wbn_soft_latent",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            NormMode::Bn => 0,
            NormMode::Dabn => 1,
            NormMode::WbnHard => 2,
            NormMode::WbnSoftSupervised => 3,
            NormMode::WbnSoftLatent => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        NormMode::ALL.get(code as usize).copied()
    }
}

impl std::fmt::Display for NormMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub num_domains: usize,
    pub norm_mode: NormMode,
    #[serde(default)]
    pub branch: BranchConfig,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Replace the exponential running average with a cumulative one.
    #[serde(default)]
    pub cumulative_stats: bool,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

impl ModelConfig {
    pub fn new(
        input_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
        num_domains: usize,
        norm_mode: NormMode,
    ) -> Self {
        ModelConfig {
            input_dim,
            hidden,
            num_classes,
            num_domains,
            norm_mode,
            branch: BranchConfig::default(),
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
            cumulative_stats: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "need at least one hidden layer, all widths positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.num_domains == 0 {
            return Err(Error::Config("num_domains must be >= 1".into()));
        }
        if self.norm_mode == NormMode::Bn && self.num_domains != 1 {
            return Err(Error::Config(format!(
                "norm mode BN uses a single set of statistics, got num_domains = {}",
                self.num_domains
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        self.branch.validate()
    }

    pub fn momentum_rule<T: Scalar>(&self) -> Momentum<T> {
        if self.cumulative_stats {
            Momentum::Cumulative
        } else {
            Momentum::Exponential(T::of(self.momentum))
        }
    }

    fn tap_width(&self) -> usize {
        if self.branch.tap_point == 0 {
            self.input_dim
        } else {
            self.hidden[0]
        }
    }
}

/// Parameter partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Trunk layers and normalization affine terms.
    Shared,
    /// Lateral branch.
    Branch,
    /// Classification head.
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    /// Whether weight decay applies (false for `gamma`/`beta`).
    pub decay: bool,
}

/// Trainable parameters grouped by partition.
pub struct ModelParams<'a, T> {
    pub shared: Vec<(ParamInfo, &'a Tensor<T>)>,
    pub branch: Vec<(ParamInfo, &'a Tensor<T>)>,
    pub classifier: Vec<(ParamInfo, &'a Tensor<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub trunk: Vec<Linear<T>>,
    pub norms: Vec<WbnLayer<T>>,
    pub head: Linear<T>,
    pub branch: Option<Branch<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Source of normalization weights at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EvalWeights {
    /// Branch weights when a branch exists, uniform weights otherwise.
    #[default]
    Auto,
    Branch,
    /// `1 / N` for every domain.
    Uniform,
    /// Every sample uses the running statistics of one domain.
    Domain(usize),
    /// Ignore running statistics and normalize with the statistics of the evaluated
    /// batch itself, as when the whole target set is available.
    BatchStats,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub phase: Phase,
    pub domain_labels: Option<&'a [usize]>,
    pub eval_weights: EvalWeights,
}

impl<'a> ForwardOptions<'a> {
    pub fn train(domain_labels: Option<&'a [usize]>) -> Self {
        ForwardOptions {
            phase: Phase::Train,
            domain_labels,
            eval_weights: EvalWeights::Auto,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions {
            phase: Phase::Eval,
            domain_labels: None,
            eval_weights: EvalWeights::Auto,
        }
    }

    pub fn eval_with(weights: EvalWeights) -> Self {
        ForwardOptions {
            eval_weights: weights,
            ..Self::eval()
        }
    }
}

/// Batch statistics gathered by one normalization layer during a training forward.
#[derive(Clone, Debug)]
pub struct LayerBatch<T> {
    pub domains: Vec<DomainBatch<T>>,
    pub batch_size: usize,
    pub collapsed: usize,
}

/// Graph handles produced by [`Model::forward`].
pub struct Forward<T> {
    pub class_logits: Var,
    pub domain_logits: Option<Var>,
    /// Weights actually used to blend the per-domain normalizations, `[batch, N]`.
    pub assignment: Var,
    pub branch_weights: Option<Var>,
    /// One handle per trainable tensor, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Filled in training mode only.
    pub layer_batches: Vec<LayerBatch<T>>,
}

struct Bound {
    trunk: Vec<LinearVars>,
    affine: Vec<crate::norm::AffineVars>,
    head: LinearVars,
    branch: Option<BranchVars>,
}

/// Eval-mode outputs as plain values.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub logits: Tensor<T>,
    pub weights: Tensor<T>,
}

/// Builds a model with every random draw determined by `seed`.
///
/// The trunk and head draw from one stream and the branch from another, so models that
/// differ only in whether they have a branch share identical trunk weights.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trunk = Vec::with_capacity(config.hidden.len());
    let mut norms = Vec::with_capacity(config.hidden.len());
    let mut width = config.input_dim;
    for &h in &config.hidden {
        trunk.push(Linear::init(width, h, &mut rng));
        norms.push(WbnLayer::new(
            h,
            config.num_domains,
            T::of(config.epsilon),
            config.momentum_rule(),
        )?);
        width = h;
    }
    let head = Linear::init(width, config.num_classes, &mut rng);
    let branch = if config.norm_mode.has_branch() {
        let mut branch_rng = ChaCha8Rng::seed_from_u64(seed);
        branch_rng.set_stream(1);
        Some(Branch::init(
            config.tap_width(),
            config.num_domains,
            &config.branch,
            &mut branch_rng,
        )?)
    } else {
        None
    };
    Ok(Model {
        config: config.clone(),
        trunk,
        norms,
        head,
        branch,
    })
}

impl<T: Scalar> Model<T> {
    pub fn num_domains(&self) -> usize {
        self.config.num_domains
    }

    /// Every trainable tensor with its partition, in a fixed order.
    pub fn params(&self) -> Vec<(ParamInfo, &Tensor<T>)> {
        let mut out = Vec::new();
        let info = |name: String, group, decay| ParamInfo { name, group, decay };
        for (i, (lin, norm)) in self.trunk.iter().zip(&self.norms).enumerate() {
            out.push((info(format!("trunk.{i}.weight"), ParamGroup::Shared, true), &lin.weight));
            out.push((info(format!("trunk.{i}.bias"), ParamGroup::Shared, true), &lin.bias));
            out.push((
                info(format!("norm.{i}.gamma"), ParamGroup::Shared, false),
                &norm.affine.gamma,
            ));
            out.push((
                info(format!("norm.{i}.beta"), ParamGroup::Shared, false),
                &norm.affine.beta,
            ));
        }
        out.push((
            info("head.weight".into(), ParamGroup::Classifier, true),
            &self.head.weight,
        ));
        out.push((info("head.bias".into(), ParamGroup::Classifier, true), &self.head.bias));
        if let Some(b) = &self.branch {
            for (i, l) in b.layers.iter().enumerate() {
                out.push((info(format!("branch.{i}.weight"), ParamGroup::Branch, true), &l.weight));
                out.push((info(format!("branch.{i}.bias"), ParamGroup::Branch, true), &l.bias));
            }
        }
        out
    }

    /// Mutable view in the same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for (lin, norm) in self.trunk.iter_mut().zip(self.norms.iter_mut()) {
            out.push(&mut lin.weight);
            out.push(&mut lin.bias);
            out.push(&mut norm.affine.gamma);
            out.push(&mut norm.affine.beta);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        if let Some(b) = &mut self.branch {
            for l in &mut b.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    pub fn partition(&self) -> ModelParams<'_, T> {
        let mut p = ModelParams {
            shared: Vec::new(),
            branch: Vec::new(),
            classifier: Vec::new(),
        };
        for (info, t) in self.params() {
            match info.group {
                ParamGroup::Shared => p.shared.push((info, t)),
                ParamGroup::Branch => p.branch.push((info, t)),
                ParamGroup::Classifier => p.classifier.push((info, t)),
            }
        }
        p
    }

    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> (Bound, Vec<Var>) {
        let mut order = Vec::new();
        let mut trunk = Vec::new();
        let mut affine = Vec::new();
        for (lin, norm) in self.trunk.iter().zip(&self.norms) {
            let l = lin.bind(g, trainable);
            let a = norm.affine.bind(g, trainable);
            order.extend([l.weight, l.bias, a.gamma, a.beta]);
            trunk.push(l);
            affine.push(a);
        }
        let head = self.head.bind(g, trainable);
        order.extend([head.weight, head.bias]);
        let branch = self.branch.as_ref().map(|b| {
            let v = b.bind(g, trainable);
            for l in &v.layers {
                order.extend([l.weight, l.bias]);
            }
            v
        });
        (
            Bound {
                trunk,
                affine,
                head,
                branch,
            },
            order,
        )
    }

    fn check_domain_labels(&self, labels: &[usize], n: usize) -> Result<()> {
        if labels.len() != n {
            return Err(Error::dim("domain labels", &[n], &[labels.len()]));
        }
        let count = self.num_domains();
        let mut per = vec![0usize; count];
        for &d in labels {
            if d >= count {
                return Err(Error::Domain { index: d, count });
            }
            per[d] += 1;
        }
        if let Some(&got) = per.iter().find(|&&c| c == 1) {
            return Err(Error::BatchSize {
                op: "per-domain batch statistics",
                needed: 2,
                got,
            });
        }
        Ok(())
    }

    /// Records one forward pass on `g`.
    pub fn forward(&self, g: &mut Graph<T>, inputs: &Tensor<T>, opts: ForwardOptions<'_>) -> Result<Forward<T>> {
        let cfg = &self.config;
        if inputs.ndim() != 2 || inputs.cols() != cfg.input_dim {
            return Err(Error::dim(
                "model input",
                inputs.shape(),
                &[inputs.rows(), cfg.input_dim],
            ));
        }
        let n = inputs.rows();
        let domains = self.num_domains();
        let train = opts.phase == Phase::Train;
        let mode = cfg.norm_mode;

        let labels = if train && mode.needs_domain_labels() {
            let l = opts
                .domain_labels
                .ok_or_else(|| Error::Contract(format!("training in mode {mode} requires domain labels")))?;
            self.check_domain_labels(l, n)?;
            Some(l)
        } else {
            None
        };
        if train && n < 2 {
            return Err(Error::BatchSize {
                op: "training forward",
                needed: 2,
                got: n,
            });
        }

        let (bound, params) = self.bind(g, train);
        let x = g.constant(inputs.clone());
        let mut h = x;
        let mut branch_out: Option<BranchOutput> = None;
        let mut assignment = None;
        let mut stats_weights = None;
        let mut layer_batches = Vec::new();

        for (i, (lin, norm)) in bound.trunk.iter().zip(&self.norms).enumerate() {
            let z = lin.forward(g, h)?;
            if i == 0 {
                if let (Some(bv), Some(b)) = (&bound.branch, &self.branch) {
                    let tap = if cfg.branch.tap_point == 0 { x } else { z };
                    branch_out = Some(assign_weights(g, tap, bv, b.detach_input)?);
                }
                let (norm_w, stats_w) = self.select_weights(g, n, train, labels, branch_out, opts.eval_weights)?;
                assignment = Some(norm_w);
                stats_weights = stats_w;
            }
            let norm_w = assignment.expect("set on first layer");
            let eps = norm.epsilon;
            let affine = bound.affine[i];
            let out = if train {
                let sw = stats_weights.expect("training uses statistic weights");
                let ws = weighted_domain_stats(g, z, sw)?;
                let per_domain: Vec<DomainBatch<T>> = ws
                    .per_domain
                    .iter()
                    .zip(&ws.mass)
                    .zip(&ws.variance_retention)
                    .map(|((s, &mass), &variance_retention)| DomainBatch {
                        stats: s.read(g, eps),
                        mass,
                        variance_retention,
                    })
                    .collect();
                layer_batches.push(LayerBatch {
                    domains: per_domain,
                    batch_size: n,
                    collapsed: ws.collapsed_count(),
                });
                wbn_soft_forward(g, z, norm_w, &ws.per_domain, affine, eps)?
            } else if opts.eval_weights == EvalWeights::BatchStats {
                let s = batch_stats(g, z)?;
                bn_forward(g, z, s, affine, eps)?
            } else {
                let stats = norm.running.bind(g);
                wbn_soft_forward(g, z, norm_w, &stats, affine, eps)?
            };
            h = g.relu(out);
        }
        let class_logits = bound.head.forward(g, h)?;
        debug_assert_eq!(g.value(assignment.expect("hidden layers exist")).cols(), domains);
        Ok(Forward {
            class_logits,
            domain_logits: branch_out.map(|b| b.logits),
            assignment: assignment.expect("hidden layers exist"),
            branch_weights: branch_out.map(|b| b.weights),
            params,
            layer_batches,
        })
    }

    /// Returns (blending weights, statistic weights); the latter only in training.
    fn select_weights(
        &self,
        g: &mut Graph<T>,
        n: usize,
        train: bool,
        labels: Option<&[usize]>,
        branch: Option<BranchOutput>,
        eval: EvalWeights,
    ) -> Result<(Var, Option<Var>)> {
        let domains = self.num_domains();
        let branch_w = branch.map(|b| b.weights);
        if train {
            let one_hot_labels = |g: &mut Graph<T>| -> Result<Var> {
                let l = labels.expect("labels checked for supervised modes");
                Ok(g.constant(one_hot(l, domains)?))
            };
            return Ok(match self.config.norm_mode {
                NormMode::Bn => {
                    let w = g.constant(Tensor::ones(&[n, 1]));
                    (w, Some(w))
                }
                NormMode::Dabn | NormMode::WbnHard => {
                    let w = one_hot_labels(g)?;
                    (w, Some(w))
                }
                NormMode::WbnSoftSupervised => {
                    let s = one_hot_labels(g)?;
                    (branch_w.expect("mode has a branch"), Some(s))
                }
                NormMode::WbnSoftLatent => {
                    let w = branch_w.expect("mode has a branch");
                    (w, Some(w))
                }
            });
        }
        let uniform = |g: &mut Graph<T>| g.constant(Tensor::full(&[n, domains], T::one() / T::of_usize(domains)));
        let w = match eval {
            EvalWeights::Auto => match branch_w {
                Some(w) => w,
                None => uniform(g),
            },
            EvalWeights::Branch => branch_w
                .ok_or_else(|| Error::Contract(format!("mode {} has no domain branch", self.config.norm_mode)))?,
            EvalWeights::Uniform | EvalWeights::BatchStats => uniform(g),
            EvalWeights::Domain(j) => {
                if j >= domains {
                    return Err(Error::Domain {
                        index: j,
                        count: domains,
                    });
                }
                g.constant(one_hot(&vec![j; n], domains)?)
            }
        };
        Ok((w, None))
    }

    /// Folds the batch statistics of a training forward into the running estimates.
    pub fn apply_running_updates(&mut self, batches: &[LayerBatch<T>]) -> Result<()> {
        if batches.len() != self.norms.len() {
            return Err(Error::dim("running updates", &[self.norms.len()], &[batches.len()]));
        }
        for (layer, b) in self.norms.iter_mut().zip(batches) {
            layer.running.update(&b.domains, b.batch_size)?;
            layer.collapse_events += b.collapsed as u64;
        }
        Ok(())
    }

    /// Eval-mode logits and blending weights.
    pub fn predict(&self, inputs: &Tensor<T>, weights: EvalWeights) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, inputs, ForwardOptions::eval_with(weights))?;
        Ok(Prediction {
            logits: g.value(f.class_logits).clone(),
            weights: g.value(f.assignment).clone(),
        })
    }

    /// True when every parameter and running statistic is finite.
    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.all_finite())
            && self.norms.iter().all(|n| {
                n.running
                    .per_domain
                    .iter()
                    .all(|s| s.mean.iter().chain(&s.var).all(|v| v.is_finite()))
            })
    }
}
