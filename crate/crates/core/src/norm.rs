//! The normalization family: plain batch normalization, per-domain normalization,
//! hard and soft weighted batch normalization, weighted per-domain statistics and the
//! running estimates used at inference.
//!
//! All forwards share one formula. Each sample `x_i` is normalized against every
//! domain's statistics and the results are blended with per-sample weights:
//!
//! ```text
//! y_i = gamma * sum_j w_ij * (x_i - mean_j) / sqrt(var_j + eps) + beta
//! ```
//!
//! Plain BN is the single-domain case, per-domain BN picks one domain per sample with a
//! one-hot row, and the soft variant takes arbitrary row-stochastic weights.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
/// Column mass at or below which a domain counts as collapsed for the current batch.
pub const COLLAPSE_MASS: f64 = 1e-8;
/// Row-sum tolerance accepted by the soft forward.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Per-channel mean and variance with the epsilon used when normalizing with them.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub epsilon: T,
}

impl<T: Scalar> NormStats<T> {
    pub fn new(mean: Vec<T>, var: Vec<T>, epsilon: T) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::dim("norm stats", &[mean.len()], &[var.len()]));
        }
        if var.iter().any(|&v| v < T::zero() || !v.is_finite()) {
            return Err(Error::Contract("variance must be finite and nonnegative".into()));
        }
        if epsilon <= T::zero() {
            return Err(Error::Contract("epsilon must be positive".into()));
        }
        Ok(NormStats { mean, var, epsilon })
    }

    /// Zero mean, unit variance.
    pub fn standard(channels: usize, epsilon: T) -> Self {
        NormStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Records the statistics as constant leaves of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> StatVars {
        StatVars {
            mean: g.constant(Tensor::vector(self.mean.clone())),
            var: g.constant(Tensor::vector(self.var.clone())),
        }
    }
}

/// Graph handles for a mean/variance pair, each of shape `[channels]`.
#[derive(Clone, Copy, Debug)]
pub struct StatVars {
    pub mean: Var,
    pub var: Var,
}

impl StatVars {
    pub fn read<T: Scalar>(&self, g: &Graph<T>, epsilon: T) -> NormStats<T> {
        NormStats {
            mean: g.value(self.mean).data().to_vec(),
            var: g.value(self.var).data().to_vec(),
            epsilon,
        }
    }
}

/// Scale and shift shared by every domain of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> AffineParams<T> {
    /// `gamma = 1`, `beta = 0`.
    pub fn identity(channels: usize) -> Self {
        AffineParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn new(gamma: Vec<T>, beta: Vec<T>) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::dim("affine", &[gamma.len()], &[beta.len()]));
        }
        Ok(AffineParams {
            gamma: Tensor::vector(gamma),
            beta: Tensor::vector(beta),
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> AffineVars {
        AffineVars {
            gamma: g.leaf(self.gamma.clone(), trainable),
            beta: g.leaf(self.beta.clone(), trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Per-sample domain weights `w` (rows on the simplex) and their column-normalized form.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix<T> {
    w: Tensor<T>,
    w_hat: Tensor<T>,
}

impl<T: Scalar> AssignmentMatrix<T> {
    pub fn new(w: Tensor<T>) -> Result<Self> {
        validate_assignment(&w)?;
        let (n, d) = (w.rows(), w.cols());
        let mut mass = vec![T::zero(); d];
        for row in w.data().chunks(d) {
            for (m, &v) in mass.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        let floor = T::of(COLLAPSE_MASS);
        let mut hat = Vec::with_capacity(n * d);
        for row in w.data().chunks(d) {
            for (&v, &m) in row.iter().zip(&mass) {
                let denom = if m <= floor { m + floor } else { m };
                hat.push(v / denom);
            }
        }
        let w_hat = Tensor::from_parts(w.shape().to_vec(), hat);
        Ok(AssignmentMatrix { w, w_hat })
    }

    /// One-hot rows from domain labels.
    pub fn one_hot(labels: &[usize], domains: usize) -> Result<Self> {
        AssignmentMatrix::new(one_hot(labels, domains)?)
    }

    pub fn w(&self) -> &Tensor<T> {
        &self.w
    }

    pub fn w_hat(&self) -> &Tensor<T> {
        &self.w_hat
    }

    pub fn samples(&self) -> usize {
        self.w.rows()
    }

    pub fn domains(&self) -> usize {
        self.w.cols()
    }

    /// Column sums of `w`.
    pub fn mass(&self) -> Vec<T> {
        let d = self.domains();
        let mut mass = vec![T::zero(); d];
        for row in self.w.data().chunks(d) {
            for (m, &v) in mass.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        mass
    }
}

/// Builds an `[n, domains]` one-hot matrix.
pub fn one_hot<T: Scalar>(labels: &[usize], domains: usize) -> Result<Tensor<T>> {
    if labels.is_empty() {
        return Err(Error::Contract("one-hot of an empty label list".into()));
    }
    let mut data = vec![T::zero(); labels.len() * domains];
    for (i, &d) in labels.iter().enumerate() {
        if d >= domains {
            return Err(Error::Domain {
                index: d,
                count: domains,
            });
        }
        data[i * domains + d] = T::one();
    }
    Ok(Tensor::from_parts(vec![labels.len(), domains], data))
}

/// Checks that every row of `w` is nonnegative and sums to one.
pub fn validate_assignment<T: Scalar>(w: &Tensor<T>) -> Result<()> {
    if w.ndim() != 2 {
        return Err(Error::Contract(format!(
            "assignment must be a matrix, got shape {:?}",
            w.shape()
        )));
    }
    let tol = T::of(ROW_SUM_TOLERANCE);
    for (i, row) in w.data().chunks(w.cols()).enumerate() {
        if let Some(v) = row.iter().find(|v| !(**v >= T::zero())) {
            return Err(Error::Constraint(format!("row {i} has negative weight {v}")));
        }
        let s: T = row.iter().copied().sum();
        if (s - T::one()).abs() > tol {
            return Err(Error::Constraint(format!("row {i} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Per-channel mean and biased variance over the rows of `x`.
pub fn batch_stats<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<StatVars> {
    let n = g.value(x).rows();
    if g.value(x).ndim() != 2 {
        return Err(Error::Contract("batch_stats expects a [batch, channels] matrix".into()));
    }
    if n < 2 {
        return Err(Error::BatchSize {
            op: "batch_stats",
            needed: 2,
            got: n,
        });
    }
    let mean = g.mean_rows(x)?;
    let centered = g.sub_row(x, mean)?;
    let sq = g.square(centered);
    let var = g.mean_rows(sq)?;
    Ok(StatVars { mean, var })
}

/// Value-level [`batch_stats`].
pub fn batch_stats_of<T: Scalar>(x: &Tensor<T>, epsilon: T) -> Result<NormStats<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let s = batch_stats(&mut g, xv)?;
    Ok(s.read(&g, epsilon))
}

/// `(x - mean) / sqrt(var + eps)` per channel.
pub fn normalize<T: Scalar>(g: &mut Graph<T>, x: Var, stats: StatVars, epsilon: T) -> Result<Var> {
    let centered = g.sub_row(x, stats.mean)?;
    let shifted = g.add_scalar(stats.var, epsilon);
    let std = g.sqrt(shifted)?;
    g.div_row(centered, std)
}

fn affine<T: Scalar>(g: &mut Graph<T>, x: Var, params: AffineVars) -> Result<Var> {
    let scaled = g.mul_row(x, params.gamma)?;
    g.add_row(scaled, params.beta)
}

pub fn bn_forward<T: Scalar>(g: &mut Graph<T>, x: Var, stats: StatVars, params: AffineVars, epsilon: T) -> Result<Var> {
    let c = g.value(x).cols();
    if g.value(stats.mean).len() != c || g.value(params.gamma).len() != c {
        return Err(Error::dim(
            "bn_forward",
            g.value(x).shape(),
            g.value(stats.mean).shape(),
        ));
    }
    let z = normalize(g, x, stats, epsilon)?;
    affine(g, z, params)
}

/// Normalizes every row of `x` with the statistics of domain `domain`.
pub fn dabn_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    domain: usize,
    per_domain: &[StatVars],
    params: AffineVars,
    epsilon: T,
) -> Result<Var> {
    let stats = per_domain.get(domain).ok_or(Error::Domain {
        index: domain,
        count: per_domain.len(),
    })?;
    bn_forward(g, x, *stats, params, epsilon)
}

/// Indicator-weighted form: each sample uses only its own domain's statistics.
pub fn wbn_hard_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    labels: &[usize],
    per_domain: &[StatVars],
    params: AffineVars,
    epsilon: T,
) -> Result<Var> {
    let w = g.constant(one_hot(labels, per_domain.len())?);
    wbn_soft_forward(g, x, w, per_domain, params, epsilon)
}

/// Soft-weighted form with arbitrary row-stochastic `w` of shape `[batch, domains]`.
pub fn wbn_soft_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    per_domain: &[StatVars],
    params: AffineVars,
    epsilon: T,
) -> Result<Var> {
    if per_domain.is_empty() {
        return Err(Error::Contract("at least one domain is required".into()));
    }
    let (xv, wv) = (g.value(x), g.value(w));
    if wv.ndim() != 2 || wv.rows() != xv.rows() || wv.cols() != per_domain.len() {
        return Err(Error::dim("wbn_soft_forward", xv.shape(), wv.shape()));
    }
    validate_assignment(wv)?;
    let c = xv.cols();
    if g.value(params.gamma).len() != c {
        return Err(Error::dim(
            "wbn_soft_forward",
            xv.shape(),
            g.value(params.gamma).shape(),
        ));
    }
    let mut acc: Option<Var> = None;
    for (j, stats) in per_domain.iter().enumerate() {
        if g.value(stats.mean).len() != c {
            return Err(Error::dim(
                "wbn_soft_forward",
                g.value(x).shape(),
                g.value(stats.mean).shape(),
            ));
        }
        let z = normalize(g, x, *stats, epsilon)?;
        let wj = g.select_col(w, j)?;
        let term = g.mul_col(z, wj)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    affine(g, acc.expect("nonempty domain list"), params)
}

/// Result of [`weighted_domain_stats`].
#[derive(Clone, Debug)]
pub struct WeightedStats<T> {
    pub per_domain: Vec<StatVars>,
    /// Column-normalized weights `w_hat`, shape `[batch, domains]`.
    pub w_hat: Var,
    /// Column sums of `w`.
    pub mass: Vec<T>,
    /// Domains whose mass fell to or below [`COLLAPSE_MASS`].
    pub collapsed: Vec<bool>,
    /// `1 - sum_i w_hat_ij^2` per domain, the bias factor of the weighted variance.
    pub variance_retention: Vec<T>,
}

impl<T> WeightedStats<T> {
    pub fn collapsed_count(&self) -> usize {
        self.collapsed.iter().filter(|&&c| c).count()
    }
}

/// Estimates per-domain statistics from soft weights:
/// `w_hat_ij = w_ij / sum_k w_kj`, `mean_j = sum_i w_hat_ij x_i`,
/// `var_j = sum_i w_hat_ij (x_i - mean_j)^2`.
///
/// A collapsed domain (mass at most [`COLLAPSE_MASS`]) gets [`COLLAPSE_MASS`] added to
/// its normalizing mass so `w_hat` stays finite.
pub fn weighted_domain_stats<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var) -> Result<WeightedStats<T>> {
    let (xv, wv) = (g.value(x), g.value(w));
    if xv.ndim() != 2 || wv.ndim() != 2 || xv.rows() != wv.rows() {
        return Err(Error::dim("weighted_domain_stats", xv.shape(), wv.shape()));
    }
    let domains = wv.cols();
    let mass_var = g.sum_rows(w)?;
    let mass = g.value(mass_var).data().to_vec();
    let floor = T::of(COLLAPSE_MASS);
    let collapsed: Vec<bool> = mass.iter().map(|&m| m <= floor).collect();
    let denom = if collapsed.iter().any(|&c| c) {
        let pad = collapsed.iter().map(|&c| if c { floor } else { T::zero() }).collect();
        let pad = g.constant(Tensor::vector(pad));
        g.add(mass_var, pad)?
    } else {
        mass_var
    };
    let w_hat = g.div_row(w, denom)?;
    let mut per_domain = Vec::with_capacity(domains);
    let mut variance_retention = Vec::with_capacity(domains);
    for j in 0..domains {
        let wj = g.select_col(w_hat, j)?;
        let sq_sum: T = g.value(wj).data().iter().map(|&v| v * v).sum();
        variance_retention.push(T::one() - sq_sum);
        let weighted = g.mul_col(x, wj)?;
        let mean = g.sum_rows(weighted)?;
        let centered = g.sub_row(x, mean)?;
        let sq = g.square(centered);
        let weighted_sq = g.mul_col(sq, wj)?;
        let var = g.sum_rows(weighted_sq)?;
        per_domain.push(StatVars { mean, var });
    }
    Ok(WeightedStats {
        per_domain,
        w_hat,
        mass,
        collapsed,
        variance_retention,
    })
}

/// Batch statistics of one domain together with the weight mass behind them.
#[derive(Clone, Debug)]
pub struct DomainBatch<T> {
    pub stats: NormStats<T>,
    pub mass: T,
    /// `1 - sum_i w_hat_i^2`; zero disables the variance bias correction.
    pub variance_retention: T,
}

/// Exponential moving averages of per-domain statistics, used only at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub per_domain: Vec<NormStats<T>>,
    pub momentum: Momentum<T>,
    pub seen_mass: Vec<T>,
}

/// How batch statistics are folded into running estimates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Momentum<T> {
    /// Fixed base factor in `[0, 1)`, scaled by the domain's share of the batch.
    Exponential(T),
    /// Mass-weighted average over everything seen so far.
    Cumulative,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(domains: usize, channels: usize, epsilon: T, momentum: Momentum<T>) -> Result<Self> {
        if let Momentum::Exponential(m) = momentum {
            if !(m >= T::zero() && m < T::one()) {
                return Err(Error::Config(format!("momentum {m} outside [0, 1)")));
            }
        }
        Ok(RunningStats {
            per_domain: vec![NormStats::standard(channels, epsilon); domains],
            momentum,
            seen_mass: vec![T::zero(); domains],
        })
    }

    pub fn domains(&self) -> usize {
        self.per_domain.len()
    }

    /// Folds one batch into the running estimates.
    ///
    /// With exponential momentum `m`, domain `j` moves by `m * mass_j / batch_size`;
    /// domains with no mass in the batch are left untouched. The variance entering the
    /// average is bias-corrected by the effective sample size of the weights.
    pub fn update(&mut self, batch: &[DomainBatch<T>], batch_size: usize) -> Result<()> {
        if batch.len() != self.per_domain.len() {
            return Err(Error::dim(
                "update_running_stats",
                &[self.per_domain.len()],
                &[batch.len()],
            ));
        }
        let n = T::of_usize(batch_size);
        let floor = T::of(COLLAPSE_MASS);
        for (j, b) in batch.iter().enumerate() {
            if b.mass <= floor {
                continue;
            }
            self.seen_mass[j] = self.seen_mass[j] + b.mass;
            let rate = match self.momentum {
                Momentum::Exponential(m) => m * b.mass / n,
                Momentum::Cumulative => b.mass / self.seen_mass[j],
            };
            let correction = if b.variance_retention > T::zero() {
                T::one() / b.variance_retention
            } else {
                T::one()
            };
            let run = &mut self.per_domain[j];
            let keep = T::one() - rate;
            for (r, &v) in run.mean.iter_mut().zip(&b.stats.mean) {
                *r = keep * *r + rate * v;
            }
            for (r, &v) in run.var.iter_mut().zip(&b.stats.var) {
                *r = keep * *r + rate * v * correction;
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Vec<StatVars> {
        self.per_domain.iter().map(|s| s.bind(g)).collect()
    }
}

/// One normalization layer: shared affine terms plus per-domain running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct WbnLayer<T> {
    pub affine: AffineParams<T>,
    pub running: RunningStats<T>,
    pub epsilon: T,
    /// Number of (batch, domain) pairs seen with collapsed mass.
    pub collapse_events: u64,
}

impl<T: Scalar> WbnLayer<T> {
    pub fn new(channels: usize, domains: usize, epsilon: T, momentum: Momentum<T>) -> Result<Self> {
        if domains == 0 {
            return Err(Error::Config("a normalization layer needs at least one domain".into()));
        }
        if epsilon <= T::zero() {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(WbnLayer {
            affine: AffineParams::identity(channels),
            running: RunningStats::new(domains, channels, epsilon, momentum)?,
            epsilon,
            collapse_events: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.affine.channels()
    }

    pub fn domains(&self) -> usize {
        self.running.domains()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    fn identity_affine(g: &mut Graph<f64>, c: usize) -> AffineVars {
        AffineParams::identity(c).bind(g, false)
    }

    fn stats(g: &mut Graph<f64>, mean: &[f64], var: &[f64]) -> StatVars {
        NormStats::new(mean.to_vec(), var.to_vec(), 1e-5).unwrap().bind(g)
    }

    #[test]
    fn batch_stats_examples() {
        let s = batch_stats_of(&col(&[1.0, 2.0, 3.0]), 1e-5).unwrap();
        assert!((s.mean[0] - 2.0).abs() < 1e-15);
        assert!((s.var[0] - 2.0 / 3.0).abs() < 1e-15);

        let s = batch_stats_of(&col(&[4.5, 4.5, 4.5, 4.5]), 1e-5).unwrap();
        assert_eq!(s.mean[0], 4.5);
        assert_eq!(s.var[0], 0.0);

        let a = batch_stats_of(&col(&[1.0, 5.0, -2.0, 0.5]), 1e-5).unwrap();
        let b = batch_stats_of(&col(&[0.5, -2.0, 5.0, 1.0]), 1e-5).unwrap();
        assert!((a.mean[0] - b.mean[0]).abs() < 1e-15);
        assert!((a.var[0] - b.var[0]).abs() < 1e-15);
    }

    #[test]
    fn batch_stats_needs_two_rows() {
        assert!(matches!(
            batch_stats_of(&col(&[1.0]), 1e-5),
            Err(Error::BatchSize { got: 1, .. })
        ));
    }

    #[test]
    fn bn_forward_hand_values() {
        let mut g = Graph::new();
        let x = g.constant(col(&[1.0, 2.0, 3.0]));
        let s = batch_stats(&mut g, x).unwrap();
        let a = identity_affine(&mut g, 1);
        let y = bn_forward(&mut g, x, s, a, 1e-300).unwrap();
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (v, e) in g.value(y).data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-4);
        }
    }

    #[test]
    fn bn_forward_identity_on_standardized_input() {
        let mut g = Graph::new();
        let data = [-1.0, 1.0, -1.0, 1.0];
        let x = g.constant(col(&data));
        let s = batch_stats(&mut g, x).unwrap();
        let a = identity_affine(&mut g, 1);
        let y = bn_forward(&mut g, x, s, a, 1e-300).unwrap();
        for (v, e) in g.value(y).data().iter().zip(data) {
            assert!((v - e).abs() < 1e-9);
        }
    }

    #[test]
    fn bn_forward_zero_gamma_is_constant() {
        let mut g = Graph::new();
        let x = g.param(col(&[1.0, 4.0, -2.0]));
        let s = batch_stats(&mut g, x).unwrap();
        let gamma = g.constant(Tensor::vector(vec![0.0]));
        let beta = g.constant(Tensor::vector(vec![0.7]));
        let y = bn_forward(&mut g, x, s, AffineVars { gamma, beta }, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));
        let r = g.constant(col(&[0.3, -1.1, 2.0]));
        let p = g.mul(y, r).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bn_forward_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 2]));
        let s = stats(&mut g, &[0.0], &[1.0]);
        let a = identity_affine(&mut g, 2);
        assert!(matches!(
            bn_forward(&mut g, x, s, a, 1e-5),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn dabn_per_subset_example() {
        // domain 0 rows [0, 2], domain 1 rows [10, 14]
        let mut g = Graph::new();
        let a = identity_affine(&mut g, 1);
        let x0 = g.constant(col(&[0.0, 2.0]));
        let x1 = g.constant(col(&[10.0, 14.0]));
        let s0 = batch_stats(&mut g, x0).unwrap();
        let s1 = batch_stats(&mut g, x1).unwrap();
        let per = [s0, s1];
        let y0 = dabn_forward(&mut g, x0, 0, &per, a, 1e-300).unwrap();
        let y1 = dabn_forward(&mut g, x1, 1, &per, a, 1e-300).unwrap();
        for y in [y0, y1] {
            let v = g.value(y).data();
            assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            dabn_forward(&mut g, x0, 2, &per, a, 1e-5),
            Err(Error::Domain { index: 2, count: 2 })
        ));
    }

    #[test]
    fn hard_forward_rejects_unknown_domain() {
        let mut g = Graph::new();
        let x = g.constant(col(&[0.0, 1.0]));
        let s = stats(&mut g, &[0.0], &[1.0]);
        let a = identity_affine(&mut g, 1);
        assert!(matches!(
            wbn_hard_forward(&mut g, x, &[0, 1], &[s], a, 1e-5),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn soft_forward_hand_value() {
        let mut g = Graph::new();
        let x = g.constant(col(&[1.0]));
        let w = g.constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let s0 = stats(&mut g, &[0.0], &[1.0]);
        let s1 = stats(&mut g, &[2.0], &[1.0]);
        let a = identity_affine(&mut g, 1);
        let y = wbn_soft_forward(&mut g, x, w, &[s0, s1], a, 1e-300).unwrap();
        assert!(g.value(y).item().abs() < 1e-15);
    }

    #[test]
    fn soft_forward_constraint_errors() {
        let mut g = Graph::new();
        let x = g.constant(col(&[1.0]));
        let s0 = stats(&mut g, &[0.0], &[1.0]);
        let s1 = stats(&mut g, &[2.0], &[1.0]);
        let a = identity_affine(&mut g, 1);
        let w = g.constant(Tensor::from_rows(&[vec![0.6, 0.5]]).unwrap());
        assert!(matches!(
            wbn_soft_forward(&mut g, x, w, &[s0, s1], a, 1e-5),
            Err(Error::Constraint(_))
        ));
        let w = g.constant(Tensor::from_rows(&[vec![1.5, -0.5]]).unwrap());
        assert!(matches!(
            wbn_soft_forward(&mut g, x, w, &[s0, s1], a, 1e-5),
            Err(Error::Constraint(_))
        ));
    }

    #[test]
    fn weighted_stats_examples() {
        let mut g = Graph::new();
        let x = g.constant(col(&[0.0, 2.0]));
        let w = g.constant(Tensor::from_rows(&[vec![1.0, 0.5], vec![0.0, 0.5]]).unwrap());
        let ws = weighted_domain_stats(&mut g, x, w).unwrap();
        let s0 = ws.per_domain[0].read(&g, 1e-5);
        let s1 = ws.per_domain[1].read(&g, 1e-5);
        assert_eq!((s0.mean[0], s0.var[0]), (0.0, 0.0));
        assert_eq!((s1.mean[0], s1.var[0]), (1.0, 1.0));
        assert_eq!(g.value(ws.w_hat).data(), &[1.0, 0.5, 0.0, 0.5]);
        assert_eq!(ws.collapsed_count(), 0);
    }

    #[test]
    fn weighted_stats_collapse_stays_finite() {
        let mut g = Graph::new();
        let x = g.constant(col(&[0.0, 2.0, 5.0]));
        let w = g.constant(one_hot::<f64>(&[0, 0, 0], 2).unwrap());
        let ws = weighted_domain_stats(&mut g, x, w).unwrap();
        assert_eq!(ws.collapsed, vec![false, true]);
        let s1 = ws.per_domain[1].read(&g, 1e-5);
        assert!(s1.mean[0].is_finite() && s1.var[0].is_finite());
        assert!(g.value(ws.w_hat).all_finite());
    }

    #[test]
    fn assignment_matrix_normalizes_columns() {
        let w = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4], vec![1.0, 0.0]]).unwrap();
        let a = AssignmentMatrix::new(w).unwrap();
        for j in 0..2 {
            let s: f64 = (0..3).map(|i| a.w_hat().at(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let m = a.mass();
        assert!((m[0] - 1.8).abs() < 1e-15 && (m[1] - 1.2).abs() < 1e-15);
        assert!(AssignmentMatrix::new(Tensor::from_rows(&[vec![0.3, 0.3]]).unwrap()).is_err());
    }

    fn batch(mean: f64, var: f64, mass: f64) -> DomainBatch<f64> {
        DomainBatch {
            stats: NormStats::new(vec![mean], vec![var], 1e-5).unwrap(),
            mass,
            variance_retention: 0.0,
        }
    }

    #[test]
    fn running_update_full_mass_in_one_domain() {
        let mut r = RunningStats::new(2, 1, 1e-5, Momentum::Exponential(0.1)).unwrap();
        r.update(&[batch(5.0, 3.0, 8.0), batch(9.0, 9.0, 0.0)], 8).unwrap();
        assert!((r.per_domain[0].mean[0] - 0.5).abs() < 1e-15);
        assert!((r.per_domain[0].var[0] - (0.9 + 0.3)).abs() < 1e-15);
        assert_eq!(r.per_domain[1], NormStats::standard(1, 1e-5));
        assert_eq!(r.seen_mass, vec![8.0, 0.0]);
    }

    #[test]
    fn running_update_zero_momentum_is_frozen() {
        let mut r = RunningStats::new(1, 1, 1e-5, Momentum::Exponential(0.0)).unwrap();
        for _ in 0..10 {
            r.update(&[batch(5.0, 3.0, 4.0)], 4).unwrap();
        }
        assert_eq!(r.per_domain[0], NormStats::standard(1, 1e-5));
    }

    #[test]
    fn running_update_mass_scaled() {
        let mut r = RunningStats::new(2, 1, 1e-5, Momentum::Exponential(0.1)).unwrap();
        r.update(&[batch(10.0, 1.0, 2.0), batch(10.0, 1.0, 6.0)], 8).unwrap();
        assert!((r.per_domain[0].mean[0] - 0.25).abs() < 1e-12);
        assert!((r.per_domain[1].mean[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cumulative_momentum_averages() {
        let mut r = RunningStats::new(1, 1, 1e-5, Momentum::Cumulative).unwrap();
        r.update(&[batch(2.0, 1.0, 4.0)], 4).unwrap();
        r.update(&[batch(4.0, 3.0, 4.0)], 4).unwrap();
        assert!((r.per_domain[0].mean[0] - 3.0).abs() < 1e-15);
        assert!((r.per_domain[0].var[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_momentum_rejected() {
        assert!(RunningStats::<f64>::new(1, 1, 1e-5, Momentum::Exponential(1.0)).is_err());
        assert!(RunningStats::<f64>::new(1, 1, 1e-5, Momentum::Exponential(-0.1)).is_err());
    }
}
