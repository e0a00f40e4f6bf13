//! Classification and domain log-losses and the joint objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the domain loss.
    pub lambda: f64,
    pub includes_domain_loss: bool,
}

impl LossConfig {
    pub fn new(lambda: f64, includes_domain_loss: bool) -> Result<Self> {
        let cfg = LossConfig {
            lambda,
            includes_domain_loss,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn log_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, labels)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -T::one()))
}

/// The individual terms of [`total_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub class: Var,
    pub domain: Option<Var>,
}

/// `class_loss + lambda * domain_loss`, the domain term only when configured.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    class_logits: Var,
    labels: &[usize],
    domain_logits: Option<Var>,
    domains: Option<&[usize]>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let class = log_loss(g, class_logits, labels)?;
    if !cfg.includes_domain_loss {
        return Ok(LossTerms {
            total: class,
            class,
            domain: None,
        });
    }
    let (Some(dl), Some(d)) = (domain_logits, domains) else {
        return Err(Error::Contract(
            "domain loss requested but domain logits or labels are missing".into(),
        ));
    };
    let domain = log_loss(g, dl, d)?;
    let weighted = g.scale(domain, T::of(cfg.lambda));
    let total = g.add(class, weighted)?;
    Ok(LossTerms {
        total,
        class,
        domain: Some(domain),
    })
}
