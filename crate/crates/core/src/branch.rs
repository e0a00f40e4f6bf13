//! Lateral branch that turns early trunk features into per-sample domain weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linear::{Linear, LinearVars};
use crate::scalar::Scalar;

/// Where the branch reads the trunk and how it is shaped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    /// 0 reads the raw model input, 1 reads the first hidden linear layer before its
    /// normalization. Deeper taps would come after the first normalization layer that
    /// already needs the weights, so they are rejected.
    #[serde(default = "default_tap")]
    pub tap_point: usize,
    /// Optional hidden fully-connected layer between the ReLU and the output layer.
    #[serde(default)]
    pub hidden_width: Option<usize>,
    /// Stop gradients from flowing from the branch into the trunk.
    #[serde(default = "default_detach")]
    pub detach_input: bool,
}

fn default_tap() -> usize {
    1
}

fn default_detach() -> bool {
    true
}

impl Default for BranchConfig {
    fn default() -> Self {
        BranchConfig {
            tap_point: default_tap(),
            hidden_width: None,
            detach_input: default_detach(),
        }
    }
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tap_point > 1 {
            return Err(Error::Config(format!(
                "branch tap_point {} must be 0 (input) or 1 (first hidden layer)",
                self.tap_point
            )));
        }
        if self.hidden_width == Some(0) {
            return Err(Error::Config("branch hidden_width must be positive".into()));
        }
        Ok(())
    }
}

/// Branch parameters: one or two fully-connected layers ending in `num_domains` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T> {
    pub layers: Vec<Linear<T>>,
    pub detach_input: bool,
}

pub struct BranchVars {
    pub layers: Vec<LinearVars>,
}

/// Domain logits and their softmax.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    pub logits: Var,
    pub weights: Var,
}

impl<T: Scalar> Branch<T> {
    pub fn init<R: Rng + ?Sized>(features: usize, domains: usize, config: &BranchConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if domains == 0 {
            return Err(Error::Config("branch needs at least one domain".into()));
        }
        let layers = match config.hidden_width {
            None => vec![Linear::init(features, domains, rng)],
            Some(h) => vec![Linear::init(features, h, rng), Linear::init(h, domains, rng)],
        };
        Ok(Branch {
            layers,
            detach_input: config.detach_input,
        })
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn domains(&self) -> usize {
        self.layers.last().map_or(0, Linear::outputs)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BranchVars {
        BranchVars {
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
        }
    }
}

/// `softmax(FC(relu(features)))`, with an optional hidden layer.
pub fn assign_weights<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    params: &BranchVars,
    detach_input: bool,
) -> Result<BranchOutput> {
    let width = g.value(params.layers[0].weight).shape()[0];
    let fv = g.value(features);
    if fv.ndim() != 2 || fv.cols() != width {
        return Err(Error::dim("assign_weights", fv.shape(), &[fv.rows(), width]));
    }
    let input = if detach_input { g.detach(features) } else { features };
    let mut h = g.relu(input);
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        h = layer.forward(g, h)?;
        if i < last {
            h = g.relu(h);
        }
    }
    let weights = g.softmax(h)?;
    Ok(BranchOutput { logits: h, weights })
}

/// Averages a `[batch, channels, spatial]` feature map over its spatial axis.
pub fn global_pool<T: Scalar>(g: &mut Graph<T>, features: Var) -> Result<Var> {
    g.mean_last_axis(features)
}
