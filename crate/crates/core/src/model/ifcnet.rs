use rand::Rng;
use serde::{Deserialize, Serialize};

use super::fcconv::{FcBlock, FcConvConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, Conv2d, ParamStore, Session};
use crate::tensor::{Padding, Scalar, Var};

/// One stage of the calibration pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage {
    /// An FC-Block; `channels` must equal the incoming channel count.
    Block { channels: usize, k1: usize, k2: usize, pool: usize },
    /// 2×2 average pooling with stride 2, then a linear 1×1 convolution to `channels`.
    Transition { channels: usize },
}

/// Stage list of the calibration network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IfcNetConfig {
    pub stages: Vec<Stage>,
}

impl Default for IfcNetConfig {
    /// Five FC-Blocks with two channel-doubling transitions, for a 56×56×128 input.
    fn default() -> Self {
        let block = |channels, k1, k2, pool| Stage::Block { channels, k1, k2, pool };
        IfcNetConfig {
            stages: vec![
                block(128, 3, 7, 11),
                block(128, 3, 7, 11),
                Stage::Transition { channels: 256 },
                block(256, 3, 5, 9),
                block(256, 3, 5, 9),
                Stage::Transition { channels: 512 },
                block(512, 3, 3, 7),
            ],
        }
    }
}

impl IfcNetConfig {
    pub fn block_count(&self) -> usize {
        self.stages.iter().filter(|s| matches!(s, Stage::Block { .. })).count()
    }

    /// Output channels given the channel count entering the first stage.
    pub fn out_channels(&self, input: usize) -> usize {
        self.stages.iter().fold(input, |c, s| match *s {
            Stage::Block { .. } => c,
            Stage::Transition { channels } => channels,
        })
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Block(FcBlock),
    Transition(Conv2d),
}

/// Stack of FC-Blocks with downsampling transitions.
#[derive(Debug, Clone)]
pub struct IfcNet {
    layers: Vec<Layer>,
    in_channels: usize,
}

impl IfcNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &IfcNetConfig,
        in_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(config.stages.len());
        let (mut c, mut blocks, mut transitions) = (in_channels, 0, 0);
        for stage in &config.stages {
            match *stage {
                Stage::Block { channels, k1, k2, pool } => {
                    if channels != c {
                        return Err(Error::InvalidArgument(format!(
                            "fc-block {} expects {channels} channels but receives {c}",
                            blocks + 1
                        )));
                    }
                    blocks += 1;
                    let cfg = FcConvConfig::new(channels, k1, k2, pool);
                    layers.push(Layer::Block(FcBlock::new(store, &format!("{name}.block{blocks}"), cfg, rng)?));
                }
                Stage::Transition { channels } => {
                    transitions += 1;
                    let conv = Conv2d::new(
                        store,
                        &format!("{name}.transition{transitions}"),
                        (1, 1),
                        c,
                        channels,
                        (1, 1),
                        Padding::Same,
                        Activation::Linear,
                        rng,
                    )?;
                    layers.push(Layer::Transition(conv));
                    c = channels;
                }
            }
        }
        Ok(IfcNet { layers, in_channels })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Runs every stage, tapping each block output as `fcblock<i>`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x);
        if shape.len() != 4 || shape[3] != self.in_channels {
            return Err(Error::invalid_shape(
                "ifcnet",
                format!("expected N×H×W×{}, got {shape:?}", self.in_channels),
            ));
        }
        let mut y = x;
        let mut block = 0;
        for layer in &self.layers {
            y = match layer {
                Layer::Block(b) => {
                    block += 1;
                    let out = b.forward(s, y)?;
                    s.tap(&format!("fcblock{block}"), out);
                    out
                }
                Layer::Transition(conv) => {
                    let pooled = s.graph.avg_pool(y, (2, 2), (2, 2), false)?;
                    conv.forward(s, pooled)?
                }
            };
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Block(b) => b.param_count(),
                Layer::Transition(c) => c.param_count(),
            })
            .sum()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &FcBlock> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Block(b) => Some(b),
            Layer::Transition(_) => None,
        })
    }
}
