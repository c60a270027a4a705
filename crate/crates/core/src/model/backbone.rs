use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, BatchNorm2d, Conv2d, ParamStore, Session};
use crate::tensor::{Padding, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    /// Freshly initialized mini-dense network.
    MiniDense,
    /// Mini-dense network whose `backbone.*` tensors come from a checkpoint file.
    ExternalCheckpoint,
}

/// Densely connected feature extractor producing a quarter-resolution map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub checkpoint: Option<PathBuf>,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub layers: usize,
    pub growth: usize,
    pub out_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            variant: BackboneVariant::MiniDense,
            checkpoint: None,
            stem_channels: 16,
            stem_kernel: 7,
            layers: 6,
            growth: 12,
            out_channels: 128,
        }
    }
}

impl BackboneConfig {
    /// Input channel count seen by dense layer `j` (1-based).
    pub fn layer_input_channels(&self, j: usize) -> usize {
        self.stem_channels + (j - 1) * self.growth
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.growth == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument("backbone channel counts must be positive".into()));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::InvalidArgument("backbone stem kernel must be odd".into()));
        }
        if self.variant == BackboneVariant::ExternalCheckpoint && self.checkpoint.is_none() {
            return Err(Error::InvalidArgument(
                "external_checkpoint backbone needs a checkpoint path".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DenseLayer {
    conv: Conv2d,
    bn: BatchNorm2d,
}

/// Stem (strided conv, max pool), one dense block, and a 1×1 transition.
#[derive(Debug, Clone)]
pub struct MiniDense {
    pub config: BackboneConfig,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    layers: Vec<DenseLayer>,
    transition: Conv2d,
    transition_bn: BatchNorm2d,
}

impl MiniDense {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let k = config.stem_kernel;
        let stem = Conv2d::new(
            store,
            &format!("{name}.stem"),
            (k, k),
            3,
            config.stem_channels,
            (2, 2),
            Padding::Same,
            Activation::Linear,
            rng,
        )?;
        let stem_bn = BatchNorm2d::new(store, &format!("{name}.stem_bn"), config.stem_channels)?;
        let mut layers = Vec::with_capacity(config.layers);
        for j in 1..=config.layers {
            let cin = config.layer_input_channels(j);
            let conv = Conv2d::new(
                store,
                &format!("{name}.dense{j}.conv"),
                (3, 3),
                cin,
                config.growth,
                (1, 1),
                Padding::Same,
                Activation::Linear,
                rng,
            )?;
            let bn = BatchNorm2d::new(store, &format!("{name}.dense{j}.bn"), config.growth)?;
            layers.push(DenseLayer { conv, bn });
        }
        let cat = config.layer_input_channels(config.layers + 1);
        let transition = Conv2d::new(
            store,
            &format!("{name}.transition"),
            (1, 1),
            cat,
            config.out_channels,
            (1, 1),
            Padding::Same,
            Activation::Linear,
            rng,
        )?;
        let transition_bn = BatchNorm2d::new(store, &format!("{name}.transition_bn"), config.out_channels)?;
        Ok(MiniDense {
            config: config.clone(),
            stem,
            stem_bn,
            layers,
            transition,
            transition_bn,
        })
    }

    /// Maps `N×H×W×3` images to `N×H/4×W/4×out_channels`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != 3 {
            return Err(Error::invalid_shape("backbone", format!("expected N×H×W×3, got {shape:?}")));
        }
        if shape[1] % 4 != 0 || shape[2] % 4 != 0 {
            return Err(Error::invalid_shape(
                "backbone",
                format!("spatial size {}×{} must be divisible by 4", shape[1], shape[2]),
            ));
        }
        let y = self.stem.forward(s, x)?;
        let y = self.stem_bn.forward(s, y)?;
        let y = s.graph.relu(y)?;
        let mut features = s.graph.max_pool(y, (3, 3), (2, 2))?;
        for layer in &self.layers {
            let h = layer.conv.forward(s, features)?;
            let h = layer.bn.forward(s, h)?;
            let h = s.graph.relu(h)?;
            features = s.graph.concat_last(&[features, h])?;
        }
        let y = self.transition.forward(s, features)?;
        let y = self.transition_bn.forward(s, y)?;
        s.graph.relu(y)
    }

    /// Input channel count of every dense layer, in order.
    pub fn dense_input_channels(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.conv.channels.0).collect()
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count()
            + self.stem_bn.param_count()
            + self
                .layers
                .iter()
                .map(|l| l.conv.param_count() + l.bn.param_count())
                .sum::<usize>()
            + self.transition.param_count()
            + self.transition_bn.param_count()
    }
}
