use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, BatchNorm2d, Conv2d, ParamStore, Session};
use crate::tensor::{Padding, Scalar, Var};

/// Shape parameters of one feature-calibration convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcConvConfig {
    /// Input and output channels; split into two equal halves.
    pub channels: usize,
    /// Kernel of the split convolution, the local head and the output convolution.
    pub k1: usize,
    /// Kernel of the global head convolution.
    pub k2: usize,
    /// Average-pool window (and stride) of the global head.
    pub pool: usize,
}

impl FcConvConfig {
    pub fn new(channels: usize, k1: usize, k2: usize, pool: usize) -> Self {
        FcConvConfig { channels, k1, k2, pool }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "fc-conv channels must be even and positive, got {}",
                self.channels
            )));
        }
        if self.k1 % 2 == 0 || self.k2 % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "fc-conv kernels must be odd, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if self.pool == 0 {
            return Err(Error::InvalidArgument("fc-conv pool window must be at least 1".into()));
        }
        Ok(())
    }

    /// Trainable scalars of one FC-Conv built from this config.
    pub fn param_count(&self) -> usize {
        let h = self.channels / 2;
        let conv = |k: usize| k * k * h * h + h;
        3 * conv(self.k1) + conv(self.k2) + 2 * 2 * h
    }
}

/// Feature-calibration convolution.
///
/// The first channel half passes through `F1 → BN → ReLU`. The second half is
/// modulated: `F4(F3(I2) ⊙ σ(Up(F2(AvgPool(I2))) + I2)) → BN → ReLU`. The two
/// halves are concatenated back to `C` channels.
#[derive(Debug, Clone)]
pub struct FcConv {
    pub config: FcConvConfig,
    pub f1: Conv2d,
    pub bn1: BatchNorm2d,
    pub f2: Conv2d,
    pub f3: Conv2d,
    pub f4: Conv2d,
    pub bn4: BatchNorm2d,
}

impl FcConv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: FcConvConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let h = config.channels / 2;
        let (k1, k2) = ((config.k1, config.k1), (config.k2, config.k2));
        let conv = |store: &mut ParamStore<T>, rng: &mut _, sub: &str, k, act| {
            Conv2d::new(store, &format!("{name}.{sub}"), k, h, h, (1, 1), Padding::Same, act, rng)
        };
        Ok(FcConv {
            config,
            f1: conv(store, rng, "f1", k1, Activation::Linear)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), h)?,
            f2: conv(store, rng, "f2", k2, Activation::Relu)?,
            f3: conv(store, rng, "f3", k1, Activation::Relu)?,
            f4: conv(store, rng, "f4", k1, Activation::Linear)?,
            bn4: BatchNorm2d::new(store, &format!("{name}.bn4"), h)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[3] != self.config.channels {
            return Err(Error::invalid_shape(
                "fc-conv",
                format!("expected N×H×W×{}, got {shape:?}", self.config.channels),
            ));
        }
        let (hgt, wid) = (shape[1], shape[2]);
        let p = self.config.pool;
        if p > hgt || p > wid {
            return Err(Error::invalid_shape(
                "fc-conv",
                format!("pool window {p} larger than feature map {hgt}×{wid}"),
            ));
        }
        let (i1, i2) = s.graph.channel_split(x)?;

        let a = self.f1.forward(s, i1)?;
        let a = self.bn1.forward(s, a)?;
        let a = s.graph.relu(a)?;

        let local = self.f3.forward(s, i2)?;
        let pooled = s.graph.avg_pool(i2, (p, p), (p, p), true)?;
        let global = self.f2.forward(s, pooled)?;
        let global = s.graph.upsample_bilinear(global, (hgt, wid))?;
        let gate = s.graph.add(global, i2)?;
        let gate = s.graph.sigmoid(gate)?;
        let calibrated = s.graph.mul(local, gate)?;
        let b = self.f4.forward(s, calibrated)?;
        let b = self.bn4.forward(s, b)?;
        let b = s.graph.relu(b)?;

        s.graph.concat_last(&[a, b])
    }
}

/// Three FC-Convs with a residual from the first one's output to the last one's.
#[derive(Debug, Clone)]
pub struct FcBlock {
    pub convs: [FcConv; 3],
}

impl FcBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: FcConvConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(FcBlock {
            convs: [
                FcConv::new(store, &format!("{name}.fcconv1"), config, rng)?,
                FcConv::new(store, &format!("{name}.fcconv2"), config, rng)?,
                FcConv::new(store, &format!("{name}.fcconv3"), config, rng)?,
            ],
        })
    }

    pub fn config(&self) -> FcConvConfig {
        self.convs[0].config
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let first = self.convs[0].forward(s, x)?;
        let y = self.convs[1].forward(s, first)?;
        let y = self.convs[2].forward(s, y)?;
        if s.graph.shape(y) != s.graph.shape(first) {
            return Err(Error::shape("fc-block residual", s.graph.shape(first), s.graph.shape(y)));
        }
        s.graph.add(y, first)
    }

    pub fn param_count(&self) -> usize {
        3 * self.config().param_count()
    }
}
