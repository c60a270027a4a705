use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{glorot_uniform, he_uniform, ParamId, ParamKind, ParamStore};
use super::session::{Mode, Session};
use crate::error::{Error, Result};
use crate::tensor::{Padding, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Softmax,
}

impl Activation {
    pub fn apply<T: Scalar>(self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self {
            Activation::Linear => Ok(x),
            Activation::Relu => s.graph.relu(x),
            Activation::Sigmoid => s.graph.sigmoid(x),
            Activation::Softmax => s.graph.softmax_rows(x),
        }
    }

    fn feeds_relu(self) -> bool {
        self == Activation::Relu
    }
}

/// 2-D convolution with bias, over `N×H×W×C` inputs.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub kernel_size: (usize, usize),
    pub channels: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub activation: Activation,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel_size: (usize, usize),
        cin: usize,
        cout: usize,
        stride: (usize, usize),
        padding: Padding,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (kh, kw) = kernel_size;
        if padding == Padding::Same && stride == (1, 1) && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::InvalidArgument(format!(
                "{name}: same padding needs odd kernel sizes, got {kh}×{kw}"
            )));
        }
        let shape = [kh, kw, cin, cout];
        let fan_in = kh * kw * cin;
        let kernel = if activation.feeds_relu() {
            he_uniform(&shape, fan_in, rng)
        } else {
            glorot_uniform(&shape, fan_in, kh * kw * cout, rng)
        };
        Ok(Conv2d {
            kernel: store.add(format!("{name}.kernel"), kernel, ParamKind::Trainable)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Trainable)?,
            kernel_size,
            channels: (cin, cout),
            stride,
            padding,
            activation,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let c = *s.graph.shape(x).last().unwrap_or(&0);
        if c != self.channels.0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d expects {} input channels, got {c}",
                self.channels.0
            )));
        }
        let (k, b) = (s.param(self.kernel), s.param(self.bias));
        let y = s.graph.conv2d(x, k, Some(b), self.stride, self.padding)?;
        self.activation.apply(s, y)
    }

    pub fn param_count(&self) -> usize {
        let (kh, kw) = self.kernel_size;
        kh * kw * self.channels.0 * self.channels.1 + self.channels.1
    }
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), ParamKind::Buffer)?,
            channels,
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        })
    }

    /// Train mode normalizes with batch statistics and queues a running-stat
    /// update; infer mode applies the running statistics.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if c != self.channels {
            return Err(Error::InvalidArgument(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        let eps = T::from_f64_lossy(self.epsilon);
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm(x, g, b, None, eps)?;
                let (mean, var) = stats.expect("batch statistics");
                let count = shape.iter().product::<usize>() / c;
                let m = T::from_f64_lossy(self.momentum);
                let one = T::one();
                let unbias = if count > 1 {
                    T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
                } else {
                    one
                };
                let rm = s.store().get(self.running_mean).data();
                let rv = s.store().get(self.running_var).data();
                let new_mean: Vec<T> = rm.iter().zip(&mean).map(|(r, v)| (one - m) * *r + m * *v).collect();
                let new_var: Vec<T> = rv
                    .iter()
                    .zip(&var)
                    .map(|(r, v)| ((one - m) * *r + m * *v * unbias).max(T::zero()))
                    .collect();
                s.record_stat(self.running_mean, Tensor::from_vec(&[c], new_mean)?);
                s.record_stat(self.running_var, Tensor::from_vec(&[c], new_var)?);
                Ok(y)
            }
            Mode::Infer => {
                let rm = s.store().get(self.running_mean).data().to_vec();
                let rv = s.store().get(self.running_var).data().to_vec();
                let (y, _) = s.graph.batch_norm(x, g, b, Some((&rm, &rv)), eps)?;
                Ok(y)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Fully connected layer on `N×in` inputs.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub features: (usize, usize),
    pub activation: Activation,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = if activation.feeds_relu() {
            he_uniform(&[fan_in, fan_out], fan_in, rng)
        } else {
            glorot_uniform(&[fan_in, fan_out], fan_in, fan_out, rng)
        };
        Ok(Dense {
            weight: store.add(format!("{name}.weight"), w, ParamKind::Trainable)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), ParamKind::Trainable)?,
            features: (fan_in, fan_out),
            activation,
        })
    }

    /// Pre-activation output `x·W + b`.
    pub fn linear<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x);
        if shape.len() != 2 || shape[1] != self.features.0 {
            return Err(Error::invalid_shape(
                "dense",
                format!("expected N×{}, got {shape:?}", self.features.0),
            ));
        }
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        let y = s.graph.matmul(x, w)?;
        s.graph.bias_add(y, b)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.linear(s, x)?;
        self.activation.apply(s, y)
    }

    pub fn param_count(&self) -> usize {
        self.features.0 * self.features.1 + self.features.1
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` during training.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        if s.mode() == Mode::Infer || self.rate == 0.0 {
            return Ok(x);
        }
        let n = s.graph.value(x).len();
        let keep = T::from_f64_lossy(1.0 / (1.0 - self.rate));
        let rate = self.rate;
        let rng = s.rng();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        s.graph.mask(x, mask)
    }
}

/// Clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_EPSILON: f64 = 1e-7;

/// Mean binary cross-entropy of `p` (N×1) against 0/1 labels.
pub fn bce_loss<T: Scalar>(s: &mut Session<'_, T>, p: Var, labels: &[T]) -> Result<Var> {
    s.graph.bce(p, labels, T::from_f64_lossy(BCE_EPSILON))
}

/// Mean cross-entropy of logits (N×K) against class indices.
pub fn cross_entropy_loss<T: Scalar>(s: &mut Session<'_, T>, logits: Var, classes: &[usize]) -> Result<Var> {
    s.graph.cross_entropy(logits, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn identity_and_zero_convolutions() {
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", (1, 1), 1, 1, (1, 1), Padding::Same, Activation::Linear, &mut rng())
            .unwrap();
        store.set(conv.kernel, Tensor::ones(&[1, 1, 1, 1])).unwrap();
        let x = Tensor::<f32>::from_f64(&[1, 2, 3, 1], &[1.0, -2.0, 3.0, 4.0, 5.5, -6.0]).unwrap();
        let mut s = Session::new(&store, Mode::Infer, 0);
        let xv = s.input(x.clone());
        let y = conv.forward(&mut s, xv).unwrap();
        assert_eq!(s.value(y), &x);

        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", (3, 3), 2, 3, (1, 1), Padding::Same, Activation::Linear, &mut rng())
            .unwrap();
        store.set(conv.kernel, Tensor::zeros(&[3, 3, 2, 3])).unwrap();
        let mut s = Session::new(&store, Mode::Infer, 0);
        let xv = s.input(Tensor::ones(&[1, 4, 4, 2]));
        let y = conv.forward(&mut s, xv).unwrap();
        assert!(s.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(s.value(y).shape(), &[1, 4, 4, 3]);
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", (3, 3), 2, 3, (1, 1), Padding::Same, Activation::Relu, &mut rng())
            .unwrap();
        let mut s = Session::new(&store, Mode::Infer, 0);
        let xv = s.input(Tensor::ones(&[1, 4, 4, 3]));
        assert!(conv.forward(&mut s, xv).is_err());
        let mut store = ParamStore::<f32>::new();
        assert!(Conv2d::new(&mut store, "e", (2, 2), 1, 1, (1, 1), Padding::Same, Activation::Relu, &mut rng()).is_err());
    }

    #[test]
    fn batchnorm_train_statistics() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        let mut r = rng();
        let n = 4096;
        let data: Vec<f64> = (0..n * 2)
            .map(|_| {
                // Box-Muller standard normal
                let (u1, u2): (f64, f64) = (r.gen::<f64>().max(1e-12), r.gen());
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let x = Tensor::from_vec(&[n, 1, 1, 2], data).unwrap();
        let mut s = Session::new(&store, Mode::Train, 0);
        let xv = s.input(x);
        let y = bn.forward(&mut s, xv).unwrap();
        let out = s.value(y).data().to_vec();
        for ch in 0..2 {
            let vals: Vec<f64> = out.iter().skip(ch).step_by(2).copied().collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-2 && (var - 1.0).abs() < 1e-2, "{mean} {var}");
        }
        let updates = s.into_stat_updates();
        assert_eq!(updates.len(), 2);
        assert!(updates[1].1.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn batchnorm_constant_input_gives_beta() {
        let mut store = ParamStore::<f32>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3).unwrap();
        store.set(bn.beta, Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap()).unwrap();
        store.set(bn.gamma, Tensor::from_f64(&[3], &[3.0, 3.0, 3.0]).unwrap()).unwrap();
        let mut s = Session::new(&store, Mode::Train, 0);
        let xv = s.input(Tensor::full(&[4, 5, 5, 3], 0.37));
        let y = bn.forward(&mut s, xv).unwrap();
        for row in s.value(y).data().chunks(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn batchnorm_infer_defaults_are_near_identity() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        let x = Tensor::from_f64(&[1, 1, 2, 2], &[1.0, -2.0, 0.5, 4.0]).unwrap();
        let mut s = Session::new(&store, Mode::Infer, 0);
        let xv = s.input(x.clone());
        let y = bn.forward(&mut s, xv).unwrap();
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (a, b) in s.value(y).data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_examples() {
        let mut store = ParamStore::<f64>::new();
        let d = Dense::new(&mut store, "d", 2, 2, Activation::Linear, &mut rng()).unwrap();
        store.set(d.weight, Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let x = Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut s = Session::new(&store, Mode::Infer, 0);
        let xv = s.input(x.clone());
        let y = d.forward(&mut s, xv).unwrap();
        assert_eq!(s.value(y), &x);

        store.set(d.weight, Tensor::zeros(&[2, 2])).unwrap();
        store.set(d.bias, Tensor::from_f64(&[2], &[0.25, -1.5]).unwrap()).unwrap();
        let mut s = Session::new(&store, Mode::Infer, 0);
        let xv = s.input(x);
        let y = d.forward(&mut s, xv).unwrap();
        assert_eq!(s.value(y).data(), &[0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn dropout_modes_and_rate() {
        assert!(Dropout::new(1.0).is_err());
        assert!(Dropout::new(-0.1).is_err());
        let store = ParamStore::<f64>::new();
        let x = Tensor::<f64>::ones(&[100_000]);
        for (rate, mode) in [(0.0, Mode::Train), (0.5, Mode::Infer)] {
            let mut s = Session::new(&store, mode, 1);
            let xv = s.input(x.clone());
            let y = Dropout::new(rate).unwrap().forward(&mut s, xv).unwrap();
            assert_eq!(s.value(y), &x);
        }
        let mut s = Session::new(&store, Mode::Train, 1);
        let xv = s.input(x);
        let y = Dropout::new(0.2).unwrap().forward(&mut s, xv).unwrap();
        let out = s.value(y).data();
        let kept = out.iter().filter(|&&v| v != 0.0).count() as f64 / out.len() as f64;
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        assert!((kept - 0.8).abs() < 0.01, "{kept}");
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn bce_examples() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Train, 0);
        let p = s.input(Tensor::from_f64(&[2, 1], &[1.0, 0.0]).unwrap());
        let l = bce_loss(&mut s, p, &[1.0, 0.0]).unwrap();
        assert!(s.value(l).item() <= 1.6e-7);

        let p = s.input(Tensor::from_f64(&[3, 1], &[0.5, 0.5, 0.5]).unwrap());
        let l = bce_loss(&mut s, p, &[1.0, 0.0, 1.0]).unwrap();
        assert!((s.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let p = s.input(Tensor::from_f64(&[2, 1], &[0.9, 0.1]).unwrap());
        let l = bce_loss(&mut s, p, &[1.0, 0.0]).unwrap();
        assert!((s.value(l).item() - (-(0.9f64).ln())).abs() < 1e-12);

        let p = s.input(Tensor::from_f64(&[1, 1], &[0.3]).unwrap());
        assert!(bce_loss(&mut s, p, &[0.5]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Mode::Train, 0);
        let z = s.input(Tensor::zeros(&[2, 3]));
        let l = cross_entropy_loss(&mut s, z, &[0, 2]).unwrap();
        assert!((s.value(l).item() - 3f64.ln()).abs() < 1e-12);

        let z = s.input(Tensor::from_f64(&[1, 3], &[0.0, 80.0, 0.0]).unwrap());
        let l = cross_entropy_loss(&mut s, z, &[1]).unwrap();
        assert!(s.value(l).item() < 1e-12);

        let logits = [0.3, -1.2, 2.0, 0.0, 0.5, -0.5];
        let z = s.input(Tensor::from_f64(&[2, 3], &logits).unwrap());
        let l = cross_entropy_loss(&mut s, z, &[2, 0]).unwrap();
        // softmax + log oracle
        let nll = |row: &[f64], t: usize| {
            let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            -(e[t] / e.iter().sum::<f64>()).ln()
        };
        let expected = (nll(&logits[..3], 2) + nll(&logits[3..], 0)) / 2.0;
        assert!((s.value(l).item() - expected).abs() < 1e-6);

        let z = s.input(Tensor::zeros(&[1, 3]));
        assert!(cross_entropy_loss(&mut s, z, &[3]).is_err());
    }
}
