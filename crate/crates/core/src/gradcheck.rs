//! Finite-difference verification of analytic gradients.
//!
//! A check reduces a function's output to a scalar with fixed random weights,
//! backpropagates once, and compares the gradient with f64 central
//! differences over both inputs and trainable parameters. The error measure is
//! `‖a − n‖ / (‖a‖ + ‖n‖)` over the sampled coordinates.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    BackboneConfig, Cam, CamConfig, DfcaNet, FcBlock, FcConv, FcConvConfig, HeadConfig, IfcNet, IfcNetConfig,
    MiniDense, ModelConfig, Stage, Task,
};
use crate::nn::{
    bce_loss, cross_entropy_loss, Activation, BatchNorm2d, Conv2d, Dense, Dropout, Mode, ParamStore, Session,
};
use crate::tensor::{Padding, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// One-sided slopes differing by more than this fraction mark a kink.
const KINK_RATIO: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub rel_error: f64,
    /// Coordinates compared.
    pub points: usize,
    /// Coordinates left out because a ReLU or max-pool kink lies within one
    /// step of them (the one-sided slopes disagree).
    pub skipped: usize,
    pub passed: bool,
}

/// Settings shared by every check in a run.
#[derive(Debug, Clone)]
pub struct Checker {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked in full.
    pub max_points: usize,
    pub seed: u64,
    /// Negative control: perturbs the analytic gradient of the named check.
    pub fault: Option<String>,
}

impl Default for Checker {
    fn default() -> Self {
        Checker {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_points: 24,
            seed: 0,
            fault: None,
        }
    }
}

type Forward<'f> = dyn Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var> + 'f;

impl Checker {
    fn loss(&self, store: &ParamStore<f64>, mode: Mode, inputs: &[Tensor<f64>], f: &Forward<'_>, weights: &mut Option<Tensor<f64>>) -> Result<f64> {
        let mut s = Session::new(store, mode, self.seed);
        let vars: Vec<Var> = inputs.iter().map(|t| s.input(t.clone())).collect();
        let out = f(&mut s, &vars)?;
        let w = self.weights_for(s.value(out).shape(), weights);
        let y = s.value(out).data();
        Ok(y.iter().zip(w.data()).map(|(a, b)| a * b).sum())
    }

    fn weights_for<'w>(&self, shape: &[usize], weights: &'w mut Option<Tensor<f64>>) -> &'w Tensor<f64> {
        weights.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(0.5..1.5) * if rng.gen() { 1.0 } else { -1.0 }).collect();
            Tensor::from_vec(shape, data).expect("shape")
        })
    }

    /// Compares analytic and numeric gradients of `f` with respect to `inputs`
    /// and every trainable tensor of `store`.
    pub fn check(
        &self,
        name: &str,
        store: &ParamStore<f64>,
        mode: Mode,
        inputs: &[Tensor<f64>],
        f: &Forward<'_>,
    ) -> Result<CheckResult> {
        let mut weights = None;
        let mut s = Session::new(store, mode, self.seed);
        let vars: Vec<Var> = inputs.iter().map(|t| s.input_with_grad(t.clone())).collect();
        let out = f(&mut s, &vars)?;
        let w = self.weights_for(s.value(out).shape(), &mut weights).clone();
        let wv = s.input(w);
        let prod = s.graph.mul(out, wv)?;
        let loss = s.graph.sum(prod)?;
        let grads = s.backward(loss)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(17));
        let (mut diff2, mut a2, mut n2, mut points, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0usize);
        let corrupt = self.fault.as_deref() == Some(name);
        let h = self.step;
        let center = self.loss(store, mode, inputs, f, &mut weights)?;
        let mut compare = |analytic: f64, up: f64, down: f64| {
            let (forward, backward) = ((up - center) / h, (center - down) / h);
            if (forward - backward).abs() > KINK_RATIO * (1.0 + forward.abs() + backward.abs()) {
                skipped += 1;
                return;
            }
            let numeric = (up - down) / (2.0 * h);
            let analytic = if corrupt { analytic * 1.01 } else { analytic };
            diff2 += (analytic - numeric).powi(2);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
            points += 1;
        };

        for (k, (t, v)) in inputs.iter().zip(&vars).enumerate() {
            let analytic = s
                .graph
                .grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            for i in self.coordinates(t.len(), &mut rng) {
                let mut probe = inputs.to_vec();
                probe[k].data_mut()[i] = t.data()[i] + h;
                let up = self.loss(store, mode, &probe, f, &mut weights)?;
                probe[k].data_mut()[i] = t.data()[i] - h;
                let down = self.loss(store, mode, &probe, f, &mut weights)?;
                compare(analytic.data()[i], up, down);
            }
        }
        for id in store.trainable_ids() {
            let t = store.get(id);
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for i in self.coordinates(t.len(), &mut rng) {
                let mut probe = store.clone();
                let base = t.data()[i];
                probe.get_mut(id).data_mut()[i] = base + h;
                let up = self.loss(&probe, mode, inputs, f, &mut weights)?;
                probe.get_mut(id).data_mut()[i] = base - h;
                let down = self.loss(&probe, mode, inputs, f, &mut weights)?;
                compare(analytic.data()[i], up, down);
            }
        }
        let denom = a2.sqrt() + n2.sqrt();
        let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        if !rel_error.is_finite() {
            return Err(Error::Numeric(format!("{name}: non-finite gradient error")));
        }
        Ok(CheckResult {
            name: name.to_string(),
            rel_error,
            points,
            skipped,
            passed: rel_error < self.tolerance && points > 0,
        })
    }

    fn coordinates(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if len <= self.max_points {
            (0..len).collect()
        } else {
            let mut v = sample(rng, len, self.max_points).into_vec();
            v.sort_unstable();
            v
        }
    }
}

/// Size of the networks used by [`run_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Tiny,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Moves every trainable value off its initial point so that zero biases
/// acting on exact-zero ReLU outputs do not leave pre-activations sitting on
/// a kink.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> Result<()> {
    for id in store.trainable_ids() {
        let mut t = store.get(id).clone();
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        store.set(id, t)?;
    }
    Ok(())
}

/// Tiny end-to-end network: 8×8 input, 4-channel backbone, one FC-Block, CAM.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        backbone: BackboneConfig {
            stem_channels: 4,
            stem_kernel: 3,
            layers: 2,
            growth: 2,
            out_channels: 4,
            ..Default::default()
        },
        ifcnet: IfcNetConfig {
            stages: vec![Stage::Block { channels: 4, k1: 3, k2: 1, pool: 2 }],
        },
        use_ifcnet: true,
        use_cam: true,
        cam: CamConfig::default(),
        head: HeadConfig { hidden: 4, dropout: 0.2 },
        task: Task::Pad,
    }
}

/// Runs the per-layer and per-block checks.
pub fn run_suite(checker: &Checker, scale: Scale) -> Result<Vec<CheckResult>> {
    let Scale::Tiny = scale;
    let mut rng = ChaCha8Rng::seed_from_u64(checker.seed);
    let mut results = Vec::new();
    let empty = ParamStore::<f64>::new();

    // Plain graph operations.
    let x = random(&[2, 5, 6, 4], &mut rng);
    let ops: Vec<(&str, Box<Forward<'_>>)> = vec![
        ("sigmoid", Box::new(|s, v| s.graph.sigmoid(v[0]))),
        ("relu", Box::new(|s, v| s.graph.relu(v[0]))),
        ("avgpool_ceil", Box::new(|s, v| s.graph.avg_pool(v[0], (2, 4), (2, 4), true))),
        ("maxpool_same", Box::new(|s, v| s.graph.max_pool(v[0], (3, 3), (2, 2)))),
        ("bilinear_upsample", Box::new(|s, v| s.graph.upsample_bilinear(v[0], (9, 13)))),
        ("global_avg_pool", Box::new(|s, v| s.graph.global_avg_pool(v[0]))),
        ("channel_split_concat", Box::new(|s, v| {
            let (a, b) = s.graph.channel_split(v[0])?;
            let p = s.graph.mul(a, b)?;
            s.graph.concat_last(&[b, p])
        })),
        ("softmax_rows", Box::new(|s, v| {
            let r = s.graph.reshape(v[0], &[10, 24])?;
            s.graph.softmax_rows(r)
        })),
    ];
    for (name, f) in &ops {
        results.push(checker.check(name, &empty, Mode::Train, std::slice::from_ref(&x), f.as_ref())?);
    }
    let (a, b) = (random(&[3, 4, 5], &mut rng), random(&[3, 5, 2], &mut rng));
    results.push(checker.check("matmul", &empty, Mode::Train, &[a, b], &|s, v| s.graph.matmul(v[0], v[1]))?);

    // Parametric layers.
    for (name, stride, padding, k) in [
        ("conv2d_same", (1, 1), Padding::Same, 3),
        ("conv2d_strided", (2, 2), Padding::Same, 3),
        ("conv2d_valid", (1, 2), Padding::Valid, 3),
        ("conv2d_pointwise", (1, 1), Padding::Same, 1),
    ] {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "conv", (k, k), 4, 3, stride, padding, Activation::Linear, &mut rng)?;
        store.set(conv.bias, random(&[3], &mut rng))?;
        results.push(checker.check(name, &store, Mode::Train, std::slice::from_ref(&x), &|s, v| conv.forward(s, v[0]))?);
    }
    for mode in [Mode::Train, Mode::Infer] {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 4)?;
        store.set(bn.gamma, random(&[4], &mut rng))?;
        store.set(bn.beta, random(&[4], &mut rng))?;
        store.set(bn.running_mean, random(&[4], &mut rng))?;
        store.set(bn.running_var, random(&[4], &mut rng).map(|v| 1.0 + v.abs()))?;
        let name = if mode == Mode::Train { "batchnorm_train" } else { "batchnorm_infer" };
        results.push(checker.check(name, &store, mode, std::slice::from_ref(&x), &|s, v| bn.forward(s, v[0]))?);
    }
    let feats = random(&[3, 6], &mut rng);
    for (name, act) in [
        ("dense_linear", Activation::Linear),
        ("dense_relu", Activation::Relu),
        ("dense_sigmoid", Activation::Sigmoid),
        ("dense_softmax", Activation::Softmax),
    ] {
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "d", 6, 4, act, &mut rng)?;
        store.set(d.bias, random(&[4], &mut rng))?;
        results.push(checker.check(name, &store, Mode::Train, std::slice::from_ref(&feats), &|s, v| d.forward(s, v[0]))?);
    }
    let drop = Dropout::new(0.3)?;
    results.push(checker.check("dropout", &empty, Mode::Train, std::slice::from_ref(&feats), &|s, v| drop.forward(s, v[0]))?);

    let probs = Tensor::from_vec(&[4, 1], (0..4).map(|_| rng.gen_range(0.05..0.95)).collect())?;
    let labels = [1.0, 0.0, 0.0, 1.0];
    results.push(checker.check("bce_loss", &empty, Mode::Train, &[probs], &|s, v| bce_loss(s, v[0], &labels))?);
    let logits = random(&[4, 3], &mut rng);
    results.push(checker.check("cross_entropy_loss", &empty, Mode::Train, &[logits], &|s, v| {
        cross_entropy_loss(s, v[0], &[2, 0, 1, 2])
    })?);

    // Network blocks.
    let fmap = random(&[2, 6, 6, 4], &mut rng);
    let cfg = FcConvConfig::new(4, 3, 3, 4);
    let mut store = ParamStore::new();
    let fc = FcConv::new(&mut store, "fcconv", cfg, &mut rng)?;
    jitter(&mut store, &mut rng)?;
    results.push(checker.check("fcconv", &store, Mode::Train, std::slice::from_ref(&fmap), &|s, v| fc.forward(s, v[0]))?);

    let mut store = ParamStore::new();
    let block = FcBlock::new(&mut store, "fcblock", FcConvConfig::new(4, 3, 1, 2), &mut rng)?;
    jitter(&mut store, &mut rng)?;
    results.push(checker.check("fcblock", &store, Mode::Train, std::slice::from_ref(&fmap), &|s, v| block.forward(s, v[0]))?);

    let mut store = ParamStore::new();
    let net_cfg = IfcNetConfig {
        stages: vec![
            Stage::Block { channels: 4, k1: 3, k2: 1, pool: 3 },
            Stage::Transition { channels: 6 },
        ],
    };
    let net = IfcNet::new(&mut store, "ifcnet", &net_cfg, 4, &mut rng)?;
    jitter(&mut store, &mut rng)?;
    results.push(checker.check("ifcnet", &store, Mode::Train, std::slice::from_ref(&fmap), &|s, v| net.forward(s, v[0]))?);

    let cam = Cam::new(CamConfig { beta: 0.7 })?;
    let small = fmap.map(|v| 0.5 * v);
    results.push(checker.check("cam", &empty, Mode::Train, &[small], &|s, v| cam.forward(s, v[0]))?);

    let mut store = ParamStore::new();
    let model_cfg = tiny_model_config();
    let backbone = MiniDense::new(&mut store, "backbone", &model_cfg.backbone, &mut rng)?;
    jitter(&mut store, &mut rng)?;
    let image = random(&[2, 8, 8, 3], &mut rng);
    results.push(checker.check("backbone", &store, Mode::Train, std::slice::from_ref(&image), &|s, v| {
        backbone.forward(s, v[0])
    })?);

    let mut model = DfcaNet::<f64>::new(model_cfg, checker.seed)?;
    model.set_mode(Mode::Train);
    jitter(model.store_mut(), &mut rng)?;
    let model_ref = &model;
    results.push(checker.check("dfcanet_end_to_end", model.store(), Mode::Train, &[image], &|s, v| {
        let out = model_ref.forward(s, v[0])?;
        model_ref.loss(s, &out, &[1, 0])
    })?);

    Ok(results)
}
