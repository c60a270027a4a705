use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{BackboneConfig, BackboneVariant, MiniDense};
use super::cam::{Cam, CamConfig};
use super::checkpoint::{Checkpoint, LoadMode, LoadReport};
use super::ifcnet::{IfcNet, IfcNetConfig, Stage};
use crate::error::{Error, Result};
use crate::nn::{bce_loss, cross_entropy_loss, Activation, Dense, Dropout, Mode, ParamStore, Session};
use crate::tensor::{Scalar, Tensor, Var};

/// What the output layer predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// One sigmoid unit: probability that the sample is an attack.
    Pad,
    /// Softmax over `classes` contact-lens classes.
    Lens { classes: usize },
}

impl Task {
    pub fn outputs(self) -> usize {
        match self {
            Task::Pad => 1,
            Task::Lens { classes } => classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { hidden: 256, dropout: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Side length images are resized to before entering the network.
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub ifcnet: IfcNetConfig,
    pub use_ifcnet: bool,
    pub use_cam: bool,
    pub cam: CamConfig,
    pub head: HeadConfig,
    pub task: Task,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 224,
            backbone: BackboneConfig::default(),
            ifcnet: IfcNetConfig::default(),
            use_ifcnet: true,
            use_cam: true,
            cam: CamConfig::default(),
            head: HeadConfig::default(),
            task: Task::Pad,
        }
    }
}

impl ModelConfig {
    /// Reduced network for 64×64 inputs: a small backbone and two FC-Blocks.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            backbone: BackboneConfig {
                stem_channels: 8,
                layers: 2,
                growth: 8,
                out_channels: 16,
                ..Default::default()
            },
            ifcnet: IfcNetConfig {
                stages: vec![
                    Stage::Block { channels: 16, k1: 3, k2: 5, pool: 5 },
                    Stage::Transition { channels: 32 },
                    Stage::Block { channels: 32, k1: 3, k2: 3, pool: 3 },
                ],
            },
            head: HeadConfig { hidden: 32, dropout: 0.2 },
            ..Default::default()
        }
    }
}

/// The four component combinations compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    BackboneOnly,
    BackboneIfcnet,
    BackboneCam,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::BackboneOnly,
        Ablation::BackboneIfcnet,
        Ablation::BackboneCam,
        Ablation::Full,
    ];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Ablation::BackboneOnly => (false, false),
            Ablation::BackboneIfcnet => (true, false),
            Ablation::BackboneCam => (false, true),
            Ablation::Full => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::BackboneOnly => "backbone",
            Ablation::BackboneIfcnet => "backbone+ifcnet",
            Ablation::BackboneCam => "backbone+cam",
            Ablation::Full => "full",
        }
    }
}

impl ModelConfig {
    pub fn with_ablation(mut self, a: Ablation) -> Self {
        (self.use_ifcnet, self.use_cam) = a.flags();
        self
    }

    /// Channels entering the head.
    pub fn feature_channels(&self) -> usize {
        let c = self.backbone.out_channels;
        if self.use_ifcnet {
            self.ifcnet.out_channels(c)
        } else {
            c
        }
    }

    /// Trainable parameter count derived from the configuration alone.
    pub fn expected_param_count(&self) -> usize {
        let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
        let bn = |c: usize| 2 * c;
        let b = &self.backbone;
        let mut total = conv(b.stem_kernel, 3, b.stem_channels) + bn(b.stem_channels);
        for j in 1..=b.layers {
            total += conv(3, b.layer_input_channels(j), b.growth) + bn(b.growth);
        }
        total += conv(1, b.layer_input_channels(b.layers + 1), b.out_channels) + bn(b.out_channels);
        if self.use_ifcnet {
            let mut c = b.out_channels;
            for stage in &self.ifcnet.stages {
                match *stage {
                    Stage::Block { channels, k1, k2, .. } => {
                        let h = channels / 2;
                        total += 3 * (3 * conv(k1, h, h) + conv(k2, h, h) + 2 * bn(h));
                    }
                    Stage::Transition { channels } => {
                        total += conv(1, c, channels);
                        c = channels;
                    }
                }
            }
        }
        let (f, h) = (self.feature_channels(), self.head.hidden);
        let dense = |i: usize, o: usize| i * o + o;
        total + dense(f, h) + dense(h, h) + dense(h, self.task.outputs())
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if let Task::Lens { classes } = self.task {
            if classes < 2 {
                return Err(Error::InvalidArgument("lens task needs at least 2 classes".into()));
            }
        }
        if self.head.hidden == 0 {
            return Err(Error::InvalidArgument("head hidden size must be positive".into()));
        }
        self.cam.validate()?;
        self.backbone.validate()
    }
}

#[derive(Debug, Clone)]
struct Head {
    fc1: Dense,
    dropout: Dropout,
    fc2: Dense,
    out: Dense,
}

/// Output variables of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Output {
    /// Pre-activation scores, `N×outputs`.
    pub logits: Var,
    /// Attack probability (`N×1`) or class distribution (`N×K`).
    pub probs: Var,
}

/// Backbone, optional calibration network, optional channel attention, head.
#[derive(Debug, Clone)]
pub struct DfcaNet<T: Scalar> {
    config: ModelConfig,
    store: ParamStore<T>,
    backbone: MiniDense,
    ifcnet: Option<IfcNet>,
    cam: Option<Cam>,
    head: Head,
    mode: Option<Mode>,
}

/// Names accepted by [`DfcaNet::dump_feature_maps`].
pub fn is_stage_name(name: &str) -> bool {
    matches!(name, "backbone" | "cam" | "embedding")
        || name
            .strip_prefix("fcblock")
            .and_then(|i| i.parse::<usize>().ok())
            .is_some_and(|i| i >= 1)
}

impl<T: Scalar> DfcaNet<T> {
    /// Builds and initializes a model; the mode starts unset.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = MiniDense::new(&mut store, "backbone", &config.backbone, &mut rng)?;
        let ifcnet = if config.use_ifcnet {
            Some(IfcNet::new(&mut store, "ifcnet", &config.ifcnet, config.backbone.out_channels, &mut rng)?)
        } else {
            None
        };
        let cam = if config.use_cam { Some(Cam::new(config.cam)?) } else { None };
        let (f, h) = (config.feature_channels(), config.head.hidden);
        let out_act = match config.task {
            Task::Pad => Activation::Sigmoid,
            Task::Lens { .. } => Activation::Softmax,
        };
        let head = Head {
            fc1: Dense::new(&mut store, "head.fc1", f, h, Activation::Relu, &mut rng)?,
            dropout: Dropout::new(config.head.dropout)?,
            fc2: Dense::new(&mut store, "head.fc2", h, h, Activation::Relu, &mut rng)?,
            out: Dense::new(&mut store, "head.out", h, config.task.outputs(), out_act, &mut rng)?,
        };
        let mut model = DfcaNet {
            config,
            store,
            backbone,
            ifcnet,
            cam,
            head,
            mode: None,
        };
        if model.config.backbone.variant == BackboneVariant::ExternalCheckpoint {
            let path = model.config.backbone.checkpoint.clone().expect("validated");
            let ck = Checkpoint::load(&path)?;
            let report = ck.load_into(&mut model.store, &LoadMode::Transfer { prefixes: vec!["backbone.".into()] })?;
            if let Some(name) = report.skipped.iter().find(|n| n.starts_with("backbone.")) {
                return Err(Error::Checkpoint(format!(
                    "{}: backbone tensor {name} missing or mis-shaped",
                    path.display()
                )));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn mode(&self) -> Option<Mode> {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = Some(mode);
    }

    pub fn backbone(&self) -> &MiniDense {
        &self.backbone
    }

    pub fn ifcnet(&self) -> Option<&IfcNet> {
        self.ifcnet.as_ref()
    }

    /// A session in the model's current mode.
    pub fn session(&self, seed: u64) -> Result<Session<'_, T>> {
        let mode = self
            .mode
            .ok_or_else(|| Error::InvalidArgument("model mode is unset; call set_mode first".into()))?;
        let s = Session::new(&self.store, mode, seed);
        Ok(if mode == Mode::Infer { s.without_grads() } else { s })
    }

    /// Runs the network, tapping `backbone`, `fcblock<i>`, `cam` and `embedding`.
    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Output> {
        if self.mode.is_none() {
            return Err(Error::InvalidArgument("model mode is unset; call set_mode first".into()));
        }
        let mut y = self.backbone.forward(s, x)?;
        s.tap("backbone", y);
        if let Some(net) = &self.ifcnet {
            y = net.forward(s, y)?;
        }
        if let Some(cam) = &self.cam {
            y = cam.forward(s, y)?;
            s.tap("cam", y);
        }
        let y = s.graph.global_avg_pool(y)?;
        let y = self.head.fc1.forward(s, y)?;
        let y = self.head.dropout.forward(s, y)?;
        let y = self.head.fc2.forward(s, y)?;
        s.tap("embedding", y);
        let logits = self.head.out.linear(s, y)?;
        let probs = self.head.out.activation.apply(s, logits)?;
        Ok(Output { logits, probs })
    }

    /// Training loss: binary cross-entropy on the attack probability for the
    /// PAD task, softmax cross-entropy for lens classification.
    pub fn loss(&self, s: &mut Session<'_, T>, out: &Output, labels: &[usize]) -> Result<Var> {
        match self.config.task {
            Task::Pad => {
                let y: Vec<T> = labels
                    .iter()
                    .map(|&l| match l {
                        0 => Ok(T::zero()),
                        1 => Ok(T::one()),
                        _ => Err(Error::InvalidArgument(format!("PAD label {l} is not 0 or 1"))),
                    })
                    .collect::<Result<_>>()?;
                bce_loss(s, out.probs, &y)
            }
            Task::Lens { .. } => cross_entropy_loss(s, out.logits, labels),
        }
    }

    /// Output probabilities for a batch, without recording gradients.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = self.session(0)?;
        let x = s.input(images.clone());
        let out = self.forward(&mut s, x)?;
        Ok(s.value(out.probs).clone())
    }

    /// Trainable scalars, counted from the parameter store.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(&mut self, path: &Path, mode: &LoadMode) -> Result<LoadReport> {
        Checkpoint::load(path)?.load_into(&mut self.store, mode)
    }

    /// Writes the activations of `stages` for one image, one file per stage
    /// named `<stage>.dfca`, with the batch axis dropped.
    pub fn dump_feature_maps(&self, image: &Tensor<T>, stages: &[String], dir: &Path) -> Result<Vec<PathBuf>> {
        for st in stages {
            if !is_stage_name(st) {
                return Err(Error::InvalidArgument(format!(
                    "unknown stage {st}; expected backbone, fcblock<i>, cam or embedding"
                )));
            }
        }
        if stages.is_empty() {
            return Ok(Vec::new());
        }
        let image = match image.rank() {
            3 => image.clone().reshaped(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
            4 if image.shape()[0] == 1 => image.clone(),
            _ => {
                return Err(Error::invalid_shape(
                    "dump_feature_maps",
                    format!("expected one H×W×3 image, got {:?}", image.shape()),
                ))
            }
        };
        let mut s = self.session(0)?.without_grads();
        let x = s.input(image);
        self.forward(&mut s, x)?;
        fs::create_dir_all(dir)?;
        let mut written = Vec::with_capacity(stages.len());
        for st in stages {
            let v = s
                .taps()
                .iter()
                .find(|(n, _)| n == st)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::InvalidArgument(format!("stage {st} is not present in this model")))?;
            let t = s.value(v);
            let t = t.clone().reshaped(&t.shape()[1..])?;
            let mut ck = Checkpoint::default();
            ck.push(st.as_str(), &t);
            let path = dir.join(format!("{st}.dfca"));
            ck.save(&path)?;
            written.push(path);
        }
        Ok(written)
    }
}
