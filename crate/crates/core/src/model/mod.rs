//! The detection network: feature-calibration convolutions, the calibration
//! pyramid, channel attention, the mini-dense backbone, the output head, and
//! checkpoint storage.

pub mod backbone;
pub mod cam;
pub mod checkpoint;
pub mod dfcanet;
pub mod fcconv;
pub mod ifcnet;

pub use backbone::{BackboneConfig, BackboneVariant, MiniDense};
pub use cam::{Cam, CamConfig};
pub use checkpoint::{Checkpoint, LoadMode, LoadReport};
pub use dfcanet::{is_stage_name, Ablation, DfcaNet, HeadConfig, ModelConfig, Output, Task};
pub use fcconv::{FcBlock, FcConv, FcConvConfig};
pub use ifcnet::{IfcNet, IfcNetConfig, Stage};
