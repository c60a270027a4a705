//! Parameter storage, layers with training state, and the optimizer.

pub mod layers;
pub mod optim;
pub mod params;
pub mod session;

pub use layers::{bce_loss, cross_entropy_loss, Activation, BatchNorm2d, Conv2d, Dense, Dropout};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamKind, ParamStore};
pub use session::{apply_stat_updates, Gradients, Mode, Session};
