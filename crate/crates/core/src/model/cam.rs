use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Session;
use crate::tensor::{Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CamConfig {
    /// Weight of the refined features added back onto the input.
    pub beta: f64,
}

impl Default for CamConfig {
    fn default() -> Self {
        CamConfig { beta: 1.0 }
    }
}

impl CamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!("cam beta {} outside [0, 1]", self.beta)));
        }
        Ok(())
    }
}

/// Channel attention. Has no trainable parameters.
///
/// With `Q` the `C×HW` view of the input, `U = softmax_rows(Q·Qᵀ)` and the
/// output is `β·(U·Q) + X` reshaped back to `H×W×C`.
#[derive(Debug, Clone, Copy)]
pub struct Cam {
    pub config: CamConfig,
}

impl Cam {
    pub fn new(config: CamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Cam { config })
    }

    /// The attention matrix `U` as an `N×C×C` variable.
    pub fn attention<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<(Var, Var)> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid_shape("cam", format!("expected N×H×W×C, got {shape:?}")));
        }
        let (n, hw, c) = (shape[0], shape[1] * shape[2], shape[3]);
        let flat = s.graph.reshape(x, &[n, hw, c])?;
        let q = s.graph.transpose(flat)?;
        let gram = s.graph.matmul(q, flat)?;
        Ok((s.graph.softmax_rows(gram)?, q))
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if self.config.beta == 0.0 && shape.len() == 4 {
            return Ok(x);
        }
        let (u, q) = self.attention(s, x)?;
        let refined = s.graph.matmul(u, q)?;
        let refined = s.graph.transpose(refined)?;
        let refined = s.graph.reshape(refined, &shape)?;
        let refined = if self.config.beta == 1.0 {
            refined
        } else {
            s.graph.scale(refined, T::from_f64_lossy(self.config.beta))?
        };
        s.graph.add(refined, x)
    }
}
