//! Pointwise activations shared by gates, radial maps and readouts.

use serde::{Deserialize, Serialize};

use crate::error::{MaceError, Result};
use crate::scalar::Scalar;

/// Root-mean-square of `silu(x)` under a standard normal input; dividing by
/// it keeps second moments near one through initialized layers.
pub const SILU_RMS: f64 = 0.5964692111227136;
/// Same for `tanh(x)`.
pub const TANH_RMS: f64 = 0.6279287303491067;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Act {
    Identity,
    Silu,
    Tanh,
}

impl Act {
    pub fn from_name(name: &str) -> Result<Act> {
        match name {
            "identity" | "id" => Ok(Act::Identity),
            "silu" => Ok(Act::Silu),
            "tanh" => Ok(Act::Tanh),
            other => Err(MaceError::config(format!("unknown activation '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Act::Identity => "identity",
            Act::Silu => "silu",
            Act::Tanh => "tanh",
        }
    }

    #[inline]
    pub fn eval<S: Scalar>(&self, x: S) -> S {
        match self {
            Act::Identity => x,
            Act::Silu => x / (S::one() + (-x).exp()),
            Act::Tanh => x.tanh(),
        }
    }

    /// Derivative at `x`.
    #[inline]
    pub fn grad<S: Scalar>(&self, x: S) -> S {
        match self {
            Act::Identity => S::one(),
            Act::Silu => {
                let sig = S::one() / (S::one() + (-x).exp());
                sig + x * sig * (S::one() - sig)
            }
            Act::Tanh => {
                let t = x.tanh();
                S::one() - t * t
            }
        }
    }

    /// RMS under a standard normal input, used for variance-preserving
    /// rescaling inside multilayer maps.
    pub fn normal_rms(&self) -> f64 {
        match self {
            Act::Identity => 1.0,
            Act::Silu => SILU_RMS,
            Act::Tanh => TANH_RMS,
        }
    }
}
