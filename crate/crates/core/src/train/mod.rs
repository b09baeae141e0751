//! Three-stage training: full precision, quantization-aware, then
//! fine-tuning against the sense-amplifier readout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod tape;

/// Training step kind, in pipeline order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Fp,
    Qat,
    Adcless,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Fp, Stage::Qat, Stage::Adcless];

    /// Stage whose checkpoint initializes this one.
    pub fn upstream(self) -> Option<Stage> {
        match self {
            Stage::Fp => None,
            Stage::Qat => Some(Stage::Fp),
            Stage::Adcless => Some(Stage::Qat),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Fp => "fp",
            Stage::Qat => "qat",
            Stage::Adcless => "adcless",
        })
    }
}

impl FromStr for Stage {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "fp" => Ok(Stage::Fp),
            "qat" => Ok(Stage::Qat),
            "adcless" => Ok(Stage::Adcless),
            _ => Err(crate::error::invalid(format!("unknown stage `{s}` (fp, qat, adcless)"))),
        }
    }
}
