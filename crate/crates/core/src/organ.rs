use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Abdominal organs covered by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Organ {
    Liver,
    Pancreas,
    Kidney,
}

impl Organ {
    pub const ALL: [Organ; 3] = [Organ::Liver, Organ::Pancreas, Organ::Kidney];

    pub fn as_str(self) -> &'static str {
        match self {
            Organ::Liver => "liver",
            Organ::Pancreas => "pancreas",
            Organ::Kidney => "kidney",
        }
    }

    /// Typical contrast-enhanced parenchyma attenuation, in HU.
    pub fn parenchyma_hu(self) -> f64 {
        match self {
            Organ::Liver => 60.0,
            Organ::Pancreas => 45.0,
            Organ::Kidney => 90.0,
        }
    }
}

impl fmt::Display for Organ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Organ {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "liver" => Ok(Organ::Liver),
            "pancreas" => Ok(Organ::Pancreas),
            "kidney" => Ok(Organ::Kidney),
            other => Err(Error::Invalid(format!("unknown organ `{other}`"))),
        }
    }
}
