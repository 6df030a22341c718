use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Imaging modality tag. `Shared` is the pseudo-modality every input is
/// routed to under the mixed strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Ct,
    Mr,
    Pet,
    Shared,
}

impl Modality {
    pub const IMAGING: [Modality; 3] = [Modality::Ct, Modality::Mr, Modality::Pet];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ct => "CT",
            Modality::Mr => "MR",
            Modality::Pet => "PET",
            Modality::Shared => "SHARED",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_uppercase().as_str() {
            "CT" => Ok(Modality::Ct),
            "MR" | "MRI" => Ok(Modality::Mr),
            "PET" => Ok(Modality::Pet),
            "SHARED" => Ok(Modality::Shared),
            _ => Err(Error::UnknownModality(s.to_string())),
        }
    }
}
