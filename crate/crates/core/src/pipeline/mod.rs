//! Preprocessing, synthetic phantoms, dataset splitting and file formats.

pub mod io;
pub mod phantom;
pub mod preprocess;
pub mod split;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::DType;
use crate::tensor::{Tensor, VolumeMeta};

/// Patient cohort.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "LVO")]
    Lvo,
    #[serde(rename = "Non-LVO")]
    NonLvo,
    #[serde(rename = "WIS")]
    Wis,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Lvo, Group::NonLvo, Group::Wis];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Lvo => "LVO",
            Group::NonLvo => "Non-LVO",
            Group::Wis => "WIS",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown group {s:?}; expected LVO, Non-LVO or WIS")))
    }
}

/// A 4D perfusion study: stored detector values `(X, Y, Z, T)` and acquisition metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct CtpStudy {
    pub raw: Tensor<f64>,
    pub meta: VolumeMeta,
    pub patient_id: String,
    pub group: Group,
    /// Element type used when the study is written to disk.
    pub storage: DType,
}

impl CtpStudy {
    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        if self.raw.rank() != 4 {
            return Err(Error::shape(format!(
                "study must be (X, Y, Z, T), got {:?}",
                self.raw.dims()
            )));
        }
        if self.raw.dims()[3] != self.meta.time_schedule.len() {
            return Err(Error::shape(format!(
                "{} frames but {} acquisition instants",
                self.raw.dims()[3],
                self.meta.time_schedule.len()
            )));
        }
        if self.storage == DType::U8 {
            return Err(Error::config("studies are stored as f32 or f64"));
        }
        Ok(())
    }
}
