use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::ModelArch;
use crate::error::{Error, Result};

const BUNDLED: &str = include_str!("../../data/registry.json");

/// Names of the eight Pythia checkpoints used as the default model suite.
pub const PYTHIA_SUITE: [&str; 8] = [
    "pythia-14m",
    "pythia-31m",
    "pythia-70m",
    "pythia-160m",
    "pythia-410m",
    "pythia-1b",
    "pythia-1.4b",
    "pythia-2.8b",
];

/// A named collection of architecture descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    #[serde(default = "one")]
    pub schema_version: u32,
    pub architectures: Vec<ModelArch>,
}

fn one() -> u32 {
    1
}

impl Registry {
    pub fn new(architectures: Vec<ModelArch>) -> Result<Self> {
        for a in &architectures {
            a.validate()?;
        }
        Ok(Registry {
            schema_version: 1,
            architectures,
        })
    }

    /// The shipped registry: the Pythia suite plus a Gemma-2B descriptor.
    pub fn bundled() -> Self {
        Self::from_json_str(BUNDLED).expect("bundled registry is valid")
    }

    /// Just the Pythia suite, in increasing size.
    pub fn pythia() -> Self {
        let all = Self::bundled();
        let archs = PYTHIA_SUITE
            .iter()
            .map(|n| all.get(n).cloned().expect("pythia descriptor bundled"))
            .collect();
        Registry {
            schema_version: 1,
            architectures: archs,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let reg: Registry = serde_json::from_str(s)?;
        Registry::new(reg.architectures)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Case-insensitive lookup by name.
    pub fn get(&self, name: &str) -> Option<&ModelArch> {
        self.architectures
            .iter()
            .find(|a| a.name.eq_ignore_ascii_case(name.trim()))
    }

    pub fn require(&self, name: &str) -> Result<&ModelArch> {
        self.get(name).ok_or_else(|| Error::UnknownArch(name.to_string()))
    }

    pub fn is_empty(&self) -> bool {
        self.architectures.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ModelArch> {
        self.architectures.iter()
    }
}
