use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::arch::TensorRole;
use crate::error::{Error, Result};

/// Dense-layer roles a LoRA adapter attaches to.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LoraTargets(BTreeSet<TensorRole>);

impl LoraTargets {
    /// Every dense layer in every block.
    pub fn all() -> Self {
        LoraTargets(TensorRole::DENSE.into_iter().collect())
    }

    pub fn new(roles: impl IntoIterator<Item = TensorRole>) -> Result<Self> {
        let set: BTreeSet<_> = roles.into_iter().collect();
        if set.is_empty() {
            return Err(Error::InvalidMethod("LoRA targets must be non-empty".into()));
        }
        if let Some(r) = set.iter().find(|r| !r.is_dense()) {
            return Err(Error::InvalidMethod(format!(
                "`{}` is not a dense layer and cannot carry a LoRA adapter",
                r.as_str()
            )));
        }
        Ok(LoraTargets(set))
    }

    pub fn contains(&self, role: TensorRole) -> bool {
        self.0.contains(&role)
    }

    pub fn is_all(&self) -> bool {
        *self == Self::all()
    }

    pub fn iter(&self) -> impl Iterator<Item = TensorRole> + '_ {
        self.0.iter().copied()
    }
}

impl Default for LoraTargets {
    fn default() -> Self {
        Self::all()
    }
}

/// A fine-tuning method with its hyperparameters.
///
/// Text encoding: `full`, `freeze:<k>`, `lora:<rank>` (optionally
/// `lora:<rank>:<role>+<role>` for a restricted target set) and `bias`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FineTuneMethod {
    FullFineTune,
    BlockFreeze { frozen_blocks: usize },
    Lora { rank: usize, targets: LoraTargets },
    BiasOnly,
}

impl FineTuneMethod {
    pub fn lora(rank: usize) -> Self {
        FineTuneMethod::Lora {
            rank,
            targets: LoraTargets::all(),
        }
    }

    pub fn freeze(frozen_blocks: usize) -> Self {
        FineTuneMethod::BlockFreeze { frozen_blocks }
    }

    pub fn class(&self) -> MethodClass {
        match self {
            FineTuneMethod::FullFineTune => MethodClass::Full,
            FineTuneMethod::BlockFreeze { .. } => MethodClass::Freeze,
            FineTuneMethod::Lora { .. } => MethodClass::Lora,
            FineTuneMethod::BiasOnly => MethodClass::Bias,
        }
    }
}

impl fmt::Display for FineTuneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FineTuneMethod::FullFineTune => f.write_str("full"),
            FineTuneMethod::BlockFreeze { frozen_blocks } => write!(f, "freeze:{frozen_blocks}"),
            FineTuneMethod::Lora { rank, targets } if targets.is_all() => write!(f, "lora:{rank}"),
            FineTuneMethod::Lora { rank, targets } => {
                let roles: Vec<_> = targets.iter().map(TensorRole::as_str).collect();
                write!(f, "lora:{rank}:{}", roles.join("+"))
            }
            FineTuneMethod::BiasOnly => f.write_str("bias"),
        }
    }
}

impl FromStr for FineTuneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let mut parts = s.splitn(3, ':');
        let head = parts.next().unwrap_or_default().to_ascii_lowercase();
        let arg = parts.next();
        let extra = parts.next();
        let bad = || Error::InvalidMethod(format!("cannot parse method `{s}`; expected full | freeze:<k> | lora:<rank> | bias"));
        match (head.as_str(), arg, extra) {
            ("full", None, None) => Ok(FineTuneMethod::FullFineTune),
            ("bias", None, None) => Ok(FineTuneMethod::BiasOnly),
            ("freeze", Some(k), None) => {
                let frozen_blocks = k.trim().parse().map_err(|_| bad())?;
                Ok(FineTuneMethod::BlockFreeze { frozen_blocks })
            }
            ("lora", Some(r), targets) => {
                let rank: usize = r.trim().parse().map_err(|_| bad())?;
                if rank == 0 {
                    return Err(Error::InvalidMethod("LoRA rank must be at least 1".into()));
                }
                let targets = match targets {
                    None => LoraTargets::all(),
                    Some(list) => LoraTargets::new(
                        list.split('+')
                            .map(|t| TensorRole::parse(t.trim()).ok_or_else(bad))
                            .collect::<Result<Vec<_>>>()?,
                    )?,
                };
                Ok(FineTuneMethod::Lora { rank, targets })
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for FineTuneMethod {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FineTuneMethod {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A fine-tuning method without its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodClass {
    Full,
    Freeze,
    Lora,
    Bias,
}

impl MethodClass {
    pub const ALL: [MethodClass; 4] = [
        MethodClass::Full,
        MethodClass::Freeze,
        MethodClass::Lora,
        MethodClass::Bias,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodClass::Full => "full",
            MethodClass::Freeze => "freeze",
            MethodClass::Lora => "lora",
            MethodClass::Bias => "bias",
        }
    }
}

impl fmt::Display for MethodClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let head = s.trim().split(':').next().unwrap_or_default();
        MethodClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(head))
            .ok_or_else(|| Error::InvalidMethod(format!("unknown method class `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        for s in ["full", "freeze:3", "lora:128", "bias", "lora:8:query+value"] {
            let m: FineTuneMethod = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
    }

    #[test]
    fn rejects_malformed_methods() {
        for s in ["", "freeze", "lora", "lora:0", "lora:x", "full:1", "adapter:4", "lora:8:final_norm"] {
            assert!(s.parse::<FineTuneMethod>().is_err(), "{s}");
        }
    }

    #[test]
    fn class_parsing_ignores_hyperparameters() {
        assert_eq!("lora:32".parse::<MethodClass>().unwrap(), MethodClass::Lora);
        assert_eq!("Freeze".parse::<MethodClass>().unwrap(), MethodClass::Freeze);
    }
}
