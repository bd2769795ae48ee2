//! Parameter accounting and FLOP cost of fine-tuning methods.
//!
//! Costs follow the parameter-count convention `C = 2·N_F·D + 2·N_B·D + 2·N_U·D`,
//! where the three counts are non-token-embedding parameters used in the
//! forward pass, back-propagated through, and updated. Attention FLOPs along
//! the sequence axis are ignored.

mod arch;
mod method;
mod registry;

use serde::{Deserialize, Serialize};

pub use arch::{ModelArch, NormKind, TensorEntry, TensorKind, TensorRole};
pub use method::{FineTuneMethod, LoraTargets, MethodClass};
pub use registry::{Registry, PYTHIA_SUITE};

use crate::error::{Error, Result};

/// The `(N_F, N_B, N_U)` triple plus trainable fraction for one
/// (architecture, method) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub n_total: u64,
    pub n_nonembed: u64,
    pub n_forward: u64,
    pub n_backward: u64,
    pub n_updated: u64,
    pub trainable_fraction: f64,
}

/// Itemised tensor list of an architecture together with its totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInventory {
    pub entries: Vec<TensorEntry>,
    pub n_total: u64,
    pub n_nonembed: u64,
}

impl ParamInventory {
    /// Counts under full fine-tuning: every non-embedding parameter is
    /// used, back-propagated through and updated.
    pub fn full_finetune_counts(&self) -> ParamCounts {
        ParamCounts {
            n_total: self.n_total,
            n_nonembed: self.n_nonembed,
            n_forward: self.n_nonembed,
            n_backward: self.n_nonembed,
            n_updated: self.n_nonembed,
            trainable_fraction: 1.0,
        }
    }

    pub fn bias_params(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.kind == TensorKind::Bias && !e.is_embedding())
            .map(TensorEntry::count)
            .sum()
    }
}

/// Enumerates the parameter tensors of `arch`.
pub fn count_params(arch: &ModelArch) -> Result<ParamInventory> {
    arch.validate()?;
    let entries = arch::enumerate_tensors(arch);
    let n_total = entries.iter().map(TensorEntry::count).sum();
    let n_nonembed = entries
        .iter()
        .filter(|e| !e.is_embedding())
        .map(TensorEntry::count)
        .sum();
    Ok(ParamInventory {
        entries,
        n_total,
        n_nonembed,
    })
}

/// Number of adapter parameters LoRA adds: `rank·(d_in + d_out)` summed over
/// every targeted dense layer.
pub fn lora_adapter_params(inv: &ParamInventory, rank: usize, targets: &LoraTargets) -> u64 {
    inv.entries
        .iter()
        .filter(|e| targets.contains(e.role))
        .filter_map(TensorEntry::dense_dims)
        .map(|(d_in, d_out)| rank as u64 * (d_in + d_out) as u64)
        .sum()
}

pub fn param_counts(arch: &ModelArch, method: &FineTuneMethod) -> Result<ParamCounts> {
    let inv = count_params(arch)?;
    counts_from_inventory(arch, &inv, method)
}

pub(crate) fn counts_from_inventory(
    arch: &ModelArch,
    inv: &ParamInventory,
    method: &FineTuneMethod,
) -> Result<ParamCounts> {
    let nonembed = inv.n_nonembed;
    let full = inv.full_finetune_counts();
    let counts = match method {
        FineTuneMethod::FullFineTune => full,
        FineTuneMethod::BlockFreeze { frozen_blocks } => {
            let k = *frozen_blocks;
            if k >= arch.n_layers {
                return Err(Error::InvalidMethod(format!(
                    "cannot freeze {k} blocks of a {}-block model (need k < n_layers)",
                    arch.n_layers
                )));
            }
            // Trainable: blocks k.. plus the final norm. Embeddings stay frozen.
            let active: u64 = inv
                .entries
                .iter()
                .filter(|e| match e.block {
                    Some(b) => b >= k,
                    None => e.role == TensorRole::FinalNorm,
                })
                .map(TensorEntry::count)
                .sum();
            ParamCounts {
                n_backward: active,
                n_updated: active,
                trainable_fraction: active as f64 / nonembed as f64,
                ..full
            }
        }
        FineTuneMethod::Lora { rank, targets } => {
            if *rank == 0 {
                return Err(Error::InvalidMethod("LoRA rank must be at least 1".into()));
            }
            let adapters = lora_adapter_params(inv, *rank, targets);
            if adapters == 0 {
                return Err(Error::InvalidMethod(format!(
                    "LoRA targets match no dense layer of `{}`",
                    arch.name
                )));
            }
            ParamCounts {
                n_forward: nonembed + adapters,
                n_backward: nonembed + adapters,
                n_updated: adapters,
                // High ranks on narrow models can exceed the backbone size.
                trainable_fraction: (adapters as f64 / nonembed as f64).min(1.0),
                ..full
            }
        }
        FineTuneMethod::BiasOnly => {
            let biases = inv.bias_params();
            ParamCounts {
                n_updated: biases,
                trainable_fraction: biases as f64 / nonembed as f64,
                ..full
            }
        }
    };
    Ok(counts)
}

/// A strictly positive compute budget in FLOP.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Budget(f64);

impl Budget {
    pub fn new(flop: f64) -> Result<Self> {
        if flop.is_finite() && flop > 0.0 {
            Ok(Budget(flop))
        } else {
            Err(Error::Domain(format!("budget must be a positive finite FLOP count, got {flop}")))
        }
    }

    pub fn flop(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Budget {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Budget::new(v)
    }
}

impl From<Budget> for f64 {
    fn from(b: Budget) -> f64 {
        b.0
    }
}

fn flop_per_token(counts: &ParamCounts) -> f64 {
    2.0 * counts.n_forward as f64 + 2.0 * counts.n_backward as f64 + 2.0 * counts.n_updated as f64
}

/// `C = 2·N_F·D + 2·N_B·D + 2·N_U·D`.
pub fn flop_cost(counts: &ParamCounts, tokens: f64) -> Result<f64> {
    if !(tokens.is_finite() && tokens >= 0.0) {
        return Err(Error::validation("tokens", format!("must be finite and non-negative, got {tokens}")));
    }
    Ok(flop_per_token(counts) * tokens)
}

/// Data quantity affordable with `budget`: the inverse of [`flop_cost`].
pub fn tokens_for_budget(counts: &ParamCounts, budget: Budget) -> Result<f64> {
    let per_token = flop_per_token(counts);
    if per_token <= 0.0 {
        return Err(Error::Domain("parameter counts give zero cost per token".into()));
    }
    Ok(budget.flop() / per_token)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gpt_small() -> ModelArch {
        ModelArch::new("gpt-small", 12, 768, 3072, 12, 50304).tied(true)
    }

    #[test]
    fn unit_architecture_matches_hand_count() {
        let arch = ModelArch::new("unit", 1, 1, 1, 1, 1).tied(true);
        let inv = count_params(&arch).unwrap();
        // token emb 1; block: ln 2, q/k/v/o 4x(1+1), ln 2, up 2, down 2; final ln 2
        assert_eq!(inv.n_total, 1 + 2 + 8 + 2 + 2 + 2 + 2);
        assert_eq!(inv.n_nonembed, inv.n_total - 1);
        assert!(inv.entries.iter().all(|e| e.count() == 1));
    }

    #[test]
    fn twelve_layer_768_nonembed() {
        let inv = count_params(&gpt_small()).unwrap();
        // 12·(12·768² + 13·768) + 2·768
        assert_eq!(inv.n_nonembed, 85_056_000);
        assert_eq!(inv.n_total, 85_056_000 + 50304 * 768);
    }

    #[test]
    fn invalid_arch_names_the_field() {
        let mut arch = gpt_small();
        arch.n_heads = 7;
        let err = count_params(&arch).unwrap_err().to_string();
        assert!(err.contains("n_heads"), "{err}");
        arch.n_heads = 12;
        arch.d_ff = 0;
        let err = count_params(&arch).unwrap_err().to_string();
        assert!(err.contains("d_ff"), "{err}");
    }

    #[test]
    fn full_finetune_counts_coincide() {
        let c = param_counts(&gpt_small(), &FineTuneMethod::FullFineTune).unwrap();
        assert_eq!(c.n_forward, c.n_backward);
        assert_eq!(c.n_backward, c.n_updated);
        assert_eq!(c.trainable_fraction, 1.0);
        let flop = flop_cost(&c, 1e9).unwrap();
        assert_eq!(flop, 6.0 * c.n_forward as f64 * 1e9);
    }

    #[test]
    fn block_freeze_counts() {
        let arch = gpt_small();
        let c = param_counts(&arch, &FineTuneMethod::freeze(6)).unwrap();
        assert_eq!(c.n_backward, c.n_updated);
        assert!(c.n_backward < c.n_forward);
        let per_block = 12 * 768 * 768 + 13 * 768;
        assert_eq!(c.n_updated, 6 * per_block + 2 * 768);
        let d = 3.0e8;
        let flop = flop_cost(&c, d).unwrap();
        let expected = 2.0 * c.n_forward as f64 * d + 4.0 * c.n_backward as f64 * d;
        assert_eq!(flop, expected);
    }

    #[test]
    fn block_freeze_rejects_all_blocks() {
        let err = param_counts(&gpt_small(), &FineTuneMethod::freeze(12)).unwrap_err();
        assert!(matches!(err, Error::InvalidMethod(_)));
    }

    #[test]
    fn lora_on_single_dense_layer() {
        let arch = ModelArch::new("one", 1, 4, 4, 1, 8);
        let inv = count_params(&arch).unwrap();
        let targets = LoraTargets::new([TensorRole::Query]).unwrap();
        assert_eq!(lora_adapter_params(&inv, 2, &targets), 16);
        let c = param_counts(&arch, &FineTuneMethod::Lora { rank: 2, targets }).unwrap();
        assert_eq!(c.n_updated, 16);
        assert_eq!(c.n_forward, inv.n_nonembed + 16);
        assert_eq!(c.n_backward, inv.n_nonembed + 16);
    }

    #[test]
    fn lora_targets_must_exist() {
        let mut arch = gpt_small();
        arch.fused_qkv = true;
        let targets = LoraTargets::new([TensorRole::Query]).unwrap();
        assert!(param_counts(&arch, &FineTuneMethod::Lora { rank: 4, targets }).is_err());
    }

    #[test]
    fn bias_only_updates_biases() {
        let arch = ModelArch::new("unit", 1, 1, 1, 1, 1);
        let c = param_counts(&arch, &FineTuneMethod::BiasOnly).unwrap();
        // q k v o up down biases + three layer-norm biases
        assert_eq!(c.n_updated, 9);
        assert_eq!(c.n_backward, c.n_forward);
    }

    #[test]
    fn zero_tokens_cost_nothing() {
        let c = param_counts(&gpt_small(), &FineTuneMethod::lora(8)).unwrap();
        assert_eq!(flop_cost(&c, 0.0).unwrap(), 0.0);
        assert!(flop_cost(&c, -1.0).is_err());
        assert!(flop_cost(&c, f64::NAN).is_err());
    }

    #[test]
    fn tokens_for_budget_inverts_cost() {
        let c = param_counts(&gpt_small(), &FineTuneMethod::FullFineTune).unwrap();
        let unit = Budget::new(6.0 * c.n_forward as f64).unwrap();
        assert_eq!(tokens_for_budget(&c, unit).unwrap(), 1.0);
        assert!(Budget::new(0.0).is_err());
        assert!(Budget::new(-3.0).is_err());
    }

    #[test]
    fn zero_cost_counts_cannot_be_inverted() {
        let c = ParamCounts {
            n_total: 0,
            n_nonembed: 0,
            n_forward: 0,
            n_backward: 0,
            n_updated: 0,
            trainable_fraction: 0.0,
        };
        assert!(tokens_for_budget(&c, Budget::new(1.0).unwrap()).is_err());
    }
}
