//! Synthetic run logs drawn from a known loss law.
//!
//! Every grid cell is priced with the cost model, assigned the token count
//! that exhausts its budget, and given the truth formula's loss times
//! `exp(ε)`, `ε ~ N(0, σ²)`. Noise for cell `i` comes from a ChaCha8 stream
//! selected by `i`, so results do not depend on generation order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costmodel::{flop_cost, param_counts, tokens_for_budget, Budget, FineTuneMethod, MethodClass, ModelArch, Registry};
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::ingest::{DataMeasure, Provenance, RunRecord, RunSet, SCHEMA_VERSION};
use crate::scalinglaw::FittedParams;

pub const RNG_NAME: &str = "chacha8";

/// Default budget grid, six levels spaced 4x apart.
pub const DEFAULT_BUDGETS: [f64; 6] = [1.5e15, 6e15, 2.4e16, 9.6e16, 3.8e17, 1.5e18];
pub const DEFAULT_LORA_RANKS: [usize; 5] = [8, 32, 128, 512, 2048];

/// One method family to sweep in every (budget, model) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodSweep {
    Full,
    Bias,
    Lora {
        ranks: Vec<usize>,
    },
    /// `frozen_fractions` defaults to sixths of the blocks when the depth is
    /// divisible by six, otherwise eighths (or every block count as a last resort).
    Freeze {
        #[serde(default)]
        frozen_fractions: Option<Vec<f64>>,
    },
}

impl MethodSweep {
    pub fn lora_default() -> Self {
        MethodSweep::Lora {
            ranks: DEFAULT_LORA_RANKS.to_vec(),
        }
    }

    fn expand(&self, arch: &ModelArch) -> Vec<FineTuneMethod> {
        match self {
            MethodSweep::Full => vec![FineTuneMethod::FullFineTune],
            MethodSweep::Bias => vec![FineTuneMethod::BiasOnly],
            MethodSweep::Lora { ranks } => ranks.iter().map(|&r| FineTuneMethod::lora(r)).collect(),
            MethodSweep::Freeze { frozen_fractions } => {
                let l = arch.n_layers;
                let mut ks: Vec<usize> = match frozen_fractions {
                    Some(fr) => fr.iter().map(|f| (f * l as f64).round() as usize).filter(|&k| k < l).collect(),
                    None => {
                        let parts = if l.is_multiple_of(6) {
                            6
                        } else if l.is_multiple_of(8) {
                            8
                        } else {
                            l
                        };
                        (0..parts).map(|i| i * l / parts).collect()
                    }
                };
                ks.dedup();
                ks.into_iter().map(FineTuneMethod::freeze).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGrid {
    pub budgets: Vec<f64>,
    /// Registry names.
    pub models: Vec<String>,
    pub methods: Vec<MethodSweep>,
}

impl Default for SynthGrid {
    fn default() -> Self {
        SynthGrid {
            budgets: DEFAULT_BUDGETS.to_vec(),
            models: crate::costmodel::PYTHIA_SUITE.iter().map(|s| s.to_string()).collect(),
            methods: vec![
                MethodSweep::Full,
                MethodSweep::Freeze { frozen_fractions: None },
                MethodSweep::lora_default(),
                MethodSweep::Bias,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub truth: FittedParams,
    /// Per-method replacements for `truth`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub method_truth: BTreeMap<MethodClass, FittedParams>,
    pub grid: SynthGrid,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// The law generating runs of `class`.
    pub fn truth_for(&self, class: MethodClass) -> &FittedParams {
        self.method_truth.get(&class).unwrap_or(&self.truth)
    }

    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        for t in self.method_truth.values() {
            t.validate()?;
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::validation("noise_sigma", format!("must be non-negative, got {}", self.noise_sigma)));
        }
        let g = &self.grid;
        if g.budgets.is_empty() || g.models.is_empty() || g.methods.is_empty() {
            return Err(Error::validation("grid", "budgets, models and methods must all be non-empty"));
        }
        for &b in &g.budgets {
            Budget::new(b)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub runs: RunSet,
    /// Cells that were skipped, with the reason.
    pub warnings: Vec<String>,
}

/// Standard normal draw by the Box–Muller transform.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn cell_noise(seed: u64, cell: u64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell);
    sigma * standard_normal(&mut rng)
}

fn method_hyper(method: &FineTuneMethod, arch: &ModelArch) -> Option<f64> {
    match method {
        FineTuneMethod::Lora { rank, .. } => Some(*rank as f64),
        FineTuneMethod::BlockFreeze { frozen_blocks } => {
            Some((arch.n_layers - frozen_blocks) as f64 / arch.n_layers as f64)
        }
        _ => None,
    }
}

pub fn generate(spec: &SynthSpec, registry: &Registry) -> Result<SynthOutput> {
    spec.validate()?;
    let archs: Vec<&ModelArch> = spec
        .grid
        .models
        .iter()
        .map(|m| registry.require(m))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut cell: u64 = 0;
    for &budget in &spec.grid.budgets {
        let budget_v = Budget::new(budget)?;
        for arch in &archs {
            for sweep in &spec.grid.methods {
                for method in sweep.expand(arch) {
                    let index = cell;
                    cell += 1;
                    let counts = param_counts(arch, &method)?;
                    let tokens = tokens_for_budget(&counts, budget_v)?;
                    let n = counts.n_total as f64;
                    let law = spec.method_truth.get(&method.class()).unwrap_or(&spec.truth);
                    let truth = match law.predict(counts.trainable_fraction, n, tokens) {
                        Ok(l) if l > 0.0 && l.is_finite() => l,
                        Ok(l) => {
                            warnings.push(format!(
                                "skipped {} {method} at {budget:e}: truth loss {l} is not positive",
                                arch.name
                            ));
                            continue;
                        }
                        Err(e) => {
                            warnings.push(format!("skipped {} {method} at {budget:e}: {e}", arch.name));
                            continue;
                        }
                    };
                    let loss = truth * cell_noise(spec.seed, index, spec.noise_sigma).exp();
                    records.push(RunRecord {
                        schema_version: SCHEMA_VERSION,
                        model_name: arch.name.clone(),
                        n_total: counts.n_total,
                        n_nonembed: counts.n_nonembed,
                        method_hyper: method_hyper(&method, arch),
                        method,
                        trainable_fraction: counts.trainable_fraction,
                        tokens,
                        steps: None,
                        batch_size: None,
                        context_len: None,
                        flop: flop_cost(&counts, tokens)?,
                        final_loss: loss,
                        mteb_score: None,
                        data_measure: DataMeasure::Tokens,
                        replicate: None,
                    });
                }
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyRunSet(format!("synthetic grid produced no valid cells: {}", warnings.join("; "))));
    }
    let provenance = Provenance {
        source_digest: json_digest(spec),
        schema_version: SCHEMA_VERSION,
        origin: format!("synth rng={RNG_NAME} seed={} sigma={}", spec.seed, spec.noise_sigma),
    };
    Ok(SynthOutput {
        runs: RunSet::new(records, provenance)?,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalinglaw::ChinchillaParams;

    fn truth() -> FittedParams {
        FittedParams::Chinchilla(ChinchillaParams {
            irreducible_loss: 0.5,
            a: 400.0,
            b: 1000.0,
            alpha: 0.34,
            beta: 0.28,
        })
    }

    #[test]
    fn freeze_grid_follows_depth() {
        let reg = Registry::bundled();
        let six = MethodSweep::Freeze { frozen_fractions: None }.expand(reg.require("pythia-160m").unwrap());
        assert_eq!(six.len(), 6);
        assert_eq!(six[1], FineTuneMethod::freeze(2));
        let eight = MethodSweep::Freeze { frozen_fractions: None }.expand(reg.require("pythia-1b").unwrap());
        assert_eq!(eight.len(), 8);
        assert_eq!(eight[7], FineTuneMethod::freeze(14));
    }

    #[test]
    fn noiseless_matches_truth() {
        let spec = SynthSpec {
            truth: truth(),
            method_truth: BTreeMap::new(),
            grid: SynthGrid::default(),
            noise_sigma: 0.0,
            seed: 1,
        };
        let out = generate(&spec, &Registry::bundled()).unwrap();
        assert!(out.warnings.is_empty());
        for r in out.runs.iter() {
            let want = truth().predict_run(r).unwrap();
            assert_eq!(r.final_loss, want);
        }
    }

    #[test]
    fn same_seed_same_runs() {
        let spec = SynthSpec {
            truth: truth(),
            method_truth: BTreeMap::new(),
            grid: SynthGrid::default(),
            noise_sigma: 0.05,
            seed: 9,
        };
        let reg = Registry::bundled();
        let a = generate(&spec, &reg).unwrap().runs.to_jsonl();
        let b = generate(&spec, &reg).unwrap().runs.to_jsonl();
        assert_eq!(a, b);
        let c = generate(&SynthSpec { seed: 10, ..spec }, &reg).unwrap().runs.to_jsonl();
        assert_ne!(a, c);
    }

    #[test]
    fn normal_draws_have_unit_variance() {
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|i| cell_noise(3, i, 1.0)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }
}
