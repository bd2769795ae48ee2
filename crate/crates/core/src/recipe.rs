//! Budget-to-plan recipe: pick the fine-tuning method by a FLOP threshold,
//! the model size from observed optima or a size power law, and the token
//! count that spends the budget.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::costmodel::{param_counts, tokens_for_budget, flop_cost, Budget, FineTuneMethod, MethodClass, ModelArch, Registry};
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::ingest::RunSet;
use crate::isoflop::{
    build_profiles, crossover_ln_budget, frontier, optimal_size_fit, Frontier, PowerLawFit, ProfileOptions,
};

/// Budget (FLOP) up to which full fine-tuning is preferred over LoRA.
pub const DEFAULT_METHOD_THRESHOLD: f64 = 9.06e16;
pub const DEFAULT_LORA_RANK: usize = 128;
/// Relative tolerance for matching a budget to an observed level.
pub const OBSERVED_MATCH_TOLERANCE: f64 = 0.05;

/// A hyperparameter winner at one (model size, budget) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub size: f64,
    pub budget: f64,
    pub value: f64,
}

/// Looks up the entry nearest to (size, budget) in log space. The flag is
/// true when the nearest entry is not an exact (5%) match on both axes.
fn table_lookup(table: &[TableEntry], size: f64, budget: f64) -> Option<(f64, bool)> {
    let (ls, lb) = (size.ln(), budget.ln());
    let mut best: Option<(f64, &TableEntry)> = None;
    for e in table {
        let d = (e.size.ln() - ls).powi(2) + (e.budget.ln() - lb).powi(2);
        let closer = match best {
            None => true,
            Some((bd, be)) => d < bd || (d == bd && (e.size, e.budget, e.value) < (be.size, be.budget, be.value)),
        };
        if closer {
            best = Some((d, e));
        }
    }
    best.map(|(_, e)| {
        let exact = (e.size / size - 1.0).abs() <= OBSERVED_MATCH_TOLERANCE
            && (e.budget / budget - 1.0).abs() <= OBSERVED_MATCH_TOLERANCE;
        (e.value, !exact)
    })
}

/// Loss-minimising model seen at one budget level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedOptimum {
    pub budget: f64,
    pub model_name: String,
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerArtifacts {
    pub frontier: Frontier,
    /// Optimal model size against budget, per method.
    pub size_fits: BTreeMap<MethodClass, PowerLawFit>,
    #[serde(default)]
    pub observed_optima: BTreeMap<MethodClass, Vec<ObservedOptimum>>,
    /// Best LoRA rank per (size, budget).
    #[serde(default)]
    pub rank_table: Vec<TableEntry>,
    /// Best active-block fraction per (size, budget).
    #[serde(default)]
    pub freeze_table: Option<Vec<TableEntry>>,
    pub model_registry: Vec<ModelArch>,
    pub method_threshold: f64,
}

fn line_through(c1: f64, y1: f64, c2: f64, y2: f64) -> PowerLawFit {
    let slope = (y2.ln() - y1.ln()) / (c2.ln() - c1.ln());
    PowerLawFit::from_line(slope, y1.ln() - slope * c1.ln())
}

impl PlannerArtifacts {
    /// Built-in defaults: the 9.06e16 FLOP threshold, rounded
    /// loss-frontier lines, and illustrative size laws over the Pythia suite.
    pub fn defaults() -> Self {
        let frontier = Frontier::from_fits(
            [
                (MethodClass::Full, PowerLawFit::from_line(-0.21, 8.39)),
                (MethodClass::Lora, PowerLawFit::from_line(-0.22, 8.93)),
            ]
            .into_iter()
            .collect(),
        )
        .expect("non-empty");
        let full = line_through(1.5e15, 3.1e7, 1.5e18, 4.1e8);
        let size_fits = [
            (MethodClass::Full, full),
            (MethodClass::Freeze, full),
            (MethodClass::Lora, line_through(1e17, 4.1e8, 1.5e18, 1.4e9)),
        ]
        .into_iter()
        .collect();
        let registry = Registry::pythia();
        let mut freeze = Vec::new();
        for arch in registry.iter() {
            let size = crate::costmodel::count_params(arch).expect("bundled archs are valid").n_total as f64;
            let active = if size >= 1e9 { 0.5 } else { 1.0 };
            for &b in &crate::synth::DEFAULT_BUDGETS {
                freeze.push(TableEntry { size, budget: b, value: active });
            }
        }
        PlannerArtifacts {
            frontier,
            size_fits,
            observed_optima: BTreeMap::new(),
            rank_table: Vec::new(),
            freeze_table: Some(freeze),
            model_registry: registry.iter().cloned().collect(),
            method_threshold: DEFAULT_METHOD_THRESHOLD,
        }
    }

    /// Derives artifacts from run logs. Returns notes about parts that could
    /// not be fitted.
    pub fn from_runs(runs: &RunSet, registry: &Registry, opts: &ProfileOptions) -> Result<(Self, Vec<String>)> {
        let mut notes = Vec::new();
        let mut profiles = Vec::new();
        for class in runs.method_classes() {
            profiles.push(build_profiles(runs, class, opts)?);
        }
        let (frontier, fnotes) = frontier(&profiles)?;
        notes.extend(fnotes);

        let mut size_fits = BTreeMap::new();
        let mut observed_optima = BTreeMap::new();
        let mut rank_table = Vec::new();
        let mut freeze_table = None;
        for p in &profiles {
            match optimal_size_fit(p) {
                Ok(f) => {
                    size_fits.insert(p.method, f);
                }
                Err(e) => notes.push(format!("{}: {e}", p.method)),
            }
            observed_optima.insert(
                p.method,
                p.optimal_points()
                    .into_iter()
                    .map(|q| ObservedOptimum {
                        budget: q.budget,
                        model_name: q.model_name.clone(),
                        size: q.size,
                    })
                    .collect(),
            );
            let table: Vec<TableEntry> = p
                .points
                .iter()
                .filter_map(|q| q.best_hyper.map(|v| TableEntry { size: q.size, budget: q.budget, value: v }))
                .collect();
            match p.method {
                MethodClass::Lora => rank_table = table,
                MethodClass::Freeze if !table.is_empty() => freeze_table = Some(table),
                _ => {}
            }
        }

        let mut names: Vec<&str> = runs.iter().map(|r| r.model_name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        let model_registry: Vec<ModelArch> = names.iter().filter_map(|n| registry.get(n).cloned()).collect();
        if model_registry.is_empty() {
            return Err(Error::Config("none of the logged models is in the registry".into()));
        }

        let method_threshold = derive_threshold(&frontier, &mut notes)?;
        Ok((
            PlannerArtifacts {
                frontier,
                size_fits,
                observed_optima,
                rank_table,
                freeze_table,
                model_registry,
                method_threshold,
            },
            notes,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.method_threshold > 0.0) || self.method_threshold.is_nan() {
            return Err(Error::Config(format!("method_threshold must be positive, got {}", self.method_threshold)));
        }
        if self.model_registry.is_empty() {
            return Err(Error::Config("model registry is empty".into()));
        }
        for a in &self.model_registry {
            a.validate()?;
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let a: PlannerArtifacts = serde_json::from_str(s)?;
        a.validate()?;
        Ok(a)
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

/// Budget where the fitted LoRA line drops below the full fine-tuning line.
fn derive_threshold(frontier: &Frontier, notes: &mut Vec<String>) -> Result<f64> {
    let fits = &frontier.per_method_fits;
    match (fits.get(&MethodClass::Full), fits.get(&MethodClass::Lora)) {
        (Some(full), Some(lora)) => match crossover_ln_budget(full, lora) {
            Some(x) if lora.slope < full.slope => Ok(x.exp().clamp(f64::MIN_POSITIVE, f64::MAX)),
            Some(_) => Err(Error::Unsupported(
                "the fitted lines favour LoRA at low budgets and full fine-tuning at high budgets; \
                 a single full-then-LoRA threshold cannot represent this"
                    .into(),
            )),
            None if full.intercept <= lora.intercept => {
                notes.push("full fine-tuning is never worse than LoRA on the fitted lines".into());
                Ok(f64::MAX)
            }
            None => {
                notes.push("LoRA is never worse than full fine-tuning on the fitted lines".into());
                Ok(f64::MIN_POSITIVE)
            }
        },
        (Some(_), None) => {
            notes.push("no LoRA runs: every budget maps to full fine-tuning".into());
            Ok(f64::MAX)
        }
        (None, Some(_)) => {
            notes.push("no full fine-tuning runs: every budget maps to LoRA".into());
            Ok(f64::MIN_POSITIVE)
        }
        (None, None) => Err(Error::InsufficientData(
            "a method threshold needs full fine-tuning or LoRA runs".into(),
        )),
    }
}

/// Training settings reported with every plan. They do not enter the cost math.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advisory {
    pub batch_size: u32,
    pub context_len: u32,
    pub temperature: f64,
    pub warmup_fraction: f64,
    pub peak_lr_rule: String,
}

impl Default for Advisory {
    fn default() -> Self {
        Advisory {
            batch_size: 1024,
            context_len: 75,
            temperature: 0.025,
            warmup_fraction: 0.1,
            peak_lr_rule: "pre-training peak / 10".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeSource {
    /// Loss-minimising model observed at a matching budget.
    Observed,
    /// Size power law, snapped to the nearest registry model.
    PowerLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub budget: f64,
    pub method: FineTuneMethod,
    pub method_class: MethodClass,
    pub model: ModelArch,
    /// Continuous optimum from the size law, when one is available.
    pub predicted_n: Option<f64>,
    pub size_source: SizeSource,
    /// The size law was evaluated outside its fitted budget range.
    pub extrapolated: bool,
    pub tokens: f64,
    /// Cost of the plan, equal to the budget up to rounding.
    pub flop: f64,
    pub predicted_loss: Option<f64>,
    /// The hyperparameter came from the nearest table cell, not an exact match.
    pub hyper_fallback: bool,
    pub advisory: Advisory,
    pub artifacts_digest: String,
}

impl Plan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialises")
    }
}

fn arch_size(arch: &ModelArch) -> Result<f64> {
    Ok(crate::costmodel::count_params(arch)?.n_total as f64)
}

/// Registry model nearest to `n` in log space; ties go to the smaller model.
pub fn snap_to_registry(models: &[ModelArch], n: f64) -> Result<&ModelArch> {
    let target = n.ln();
    let mut best: Option<(f64, f64, &ModelArch)> = None;
    for m in models {
        let size = arch_size(m)?;
        let d = (size.ln() - target).abs();
        let closer = match best {
            None => true,
            Some((bd, bs, _)) => d < bd || (d == bd && size < bs),
        };
        if closer {
            best = Some((d, size, m));
        }
    }
    best.map(|(_, _, m)| m)
        .ok_or_else(|| Error::Config("model registry is empty".into()))
}

struct SizeChoice<'a> {
    model: &'a ModelArch,
    predicted_n: Option<f64>,
    source: SizeSource,
    extrapolated: bool,
}

fn choose_size<'a>(a: &'a PlannerArtifacts, class: MethodClass, budget: f64) -> Result<SizeChoice<'a>> {
    let fit = a.size_fits.get(&class);
    let predicted_n = fit.map(|f| f.eval(budget));
    let extrapolated = fit.is_some_and(|f| !f.in_domain(budget));

    let observed = a.observed_optima.get(&class).and_then(|obs| {
        obs.iter()
            .filter(|o| (budget / o.budget - 1.0).abs() <= OBSERVED_MATCH_TOLERANCE)
            .min_by(|x, y| (x.budget.ln() - budget.ln()).abs().total_cmp(&(y.budget.ln() - budget.ln()).abs()))
    });
    if let Some(o) = observed {
        if let Some(m) = a.model_registry.iter().find(|m| m.name.eq_ignore_ascii_case(&o.model_name)) {
            return Ok(SizeChoice {
                model: m,
                predicted_n,
                source: SizeSource::Observed,
                extrapolated: false,
            });
        }
    }
    let n = predicted_n.ok_or_else(|| Error::Config(format!("no size law or observed optimum for {class}")))?;
    Ok(SizeChoice {
        model: snap_to_registry(&a.model_registry, n)?,
        predicted_n,
        source: SizeSource::PowerLaw,
        extrapolated,
    })
}

fn finish(
    budget: Budget,
    a: &PlannerArtifacts,
    class: MethodClass,
    size: SizeChoice<'_>,
    method: FineTuneMethod,
    hyper_fallback: bool,
) -> Result<Plan> {
    let counts = param_counts(size.model, &method)?;
    let tokens = tokens_for_budget(&counts, budget)?;
    Ok(Plan {
        budget: budget.flop(),
        method,
        method_class: class,
        model: size.model.clone(),
        predicted_n: size.predicted_n,
        size_source: size.source,
        extrapolated: size.extrapolated,
        tokens,
        flop: flop_cost(&counts, tokens)?,
        predicted_loss: a.frontier.predicted_loss(class, budget.flop()),
        hyper_fallback,
        advisory: Advisory::default(),
        artifacts_digest: a.digest(),
    })
}

/// Full fine-tuning at or below the method threshold, LoRA above it.
pub fn plan(budget: Budget, artifacts: &PlannerArtifacts) -> Result<Plan> {
    artifacts.validate()?;
    let c = budget.flop();
    let class = if c <= artifacts.method_threshold {
        MethodClass::Full
    } else {
        MethodClass::Lora
    };
    let size = choose_size(artifacts, class, c)?;
    let (method, fallback) = match class {
        MethodClass::Full => (FineTuneMethod::FullFineTune, false),
        _ => {
            let model_size = arch_size(size.model)?;
            match table_lookup(&artifacts.rank_table, model_size, c) {
                Some((rank, miss)) => (FineTuneMethod::lora(rank.round().max(1.0) as usize), miss),
                None => (FineTuneMethod::lora(DEFAULT_LORA_RANK), true),
            }
        }
    };
    finish(budget, artifacts, class, size, method, fallback)
}

/// The block-freezing alternative: lower memory, near-optimal loss.
pub fn plan_freeze(budget: Budget, artifacts: &PlannerArtifacts) -> Result<Plan> {
    artifacts.validate()?;
    let table = artifacts
        .freeze_table
        .as_deref()
        .filter(|t| !t.is_empty())
        .ok_or_else(|| Error::Unsupported("artifacts carry no block-freezing table".into()))?;
    let c = budget.flop();
    let size = choose_size(artifacts, MethodClass::Freeze, c)?;
    let (active, fallback) = table_lookup(table, arch_size(size.model)?, c).expect("non-empty table");
    let layers = size.model.n_layers;
    let frozen = (((1.0 - active) * layers as f64).round().max(0.0) as usize).min(layers - 1);
    finish(budget, artifacts, MethodClass::Freeze, size, FineTuneMethod::freeze(frozen), fallback)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_boundary_is_full() {
        let a = PlannerArtifacts::defaults();
        let at = plan(Budget::new(DEFAULT_METHOD_THRESHOLD).unwrap(), &a).unwrap();
        assert_eq!(at.method_class, MethodClass::Full);
        let above = plan(Budget::new(DEFAULT_METHOD_THRESHOLD * (1.0 + 1e-12)).unwrap(), &a).unwrap();
        assert_eq!(above.method, FineTuneMethod::lora(128));
        assert!(above.hyper_fallback);
    }

    #[test]
    fn plan_spends_budget() {
        let a = PlannerArtifacts::defaults();
        for c in [1.5e15, 6e15, 9.6e16, 1.5e18, 1e21] {
            let p = plan(Budget::new(c).unwrap(), &a).unwrap();
            assert!((p.flop / c - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn singleton_freeze_table() {
        let mut a = PlannerArtifacts::defaults();
        let size = arch_size(&a.model_registry[3]).unwrap();
        a.freeze_table = Some(vec![TableEntry { size, budget: 1e16, value: 0.5 }]);
        for c in [1e15, 1e17, 1e19] {
            let p = plan_freeze(Budget::new(c).unwrap(), &a).unwrap();
            let l = p.model.n_layers;
            assert_eq!(p.method, FineTuneMethod::freeze(((0.5 * l as f64).round()) as usize));
            assert!(p.hyper_fallback);
        }
    }

    #[test]
    fn missing_freeze_table_is_unsupported() {
        let mut a = PlannerArtifacts::defaults();
        a.freeze_table = None;
        assert!(matches!(plan_freeze(Budget::new(1e16).unwrap(), &a), Err(Error::Unsupported(_))));
    }

    #[test]
    fn snapping_prefers_smaller_on_ties() {
        let a = PlannerArtifacts::defaults();
        let s1 = arch_size(&a.model_registry[0]).unwrap();
        let s2 = arch_size(&a.model_registry[1]).unwrap();
        let mid = (s1 * s2).sqrt();
        assert_eq!(snap_to_registry(&a.model_registry, mid).unwrap().name, a.model_registry[0].name);
    }
}
