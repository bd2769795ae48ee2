//! Synthetic grid → profiles → frontier → plan, checked against an
//! exhaustive scan of the generated runs.

use std::collections::BTreeMap;

use embedscale::costmodel::{MethodClass, Registry, PYTHIA_SUITE};
use embedscale::isoflop::ProfileOptions;
use embedscale::recipe::{plan, PlannerArtifacts};
use embedscale::scalinglaw::{ChinchillaParams, FittedParams};
use embedscale::synth::{generate, MethodSweep, SynthGrid, SynthSpec, DEFAULT_BUDGETS};
use embedscale::{Budget, RunSet};

fn law(c: f64, a: f64) -> FittedParams {
    FittedParams::Chinchilla(ChinchillaParams {
        irreducible_loss: c,
        a,
        b: 200.0,
        alpha: 0.3,
        beta: 0.3,
    })
}

/// Full fine-tuning has the better size term, LoRA the better asymptote,
/// so the best method changes once inside the grid.
fn switching_spec(budgets: Vec<f64>) -> SynthSpec {
    SynthSpec {
        truth: law(0.3, 200.0),
        method_truth: BTreeMap::from([(MethodClass::Lora, law(0.22, 240.0))]),
        grid: SynthGrid {
            budgets,
            models: PYTHIA_SUITE.iter().map(|s| s.to_string()).collect(),
            methods: vec![MethodSweep::Full, MethodSweep::lora_default()],
        },
        noise_sigma: 0.0,
        seed: 0,
    }
}

fn exhaustive_argmin(runs: &RunSet, budget: f64) -> (MethodClass, String) {
    let best = runs
        .iter()
        .filter(|r| (r.flop / budget - 1.0).abs() < 1e-6)
        .filter(|r| matches!(r.method_class(), MethodClass::Full | MethodClass::Lora))
        .min_by(|a, b| a.final_loss.total_cmp(&b.final_loss).then(a.n_total.cmp(&b.n_total)))
        .unwrap();
    (best.method_class(), best.model_name.clone())
}

fn check(spec: &SynthSpec) -> Vec<MethodClass> {
    let reg = Registry::bundled();
    let runs = generate(spec, &reg).unwrap().runs;
    let (art, _) = PlannerArtifacts::from_runs(&runs, &reg, &ProfileOptions::default()).unwrap();
    let mut methods = Vec::new();
    for &c in &spec.grid.budgets {
        let want = exhaustive_argmin(&runs, c);
        let p = plan(Budget::new(c).unwrap(), &art).unwrap();
        assert_eq!((p.method_class, p.model.name.clone()), want, "budget {c:e}");
        methods.push(p.method_class);
    }
    methods
}

#[test]
fn plan_reproduces_true_argmin_on_reference_grid() {
    let methods = check(&switching_spec(DEFAULT_BUDGETS.to_vec()));
    assert!(methods.contains(&MethodClass::Full) && methods.contains(&MethodClass::Lora));
}

#[test]
fn single_modified_law_with_all_methods() {
    let spec = SynthSpec {
        truth: FittedParams::Modified(embedscale::ModifiedParams {
            irreducible_loss: 0.2,
            a_d: 2.0,
            b_d: 10.0,
            alpha: 0.3,
            a_s: 20.0,
            b_s: 2.0,
            c_s: 30.0,
            beta: 0.25,
        }),
        method_truth: BTreeMap::new(),
        grid: SynthGrid::default(),
        noise_sigma: 0.0,
        seed: 0,
    };
    check(&spec);
}
