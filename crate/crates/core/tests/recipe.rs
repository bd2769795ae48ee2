use embedscale::costmodel::{count_params, flop_cost, param_counts, MethodClass};
use embedscale::recipe::{plan, plan_freeze, snap_to_registry, PlannerArtifacts, DEFAULT_METHOD_THRESHOLD};
use embedscale::Budget;
use proptest::prelude::*;

#[test]
fn reference_budgets_follow_threshold() {
    let a = PlannerArtifacts::defaults();
    assert_eq!(plan(Budget::new(1.5e15).unwrap(), &a).unwrap().method_class, MethodClass::Full);
    assert_eq!(plan(Budget::new(1.5e18).unwrap(), &a).unwrap().method_class, MethodClass::Lora);
}

#[test]
fn method_switches_once_across_sweep() {
    let a = PlannerArtifacts::defaults();
    let classes: Vec<MethodClass> = (0..200)
        .map(|i| 10f64.powf(13.0 + 9.0 * i as f64 / 199.0))
        .map(|c| plan(Budget::new(c).unwrap(), &a).unwrap().method_class)
        .collect();
    let switches = classes.windows(2).filter(|w| w[0] != w[1]).count();
    assert_eq!(switches, 1);
    assert_eq!(classes[0], MethodClass::Full);
}

#[test]
fn large_model_small_budget_freezes_half() {
    let a = PlannerArtifacts::defaults();
    let mut art = a.clone();
    // Force the size law onto a billion-parameter model.
    art.size_fits.insert(MethodClass::Freeze, embedscale::isoflop::PowerLawFit::from_line(0.0, 1.4e9f64.ln()));
    let p = plan_freeze(Budget::new(1.5e15).unwrap(), &art).unwrap();
    let active = 1.0 - match p.method {
        embedscale::FineTuneMethod::BlockFreeze { frozen_blocks } => frozen_blocks as f64 / p.model.n_layers as f64,
        _ => unreachable!(),
    };
    assert!(active <= 0.5, "{active}");
}

#[test]
fn plans_are_byte_identical() {
    let a = PlannerArtifacts::defaults();
    let x = plan(Budget::new(3e17).unwrap(), &a).unwrap().to_json();
    let y = plan(Budget::new(3e17).unwrap(), &a).unwrap().to_json();
    assert_eq!(x, y);
}

#[test]
fn artifacts_round_trip_json() {
    let a = PlannerArtifacts::defaults();
    let s = serde_json::to_string(&a).unwrap();
    let b = PlannerArtifacts::from_json_str(&s).unwrap();
    assert_eq!(a.digest(), b.digest());
}

#[test]
fn empty_registry_is_a_config_error() {
    let mut a = PlannerArtifacts::defaults();
    a.model_registry.clear();
    assert!(plan(Budget::new(1e16).unwrap(), &a).is_err());
}

proptest! {
    #[test]
    fn plan_spends_the_budget(e in 13.0f64..22.0) {
        let a = PlannerArtifacts::defaults();
        let c = 10f64.powf(e);
        for p in [plan(Budget::new(c).unwrap(), &a).unwrap(), plan_freeze(Budget::new(c).unwrap(), &a).unwrap()] {
            let cost = flop_cost(&param_counts(&p.model, &p.method).unwrap(), p.tokens).unwrap();
            prop_assert!((cost / c - 1.0).abs() < 0.01);
            if p.method_class != MethodClass::Freeze {
                prop_assert_eq!(p.method_class == MethodClass::Full, c <= DEFAULT_METHOD_THRESHOLD);
            }
        }
    }

    #[test]
    fn snapping_minimises_log_distance(e in 6.0f64..10.5) {
        let a = PlannerArtifacts::defaults();
        let n = 10f64.powf(e);
        let chosen = snap_to_registry(&a.model_registry, n).unwrap();
        let dist = |m: &embedscale::ModelArch| ((count_params(m).unwrap().n_total as f64).ln() - n.ln()).abs();
        for m in &a.model_registry {
            prop_assert!(dist(chosen) <= dist(m));
        }
    }
}
