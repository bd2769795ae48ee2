use embedscale::costmodel::{count_params, flop_cost, param_counts, tokens_for_budget, Budget, FineTuneMethod, ModelArch, NormKind, Registry};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent total: sum the closed-form size of each tensor.
fn oracle_counts(a: &ModelArch) -> (u64, u64) {
    let d = a.d_model as u64;
    let ff = a.d_ff as u64;
    let q = d;
    let kv = (a.n_kv_heads.unwrap_or(a.n_heads) * (a.d_model / a.n_heads)) as u64;
    let b = |n: u64| if a.bias { n } else { 0 };
    let norm = if a.norm == NormKind::LayerNorm { 2 * d } else { d };
    let mut tensors: Vec<u64> = Vec::new();
    for _ in 0..a.n_layers {
        tensors.push(norm);
        tensors.push(d * q + b(q));
        tensors.push(d * kv + b(kv));
        tensors.push(d * kv + b(kv));
        tensors.push(q * d + b(d));
        tensors.push(norm);
        if a.gated_ffn {
            tensors.push(d * ff + b(ff));
        }
        tensors.push(d * ff + b(ff));
        tensors.push(ff * d + b(d));
    }
    tensors.push(norm);
    let nonembed: u64 = tensors.iter().sum();
    let mut embed = a.vocab_size as u64 * d;
    if a.learned_positions {
        embed += a.max_seq_len as u64 * d;
    }
    if !a.tie_embeddings {
        tensors.push(d * a.vocab_size as u64);
    }
    (tensors.iter().sum::<u64>() + embed, nonembed)
}

fn random_arch(rng: &mut ChaCha8Rng, i: usize) -> ModelArch {
    let heads = rng.random_range(1..=8);
    let head_dim = 8 * rng.random_range(1..=8);
    let mut a = ModelArch::new(
        format!("rand-{i}"),
        rng.random_range(1..=12),
        heads * head_dim,
        rng.random_range(16..=2048),
        heads,
        rng.random_range(100..=60_000),
    )
    .tied(rng.random_bool(0.5));
    let kv_choices: Vec<usize> = (1..=heads).filter(|k| heads % k == 0).collect();
    if rng.random_bool(0.5) {
        a.n_kv_heads = Some(kv_choices[rng.random_range(0..kv_choices.len())]);
    }
    a.bias = rng.random_bool(0.5);
    a.norm = if rng.random_bool(0.5) { NormKind::LayerNorm } else { NormKind::RmsNorm };
    a.gated_ffn = rng.random_bool(0.5);
    a.fused_qkv = rng.random_bool(0.5);
    a.learned_positions = rng.random_bool(0.3);
    a.max_seq_len = rng.random_range(1..=4096);
    a
}

#[test]
fn counts_match_independent_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..20 {
        let a = random_arch(&mut rng, i);
        let inv = count_params(&a).unwrap();
        assert_eq!((inv.n_total, inv.n_nonembed), oracle_counts(&a), "{a:?}");
    }
}

#[test]
fn pythia_totals_near_advertised_sizes() {
    let reg = Registry::bundled();
    let advertised = [
        ("pythia-14m", 14e6),
        ("pythia-31m", 31e6),
        ("pythia-70m", 70e6),
        ("pythia-160m", 160e6),
        ("pythia-410m", 410e6),
        ("pythia-1b", 1e9),
        ("pythia-1.4b", 1.4e9),
        ("pythia-2.8b", 2.8e9),
    ];
    for (name, size) in advertised {
        let n = count_params(reg.require(name).unwrap()).unwrap().n_total as f64;
        assert!((n / size - 1.0).abs() < 0.05, "{name}: {n}");
    }
}

#[test]
fn pythia_160m_exact() {
    let reg = Registry::bundled();
    let inv = count_params(reg.require("pythia-160m").unwrap()).unwrap();
    assert_eq!(inv.n_total, 162_322_944);
    assert_eq!(inv.n_nonembed, 85_056_000);
}

#[test]
fn cost_matches_hand_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..50 {
        let a = random_arch(&mut rng, i);
        let d: f64 = 10f64.powf(rng.random_range(3.0..12.0));
        let nf = count_params(&a).unwrap().n_nonembed as f64;
        if rng.random_bool(0.5) {
            let c = flop_cost(&param_counts(&a, &FineTuneMethod::FullFineTune).unwrap(), d).unwrap();
            assert_eq!(c, 6.0 * nf * d);
        } else {
            let k = rng.random_range(0..a.n_layers);
            let p = param_counts(&a, &FineTuneMethod::freeze(k)).unwrap();
            let c = flop_cost(&p, d).unwrap();
            let want = 2.0 * nf * d + 4.0 * p.n_backward as f64 * d;
            assert!((c - want).abs() <= want * f64::EPSILON, "{c} vs {want}");
        }
    }
}

#[test]
fn lora_adapters_on_fused_qkv() {
    let reg = Registry::bundled();
    let a = reg.require("pythia-160m").unwrap();
    let base = count_params(a).unwrap().n_nonembed;
    let p = param_counts(a, &FineTuneMethod::lora(8)).unwrap();
    let d = 768u64;
    let per_block = 8 * ((d + 3 * d) + (d + d) + (d + 4 * d) + (4 * d + d));
    assert_eq!(p.n_updated, 12 * per_block);
    assert_eq!(p.n_forward, base + p.n_updated);
}

#[test]
fn gemma_descriptor_totals() {
    let reg = Registry::bundled();
    let inv = count_params(reg.require("gemma-2b").unwrap()).unwrap();
    assert_eq!(inv.n_total, 2_506_172_416);
}

fn small_arch() -> impl Strategy<Value = ModelArch> {
    (1usize..10, 1usize..6, 1usize..5, 8usize..512, 50usize..5000, any::<bool>(), any::<bool>()).prop_map(
        |(l, h, hd, ff, v, tie, fused)| {
            let mut a = ModelArch::new("p", l, h * hd * 4, ff, h, v).tied(tie);
            a.fused_qkv = fused;
            a
        },
    )
}

proptest! {
    #[test]
    fn freeze_cost_is_non_increasing(a in small_arch(), d in 1.0f64..1e12) {
        let full = flop_cost(&param_counts(&a, &FineTuneMethod::FullFineTune).unwrap(), d).unwrap();
        let mut prev = full;
        for k in 0..a.n_layers {
            let c = flop_cost(&param_counts(&a, &FineTuneMethod::freeze(k)).unwrap(), d).unwrap();
            if k == 0 {
                prop_assert_eq!(c, full);
            }
            prop_assert!(c <= prev);
            prev = c;
        }
    }

    #[test]
    fn bias_never_costs_more_than_full(a in small_arch(), d in 1.0f64..1e12) {
        let full = flop_cost(&param_counts(&a, &FineTuneMethod::FullFineTune).unwrap(), d).unwrap();
        let bias = flop_cost(&param_counts(&a, &FineTuneMethod::BiasOnly).unwrap(), d).unwrap();
        prop_assert!(bias <= full);
    }

    #[test]
    fn count_ordering_and_fraction(a in small_arch(), r in 1usize..256, k in 0usize..10) {
        let mut methods = vec![FineTuneMethod::FullFineTune, FineTuneMethod::BiasOnly, FineTuneMethod::lora(r)];
        if k < a.n_layers {
            methods.push(FineTuneMethod::freeze(k));
        }
        for m in methods {
            let p = param_counts(&a, &m).unwrap();
            prop_assert!(p.n_updated <= p.n_backward && p.n_backward <= p.n_forward);
            prop_assert!((0.0..=1.0).contains(&p.trainable_fraction));
        }
    }

    #[test]
    fn tokens_round_trip(a in small_arch(), c in 1e10f64..1e22) {
        let p = param_counts(&a, &FineTuneMethod::lora(16)).unwrap();
        let d = tokens_for_budget(&p, Budget::new(c).unwrap()).unwrap();
        let back = flop_cost(&p, d).unwrap();
        prop_assert!((back / c - 1.0).abs() < 1e-12);
    }
}

#[test]
fn freeze_all_blocks_is_rejected() {
    let reg = Registry::bundled();
    let a = reg.require("pythia-14m").unwrap();
    assert!(param_counts(a, &FineTuneMethod::freeze(a.n_layers)).is_err());
}
