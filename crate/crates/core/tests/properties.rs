// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use circuitquant::acdc::threshold_grid;
use circuitquant::eval::{concordance_auc, pessimistic_auc, points_from_scores};
use circuitquant::model::init::random_weights;
use circuitquant::model::{forward, ComputationalGraph, EdgePatch, Model, ModelConfig, Tokens};
use circuitquant::numerics::{add_f8, decode_f8, encode_f8, quantize_rtn, round_f8, F8E4M3, F8_MAX};
use circuitquant::pahq::store::device_bound_bytes;
use circuitquant::pahq::{PrecisionPolicy, Target, WeightStore};
use circuitquant::scheduler::{closed_form, simulate, StepCost, StreamConfig, TimingModel};
use proptest::prelude::*;

fn finite_f8() -> impl Strategy<Value = F8E4M3> {
    any::<u8>().prop_map(F8E4M3::from_bits).prop_filter("nan", |v| !v.is_nan())
}

proptest! {
    #[test]
    fn f8_decode_encode_round_trips(v in finite_f8()) {
        let back = encode_f8(decode_f8(v));
        prop_assert_eq!(decode_f8(back), decode_f8(v));
    }

    #[test]
    fn f8_encode_is_nearest_and_monotone(x in -500.0f64..500.0, y in -500.0f64..500.0) {
        let rx = decode_f8(encode_f8(x));
        prop_assert!(rx.abs() <= F8_MAX);
        if x.abs() <= F8_MAX {
            let best = F8E4M3::all()
                .filter(|v| !v.is_nan())
                .map(|v| (decode_f8(v) - x).abs())
                .fold(f64::INFINITY, f64::min);
            prop_assert_eq!((rx - x).abs(), best);
        }
        if x <= y {
            prop_assert!(rx <= decode_f8(encode_f8(y)));
        }
    }

    #[test]
    fn f8_add_commutes_and_rounds_the_exact_sum(a in finite_f8(), b in finite_f8()) {
        prop_assert_eq!(decode_f8(add_f8(a, b)), decode_f8(add_f8(b, a)));
        prop_assert_eq!(decode_f8(add_f8(a, b)), round_f8(decode_f8(a) + decode_f8(b)));
    }

    #[test]
    fn rtn_error_is_at_most_half_a_step(
        w in prop::collection::vec(-10.0f64..10.0, 1..64),
        bits in prop::sample::select(vec![4u32, 8, 16]),
    ) {
        let (q, p) = quantize_rtn(&w, bits).unwrap();
        let levels = f64::from(1u32 << (bits - 1));
        for (a, b) in w.iter().zip(&q) {
            prop_assert!((a - b).abs() <= p.delta / 2.0 + 1e-12);
            if p.delta > 0.0 {
                let k = b / p.delta;
                prop_assert!((k - k.round()).abs() <= 1e-9 * k.abs().max(1.0));
                prop_assert!(k.abs() <= levels);
            }
        }
    }

    #[test]
    fn auc_equals_concordance_for_distinct_scores(
        raw in prop::collection::btree_set(1u32..10_000, 2..40),
        labels in prop::collection::vec(any::<bool>(), 40),
    ) {
        let scored: Vec<(f64, bool)> = raw.iter().zip(&labels).map(|(&s, &t)| (f64::from(s), t)).collect();
        prop_assume!(scored.iter().any(|s| s.1) && scored.iter().any(|s| !s.1));
        // Every distinct score plus one above the maximum.
        let mut taus: Vec<f64> = scored.iter().map(|s| s.0).collect();
        taus.push(1e9);
        let auc = pessimistic_auc(&points_from_scores(&scored, &taus));
        let want = concordance_auc(&scored);
        prop_assert!((auc - want).abs() < 1e-12, "auc {} concordance {}", auc, want);
    }

    #[test]
    fn threshold_grid_is_log_spaced(lo in 1e-6f64..1.0, ratio in 1.5f64..1e4, n in 2usize..40) {
        let hi = lo * ratio;
        let g = threshold_grid(lo, hi, n).unwrap();
        prop_assert_eq!(g.len(), n);
        prop_assert_eq!(g[0], lo);
        prop_assert_eq!(g[n - 1], hi);
        prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
        let r = (hi / lo).ln() / (n - 1) as f64;
        for w in g.windows(2) {
            prop_assert!(((w[1] / w[0]).ln() - r).abs() < 1e-9);
        }
    }

    #[test]
    fn simulator_matches_closed_form_and_orders_configs(
        tr in 1e-4f64..1e-2,
        lo in 1e-4f64..1e-2,
        hi in 1e-4f64..1e-2,
        sync in 0.0f64..1e-3,
        steps in 2usize..12,
    ) {
        let c = ModelConfig::new(2, 4, 32, 13, 6);
        let cost = StepCost::new(&c, 1, 6, Some(Target::Head { layer: 1, head: 2 }), false);
        let tm = TimingModel::calibrated(&cost, tr, lo, hi, sync);
        let mut per_step = Vec::new();
        for s in [StreamConfig::BOTH, StreamConfig::LOAD, StreamConfig::COMPUTE, StreamConfig::NONE] {
            let one = simulate(&[cost], &tm, s).makespan;
            let cf = closed_form(&cost, &tm, s);
            if !s.load_stream {
                prop_assert!((one - cf).abs() <= 1e-12, "{}: sim {} closed form {}", s, one, cf);
            }
            let many = simulate(&vec![cost; steps], &tm, s).makespan;
            prop_assert!(many <= cf * steps as f64 + 1e-12, "{}: {} > {} * {}", s, many, cf, steps);
            prop_assert!(many >= (lo * steps as f64) - 1e-12);
            per_step.push(many);
        }
        let [both, load, compute, none] = per_step[..] else { unreachable!() };
        prop_assert!(both <= load + 1e-12 && both <= compute + 1e-12);
        prop_assert!(load <= none + 1e-12 && compute <= none + 1e-12);
    }

    #[test]
    fn store_stays_coherent(
        loads in prop::collection::vec((0usize..2, 0usize..5), 1..24),
        slots in 1usize..4,
    ) {
        let c = ModelConfig::new(2, 4, 16, 7, 4).with_mlp(16);
        let store = WeightStore::with_slots(Arc::new(random_weights::<f32>(c, 9, 0.3)), slots).unwrap();
        for &(layer, h) in &loads {
            let t = if h == 4 { Target::Mlp { layer } } else { Target::Head { layer, head: h } };
            store.load(t).unwrap();
            prop_assert!(store.ready_bundle(t).is_some());
            prop_assert!(store.is_coherent());
            prop_assert!(store.resident_bytes() <= device_bound_bytes(&c, slots));
        }
        prop_assert!(store.fp8_bank_matches_host());
    }

    #[test]
    fn patching_with_identical_inputs_changes_nothing(seed in 0u64..1000, edge_pick in any::<prop::sample::Index>()) {
        let c = ModelConfig::new(2, 2, 8, 6, 4);
        let model = Model::new(random_weights::<f32>(c, seed, 0.5)).unwrap();
        let g = ComputationalGraph::full(c);
        let tokens = Tokens::single(&[1, 4, 2, 5]).unwrap();
        let policy = PrecisionPolicy::full_precision();
        let base = forward(&g, &model, &tokens, &policy, &[]).unwrap();
        let edge = g.all_edges()[edge_pick.index(g.all_edges().len())];
        let patch = EdgePatch::new(edge, Arc::clone(base.output(edge.src)));
        let patched = forward(&g, &model, &tokens, &policy, &[patch]).unwrap();
        let same = base
            .logits()
            .data()
            .iter()
            .zip(patched.logits().data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }
}
