use std::collections::BTreeMap;

use neumat::ir::Graph;
use neumat::lowering::{lower_graph, quantize_plan, tables_from_ranges, LowerOptions, LoweredPlan, PwlMode, TableSpec};
use neumat::models::{mlp, Activation};
use neumat::profiler::{profile_ranges, ClipPolicy};
use neumat::training::{
    accuracy_gap, apply_weights, approximate_and_retrain, trainable_weights, finetune, history_to_csv, loss_and_gradients, plan_accuracy, two_blobs,
    Dataset, Head, TrainConfig,
};
use neumat::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ROWS: usize = 16;

fn lowered(graph: &Graph, data: &Dataset, segments: usize) -> LoweredPlan {
    let calib = data.batches("x", ROWS);
    let ranges = profile_ranges(graph, &calib, ClipPolicy::MinMax).unwrap();
    let tables = tables_from_ranges(
        &ranges,
        TableSpec::Uniform {
            segments,
            corrected: false,
        },
    )
    .unwrap();
    lower_graph(graph, &tables, &LowerOptions { ranges: Some(ranges) }).unwrap()
}

fn cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        epochs,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn blobs_reach_full_training_accuracy() {
    let data = two_blobs(100, 2, 3.0, 0.6, 1);
    let g = mlp(&[2, 16, 2], ROWS, Activation::Gelu, 1);
    let plan = lowered(&g, &data, 64);
    let r = finetune(&plan, &data, None, &cfg(50, 1), PwlMode::Table).unwrap();
    let best = r.history.iter().map(|m| m.train_acc).fold(0.0, f64::max);
    assert!(best >= 0.99, "{best}");
    assert_eq!(plan_accuracy(&r.plan, &data, PwlMode::Table).unwrap(), r.history.last().unwrap().train_acc);
}

#[test]
fn backprop_matches_finite_differences() {
    let data = two_blobs(12, 2, 2.0, 1.0, 3);
    let g = mlp(&[2, 12, 8, 2], ROWS, Activation::Gelu, 3);
    let plan = lowered(&g, &data, 16);
    let idx: Vec<usize> = (0..data.len()).collect();
    let (_, grads) = loss_and_gradients(&plan, &data, &idx, Head::Logits, PwlMode::Table).unwrap();
    let loss_with = |slot: usize, i: usize, delta: f32| {
        let mut p = plan.clone();
        p.constants.get_mut(&slot).unwrap().data_mut()[i] += delta;
        loss_and_gradients(&p, &data, &idx, Head::Logits, PwlMode::Table).unwrap().0
    };
    let slots: Vec<usize> = grads.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-3f32;
    let mut checked = 0;
    let mut tries = 0;
    while checked < 20 {
        tries += 1;
        assert!(tries < 200, "too many weights sit next to a breakpoint");
        let slot = slots[rng.gen_range(0..slots.len())];
        let i = rng.gen_range(0..grads[&slot].len());
        let (up, mid, down) = (loss_with(slot, i, h), loss_with(slot, i, 0.0), loss_with(slot, i, -h));
        let (fwd, bwd) = ((up - mid) / h as f64, (mid - down) / h as f64);
        // one-sided slopes disagree when the step crosses a segment boundary
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-3) {
            continue;
        }
        let fd = (up - down) / (2.0 * h as f64);
        let an = grads[&slot][i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        assert!(rel <= 1e-3, "slot {slot} [{i}]: fd {fd} vs backprop {an}");
        checked += 1;
    }
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let data = two_blobs(20, 2, 3.0, 0.6, 5);
    let plan = lowered(&mlp(&[2, 8, 2], ROWS, Activation::Gelu, 5), &data, 32);
    let c = TrainConfig {
        learning_rate: 0.0,
        ..cfg(3, 5)
    };
    let r = finetune(&plan, &data, None, &c, PwlMode::Table).unwrap();
    assert_eq!(r.plan.constants, plan.constants);
}

#[test]
fn training_is_deterministic() {
    let data = two_blobs(30, 2, 2.0, 1.0, 6);
    let plan = lowered(&mlp(&[2, 8, 2], ROWS, Activation::Gelu, 6), &data, 32);
    let a = finetune(&plan, &data, Some(&data), &cfg(4, 9), PwlMode::Table).unwrap();
    let b = finetune(&plan, &data, Some(&data), &cfg(4, 9), PwlMode::Table).unwrap();
    assert_eq!(a.plan.constants, b.plan.constants);
    assert_eq!(a.history, b.history);
    let c = finetune(&plan, &data, Some(&data), &cfg(4, 10), PwlMode::Table).unwrap();
    assert_ne!(a.plan.constants, c.plan.constants);
}

#[test]
fn history_csv_columns() {
    let data = two_blobs(10, 2, 3.0, 0.6, 7);
    let plan = lowered(&mlp(&[2, 4, 2], ROWS, Activation::Gelu, 7), &data, 16);
    let r = finetune(&plan, &data, Some(&data), &cfg(2, 7), PwlMode::Table).unwrap();
    let csv = history_to_csv(&r.history).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,loss,train_acc,eval_acc"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn relu_only_plan_loses_no_accuracy() {
    let data = two_blobs(40, 2, 1.5, 1.0, 8);
    let g = mlp(&[2, 16, 16, 2], ROWS, Activation::Relu, 8);
    let plan = lower_graph(&g, &BTreeMap::new(), &LowerOptions::default()).unwrap();
    let gap = accuracy_gap(&g, &plan, &data, 0.0).unwrap();
    assert_eq!(gap.acc_loss, 0.0);
    assert!(!gap.retrain);
}

#[test]
fn coarse_tables_lose_at_least_as_much_as_fine_ones() {
    let data = two_blobs(100, 2, 1.0, 1.0, 9);
    let train = two_blobs(100, 2, 1.0, 1.0, 10);
    let g = mlp(&[2, 16, 2], ROWS, Activation::Gelu, 9);
    // pre-train the reference through exact GELU so the decision boundary is meaningful
    let exact = lowered(&g, &train, 256);
    let trained = finetune(&exact, &train, None, &cfg(20, 9), PwlMode::Exact).unwrap().plan;
    let g = apply_weights(&g, &trainable_weights(&trained)).unwrap();
    let gap4 = accuracy_gap(&g, &lowered(&g, &train, 4), &data, 0.01).unwrap();
    let gap256 = accuracy_gap(&g, &lowered(&g, &train, 256), &data, 0.01).unwrap();
    assert!(gap4.acc_loss >= gap256.acc_loss, "{gap4:?} {gap256:?}");
}

#[test]
fn threshold_of_one_never_retrains() {
    let data = two_blobs(30, 2, 0.5, 1.0, 11);
    let g = mlp(&[2, 8, 2], ROWS, Activation::Gelu, 11);
    for segments in [2, 4, 64] {
        let gap = accuracy_gap(&g, &lowered(&g, &data, segments), &data, 1.0).unwrap();
        assert!(!gap.retrain);
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let data = two_blobs(10, 2, 3.0, 0.6, 12);
    let g = mlp(&[2, 4, 2], ROWS, Activation::Gelu, 12);
    let plan = lowered(&g, &data, 16);
    let empty = data.subset(&[]);
    assert!(matches!(accuracy_gap(&g, &plan, &empty, 0.1), Err(Error::Argument(_))));
    assert!(matches!(
        finetune(&plan, &empty, None, &cfg(1, 0), PwlMode::Table),
        Err(Error::Argument(_))
    ));
    let c = TrainConfig { epochs: 0, ..cfg(1, 0) };
    assert!(finetune(&plan, &data, None, &c, PwlMode::Table).is_err());
    let c = TrainConfig {
        acc_th: -0.1,
        ..cfg(1, 0)
    };
    assert!(c.validate().is_err());
    let q = quantize_plan(&plan, &data.batches("x", ROWS)).unwrap();
    let err = finetune(&q, &data, None, &cfg(1, 0), PwlMode::Table).unwrap_err();
    assert!(matches!(err, Error::Unsupported(_)) && err.to_string().contains("matmul_block"));
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let data = two_blobs(20, 2, 3.0, 0.6, 13);
    let g = mlp(&[2, 8, 2], ROWS, Activation::Gelu, 13);
    let plan = lowered(&g, &data, 16);
    let c = TrainConfig {
        learning_rate: 1e30,
        momentum: 0.0,
        ..cfg(20, 13)
    };
    match finetune(&plan, &data, None, &c, PwlMode::Table) {
        Err(Error::Divergence { epoch }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.history)),
    }
}

#[test]
fn finetuning_does_not_worsen_training_accuracy() {
    let mut kept = 0;
    for seed in 0..5 {
        let data = two_blobs(60, 2, 1.5, 1.0, 100 + seed);
        let g = mlp(&[2, 16, 2], ROWS, Activation::Gelu, seed);
        let plan = lowered(&g, &data, 8);
        let before = plan_accuracy(&plan, &data, PwlMode::Table).unwrap();
        let r = finetune(&plan, &data, None, &cfg(30, seed), PwlMode::Table).unwrap();
        if r.history.last().unwrap().train_acc >= before {
            kept += 1;
        }
    }
    assert!(kept >= 3, "{kept}/5");
}

#[test]
fn pipeline_retrains_only_past_threshold() {
    let train = two_blobs(60, 2, 1.5, 1.0, 14);
    let eval = two_blobs(60, 2, 1.5, 1.0, 15);
    let g = mlp(&[2, 16, 2], ROWS, Activation::Gelu, 14);
    let spec = TableSpec::Uniform {
        segments: 4,
        corrected: true,
    };
    let lax = TrainConfig {
        acc_th: 1.0,
        ..cfg(10, 14)
    };
    let out = approximate_and_retrain(&g, &train, &eval, spec, ClipPolicy::MinMax, &lax).unwrap();
    assert!(out.finetuned.is_none());
    assert_eq!(out.initial_gap, out.final_gap);
    assert!(out.tables.contains_key("act1"));
    let strict = TrainConfig {
        acc_th: 0.0,
        ..cfg(10, 14)
    };
    let out = approximate_and_retrain(&g, &train, &eval, spec, ClipPolicy::MinMax, &strict).unwrap();
    assert_eq!(out.finetuned.is_some(), out.initial_gap.acc_loss > 0.0);
    if let Some(t) = &out.finetuned {
        assert_eq!(t.history.len(), 10);
        assert_eq!(t.plan.constants, out.plan.constants);
    }
}
