use std::collections::BTreeMap;

use serde::Serialize;

use super::data::Dataset;
use super::finetune::{accuracy_gap, finetune, AccuracyGap, FinetuneResult, TrainConfig};
use crate::error::{Error, Result};
use crate::ir::Graph;
use crate::lowering::{lower_graph, tables_from_ranges, LowerOptions, LoweredPlan, PwlMode, TableSpec};
use crate::profiler::{profile_ranges, ClipPolicy, RangeReport};
use crate::pwl::PwlTable;

/// Everything produced by one approximate-then-maybe-retrain run.
#[derive(Debug, Clone, Serialize)]
pub struct PipelineOutcome {
    pub ranges: RangeReport,
    pub tables: BTreeMap<String, PwlTable>,
    /// Gap of the freshly approximated plan.
    pub initial_gap: AccuracyGap,
    /// Present when the initial gap exceeded the threshold.
    #[serde(skip)]
    pub finetuned: Option<FinetuneResult>,
    pub final_gap: AccuracyGap,
    #[serde(skip)]
    pub plan: LoweredPlan,
}

/// Profiles `graph` on the training set, replaces every nonlinear operator
/// by a table built with `spec`, lowers, and measures the accuracy loss on
/// `eval`. If the loss exceeds `cfg.acc_th` the plan is fine-tuned through
/// its tables and measured again.
pub fn approximate_and_retrain(
    graph: &Graph,
    train: &Dataset,
    eval: &Dataset,
    spec: TableSpec,
    policy: ClipPolicy,
    cfg: &TrainConfig,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::arg("training and evaluation sets must be non-empty"));
    }
    let input = graph
        .inputs
        .first()
        .ok_or_else(|| Error::structural("graph has no input"))?;
    let calibration = train.batches(&input.name, input.shape[0]);
    let ranges = profile_ranges(graph, &calibration, policy)?;
    let tables = tables_from_ranges(&ranges, spec)?;
    let opts = LowerOptions {
        ranges: Some(ranges.clone()),
    };
    let plan = lower_graph(graph, &tables, &opts)?;
    let initial_gap = accuracy_gap(graph, &plan, eval, cfg.acc_th)?;
    if !initial_gap.retrain {
        return Ok(PipelineOutcome {
            ranges,
            tables,
            final_gap: initial_gap.clone(),
            initial_gap,
            finetuned: None,
            plan,
        });
    }
    let tuned = finetune(&plan, train, Some(eval), cfg, PwlMode::Table)?;
    let final_gap = accuracy_gap(graph, &tuned.plan, eval, cfg.acc_th)?;
    Ok(PipelineOutcome {
        ranges,
        tables,
        initial_gap,
        plan: tuned.plan.clone(),
        finetuned: Some(tuned),
        final_gap,
    })
}
