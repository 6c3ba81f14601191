use serde::Serialize;

use super::config::{AcceleratorConfig, DataflowConfig};
use super::model::{report_from_counts, throughput_per_watt, CostReport};
use super::search::{search_blocking_with, SearchOptions};
use crate::error::{Error, Result};
use crate::lowering::{LoweredPlan, PrimKind};

/// Tables at most this fraction of L2 stay resident there.
pub const TABLE_RESIDENT_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCost {
    pub index: usize,
    pub kind: &'static str,
    pub source: String,
    /// Blocking chosen for matmuls.
    pub dataflow: Option<DataflowConfig>,
    pub report: CostReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanCost {
    pub ops: Vec<OpCost>,
    pub total: CostReport,
    /// Two operations per MAC.
    pub operations: u64,
    /// Operations per joule.
    pub efficiency: f64,
}

/// Cost of a pass that touches every element once: one MAC each (zero for
/// layout ops), inputs and output streamed through DRAM and the NoC.
fn streaming(acc: &AcceleratorConfig, macs: u64, moved_elems: u64, extra_l2: u64, extra_dram: u64) -> CostReport {
    let eb = acc.element_bytes as u64;
    let bytes = moved_elems * eb;
    let compute = macs.div_ceil(acc.pe_count as u64);
    report_from_counts(
        acc,
        macs,
        compute,
        bytes,
        bytes + extra_dram,
        2 * bytes,
        2 * bytes + extra_l2 + extra_dram,
    )
}

/// Serial cost of every primitive of `plan`; matmuls get their best
/// blocking from the search.
pub fn simulate_plan(plan: &LoweredPlan, acc: &AcceleratorConfig) -> Result<PlanCost> {
    simulate_plan_with(plan, acc, &SearchOptions::default())
}

pub fn simulate_plan_with(plan: &LoweredPlan, acc: &AcceleratorConfig, opts: &SearchOptions) -> Result<PlanCost> {
    plan.validate()?;
    acc.validate()?;
    let mut acc = acc.clone();
    if plan.is_int8() {
        acc.element_bytes = 1;
    }
    let acc = &acc;
    let table_bytes = plan.table_param_bytes() as u64;
    let mut total = CostReport::zero();
    let mut ops = Vec::with_capacity(plan.primitives.len());
    for (index, p) in plan.primitives.iter().enumerate() {
        let out_len = plan.slots[p.output].len() as u64;
        let in_len: u64 = p.inputs.iter().map(|&s| plan.slots[s].len() as u64).sum();
        let mut dataflow = None;
        let report = match &p.kind {
            PrimKind::MatMulBlock { batch, m, k, n } => {
                let shared = plan.slots[p.inputs[1]].shape.len() == 2;
                let (times, rows) = if shared { (1, batch * m) } else { (*batch, *m) };
                let found = search_blocking_with(rows, *k, *n, acc, opts)
                    .map_err(|e| Error::Infeasible(format!("primitive {index} from '{}': {e}", p.source)))?;
                dataflow = Some(found.dataflow);
                found.report.repeated(times as u64, acc)
            }
            PrimKind::PwlApply { table } => {
                let t = &plan.tables[table];
                let per_fetch = 2 * table_bytes;
                let size = t.parameter_bytes(table_bytes as usize) as u64;
                let resident = size as f64 <= TABLE_RESIDENT_FRACTION * acc.l2_bytes as f64;
                let gather = out_len * per_fetch;
                // a resident table is loaded from DRAM once
                let dram = if resident { size } else { gather };
                streaming(acc, out_len, in_len + out_len, gather, dram)
            }
            PrimKind::ElemAdd | PrimKind::ElemMul | PrimKind::ScalarAffine { .. } => {
                streaming(acc, out_len, in_len + out_len, 0, 0)
            }
            // a reshape only relabels the buffer
            PrimKind::Reshape { .. } => CostReport::zero(),
            PrimKind::Im2col { .. } | PrimKind::Transpose { .. } | PrimKind::Slice { .. } => {
                streaming(acc, 0, in_len + out_len, 0, 0)
            }
        };
        total.accumulate(&report, acc);
        ops.push(OpCost {
            index,
            kind: p.kind.name(),
            source: p.source.clone(),
            dataflow,
            report,
        });
    }
    let operations = 2 * total.macs;
    let efficiency = throughput_per_watt(&total, operations);
    Ok(PlanCost {
        ops,
        total,
        operations,
        efficiency,
    })
}

impl PlanCost {
    /// One row per primitive plus a final `total` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "index",
            "kind",
            "source",
            "dataflow",
            "macs",
            "compute_cycles",
            "noc_cycles",
            "dram_cycles",
            "latency_cycles",
            "latency_s",
            "noc_bytes",
            "dram_bytes",
            "l1_accesses",
            "l2_accesses",
            "energy_mac_j",
            "energy_l1_j",
            "energy_l2_j",
            "energy_dram_j",
            "energy_j",
            "pe_utilization",
            "ops_per_joule",
        ])?;
        let row = |index: String, kind: &str, source: &str, df: String, r: &CostReport, eff: String| -> Vec<String> {
            vec![
                index,
                kind.to_string(),
                source.to_string(),
                df,
                r.macs.to_string(),
                r.compute_cycles.to_string(),
                r.noc_cycles.to_string(),
                r.dram_cycles.to_string(),
                r.latency_cycles.to_string(),
                r.latency_s.to_string(),
                r.noc_bytes.to_string(),
                r.dram_bytes.to_string(),
                r.l1_accesses.to_string(),
                r.l2_accesses.to_string(),
                r.energy.mac_j.to_string(),
                r.energy.l1_j.to_string(),
                r.energy.l2_j.to_string(),
                r.energy.dram_j.to_string(),
                r.energy_j().to_string(),
                r.pe_utilization.to_string(),
                eff,
            ]
        };
        for op in &self.ops {
            let df = op.dataflow.map(|d| d.to_string()).unwrap_or_default();
            w.write_record(row(op.index.to_string(), op.kind, &op.source, df, &op.report, String::new()))?;
        }
        w.write_record(row(
            "total".into(),
            "",
            "",
            String::new(),
            &self.total,
            self.efficiency.to_string(),
        ))?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}
