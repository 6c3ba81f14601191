use std::collections::BTreeMap;

use serde::Serialize;

use super::exec::{execute_plan_slots, PwlMode};
use super::plan::LoweredPlan;
use crate::error::{Error, Result};
use crate::ir::{execute_all, Graph, TensorMap};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableBytes {
    pub key: String,
    pub function: String,
    pub segments: usize,
    pub bytes: usize,
}

/// Storage the tables add on top of the network's own parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterAccounting {
    pub bytes_per_param: usize,
    pub tables: Vec<TableBytes>,
    pub extra_bytes: usize,
    /// Network weights at the plan's weight width (4 bytes FP32, 1 byte INT8).
    pub network_bytes: usize,
    /// `extra_bytes / network_bytes`, 0 without network weights.
    pub ratio: f64,
}

/// `segments * 2 * bytes` per distinct table: 4-byte parameters in FP32
/// plans, 2-byte fixed point in INT8 plans.
pub fn extra_parameter_bytes(plan: &LoweredPlan) -> ParameterAccounting {
    let bpp = plan.table_param_bytes();
    let tables: Vec<TableBytes> = plan
        .tables
        .iter()
        .map(|(k, t)| TableBytes {
            key: k.clone(),
            function: t.function().to_string(),
            segments: t.segments(),
            bytes: t.parameter_bytes(bpp),
        })
        .collect();
    let extra_bytes = tables.iter().map(|t| t.bytes).sum();
    let network_bytes = plan.network_parameter_count() * plan.weight_bytes();
    let ratio = if network_bytes == 0 {
        0.0
    } else {
        extra_bytes as f64 / network_bytes as f64
    };
    ParameterAccounting {
        bytes_per_param: bpp,
        tables,
        extra_bytes,
        network_bytes,
        ratio,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorStats {
    pub name: String,
    pub max_abs: f64,
    pub mean_abs: f64,
    /// `max_abs` over the largest reference magnitude.
    pub rel: f64,
}

#[derive(Debug, Clone, Default)]
struct Acc {
    max_abs: f64,
    sum_abs: f64,
    count: usize,
    ref_peak: f64,
}

impl Acc {
    fn add(&mut self, reference: &[f32], actual: &[f32]) {
        for (&r, &a) in reference.iter().zip(actual) {
            let d = (r as f64 - a as f64).abs();
            // NaN must not hide behind max()
            self.max_abs = if d.is_nan() { f64::NAN } else { self.max_abs.max(d) };
            self.sum_abs += d;
            self.ref_peak = self.ref_peak.max((r as f64).abs());
        }
        self.count += reference.len();
    }

    fn finish(self, name: &str) -> ErrorStats {
        let rel = if self.max_abs == 0.0 {
            0.0
        } else if self.ref_peak > 0.0 {
            self.max_abs / self.ref_peak
        } else {
            f64::INFINITY
        };
        ErrorStats {
            name: name.to_string(),
            max_abs: self.max_abs,
            mean_abs: self.sum_abs / self.count.max(1) as f64,
            rel,
        }
    }
}

/// Plan-versus-reference error per output and per lowered node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityReport {
    pub samples: usize,
    pub outputs: Vec<ErrorStats>,
    pub nodes: Vec<ErrorStats>,
}

impl FidelityReport {
    pub fn max_abs(&self) -> f64 {
        self.outputs.iter().fold(0.0, |m, o| if o.max_abs.is_nan() { f64::NAN } else { m.max(o.max_abs) })
    }

    pub fn output(&self, name: &str) -> Option<&ErrorStats> {
        self.outputs.iter().find(|o| o.name == name)
    }

    pub fn node(&self, name: &str) -> Option<&ErrorStats> {
        self.nodes.iter().find(|o| o.name == name)
    }

    /// CSV with columns `scope,name,max_abs,mean_abs,rel`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scope", "name", "max_abs", "mean_abs", "rel"])?;
        for (scope, rows) in [("output", &self.outputs), ("node", &self.nodes)] {
            for r in rows {
                w.write_record([
                    scope,
                    &r.name,
                    &r.max_abs.to_string(),
                    &r.mean_abs.to_string(),
                    &r.rel.to_string(),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Runs the reference graph and the plan on every input set and compares them.
pub fn fidelity_report(graph: &Graph, plan: &LoweredPlan, inputs: &[TensorMap]) -> Result<FidelityReport> {
    if inputs.is_empty() {
        return Err(Error::arg("fidelity report needs at least one input set"));
    }
    let mut outs: BTreeMap<&str, Acc> = BTreeMap::new();
    let mut nodes: BTreeMap<&str, Acc> = BTreeMap::new();
    for sample in inputs {
        let reference = execute_all(graph, sample)?;
        let slots = execute_plan_slots(plan, sample, PwlMode::Table)?;
        for o in &plan.outputs {
            let r = reference
                .get(&o.name)
                .ok_or_else(|| Error::structural(format!("graph has no output '{}'", o.name)))?;
            outs.entry(&o.name).or_default().add(r.data(), slots[o.slot].data());
        }
        for (id, &s) in &plan.node_outputs {
            if let Some(r) = reference.get(id) {
                nodes.entry(id).or_default().add(r.data(), slots[s].data());
            }
        }
    }
    let order: Vec<&str> = plan.outputs.iter().map(|o| o.name.as_str()).collect();
    Ok(FidelityReport {
        samples: inputs.len(),
        outputs: order.iter().map(|n| outs.remove(n).unwrap_or_default().finish(n)).collect(),
        nodes: graph
            .nodes
            .iter()
            .filter_map(|n| nodes.remove(n.id.as_str()).map(|a| a.finish(&n.id)))
            .collect(),
    })
}
