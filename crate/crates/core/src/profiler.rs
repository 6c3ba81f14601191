//! Input-range profiling of nonlinear operators on calibration data.
//!
//! Every nonlinear operator gets one or more probes, keyed by what its
//! lowered form feeds into a table:
//!
//! | node        | key            | observed value          |
//! |-------------|----------------|-------------------------|
//! | gelu        | `id`           | node input              |
//! | relu        | `id`           | node input              |
//! | max_pool    | `id`           | node input              |
//! | softmax     | `id.exp`       | input minus its row max |
//! | softmax     | `id.recip`     | row sum of the exps     |
//! | layer_norm  | `id.rsqrt`     | variance plus eps       |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{
    execute_all, moments, normalize_axis, softmax_denominators, softmax_shifted, Graph, NodeKind,
    TensorMap,
};
use crate::pwl::NonlinearFunc;

pub const RANGE_FORMAT_VERSION: u32 = 1;

/// Fraction of the observed width added on each side of a range.
pub const DEFAULT_PADDING: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum ClipPolicy {
    MinMax,
    /// Keeps the `p`-th and `(100 - p)`-th percentiles.
    Percentile { p: f64 },
}

impl fmt::Display for ClipPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClipPolicy::MinMax => write!(f, "minmax"),
            ClipPolicy::Percentile { p } => write!(f, "percentile({p})"),
        }
    }
}

impl FromStr for ClipPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "minmax" {
            return Ok(ClipPolicy::MinMax);
        }
        let inner = s
            .strip_prefix("percentile(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("percentile:"))
            .ok_or_else(|| Error::arg(format!("unknown clip policy '{s}'")))?;
        let p: f64 = inner
            .parse()
            .map_err(|_| Error::arg(format!("bad percentile '{inner}'")))?;
        let policy = ClipPolicy::Percentile { p };
        policy.validate()?;
        Ok(policy)
    }
}

impl ClipPolicy {
    pub fn validate(&self) -> Result<()> {
        if let ClipPolicy::Percentile { p } = self {
            if !(0.0..50.0).contains(p) {
                return Err(Error::arg(format!("percentile must be in [0, 50), got {p}")));
            }
        }
        Ok(())
    }
}

/// What a probe's values are fed into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    /// Exact piecewise-linear: no table is needed.
    Relu,
    MaxPool,
    Table(NonlinearFunc),
}

impl ProbeTarget {
    pub fn table_function(self) -> Option<NonlinearFunc> {
        match self {
            ProbeTarget::Table(f) => Some(f),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeEntry {
    pub node: String,
    pub target: ProbeTarget,
    pub observed_min: f64,
    pub observed_max: f64,
    /// Range after clipping and padding.
    pub r_min: f64,
    pub r_max: f64,
    pub samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeReport {
    pub version: u32,
    #[serde(flatten)]
    pub policy: ClipPolicy,
    pub padding: f64,
    pub ranges: BTreeMap<String, RangeEntry>,
}

impl RangeReport {
    pub fn get(&self, key: &str) -> Option<&RangeEntry> {
        self.ranges.get(key)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("range report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: RangeReport = serde_json::from_str(s)?;
        if r.version != RANGE_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported range report version {}", r.version)));
        }
        for (k, e) in &r.ranges {
            if !(e.r_min <= e.r_max && e.observed_min <= e.observed_max) {
                return Err(Error::Format(format!("range '{k}' has min above max")));
            }
        }
        Ok(r)
    }
}

pub fn exp_key(node: &str) -> String {
    format!("{node}.exp")
}

pub fn recip_key(node: &str) -> String {
    format!("{node}.recip")
}

pub fn rsqrt_key(node: &str) -> String {
    format!("{node}.rsqrt")
}

/// Probes a node contributes, as `(key, target)`.
pub fn probes_for(id: &str, kind: &NodeKind) -> Vec<(String, ProbeTarget)> {
    match kind {
        NodeKind::Relu => vec![(id.to_string(), ProbeTarget::Relu)],
        NodeKind::MaxPool { .. } => vec![(id.to_string(), ProbeTarget::MaxPool)],
        NodeKind::Gelu => vec![(id.to_string(), ProbeTarget::Table(NonlinearFunc::Gelu))],
        NodeKind::Softmax { .. } => vec![
            (exp_key(id), ProbeTarget::Table(NonlinearFunc::Exp)),
            (recip_key(id), ProbeTarget::Table(NonlinearFunc::Reciprocal)),
        ],
        NodeKind::LayerNorm { .. } => vec![(rsqrt_key(id), ProbeTarget::Table(NonlinearFunc::Rsqrt))],
        _ => Vec::new(),
    }
}

/// Values observed for one probe across some batches.
#[derive(Debug, Clone)]
struct Observation {
    min: f64,
    max: f64,
    count: u64,
    // kept only under the percentile policy
    values: Vec<f64>,
}

impl Observation {
    fn empty() -> Self {
        Observation {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            count: 0,
            values: Vec::new(),
        }
    }

    fn push_all(&mut self, vals: impl Iterator<Item = f32>, keep: bool) {
        for v in vals {
            let v = v as f64;
            self.min = self.min.min(v);
            self.max = self.max.max(v);
            self.count += 1;
            if keep {
                self.values.push(v);
            }
        }
    }

    fn merge(mut self, other: Observation) -> Observation {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count += other.count;
        self.values.extend(other.values);
        self
    }
}

/// Linear-interpolated percentile of sorted data, `p` in `[0, 100]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Widens `[lo, hi]` by `padding` of its width per side, keeping the result
/// inside the domain of `target`.
pub fn pad_range(lo: f64, hi: f64, padding: f64, target: ProbeTarget) -> (f64, f64) {
    let width = hi - lo;
    let (mut a, b) = if width > 0.0 {
        (lo - padding * width, hi + padding * width)
    } else {
        let d = (1e-3 * lo.abs()).max(1e-3);
        (lo - d, hi + d)
    };
    let positive_only = matches!(
        target,
        ProbeTarget::Table(NonlinearFunc::Reciprocal | NonlinearFunc::Rsqrt | NonlinearFunc::Sqrt)
    );
    if positive_only && a <= 0.0 && lo > 0.0 {
        // stay clear of the pole: go halfway from the observed minimum towards zero
        a = 0.5 * lo;
    }
    (a, b)
}

fn observe_batch(
    graph: &Graph,
    batch: &TensorMap,
    keep: bool,
) -> Result<BTreeMap<String, Observation>> {
    let values = execute_all(graph, batch)?;
    let mut obs: BTreeMap<String, Observation> = BTreeMap::new();
    for node in &graph.nodes {
        if !node.kind.is_nonlinear() {
            continue;
        }
        // nodes no output depends on are never evaluated
        let Some(x) = values.get(&node.inputs[0]) else { continue };
        if !values.contains_key(&node.id) {
            continue;
        }
        let mut record = |key: String, vals: &mut dyn Iterator<Item = f32>| {
            obs.entry(key).or_insert_with(Observation::empty).push_all(vals, keep);
        };
        match &node.kind {
            NodeKind::Relu | NodeKind::Gelu | NodeKind::MaxPool { .. } => {
                record(node.id.clone(), &mut x.data().iter().copied())
            }
            NodeKind::Softmax { axis } => {
                let a = normalize_axis(*axis, x.rank()).expect("validated axis");
                record(exp_key(&node.id), &mut softmax_shifted(x, a).data().iter().copied());
                record(recip_key(&node.id), &mut softmax_denominators(x, a).into_iter());
            }
            NodeKind::LayerNorm { axis, eps } => {
                let a = normalize_axis(*axis, x.rank()).expect("validated axis");
                let (_, vars) = moments(x, a);
                record(rsqrt_key(&node.id), &mut vars.into_iter().map(|v| v + eps));
            }
            _ => {}
        }
    }
    Ok(obs)
}

/// Runs the reference graph on every calibration batch and records the input
/// range of each nonlinear operator.
pub fn profile_ranges(graph: &Graph, calibration: &[TensorMap], policy: ClipPolicy) -> Result<RangeReport> {
    profile_ranges_padded(graph, calibration, policy, DEFAULT_PADDING)
}

pub fn profile_ranges_padded(
    graph: &Graph,
    calibration: &[TensorMap],
    policy: ClipPolicy,
    padding: f64,
) -> Result<RangeReport> {
    policy.validate()?;
    if !(padding >= 0.0 && padding.is_finite()) {
        return Err(Error::arg(format!("padding must be >= 0, got {padding}")));
    }
    if calibration.is_empty() {
        return Err(Error::arg("calibration set is empty"));
    }
    if let Some(d) = graph.validate().first() {
        return Err(Error::structural(d.to_string()));
    }
    let keep = matches!(policy, ClipPolicy::Percentile { .. });
    let per_batch: Vec<BTreeMap<String, Observation>> = calibration
        .par_iter()
        .map(|b| observe_batch(graph, b, keep))
        .collect::<Result<_>>()?;
    // merge in batch order; min/max/count are order-free and values get sorted
    let mut merged: BTreeMap<String, Observation> = BTreeMap::new();
    for batch in per_batch {
        for (k, o) in batch {
            let e = merged.remove(&k).unwrap_or_else(Observation::empty);
            merged.insert(k, e.merge(o));
        }
    }

    let mut ranges = BTreeMap::new();
    for node in &graph.nodes {
        for (key, target) in probes_for(&node.id, &node.kind) {
            let obs = merged
                .remove(&key)
                .filter(|o| o.count > 0)
                .ok_or_else(|| {
                    Error::arg(format!(
                        "nonlinear node '{}' ({}) is not reached by the calibration data",
                        node.id,
                        node.kind.name()
                    ))
                })?;
            if !(obs.min.is_finite() && obs.max.is_finite()) {
                return Err(Error::Numerical(format!(
                    "probe '{key}' observed non-finite values"
                )));
            }
            let (lo, hi) = match policy {
                ClipPolicy::MinMax => (obs.min, obs.max),
                ClipPolicy::Percentile { p } => {
                    let mut v = obs.values;
                    v.sort_by(f64::total_cmp);
                    (percentile(&v, p), percentile(&v, 100.0 - p))
                }
            };
            let (r_min, r_max) = pad_range(lo, hi, padding, target);
            ranges.insert(
                key,
                RangeEntry {
                    node: node.id.clone(),
                    target,
                    observed_min: lo,
                    observed_max: hi,
                    r_min,
                    r_max,
                    samples: obs.count,
                },
            );
        }
    }
    Ok(RangeReport {
        version: RANGE_FORMAT_VERSION,
        policy,
        padding,
        ranges,
    })
}

/// Wraps a single-input tensor batch list into calibration maps.
pub fn single_input_batches(name: &str, batches: Vec<crate::ir::Tensor>) -> Vec<TensorMap> {
    batches
        .into_iter()
        .map(|t| {
            let mut m = TensorMap::new();
            m.insert(name.to_string(), t);
            m
        })
        .collect()
}
