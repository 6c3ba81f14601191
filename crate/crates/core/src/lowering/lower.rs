use std::collections::BTreeMap;

use super::plan::{ConstantInfo, LoweredPlan, NamedSlot, PrimKind, Primitive, SlotId, SlotInfo};
use crate::error::{Error, Result};
use crate::ir::{normalize_axis, Graph, Node, NodeKind, Tensor};
use crate::profiler::{probes_for, ProbeTarget, RangeReport};
use crate::pwl::{build_elastic, fit_uniform, fit_uniform_corrected, ElasticConfig, PwlTable};

/// Key of the shared exact ReLU table.
pub const RELU_TABLE: &str = "relu";

#[derive(Debug, Clone, Default)]
pub struct LowerOptions {
    /// Profiled ranges; tables that do not cover them produce warnings.
    pub ranges: Option<RangeReport>,
}

/// How to build a table for every profiled nonlinear operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TableSpec {
    /// Equal-width chord fit; `corrected` adds vertical bias correction.
    Uniform { segments: usize, corrected: bool },
    Elastic(ElasticConfig),
}

/// Builds a table for every probe that needs one, over its profiled range.
pub fn tables_from_ranges(ranges: &RangeReport, spec: TableSpec) -> Result<BTreeMap<String, PwlTable>> {
    let mut out = BTreeMap::new();
    for (key, e) in &ranges.ranges {
        let Some(f) = e.target.table_function() else { continue };
        let t = match spec {
            TableSpec::Uniform {
                segments,
                corrected: false,
            } => fit_uniform(&f, e.r_min, e.r_max, segments)?,
            TableSpec::Uniform {
                segments,
                corrected: true,
            } => fit_uniform_corrected(&f, e.r_min, e.r_max, segments, 0.0)?,
            TableSpec::Elastic(cfg) => build_elastic(&f, e.r_min, e.r_max, &cfg)?,
        };
        out.insert(key.clone(), t);
    }
    Ok(out)
}

struct Lowerer<'a> {
    plan: LoweredPlan,
    tables: &'a BTreeMap<String, PwlTable>,
    source: String,
}

impl Lowerer<'_> {
    fn shape(&self, s: SlotId) -> &[usize] {
        &self.plan.slots[s].shape
    }

    fn new_slot(&mut self, name: String, shape: Vec<usize>, constant: Option<ConstantInfo>) -> SlotId {
        self.plan.slots.push(SlotInfo { name, shape, constant });
        self.plan.slots.len() - 1
    }

    fn constant(&mut self, label: &str, t: Tensor, trainable: bool) -> SlotId {
        let name = format!("{}.{label}", self.source);
        let s = self.new_slot(name, t.shape().to_vec(), Some(ConstantInfo { trainable }));
        self.plan.constants.insert(s, t);
        s
    }

    fn emit(&mut self, kind: PrimKind, inputs: Vec<SlotId>, shape: Vec<usize>) -> SlotId {
        let n = self.plan.primitives.len();
        let out = self.new_slot(format!("{}:{n}", self.source), shape, None);
        self.plan.primitives.push(Primitive {
            kind,
            inputs,
            output: out,
            source: self.source.clone(),
        });
        out
    }

    /// `a @ b` where `b` is `[k, n]` (shared) or carries `a`'s batch dims.
    fn matmul(&mut self, a: SlotId, b: SlotId) -> SlotId {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let k = *ash.last().unwrap();
        let n = *bsh.last().unwrap();
        let (batch, m) = if bsh.len() == 2 {
            (1, ash[..ash.len() - 1].iter().product())
        } else {
            (ash[..ash.len() - 2].iter().product(), ash[ash.len() - 2])
        };
        let mut out = ash.clone();
        *out.last_mut().unwrap() = n;
        self.emit(PrimKind::MatMulBlock { batch, m, k, n }, vec![a, b], out)
    }

    fn binary(&mut self, kind: PrimKind, a: SlotId, b: SlotId) -> SlotId {
        let shape = self.shape(a).to_vec();
        self.emit(kind, vec![a, b], shape)
    }

    fn affine(&mut self, x: SlotId, scale: f32, shift: f32) -> SlotId {
        let shape = self.shape(x).to_vec();
        self.emit(PrimKind::ScalarAffine { scale, shift }, vec![x], shape)
    }

    fn pwl(&mut self, x: SlotId, table: &str) -> SlotId {
        let shape = self.shape(x).to_vec();
        self.emit(PrimKind::PwlApply { table: table.to_string() }, vec![x], shape)
    }

    fn reshape(&mut self, x: SlotId, shape: Vec<usize>) -> SlotId {
        if self.shape(x) == shape.as_slice() {
            return x;
        }
        self.emit(PrimKind::Reshape { shape: shape.clone() }, vec![x], shape)
    }

    fn transpose(&mut self, x: SlotId, perm: Vec<usize>) -> SlotId {
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return x;
        }
        let shape = perm.iter().map(|&p| self.shape(x)[p]).collect();
        self.emit(PrimKind::Transpose { perm }, vec![x], shape)
    }

    fn slice(&mut self, x: SlotId, start: usize, len: usize) -> SlotId {
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        self.emit(PrimKind::Slice { start, len }, vec![x], shape)
    }

    fn relu(&mut self, x: SlotId) -> SlotId {
        self.plan
            .tables
            .entry(RELU_TABLE.to_string())
            .or_insert_with(PwlTable::relu);
        self.pwl(x, RELU_TABLE)
    }

    /// Maximum over the last axis, kept as a length-1 axis.
    ///
    /// Each level compares two overlapping halves with `max(a, b) = a + relu(b - a)`.
    fn row_max(&mut self, x: SlotId) -> SlotId {
        let mut cur = x;
        let mut len = *self.shape(x).last().unwrap();
        while len > 1 {
            let h = len.div_ceil(2);
            let a = self.slice(cur, 0, h);
            let b = self.slice(cur, len - h, h);
            let neg_a = self.affine(a, -1.0, 0.0);
            let diff = self.binary(PrimKind::ElemAdd, b, neg_a);
            let r = self.relu(diff);
            cur = self.binary(PrimKind::ElemAdd, a, r);
            len = h;
        }
        cur
    }

    fn table(&mut self, key: &str, expect: &str) -> Result<String> {
        let t = self.tables.get(key).ok_or_else(|| {
            Error::arg(format!("node '{}' needs a '{expect}' table under key '{key}'", self.source))
        })?;
        if t.function() != expect {
            return Err(Error::arg(format!(
                "table '{key}' approximates {}, node '{}' needs {expect}",
                t.function(),
                self.source
            )));
        }
        self.plan.tables.insert(key.to_string(), t.clone());
        Ok(key.to_string())
    }

    /// Moves `axis` last, applies `f`, and moves it back.
    fn along_axis(&mut self, x: SlotId, axis: usize, f: impl FnOnce(&mut Self, SlotId) -> Result<SlotId>) -> Result<SlotId> {
        let rank = self.shape(x).len();
        let mut perm: Vec<usize> = (0..rank).filter(|&d| d != axis).collect();
        perm.push(axis);
        let mut inv = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let moved = self.transpose(x, perm);
        let y = f(self, moved)?;
        Ok(self.transpose(y, inv))
    }

    fn lower_node(&mut self, node: &Node, args: &[SlotId]) -> Result<SlotId> {
        let x = args[0];
        let xs = self.shape(x).to_vec();
        let param = |name: &str| node.params.get(name).cloned();
        Ok(match &node.kind {
            NodeKind::MatMul => self.matmul(x, args[1]),
            NodeKind::Dense => {
                let w = self.constant("weight", param("weight").unwrap(), true);
                let row = if xs.len() == 1 { self.reshape(x, vec![1, xs[0]]) } else { x };
                let mut y = self.matmul(row, w);
                if let Some(b) = param("bias") {
                    let b = self.constant("bias", b, true);
                    y = self.binary(PrimKind::ElemAdd, y, b);
                }
                if xs.len() == 1 {
                    let n = *self.shape(y).last().unwrap();
                    y = self.reshape(y, vec![n]);
                }
                y
            }
            NodeKind::Conv2d { stride, pad, kernel } => {
                let wt = param("weight").unwrap();
                let f = wt.shape()[0];
                let ck = wt.len() / f;
                let w = self.constant("weight", wt, true);
                let w2 = self.reshape(w, vec![f, ck]);
                let wmat = self.transpose(w2, vec![1, 0]);
                let cols_shape = super::plan::infer_shape(
                    &PrimKind::Im2col {
                        kernel: *kernel,
                        stride: *stride,
                        pad: *pad,
                    },
                    &[&xs],
                )
                .map_err(Error::structural)?;
                let patches = self.emit(
                    PrimKind::Im2col {
                        kernel: *kernel,
                        stride: *stride,
                        pad: *pad,
                    },
                    vec![x],
                    cols_shape,
                );
                let mut y = self.matmul(patches, wmat);
                if let Some(b) = param("bias") {
                    let b = self.constant("bias", b, true);
                    y = self.binary(PrimKind::ElemAdd, y, b);
                }
                let rows = self.shape(y)[0];
                let (ho, wo) = crate::ir::conv_output_hw(xs[2], xs[3], *kernel, *stride, *pad).unwrap();
                debug_assert_eq!(rows, xs[0] * ho * wo);
                let nhwc = self.reshape(y, vec![xs[0], ho, wo, f]);
                self.transpose(nhwc, vec![0, 3, 1, 2])
            }
            NodeKind::AddBias => {
                let b = self.constant("bias", param("bias").unwrap(), true);
                self.binary(PrimKind::ElemAdd, x, b)
            }
            NodeKind::ElemAdd => self.binary(PrimKind::ElemAdd, x, args[1]),
            NodeKind::ElemMul => self.binary(PrimKind::ElemMul, x, args[1]),
            NodeKind::Relu => self.relu(x),
            NodeKind::Gelu => {
                let t = self.table(&node.id, "gelu")?;
                self.pwl(x, &t)
            }
            NodeKind::Softmax { axis } => {
                let a = normalize_axis(*axis, xs.len()).unwrap();
                let exp = self.table(&crate::profiler::exp_key(&node.id), "exp")?;
                let recip = self.table(&crate::profiler::recip_key(&node.id), "reciprocal")?;
                self.along_axis(x, a, |l, v| {
                    let c = *l.shape(v).last().unwrap();
                    let mx = l.row_max(v);
                    let neg = l.affine(mx, -1.0, 0.0);
                    let shifted = l.binary(PrimKind::ElemAdd, v, neg);
                    let e = l.pwl(shifted, &exp);
                    let ones = l.constant("ones", Tensor::filled(vec![c, 1], 1.0), false);
                    let sum = l.matmul(e, ones);
                    let r = l.pwl(sum, &recip);
                    Ok(l.binary(PrimKind::ElemMul, e, r))
                })?
            }
            NodeKind::LayerNorm { axis, eps } => {
                let a = normalize_axis(*axis, xs.len()).unwrap();
                let rsqrt = self.table(&crate::profiler::rsqrt_key(&node.id), "rsqrt")?;
                let gamma = param("gamma");
                let beta = param("beta");
                self.along_axis(x, a, |l, v| {
                    let c = *l.shape(v).last().unwrap();
                    let avg = l.constant("mean", Tensor::filled(vec![c, 1], 1.0 / c as f32), false);
                    let mean = l.matmul(v, avg);
                    let neg = l.affine(mean, -1.0, 0.0);
                    let centered = l.binary(PrimKind::ElemAdd, v, neg);
                    let sq = l.binary(PrimKind::ElemMul, centered, centered);
                    let var = l.matmul(sq, avg);
                    let shifted = l.affine(var, 1.0, *eps);
                    let inv = l.pwl(shifted, &rsqrt);
                    let mut y = l.binary(PrimKind::ElemMul, centered, inv);
                    if let Some(g) = gamma {
                        let g = l.constant("gamma", g, true);
                        y = l.binary(PrimKind::ElemMul, y, g);
                    }
                    if let Some(b) = beta {
                        let b = l.constant("beta", b, true);
                        y = l.binary(PrimKind::ElemAdd, y, b);
                    }
                    Ok(y)
                })?
            }
            NodeKind::AvgPool { window } => {
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (ho, wo) = (h / window, w / window);
                let inv = 1.0 / (window * window) as f32;
                let mut pool = Tensor::zeros(vec![h * w, ho * wo]);
                for oy in 0..ho {
                    for ox in 0..wo {
                        for ky in 0..*window {
                            for kx in 0..*window {
                                let src = (oy * window + ky) * w + ox * window + kx;
                                pool.data_mut()[src * ho * wo + oy * wo + ox] = inv;
                            }
                        }
                    }
                }
                let p = self.constant("pool", pool, false);
                let flat = self.reshape(x, vec![n * c, h * w]);
                let y = self.matmul(flat, p);
                self.reshape(y, vec![n, c, ho, wo])
            }
            NodeKind::MaxPool { window } => {
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (ho, wo) = (h / window, w / window);
                let win = window * window;
                let shape = vec![n * ho * wo, c * win];
                let patches = self.emit(
                    PrimKind::Im2col {
                        kernel: *window,
                        stride: *window,
                        pad: 0,
                    },
                    vec![x],
                    shape,
                );
                let grouped = self.reshape(patches, vec![n * ho * wo, c, win]);
                let mx = self.row_max(grouped);
                let nhwc = self.reshape(mx, vec![n, ho, wo, c]);
                self.transpose(nhwc, vec![0, 3, 1, 2])
            }
            NodeKind::Transpose { perm } => {
                let shape = perm.iter().map(|&p| xs[p]).collect();
                self.emit(PrimKind::Transpose { perm: perm.clone() }, vec![x], shape)
            }
            NodeKind::Reshape { shape } => self.emit(PrimKind::Reshape { shape: shape.clone() }, vec![x], shape.clone()),
        })
    }
}

/// Rewrites `graph` into matrix-unit primitives. Tables are looked up by
/// probe key (see [`crate::profiler`]); ReLU and max-pooling need none.
pub fn lower_graph(graph: &Graph, tables: &BTreeMap<String, PwlTable>, opts: &LowerOptions) -> Result<LoweredPlan> {
    if let Some(d) = graph.validate().first() {
        return Err(Error::structural(d.to_string()));
    }
    let mut l = Lowerer {
        plan: LoweredPlan::empty(),
        tables,
        source: String::new(),
    };
    let mut value: BTreeMap<String, SlotId> = BTreeMap::new();
    for gi in &graph.inputs {
        let s = l.new_slot(gi.name.clone(), gi.shape.clone(), None);
        l.plan.inputs.push(NamedSlot {
            name: gi.name.clone(),
            slot: s,
        });
        value.insert(gi.name.clone(), s);
    }
    let needed = crate::ir::needed_nodes(graph);
    for i in graph.topological_order()? {
        let node = &graph.nodes[i];
        if !needed[i] {
            continue;
        }
        l.source = node.id.clone();
        let args: Vec<SlotId> = node.inputs.iter().map(|d| value[d]).collect();
        let out = l.lower_node(node, &args)?;
        value.insert(node.id.clone(), out);
        l.plan.node_outputs.insert(node.id.clone(), out);
    }
    for o in &graph.outputs {
        l.plan.outputs.push(NamedSlot {
            name: o.clone(),
            slot: value[o],
        });
    }
    let mut plan = l.plan;
    if let Some(ranges) = &opts.ranges {
        plan.warnings = coverage_warnings(graph, &plan, ranges);
    }
    plan.validate()?;
    Ok(plan)
}

fn coverage_warnings(graph: &Graph, plan: &LoweredPlan, ranges: &RangeReport) -> Vec<String> {
    let mut out = Vec::new();
    for node in &graph.nodes {
        for (key, target) in probes_for(&node.id, &node.kind) {
            if !matches!(target, ProbeTarget::Table(_)) {
                continue;
            }
            let (Some(t), Some(r)) = (plan.tables.get(&key), ranges.get(&key)) else { continue };
            if t.r_min() > r.r_min || t.r_max() < r.r_max {
                out.push(format!(
                    "table '{key}' covers [{}, {}] but the profiled range is [{}, {}]; outside inputs use extension segments",
                    t.r_min(),
                    t.r_max(),
                    r.r_min,
                    r.r_max
                ));
            }
        }
    }
    out
}
