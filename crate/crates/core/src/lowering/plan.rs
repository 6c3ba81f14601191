use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::io::{weights_from_bytes, weights_to_bytes};
use crate::ir::{conv_output_hw, is_permutation, Tensor};
use crate::pwl::PwlTable;

pub const PLAN_FORMAT_VERSION: u32 = 1;

pub type SlotId = usize;

/// The closed set of operations a lowered plan may contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "attrs", rename_all = "snake_case")]
pub enum PrimKind {
    /// `batch` independent `[m, k] @ [k, n]` products. The right operand is
    /// either shared (`[k, n]`) or has its own block per batch entry.
    #[serde(rename = "matmul_block")]
    MatMulBlock {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `a + b`, with `b` broadcast against `a` from the right.
    ElemAdd,
    /// `a * b`, with `b` broadcast against `a` from the right.
    ElemMul,
    /// `scale * x + shift`.
    ScalarAffine {
        scale: f32,
        shift: f32,
    },
    /// Table lookup: segment index, gather `(k, b)`, multiply-add.
    PwlApply {
        table: String,
    },
    /// `[N, C, H, W] -> [N * Ho * Wo, C * kernel^2]` patch matrix; columns are
    /// ordered channel, kernel row, kernel column.
    Im2col {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Transpose {
        perm: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// `len` entries of the last axis starting at `start`.
    Slice {
        start: usize,
        len: usize,
    },
}

impl PrimKind {
    pub fn name(&self) -> &'static str {
        match self {
            PrimKind::MatMulBlock { .. } => "matmul_block",
            PrimKind::ElemAdd => "elem_add",
            PrimKind::ElemMul => "elem_mul",
            PrimKind::ScalarAffine { .. } => "scalar_affine",
            PrimKind::PwlApply { .. } => "pwl_apply",
            PrimKind::Im2col { .. } => "im2col",
            PrimKind::Transpose { .. } => "transpose",
            PrimKind::Reshape { .. } => "reshape",
            PrimKind::Slice { .. } => "slice",
        }
    }

    /// Every kind string a plan may contain.
    pub const NAMES: [&'static str; 9] = [
        "matmul_block",
        "elem_add",
        "elem_mul",
        "scalar_affine",
        "pwl_apply",
        "im2col",
        "transpose",
        "reshape",
        "slice",
    ];

    pub fn is_layout(&self) -> bool {
        matches!(
            self,
            PrimKind::Im2col { .. } | PrimKind::Transpose { .. } | PrimKind::Reshape { .. } | PrimKind::Slice { .. }
        )
    }

    fn arity(&self) -> usize {
        match self {
            PrimKind::MatMulBlock { .. } | PrimKind::ElemAdd | PrimKind::ElemMul => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub kind: PrimKind,
    pub inputs: Vec<SlotId>,
    pub output: SlotId,
    /// Id of the graph node this primitive was lowered from.
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstantInfo {
    /// Network parameter (as opposed to a constant the lowering generated).
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotInfo {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<ConstantInfo>,
}

impl SlotInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSlot {
    pub name: String,
    pub slot: SlotId,
}

/// 16-bit fixed-point storage of one table: `value = q * 2^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableQuant {
    pub exponent: i32,
}

/// Symmetric per-tensor INT8 for every matmul operand, with 32-bit
/// accumulation, and 16-bit fixed-point table parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Int8Config {
    /// Scale of each matmul operand slot.
    pub scales: BTreeMap<SlotId, f32>,
    pub tables: BTreeMap<String, TableQuant>,
}

/// A graph rewritten into matrix-unit primitives over numbered slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoweredPlan {
    pub version: u32,
    pub inputs: Vec<NamedSlot>,
    pub outputs: Vec<NamedSlot>,
    pub slots: Vec<SlotInfo>,
    pub primitives: Vec<Primitive>,
    pub tables: BTreeMap<String, PwlTable>,
    /// Slot holding each lowered graph node's value.
    pub node_outputs: BTreeMap<String, SlotId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub int8: Option<Int8Config>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants_file: Option<String>,
    #[serde(skip)]
    pub constants: BTreeMap<SlotId, Tensor>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len()
        && b
            .iter()
            .rev()
            .zip(a.iter().rev())
            .all(|(&bd, &ad)| bd == ad || bd == 1)
}

/// Output shape a primitive produces from its operand shapes.
pub fn infer_shape(kind: &PrimKind, ins: &[&[usize]]) -> std::result::Result<Vec<usize>, String> {
    if ins.len() != kind.arity() {
        return Err(format!("{} takes {} operand(s), got {}", kind.name(), kind.arity(), ins.len()));
    }
    let a = ins[0];
    match kind {
        PrimKind::MatMulBlock { batch, m, k, n } => {
            let b = ins[1];
            let a_len: usize = a.iter().product();
            let b_len: usize = b.iter().product();
            if a_len != batch * m * k || a.last() != Some(k) {
                return Err(format!("left operand {a:?} is not {batch} x [{m}, {k}]"));
            }
            if b.last() != Some(n) || (b_len != k * n && b_len != batch * k * n) {
                return Err(format!("right operand {b:?} is not [{k}, {n}] per block"));
            }
            let mut out = a.to_vec();
            *out.last_mut().unwrap() = *n;
            Ok(out)
        }
        PrimKind::ElemAdd | PrimKind::ElemMul => {
            if !broadcastable(a, ins[1]) {
                return Err(format!("{:?} does not broadcast onto {a:?}", ins[1]));
            }
            Ok(a.to_vec())
        }
        PrimKind::ScalarAffine { .. } | PrimKind::PwlApply { .. } => Ok(a.to_vec()),
        PrimKind::Im2col { kernel, stride, pad } => {
            if a.len() != 4 {
                return Err(format!("im2col needs an NCHW operand, got {a:?}"));
            }
            let (ho, wo) = conv_output_hw(a[2], a[3], *kernel, *stride, *pad)
                .ok_or_else(|| format!("kernel {kernel} does not fit {a:?} with pad {pad}"))?;
            Ok(vec![a[0] * ho * wo, a[1] * kernel * kernel])
        }
        PrimKind::Transpose { perm } => {
            if !is_permutation(perm, a.len()) {
                return Err(format!("{perm:?} is not a permutation of rank {}", a.len()));
            }
            Ok(perm.iter().map(|&p| a[p]).collect())
        }
        PrimKind::Reshape { shape } => {
            let from: usize = a.iter().product();
            let to: usize = shape.iter().product();
            if from != to || shape.is_empty() {
                return Err(format!("cannot view {a:?} as {shape:?}"));
            }
            Ok(shape.clone())
        }
        PrimKind::Slice { start, len } => {
            let last = *a.last().unwrap();
            if *len == 0 || start + len > last {
                return Err(format!("slice {start}..{} out of last axis {last}", start + len));
            }
            let mut out = a.to_vec();
            *out.last_mut().unwrap() = *len;
            Ok(out)
        }
    }
}

fn constant_key(slot: SlotId) -> String {
    format!("s{slot}")
}

impl LoweredPlan {
    pub(crate) fn empty() -> Self {
        LoweredPlan {
            version: PLAN_FORMAT_VERSION,
            inputs: Vec::new(),
            outputs: Vec::new(),
            slots: Vec::new(),
            primitives: Vec::new(),
            tables: BTreeMap::new(),
            node_outputs: BTreeMap::new(),
            int8: None,
            constants_file: None,
            constants: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn is_int8(&self) -> bool {
        self.int8.is_some()
    }

    /// Storage width of one table parameter.
    pub fn table_param_bytes(&self) -> usize {
        if self.is_int8() {
            2
        } else {
            4
        }
    }

    /// Storage width of one network weight.
    pub fn weight_bytes(&self) -> usize {
        if self.is_int8() {
            1
        } else {
            4
        }
    }

    pub fn slot(&self, id: SlotId) -> &SlotInfo {
        &self.slots[id]
    }

    pub fn output_slot(&self, name: &str) -> Option<SlotId> {
        self.outputs.iter().find(|o| o.name == name).map(|o| o.slot)
    }

    /// Slots holding trainable network parameters.
    pub fn trainable_slots(&self) -> Vec<SlotId> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.constant.is_some_and(|c| c.trainable))
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of scalar network parameters (trainable constants).
    pub fn network_parameter_count(&self) -> usize {
        self.trainable_slots().iter().map(|&s| self.slots[s].len()).sum()
    }

    /// Multiply-accumulates across all matmul blocks.
    pub fn matmul_macs(&self) -> u64 {
        self.primitives
            .iter()
            .map(|p| match p.kind {
                PrimKind::MatMulBlock { batch, m, k, n } => (batch * m * k * n) as u64,
                _ => 0,
            })
            .sum()
    }

    /// Checks slot references, write-before-read order, shapes, tables and constants.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::structural(msg));
        let n = self.slots.len();
        let mut written = vec![false; n];
        for s in &self.inputs {
            if s.slot >= n {
                return bad(format!("input '{}' refers to missing slot {}", s.name, s.slot));
            }
            if self.slots[s.slot].constant.is_some() {
                return bad(format!("input '{}' is bound to a constant slot", s.name));
            }
            written[s.slot] = true;
        }
        for (i, s) in self.slots.iter().enumerate() {
            if s.shape.is_empty() || s.shape.contains(&0) {
                return bad(format!("slot {i} ('{}') has invalid shape {:?}", s.name, s.shape));
            }
            if s.constant.is_some() {
                match self.constants.get(&i) {
                    Some(t) if t.shape() == s.shape.as_slice() => written[i] = true,
                    Some(t) => {
                        return bad(format!(
                            "constant slot {i} ('{}') has shape {:?}, value has {:?}",
                            s.name,
                            s.shape,
                            t.shape()
                        ))
                    }
                    None => return bad(format!("constant slot {i} ('{}') has no value", s.name)),
                }
            }
        }
        for (pi, p) in self.primitives.iter().enumerate() {
            let ctx = || format!("primitive {pi} ({}, from '{}')", p.kind.name(), p.source);
            if p.source.is_empty() {
                return bad(format!("{} has no source node", ctx()));
            }
            for &s in p.inputs.iter().chain(std::iter::once(&p.output)) {
                if s >= n {
                    return bad(format!("{} refers to missing slot {s}", ctx()));
                }
            }
            for &s in &p.inputs {
                if !written[s] {
                    return bad(format!("{} reads slot {s} before it is written", ctx()));
                }
            }
            if written[p.output] {
                return bad(format!("{} overwrites slot {}", ctx(), p.output));
            }
            let shapes: Vec<&[usize]> = p.inputs.iter().map(|&s| self.slots[s].shape.as_slice()).collect();
            let out = infer_shape(&p.kind, &shapes).map_err(|e| Error::structural(format!("{}: {e}", ctx())))?;
            if out != self.slots[p.output].shape {
                return bad(format!(
                    "{}: output slot {} has shape {:?}, operation yields {out:?}",
                    ctx(),
                    p.output,
                    self.slots[p.output].shape
                ));
            }
            if let PrimKind::PwlApply { table } = &p.kind {
                if !self.tables.contains_key(table) {
                    return bad(format!("{} uses missing table '{table}'", ctx()));
                }
            }
            written[p.output] = true;
        }
        for o in &self.outputs {
            if o.slot >= n || !written[o.slot] {
                return bad(format!("output '{}' is never written", o.name));
            }
        }
        if let Some(Int8Config { scales, tables }) = &self.int8 {
            for p in &self.primitives {
                if matches!(p.kind, PrimKind::MatMulBlock { .. }) {
                    for s in &p.inputs {
                        if !scales.get(s).is_some_and(|v| *v > 0.0 && v.is_finite()) {
                            return bad(format!("matmul operand slot {s} has no INT8 scale"));
                        }
                    }
                }
            }
            for t in self.tables.keys() {
                if !tables.contains_key(t) {
                    return bad(format!("table '{t}' has no fixed-point descriptor"));
                }
            }
        }
        Ok(())
    }

    /// Plan JSON (constants go to a separate container).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    /// Parses plan JSON and attaches constants; the result is validated.
    pub fn from_json(json: &str, constants: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut plan: LoweredPlan = serde_json::from_str(json)?;
        if plan.version != PLAN_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported plan version {}", plan.version)));
        }
        for (i, s) in plan.slots.iter().enumerate() {
            if s.constant.is_some() {
                let t = constants
                    .get(&constant_key(i))
                    .ok_or_else(|| Error::Format(format!("constant for slot {i} ('{}') is missing", s.name)))?;
                plan.constants.insert(i, t.clone());
            }
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn constants_container(&self) -> BTreeMap<String, Tensor> {
        self.constants
            .iter()
            .map(|(&s, t)| (constant_key(s), t.clone()))
            .collect()
    }

    /// Writes the plan JSON to `path` and its constants next to it (`.nmwt`).
    pub fn save(&self, path: &Path) -> Result<PathBuf> {
        let sidecar = path.with_extension("nmwt");
        let mut plan = self.clone();
        plan.constants_file = sidecar.file_name().map(|s| s.to_string_lossy().into_owned());
        std::fs::write(path, plan.to_json() + "\n")?;
        std::fs::write(&sidecar, weights_to_bytes(&self.constants_container()))?;
        Ok(sidecar)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let head: serde_json::Value = serde_json::from_str(&json)?;
        let constants = match head.get("constants_file").and_then(|v| v.as_str()) {
            Some(f) => {
                let p = path.parent().unwrap_or(Path::new(".")).join(f);
                weights_from_bytes(&std::fs::read(p)?)?
            }
            None => BTreeMap::new(),
        };
        LoweredPlan::from_json(&json, &constants)
    }
}
