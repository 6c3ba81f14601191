use std::collections::BTreeMap;
use std::str::FromStr;

use num_traits::Float;

use super::im2col::im2col;
use super::plan::{Int8Config, LoweredPlan, PrimKind, Primitive, SlotId};
use crate::error::{Error, Result};
use crate::ir::{permutation_map, Tensor, TensorMap};
use crate::pwl::{NonlinearFunc, PwlTable, ScalarFunction};

/// How `PwlApply` primitives are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PwlMode {
    /// Through the piecewise-linear table.
    Table,
    /// Through the function the table approximates.
    Exact,
}

pub type SlotValues<T> = Vec<Option<Vec<T>>>;

/// Offset into `b` for every element of `a` when `b` is broadcast from the right.
pub(crate) fn broadcast_offsets(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return None;
    }
    let rank = a.len();
    let mut bstr = vec![0usize; rank];
    let mut s = 1;
    for (i, &bd) in b.iter().enumerate().rev() {
        let ai = rank - b.len() + i;
        bstr[ai] = if bd == 1 { 0 } else { s };
        s *= bd;
    }
    let len: usize = a.iter().product();
    let mut out = Vec::with_capacity(len);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..len {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += bstr[d];
            if idx[d] < a[d] {
                break;
            }
            off -= bstr[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(out)
}

/// Evaluates the exact function behind a table name.
pub(crate) enum ExactFn {
    Relu,
    Func(NonlinearFunc),
}

impl ExactFn {
    pub(crate) fn for_table(table: &PwlTable) -> Result<Self> {
        match table.function() {
            "relu" => Ok(ExactFn::Relu),
            name => NonlinearFunc::from_str(name).map(ExactFn::Func).map_err(|_| {
                Error::Unsupported(format!("no exact form for table function '{name}'"))
            }),
        }
    }

    pub(crate) fn eval(&self, x: f64) -> f64 {
        match self {
            ExactFn::Relu => x.max(0.0),
            ExactFn::Func(f) => f.eval(x),
        }
    }

    pub(crate) fn derivative(&self, x: f64) -> f64 {
        match self {
            ExactFn::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ExactFn::Func(f) => f.derivative(x),
        }
    }
}

fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("finite conversion")
}

/// Table lookup in the executor's scalar type: `k * x + b` with `k`, `b`
/// rounded to `T`.
pub(crate) fn pwl_eval<T: Float>(table: &PwlTable, x: T) -> T {
    let s = table.segment_index(x.to_f64().unwrap_or(f64::NAN));
    cast::<T>(table.slopes()[s]) * x + cast::<T>(table.intercepts()[s])
}

/// Constants of the plan converted to `T`.
pub fn constants_as<T: Float>(plan: &LoweredPlan) -> BTreeMap<SlotId, Vec<T>> {
    plan.constants
        .iter()
        .map(|(&s, t)| (s, t.data().iter().map(|&v| cast::<T>(v as f64)).collect()))
        .collect()
}

/// Slot storage with inputs and constants filled in.
pub fn initial_slots<T: Float>(
    plan: &LoweredPlan,
    inputs: &BTreeMap<String, Vec<T>>,
    constants: &BTreeMap<SlotId, Vec<T>>,
) -> Result<SlotValues<T>> {
    let mut vals: SlotValues<T> = vec![None; plan.slots.len()];
    for ns in &plan.inputs {
        let v = inputs
            .get(&ns.name)
            .ok_or_else(|| Error::arg(format!("missing plan input '{}'", ns.name)))?;
        let want = plan.slots[ns.slot].len();
        if v.len() != want {
            return Err(Error::structural(format!(
                "input '{}' has {} elements, slot {} with shape {:?} needs {want}",
                ns.name,
                v.len(),
                ns.slot,
                plan.slots[ns.slot].shape
            )));
        }
        vals[ns.slot] = Some(v.clone());
    }
    for (i, s) in plan.slots.iter().enumerate() {
        if s.constant.is_some() {
            let v = constants
                .get(&i)
                .ok_or_else(|| Error::structural(format!("constant slot {i} ('{}') has no value", s.name)))?;
            if v.len() != s.len() {
                return Err(Error::structural(format!("constant slot {i} ('{}') has the wrong size", s.name)));
            }
            vals[i] = Some(v.clone());
        }
    }
    Ok(vals)
}

/// Runs every primitive in order, writing each output slot.
pub fn forward<T: Float>(plan: &LoweredPlan, vals: &mut SlotValues<T>, mode: PwlMode) -> Result<()> {
    for p in &plan.primitives {
        let out = eval_primitive(plan, p, vals, mode)?;
        vals[p.output] = Some(out);
    }
    Ok(())
}

fn operand<'a, T>(vals: &'a SlotValues<T>, plan: &LoweredPlan, p: &Primitive, i: usize) -> Result<&'a [T]> {
    let s = p.inputs[i];
    let v = vals[s].as_deref().ok_or_else(|| {
        Error::structural(format!(
            "{} from '{}' reads slot {s} before it is written",
            p.kind.name(),
            p.source
        ))
    })?;
    if v.len() != plan.slots[s].len() {
        return Err(Error::structural(format!(
            "slot {s} holds {} elements, its shape {:?} needs {}",
            v.len(),
            plan.slots[s].shape,
            plan.slots[s].len()
        )));
    }
    Ok(v)
}

pub(crate) fn eval_primitive<T: Float>(
    plan: &LoweredPlan,
    p: &Primitive,
    vals: &SlotValues<T>,
    mode: PwlMode,
) -> Result<Vec<T>> {
    let a = operand(vals, plan, p, 0)?;
    let a_shape = &plan.slots[p.inputs[0]].shape;
    let out_shape = &plan.slots[p.output].shape;
    let out = match &p.kind {
        PrimKind::MatMulBlock { batch, m, k, n } => {
            let b = operand(vals, plan, p, 1)?;
            match &plan.int8 {
                Some(cfg) => matmul_int8(a, b, *batch, *m, *k, *n, cfg, p.inputs[0], p.inputs[1])?,
                None => matmul_block(a, b, *batch, *m, *k, *n),
            }
        }
        PrimKind::ElemAdd | PrimKind::ElemMul => {
            let b = operand(vals, plan, p, 1)?;
            let b_shape = &plan.slots[p.inputs[1]].shape;
            let mul = matches!(p.kind, PrimKind::ElemMul);
            let f = |x: T, y: T| if mul { x * y } else { x + y };
            match broadcast_offsets(a_shape, b_shape) {
                None => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
                Some(offs) => a.iter().zip(&offs).map(|(&x, &o)| f(x, b[o])).collect(),
            }
        }
        PrimKind::ScalarAffine { scale, shift } => {
            let (s, t) = (cast::<T>(*scale as f64), cast::<T>(*shift as f64));
            a.iter().map(|&x| s * x + t).collect()
        }
        PrimKind::PwlApply { table } => {
            let t = &plan.tables[table];
            match mode {
                PwlMode::Table => a.iter().map(|&x| pwl_eval(t, x)).collect(),
                PwlMode::Exact => {
                    let f = ExactFn::for_table(t)?;
                    a.iter()
                        .map(|&x| cast::<T>(f.eval(x.to_f64().unwrap_or(f64::NAN))))
                        .collect()
                }
            }
        }
        PrimKind::Im2col { kernel, stride, pad } => im2col(a_shape, *kernel, *stride, *pad)?.apply(a),
        PrimKind::Transpose { perm } => permutation_map(a_shape, perm).iter().map(|&s| a[s]).collect(),
        PrimKind::Reshape { .. } => a.to_vec(),
        PrimKind::Slice { start, len } => {
            let last = *a_shape.last().unwrap();
            a.chunks(last).flat_map(|row| row[*start..start + len].iter().copied()).collect()
        }
    };
    debug_assert_eq!(out.len(), out_shape.iter().product::<usize>());
    Ok(out)
}

/// `batch` products `[m, k] @ [k, n]`, reduction index innermost.
pub(crate) fn matmul_block<T: Float>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let shared = b.len() == k * n;
    let mut out = vec![T::zero(); batch * m * n];
    for t in 0..batch {
        let ad = &a[t * m * k..(t + 1) * m * k];
        let bd = if shared { b } else { &b[t * k * n..(t + 1) * k * n] };
        let od = &mut out[t * m * n..(t + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    acc = acc + ad[i * k + p] * bd[p * n + j];
                }
                od[i * n + j] = acc;
            }
        }
    }
    out
}

/// Symmetric INT8 code of `v` under `scale`.
pub fn quantize_value(v: f32, scale: f32) -> i8 {
    (v / scale).round().clamp(-127.0, 127.0) as i8
}

#[allow(clippy::too_many_arguments)]
fn matmul_int8<T: Float>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    cfg: &Int8Config,
    sa_slot: SlotId,
    sb_slot: SlotId,
) -> Result<Vec<T>> {
    let scale = |s: SlotId| {
        cfg.scales
            .get(&s)
            .copied()
            .ok_or_else(|| Error::structural(format!("matmul operand slot {s} has no INT8 scale")))
    };
    let (sa, sb) = (scale(sa_slot)?, scale(sb_slot)?);
    let q = |v: &[T], s: f32| -> Vec<i32> {
        v.iter()
            .map(|&x| quantize_value(x.to_f32().unwrap_or(0.0), s) as i32)
            .collect()
    };
    let (qa, qb) = (q(a, sa), q(b, sb));
    let shared = b.len() == k * n;
    let rescale = sa * sb;
    let mut out = vec![T::zero(); batch * m * n];
    for t in 0..batch {
        let ad = &qa[t * m * k..(t + 1) * m * k];
        let bd = if shared { &qb[..] } else { &qb[t * k * n..(t + 1) * k * n] };
        for i in 0..m {
            for j in 0..n {
                let mut acc: i32 = 0;
                for p in 0..k {
                    acc = acc
                        .checked_add(ad[i * k + p] * bd[p * n + j])
                        .ok_or_else(|| Error::Numerical("INT8 accumulator overflowed 32 bits".into()))?;
                }
                out[t * m * n + i * n + j] = cast::<T>((acc as f32 * rescale) as f64);
            }
        }
    }
    Ok(out)
}

fn to_vectors(plan: &LoweredPlan, inputs: &TensorMap) -> Result<BTreeMap<String, Vec<f32>>> {
    let mut out = BTreeMap::new();
    for ns in &plan.inputs {
        let t = inputs
            .get(&ns.name)
            .ok_or_else(|| Error::arg(format!("missing plan input '{}'", ns.name)))?;
        if t.shape() != plan.slots[ns.slot].shape.as_slice() {
            return Err(Error::structural(format!(
                "input '{}' has shape {:?}, plan expects {:?}",
                ns.name,
                t.shape(),
                plan.slots[ns.slot].shape
            )));
        }
        out.insert(ns.name.clone(), t.data().to_vec());
    }
    Ok(out)
}

/// Runs the plan in FP32 (INT8 matmuls when the plan is quantized) and
/// returns the value of every slot.
pub fn execute_plan_slots(plan: &LoweredPlan, inputs: &TensorMap, mode: PwlMode) -> Result<Vec<Tensor>> {
    let ins = to_vectors(plan, inputs)?;
    let mut vals = initial_slots(plan, &ins, &constants_as::<f32>(plan))?;
    forward(plan, &mut vals, mode)?;
    vals.into_iter()
        .zip(&plan.slots)
        .enumerate()
        .map(|(i, (v, s))| {
            let v = v.ok_or_else(|| Error::structural(format!("slot {i} ('{}') is never written", s.name)))?;
            Tensor::new(s.shape.clone(), v)
        })
        .collect()
}

/// Runs the plan and returns its named outputs.
pub fn execute_plan(plan: &LoweredPlan, inputs: &TensorMap) -> Result<TensorMap> {
    execute_plan_mode(plan, inputs, PwlMode::Table)
}

pub fn execute_plan_mode(plan: &LoweredPlan, inputs: &TensorMap, mode: PwlMode) -> Result<TensorMap> {
    let slots = execute_plan_slots(plan, inputs, mode)?;
    Ok(plan
        .outputs
        .iter()
        .map(|o| (o.name.clone(), slots[o.slot].clone()))
        .collect())
}
