use std::collections::BTreeMap;

use super::exec::{execute_plan_slots, quantize_value, PwlMode};
use super::plan::{Int8Config, LoweredPlan, PrimKind, SlotId, TableQuant};
use crate::error::{Error, Result};
use crate::ir::TensorMap;
use crate::pwl::PwlTable;

/// Largest magnitude a 16-bit fixed-point table code may take.
const TABLE_CODE_MAX: f64 = 32767.0;

/// Symmetric per-tensor scale `max|v| / 127`. An all-zero tensor gets scale
/// 1.0 and `false` in the second field.
pub fn symmetric_scale(values: impl IntoIterator<Item = f32>) -> (f32, bool) {
    let m = values.into_iter().fold(0f32, |m, v| m.max(v.abs()));
    if m > 0.0 && m.is_finite() {
        (m / 127.0, true)
    } else {
        (1.0, false)
    }
}

/// INT8 codes of a tensor and its scale.
pub fn quantize_values(values: &[f32]) -> (Vec<i8>, f32) {
    let (scale, _) = symmetric_scale(values.iter().copied());
    (values.iter().map(|&v| quantize_value(v, scale)).collect(), scale)
}

pub fn dequantize_values(codes: &[i8], scale: f32) -> Vec<f32> {
    codes.iter().map(|&q| q as f32 * scale).collect()
}

/// Shared power-of-two exponent so every `k` and `b` of the table fits a
/// signed 16-bit code.
pub fn table_exponent(table: &PwlTable) -> i32 {
    let m = table
        .slopes()
        .iter()
        .chain(table.intercepts())
        .fold(0f64, |m, v| m.max(v.abs()));
    if m == 0.0 {
        return 0;
    }
    let mut e = (m / TABLE_CODE_MAX).log2().ceil() as i32;
    // guard against log2 rounding at exact powers of two
    while m / 2f64.powi(e) > TABLE_CODE_MAX {
        e += 1;
    }
    e
}

/// The table with `k` and `b` rounded to 16-bit fixed point at `exponent`.
pub fn fixed_point_table(table: &PwlTable, exponent: i32) -> PwlTable {
    let unit = 2f64.powi(exponent);
    let q = |v: &f64| (v / unit).round().clamp(-TABLE_CODE_MAX, TABLE_CODE_MAX) * unit;
    let k = table.slopes().iter().map(q).collect();
    let b = table.intercepts().iter().map(q).collect();
    table.clone().with_params(k, b)
}

/// INT8 version of `plan`: every matmul operand gets a symmetric per-tensor
/// scale (weights from their values, activations from the largest magnitude
/// seen on `calibration`), and tables move to 16-bit fixed point.
pub fn quantize_plan(plan: &LoweredPlan, calibration: &[TensorMap]) -> Result<LoweredPlan> {
    if plan.is_int8() {
        return Err(Error::arg("plan is already quantized"));
    }
    if calibration.is_empty() {
        return Err(Error::arg("INT8 calibration needs at least one input set"));
    }
    let mut operands: Vec<SlotId> = plan
        .primitives
        .iter()
        .filter(|p| matches!(p.kind, PrimKind::MatMulBlock { .. }))
        .flat_map(|p| p.inputs.iter().copied())
        .collect();
    operands.sort_unstable();
    operands.dedup();

    let mut peak: BTreeMap<SlotId, f32> = operands.iter().map(|&s| (s, 0.0)).collect();
    for inputs in calibration {
        let slots = execute_plan_slots(plan, inputs, PwlMode::Table)?;
        for (&s, m) in peak.iter_mut() {
            *m = m.max(slots[s].max_abs());
        }
    }
    let mut warnings = Vec::new();
    let mut scales = BTreeMap::new();
    for (s, m) in peak {
        let (scale, ok) = symmetric_scale([m]);
        if !ok {
            warnings.push(format!(
                "slot {s} ('{}') is all zero on calibration data; using scale 1.0",
                plan.slots[s].name
            ));
        }
        scales.insert(s, scale);
    }

    let mut q = plan.clone();
    let mut table_q = BTreeMap::new();
    for (key, t) in plan.tables.iter() {
        let e = table_exponent(t);
        q.tables.insert(key.clone(), fixed_point_table(t, e));
        table_q.insert(key.clone(), TableQuant { exponent: e });
    }
    q.int8 = Some(Int8Config {
        scales,
        tables: table_q,
    });
    q.warnings.extend(warnings);
    q.validate()?;
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ternary_weights() {
        let w = [-1.0f32, 0.0, 1.0, 1.0, -1.0, 0.0];
        let (codes, scale) = quantize_values(&w);
        assert_eq!(scale, 1.0 / 127.0);
        let back = dequantize_values(&codes, scale);
        for (a, b) in w.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 127.0);
        }
    }

    #[test]
    fn zero_tensor_falls_back() {
        assert_eq!(symmetric_scale([0.0f32, 0.0]), (1.0, false));
    }

    #[test]
    fn relu_survives_fixed_point() {
        let t = PwlTable::relu();
        let e = table_exponent(&t);
        assert_eq!(e, -14);
        assert_eq!(fixed_point_table(&t, e), t);
    }

    #[test]
    fn exponent_covers_extremes() {
        let t = PwlTable::new("x", vec![0.0, 1.0, 2.0], vec![40000.0, -3.0], vec![0.5, 1e-6]).unwrap();
        let e = table_exponent(&t);
        assert_eq!(e, 1);
        let q = fixed_point_table(&t, e);
        assert_eq!(q.slopes()[0], 40000.0);
        assert_eq!(q.intercepts()[1], 0.0);
    }
}
