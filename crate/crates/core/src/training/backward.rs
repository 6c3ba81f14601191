use crate::error::{Error, Result};
use crate::ir::permutation_map;
use crate::lowering::{broadcast_offsets, im2col, ExactFn, LoweredPlan, PrimKind, PwlMode, SlotValues, PAD};
use crate::pwl::PwlTable;

/// Derivative used when back-propagating through a table: the slope of the
/// segment the forward pass used for `x`. At a breakpoint that is the
/// segment starting there, matching the half-open segment lookup.
pub fn pwl_gradient(table: &PwlTable, x: f64) -> f64 {
    table.slope_at(x)
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Reverse pass over `plan`. `grads` holds the loss gradient of the output
/// slots on entry and receives the gradient of every slot the outputs
/// depend on. `vals` must come from a forward pass in the same `mode`.
pub fn backward(plan: &LoweredPlan, vals: &SlotValues<f64>, grads: &mut [Option<Vec<f64>>], mode: PwlMode) -> Result<()> {
    if plan.is_int8() {
        return Err(Error::Unsupported(
            "INT8 matmul_block has no gradient; fine-tune the FP32 plan".into(),
        ));
    }
    for p in plan.primitives.iter().rev() {
        let Some(g) = grads[p.output].take() else { continue };
        let val = |s: usize| {
            vals[s]
                .as_deref()
                .ok_or_else(|| Error::structural(format!("slot {s} has no forward value")))
        };
        let a_slot = p.inputs[0];
        let a_shape = &plan.slots[a_slot].shape;
        let a_len = plan.slots[a_slot].len();
        match &p.kind {
            PrimKind::MatMulBlock { batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let b_slot = p.inputs[1];
                let a = val(a_slot)?.to_vec();
                let b = val(b_slot)?.to_vec();
                let shared = b.len() == k * n;
                let mut da = vec![0.0; a.len()];
                let mut db = vec![0.0; b.len()];
                for t in 0..batch {
                    let boff = if shared { 0 } else { t * k * n };
                    for i in 0..m {
                        for j in 0..n {
                            let go = g[(t * m + i) * n + j];
                            if go == 0.0 {
                                continue;
                            }
                            for q in 0..k {
                                da[(t * m + i) * k + q] += go * b[boff + q * n + j];
                                db[boff + q * n + j] += go * a[(t * m + i) * k + q];
                            }
                        }
                    }
                }
                accumulate(grads, a_slot, &da);
                accumulate(grads, b_slot, &db);
            }
            PrimKind::ElemAdd | PrimKind::ElemMul => {
                let b_slot = p.inputs[1];
                let b_len = plan.slots[b_slot].len();
                let offs = broadcast_offsets(a_shape, &plan.slots[b_slot].shape);
                let off = |i: usize| offs.as_ref().map_or(i, |o| o[i]);
                let mut da = vec![0.0; a_len];
                let mut db = vec![0.0; b_len];
                if matches!(p.kind, PrimKind::ElemAdd) {
                    for (i, &gi) in g.iter().enumerate() {
                        da[i] = gi;
                        db[off(i)] += gi;
                    }
                } else {
                    let a = val(a_slot)?;
                    let b = val(b_slot)?;
                    for (i, &gi) in g.iter().enumerate() {
                        da[i] = gi * b[off(i)];
                        db[off(i)] += gi * a[i];
                    }
                }
                accumulate(grads, a_slot, &da);
                accumulate(grads, b_slot, &db);
            }
            PrimKind::ScalarAffine { scale, .. } => {
                let s = *scale as f64;
                let da: Vec<f64> = g.iter().map(|&gi| gi * s).collect();
                accumulate(grads, a_slot, &da);
            }
            PrimKind::PwlApply { table } => {
                let t = &plan.tables[table];
                let x = val(a_slot)?;
                let da: Vec<f64> = match mode {
                    PwlMode::Table => g.iter().zip(x).map(|(&gi, &xi)| gi * pwl_gradient(t, xi)).collect(),
                    PwlMode::Exact => {
                        let f = ExactFn::for_table(t)?;
                        g.iter().zip(x).map(|(&gi, &xi)| gi * f.derivative(xi)).collect()
                    }
                };
                accumulate(grads, a_slot, &da);
            }
            PrimKind::Im2col { kernel, stride, pad } => {
                let map = im2col(a_shape, *kernel, *stride, *pad)?;
                let mut da = vec![0.0; a_len];
                for (&src, &gi) in map.index.iter().zip(&g) {
                    if src != PAD {
                        da[src] += gi;
                    }
                }
                accumulate(grads, a_slot, &da);
            }
            PrimKind::Transpose { perm } => {
                let mut da = vec![0.0; a_len];
                for (&src, &gi) in permutation_map(a_shape, perm).iter().zip(&g) {
                    da[src] += gi;
                }
                accumulate(grads, a_slot, &da);
            }
            PrimKind::Reshape { .. } => accumulate(grads, a_slot, &g),
            PrimKind::Slice { start, len } => {
                let last = *a_shape.last().unwrap();
                let mut da = vec![0.0; a_len];
                for (r, row) in g.chunks(*len).enumerate() {
                    da[r * last + start..r * last + start + len].copy_from_slice(row);
                }
                accumulate(grads, a_slot, &da);
            }
        }
        // keep the output gradient readable for callers that inspect it
        grads[p.output] = Some(g);
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], slot: usize, d: &[f64]) {
    let acc = add_into(&mut grads[slot], d.len());
    for (a, &v) in acc.iter_mut().zip(d) {
        *a += v;
    }
}
