//! Rewriting graphs into plans built only from matrix-unit primitives.
//!
//! Linear operators become matrix multiplications (convolutions through an
//! im2col gather), ReLU and max-pooling become exact two-segment table
//! lookups, and every other nonlinearity becomes a lookup into a
//! piecewise-linear table. Softmax and layer normalization are decomposed
//! into reductions done as matmuls, elementwise products and table lookups.

mod exec;
mod im2col;
mod lower;
mod plan;
mod quant;
mod report;

pub use exec::{
    constants_as, execute_plan, execute_plan_mode, execute_plan_slots, forward, initial_slots,
    quantize_value, PwlMode, SlotValues,
};
pub(crate) use exec::{broadcast_offsets, ExactFn};
pub use im2col::{im2col, Im2colMap, PAD};
pub use lower::{lower_graph, tables_from_ranges, LowerOptions, TableSpec, RELU_TABLE};
pub use plan::{
    infer_shape, ConstantInfo, Int8Config, LoweredPlan, NamedSlot, PrimKind, Primitive, SlotId, SlotInfo,
    TableQuant, PLAN_FORMAT_VERSION,
};
pub use quant::{
    dequantize_values, fixed_point_table, quantize_plan, quantize_values, symmetric_scale, table_exponent,
};
pub use report::{extra_parameter_bytes, fidelity_report, ErrorStats, FidelityReport, ParameterAccounting, TableBytes};
