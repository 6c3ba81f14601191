//! Analytical model of a systolic-array GEMM accelerator with per-cluster
//! L1 buffers, a shared L2 and DRAM, plus an exhaustive blocking search.

mod config;
mod model;
mod search;
mod simulate;

pub use config::{AcceleratorConfig, DataflowConfig, Dim, EnergyConstants, LoopOrder, Stationary};
pub use model::{cost_model, throughput_per_watt, tile_extents, tiled_macs, Budget, CostReport, EnergyBreakdown};
pub use search::{
    compare_candidates, default_tile_grid, search_blocking, search_blocking_with, tile_phases, SearchOptions,
    SearchResult,
};
pub use simulate::{simulate_plan, simulate_plan_with, OpCost, PlanCost, TABLE_RESIDENT_FRACTION};
