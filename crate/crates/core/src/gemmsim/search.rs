use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AcceleratorConfig, DataflowConfig, LoopOrder, Stationary};
use super::model::{cost_model, Budget, CostReport};
use crate::error::{Error, Result};

/// Tile sizes tried along every dimension: 2, 4, ..., 128.
pub fn default_tile_grid() -> Vec<usize> {
    (2..=128).step_by(2).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOptions {
    /// Joules; configurations above it are discarded.
    pub energy_budget: Option<f64>,
    /// Also try weight- and input-stationary mappings instead of only the
    /// accelerator's own scheme.
    pub search_stationary: bool,
    pub tiles: Vec<usize>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            energy_budget: None,
            search_stationary: false,
            tiles: default_tile_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub dataflow: DataflowConfig,
    pub report: CostReport,
    /// Configurations costed, after dropping tile sizes that behave like a
    /// smaller one because they already cover the whole dimension.
    pub evaluated: usize,
    pub feasible: usize,
}

/// Number of tile-loop iterations; the tie-break after latency and energy
/// prefers fewer, larger tiles.
pub fn tile_phases(m: usize, k: usize, n: usize, df: &DataflowConfig) -> u64 {
    let trips = |d: usize, t: usize| d.max(1).div_ceil(t.clamp(1, d.max(1))) as u64;
    trips(m, df.tile_m) * trips(k, df.tile_k) * trips(n, df.tile_n)
}

/// Total order used to pick the winner: latency, then energy, then fewer
/// tile phases, then tile sizes, stationary scheme and loop order ascending.
pub fn compare_candidates(
    (m, k, n): (usize, usize, usize),
    a: (&DataflowConfig, &CostReport),
    b: (&DataflowConfig, &CostReport),
) -> Ordering {
    a.1.latency_cycles
        .cmp(&b.1.latency_cycles)
        .then_with(|| a.1.energy_j().total_cmp(&b.1.energy_j()))
        .then_with(|| tile_phases(m, k, n, a.0).cmp(&tile_phases(m, k, n, b.0)))
        .then_with(|| {
            (a.0.tile_m, a.0.tile_k, a.0.tile_n, a.0.stationary, a.0.order).cmp(&(
                b.0.tile_m,
                b.0.tile_k,
                b.0.tile_n,
                b.0.stationary,
                b.0.order,
            ))
        })
}

/// Grid values up to the first one that covers `dim`; larger ones clamp to
/// the same effective tile.
fn useful_tiles(grid: &[usize], dim: usize) -> Vec<usize> {
    let mut sorted: Vec<usize> = grid.iter().copied().filter(|&t| t >= 1).collect();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = Vec::new();
    for t in sorted {
        out.push(t);
        if t >= dim {
            break;
        }
    }
    out
}

#[derive(Default)]
struct Tally {
    best: Option<(DataflowConfig, CostReport)>,
    evaluated: usize,
    feasible: usize,
    rejected: BTreeMap<Budget, usize>,
    min_energy: Option<f64>,
}

impl Tally {
    fn merge(mut self, o: Tally, dims: (usize, usize, usize)) -> Tally {
        self.evaluated += o.evaluated;
        self.feasible += o.feasible;
        for (b, c) in o.rejected {
            *self.rejected.entry(b).or_default() += c;
        }
        self.min_energy = match (self.min_energy, o.min_energy) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self.best = match (self.best, o.best) {
            (Some(a), Some(b)) => {
                if compare_candidates(dims, (&b.0, &b.1), (&a.0, &a.1)) == Ordering::Less {
                    Some(b)
                } else {
                    Some(a)
                }
            }
            (a, b) => a.or(b),
        };
        self
    }
}

/// Exhaustive blocking search for `[M, K] x [K, N]`: the lowest-latency
/// feasible configuration within the energy budget.
pub fn search_blocking(
    m: usize,
    k: usize,
    n: usize,
    acc: &AcceleratorConfig,
    energy_budget: Option<f64>,
) -> Result<SearchResult> {
    let opts = SearchOptions {
        energy_budget,
        ..SearchOptions::default()
    };
    search_blocking_with(m, k, n, acc, &opts)
}

pub fn search_blocking_with(
    m: usize,
    k: usize,
    n: usize,
    acc: &AcceleratorConfig,
    opts: &SearchOptions,
) -> Result<SearchResult> {
    if m == 0 || k == 0 || n == 0 {
        return Err(Error::arg(format!("GEMM dimensions must be positive, got {m}x{k}x{n}")));
    }
    acc.validate()?;
    if let Some(b) = opts.energy_budget {
        if b.is_nan() {
            return Err(Error::arg("energy budget is NaN"));
        }
    }
    let (tm, tk, tn) = (useful_tiles(&opts.tiles, m), useful_tiles(&opts.tiles, k), useful_tiles(&opts.tiles, n));
    if tm.is_empty() {
        return Err(Error::arg("tile grid is empty"));
    }
    let schemes: Vec<Stationary> = if opts.search_stationary {
        Stationary::ALL.to_vec()
    } else {
        vec![acc.stationary]
    };
    let dims = (m, k, n);
    let tally = tm
        .par_iter()
        .map(|&tile_m| {
            let mut t = Tally::default();
            for &tile_k in &tk {
                for &tile_n in &tn {
                    for &stationary in &schemes {
                        for order in LoopOrder::ALL {
                            let df = DataflowConfig {
                                tile_m,
                                tile_k,
                                tile_n,
                                stationary,
                                order,
                            };
                            let r = cost_model(m, k, n, &df, acc);
                            t.evaluated += 1;
                            if let Some(b) = r.infeasible {
                                *t.rejected.entry(b).or_default() += 1;
                                continue;
                            }
                            let e = r.energy_j();
                            t.min_energy = Some(t.min_energy.map_or(e, |x: f64| x.min(e)));
                            if opts.energy_budget.is_some_and(|b| e > b) {
                                *t.rejected.entry(Budget::Energy).or_default() += 1;
                                continue;
                            }
                            t.feasible += 1;
                            let better = match &t.best {
                                None => true,
                                Some((bd, br)) => compare_candidates(dims, (&df, &r), (bd, br)) == Ordering::Less,
                            };
                            if better {
                                t.best = Some((df, r));
                            }
                        }
                    }
                }
            }
            t
        })
        .reduce(Tally::default, |a, b| a.merge(b, dims));

    match tally.best {
        Some((dataflow, report)) => Ok(SearchResult {
            dataflow,
            report,
            evaluated: tally.evaluated,
            feasible: tally.feasible,
        }),
        None => Err(infeasible_error(dims, &tally, opts.energy_budget)),
    }
}

fn infeasible_error((m, k, n): (usize, usize, usize), t: &Tally, budget: Option<f64>) -> Error {
    if let (Some(min), Some(b)) = (t.min_energy, budget) {
        return Error::Infeasible(format!(
            "no blocking of {m}x{k}x{n} meets the energy budget of {b:e} J; the cheapest feasible one needs {min:e} J"
        ));
    }
    let (tightest, count) = t
        .rejected
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(b, c)| (*b, *c))
        .unwrap_or((Budget::PeArray, 0));
    Error::Infeasible(format!(
        "no blocking of {m}x{k}x{n} fits the accelerator; tightest constraint is the {tightest} ({count} of {} configurations rejected)",
        t.evaluated
    ))
}
