use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{AcceleratorConfig, DataflowConfig, Dim, Stationary};

/// Resource a blocking overflows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Spatial tile needs more PEs than the array has.
    PeArray,
    /// Double-buffered streaming slices exceed the L1 of the clusters in use.
    L1,
    /// Double-buffered tiles of all three operands exceed L2.
    L2,
    Energy,
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Budget::PeArray => "PE array",
            Budget::L1 => "L1 buffer",
            Budget::L2 => "L2 buffer",
            Budget::Energy => "energy budget",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub mac_j: f64,
    pub l1_j: f64,
    pub l2_j: f64,
    pub dram_j: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.mac_j + self.l1_j + self.l2_j + self.dram_j
    }

    fn add(&mut self, o: &EnergyBreakdown) {
        self.mac_j += o.mac_j;
        self.l1_j += o.l1_j;
        self.l2_j += o.l2_j;
        self.dram_j += o.dram_j;
    }
}

/// Cycle, traffic and energy estimate for one operation or a whole plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub macs: u64,
    pub compute_cycles: u64,
    pub noc_cycles: u64,
    pub dram_cycles: u64,
    pub latency_cycles: u64,
    pub latency_s: f64,
    /// Bytes moved between L2 and the PE clusters.
    pub noc_bytes: u64,
    pub dram_bytes: u64,
    /// Bytes written into or read out of L1.
    pub l1_accesses: u64,
    /// Bytes read from or written into L2.
    pub l2_accesses: u64,
    pub energy: EnergyBreakdown,
    pub pe_utilization: f64,
    /// Set when the blocking does not fit; the remaining fields are then
    /// still filled in but describe an unrealizable schedule.
    pub infeasible: Option<Budget>,
}

impl CostReport {
    pub fn zero() -> Self {
        CostReport {
            macs: 0,
            compute_cycles: 0,
            noc_cycles: 0,
            dram_cycles: 0,
            latency_cycles: 0,
            latency_s: 0.0,
            noc_bytes: 0,
            dram_bytes: 0,
            l1_accesses: 0,
            l2_accesses: 0,
            energy: EnergyBreakdown::default(),
            pe_utilization: 0.0,
            infeasible: None,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.infeasible.is_none()
    }

    pub fn energy_j(&self) -> f64 {
        self.energy.total()
    }

    /// Serial composition: `other` runs after `self` with no overlap.
    pub fn accumulate(&mut self, other: &CostReport, acc: &AcceleratorConfig) {
        self.macs += other.macs;
        self.compute_cycles += other.compute_cycles;
        self.noc_cycles += other.noc_cycles;
        self.dram_cycles += other.dram_cycles;
        self.latency_cycles += other.latency_cycles;
        self.noc_bytes += other.noc_bytes;
        self.dram_bytes += other.dram_bytes;
        self.l1_accesses += other.l1_accesses;
        self.l2_accesses += other.l2_accesses;
        self.energy.add(&other.energy);
        self.infeasible = self.infeasible.or(other.infeasible);
        self.finish(acc);
    }

    /// Recomputes the derived fields from the counters.
    pub(crate) fn finish(&mut self, acc: &AcceleratorConfig) {
        self.latency_s = self.latency_cycles as f64 / acc.frequency_hz;
        self.pe_utilization = if self.compute_cycles == 0 {
            0.0
        } else {
            self.macs as f64 / (self.compute_cycles as f64 * acc.pe_count as f64)
        };
    }

    /// Counters scaled by `times` identical back-to-back repetitions.
    pub fn repeated(&self, times: u64, acc: &AcceleratorConfig) -> CostReport {
        if times == 0 {
            return CostReport::zero();
        }
        let mut r = self.clone();
        if times > 1 {
            r.macs *= times;
            r.compute_cycles *= times;
            r.noc_cycles *= times;
            r.dram_cycles *= times;
            r.latency_cycles *= times;
            r.noc_bytes *= times;
            r.dram_bytes *= times;
            r.l1_accesses *= times;
            r.l2_accesses *= times;
            let t = times as f64;
            r.energy = EnergyBreakdown {
                mac_j: r.energy.mac_j * t,
                l1_j: r.energy.l1_j * t,
                l2_j: r.energy.l2_j * t,
                dram_j: r.energy.dram_j * t,
            };
        }
        r.finish(acc);
        r
    }
}

/// Traffic and timing built from raw event counts.
pub(crate) fn report_from_counts(
    acc: &AcceleratorConfig,
    macs: u64,
    compute_cycles: u64,
    noc_bytes: u64,
    dram_bytes: u64,
    l1_accesses: u64,
    l2_accesses: u64,
) -> CostReport {
    let noc_cycles = (noc_bytes as f64 / acc.noc_bytes_per_cycle()).ceil() as u64;
    let dram_cycles = (dram_bytes as f64 / acc.dram_bytes_per_cycle()).ceil() as u64;
    let e = &acc.energy;
    let pj = 1e-12;
    let mut r = CostReport {
        macs,
        compute_cycles,
        noc_cycles,
        dram_cycles,
        latency_cycles: compute_cycles.max(noc_cycles).max(dram_cycles),
        latency_s: 0.0,
        noc_bytes,
        dram_bytes,
        l1_accesses,
        l2_accesses,
        energy: EnergyBreakdown {
            mac_j: macs as f64 * e.mac_pj * pj,
            l1_j: l1_accesses as f64 * e.l1_byte_pj * pj,
            l2_j: l2_accesses as f64 * e.l2_byte_pj * pj,
            dram_j: dram_bytes as f64 * e.dram_byte_pj * pj,
        },
        pe_utilization: 0.0,
        infeasible: None,
    };
    r.finish(acc);
    r
}

const OPERAND_DIMS: [[Dim; 2]; 3] = [[Dim::M, Dim::K], [Dim::K, Dim::N], [Dim::M, Dim::N]];
const A: usize = 0;
const B: usize = 1;
const C: usize = 2;

/// Extents of each tile along one dimension; the last may be partial.
pub fn tile_extents(dim: usize, tile: usize) -> impl Iterator<Item = usize> {
    let tile = tile.max(1);
    (0..dim.div_ceil(tile)).map(move |i| tile.min(dim - i * tile))
}

struct Shape {
    dims: [u64; 3],
    tiles: [u64; 3],
    trips: [u64; 3],
}

impl Shape {
    fn new(m: usize, k: usize, n: usize, df: &DataflowConfig) -> Self {
        let dims = [m as u64, k as u64, n as u64];
        let mut tiles = [0; 3];
        let mut trips = [0; 3];
        for d in [Dim::M, Dim::K, Dim::N] {
            let i = d.index();
            tiles[i] = (df.tile(d) as u64).clamp(1, dims[i].max(1));
            trips[i] = dims[i].div_ceil(tiles[i]);
        }
        Shape { dims, tiles, trips }
    }

    fn operand_len(&self, x: usize) -> u64 {
        OPERAND_DIMS[x].iter().map(|d| self.dims[d.index()]).product()
    }

    fn operand_tile(&self, x: usize) -> u64 {
        OPERAND_DIMS[x].iter().map(|d| self.tiles[d.index()]).product()
    }

    /// How many times operand `x` crosses into a buffer that can keep
    /// `capacity` bytes of it resident, given the tile loop nest.
    ///
    /// A loop the operand does not depend on forces a re-fetch only when some
    /// loop nested inside it walks the operand and the slice walked there
    /// does not stay resident.
    fn fetches(&self, x: usize, order: [Dim; 3], capacity: Option<u64>, eb: u64) -> u64 {
        let uses = |d: Dim| OPERAND_DIMS[x].contains(&d);
        let mut mult = 1;
        for pos in 0..3 {
            let l = order[pos];
            if uses(l) {
                continue;
            }
            let inner = &order[pos + 1..];
            if !inner.iter().any(|&d| uses(d)) {
                continue;
            }
            let resident = match capacity {
                None => false,
                Some(cap) => {
                    let slice: u64 = OPERAND_DIMS[x]
                        .iter()
                        .map(|&d| {
                            if inner.contains(&d) {
                                self.dims[d.index()]
                            } else {
                                self.tiles[d.index()]
                            }
                        })
                        .product();
                    slice * eb <= cap
                }
            };
            if !resident {
                mult *= self.trips[l.index()];
            }
        }
        mult
    }

    /// Bytes for all three operands; partial sums of `C` that leave before
    /// the reduction finishes are written and read back.
    fn traffic(&self, mult: [u64; 3], eb: u64) -> u64 {
        eb * (self.operand_len(A) * mult[A] + self.operand_len(B) * mult[B] + self.operand_len(C) * (2 * mult[C] - 1))
    }
}

/// Analytical latency and energy of one `[M, K] x [K, N]` GEMM under `df`.
///
/// Each spatial tile occupies `tile_s1 * tile_s2` PEs and runs for the full
/// temporal extent, so compute takes `trips_s1 * trips_s2 * dim_t` cycles and
/// edge tiles show up as lower utilization. Operand re-fetches follow the
/// loop nest: L1 keeps only the current tile, L2 keeps a slice of an operand
/// resident when it fits in a third of L2. Transfers are double-buffered,
/// so latency is the slowest of compute, NoC and DRAM time.
pub fn cost_model(m: usize, k: usize, n: usize, df: &DataflowConfig, acc: &AcceleratorConfig) -> CostReport {
    let s = Shape::new(m, k, n, df);
    let eb = acc.element_bytes as u64;
    let (s1, s2, t) = df.stationary.spatial();
    let compute_cycles = s.trips[s1.index()] * s.trips[s2.index()] * s.dims[t.index()];
    let macs = s.dims.iter().product::<u64>();
    let order = df.order.dims();

    let l1_mult = [A, B, C].map(|x| s.fetches(x, order, None, eb));
    let l2_share = acc.l2_bytes as u64 / 3;
    let l2_mult = [A, B, C].map(|x| s.fetches(x, order, Some(l2_share), eb));
    let noc_bytes = s.traffic(l1_mult, eb);
    let dram_bytes = s.traffic(l2_mult, eb);

    let mut r = report_from_counts(acc, macs, compute_cycles, noc_bytes, dram_bytes, 2 * noc_bytes, noc_bytes + dram_bytes);
    r.infeasible = check_budgets(&s, df.stationary, acc);
    r
}

fn check_budgets(s: &Shape, st: Stationary, acc: &AcceleratorConfig) -> Option<Budget> {
    let eb = acc.element_bytes as u64;
    let (s1, s2, _) = st.spatial();
    let pes = s.tiles[s1.index()] * s.tiles[s2.index()];
    if pes > acc.pe_count as u64 {
        return Some(Budget::PeArray);
    }
    let pinned = match st {
        Stationary::Output => C,
        Stationary::Weight => B,
        Stationary::Input => A,
    };
    let streamed: u64 = [A, B, C].iter().filter(|&&x| x != pinned).map(|&x| s.operand_tile(x)).sum();
    let clusters = pes.div_ceil(acc.pes_per_cluster() as u64);
    if 2 * eb * streamed > clusters * acc.l1_bytes as u64 {
        return Some(Budget::L1);
    }
    let all: u64 = [A, B, C].iter().map(|&x| s.operand_tile(x)).sum();
    if 2 * eb * all > acc.l2_bytes as u64 {
        return Some(Budget::L2);
    }
    None
}

/// MACs of the blocking counted tile by tile.
pub fn tiled_macs(m: usize, k: usize, n: usize, df: &DataflowConfig) -> u64 {
    let sum = |d: usize, t: usize| tile_extents(d, t).map(|e| e as u64).sum::<u64>();
    sum(m, df.tile_m) * sum(k, df.tile_k) * sum(n, df.tile_n)
}

/// Operations per joule: `(ops / latency) / (energy / latency)`. Zero when
/// there is nothing to count.
pub fn throughput_per_watt(report: &CostReport, ops: u64) -> f64 {
    let e = report.energy_j();
    if ops == 0 || report.latency_s <= 0.0 || e <= 0.0 {
        return 0.0;
    }
    let throughput = ops as f64 / report.latency_s;
    let power = e / report.latency_s;
    throughput / power
}
