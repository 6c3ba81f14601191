use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which operand stays pinned in the PE array while the others stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stationary {
    Output,
    Weight,
    Input,
}

impl Stationary {
    pub const ALL: [Stationary; 3] = [Stationary::Output, Stationary::Weight, Stationary::Input];

    /// The two loop dimensions laid out across the PE grid, then the one
    /// walked in time inside each PE.
    pub fn spatial(self) -> (Dim, Dim, Dim) {
        match self {
            Stationary::Output => (Dim::M, Dim::N, Dim::K),
            Stationary::Weight => (Dim::K, Dim::N, Dim::M),
            Stationary::Input => (Dim::M, Dim::K, Dim::N),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stationary::Output => "output",
            Stationary::Weight => "weight",
            Stationary::Input => "input",
        }
    }
}

impl FromStr for Stationary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "output" => Ok(Stationary::Output),
            "weight" => Ok(Stationary::Weight),
            "input" => Ok(Stationary::Input),
            _ => Err(Error::arg(format!("unknown stationary scheme '{s}'"))),
        }
    }
}

/// GEMM loop dimension: `C[M, N] += A[M, K] * B[K, N]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dim {
    M,
    K,
    N,
}

impl Dim {
    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

/// Nesting of the three tile loops, outermost first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopOrder {
    Mkn,
    Mnk,
    Nkm,
    Nmk,
    Kmn,
    Knm,
}

impl LoopOrder {
    pub const ALL: [LoopOrder; 6] = [
        LoopOrder::Mkn,
        LoopOrder::Mnk,
        LoopOrder::Nkm,
        LoopOrder::Nmk,
        LoopOrder::Kmn,
        LoopOrder::Knm,
    ];

    pub fn dims(self) -> [Dim; 3] {
        use Dim::*;
        match self {
            LoopOrder::Mkn => [M, K, N],
            LoopOrder::Mnk => [M, N, K],
            LoopOrder::Nkm => [N, K, M],
            LoopOrder::Nmk => [N, M, K],
            LoopOrder::Kmn => [K, M, N],
            LoopOrder::Knm => [K, N, M],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LoopOrder::Mkn => "mkn",
            LoopOrder::Mnk => "mnk",
            LoopOrder::Nkm => "nkm",
            LoopOrder::Nmk => "nmk",
            LoopOrder::Kmn => "kmn",
            LoopOrder::Knm => "knm",
        }
    }
}

impl fmt::Display for LoopOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoopOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LoopOrder::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown loop order '{s}'")))
    }
}

/// Energy per event, in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyConstants {
    pub mac_pj: f64,
    pub l1_byte_pj: f64,
    pub l2_byte_pj: f64,
    pub dram_byte_pj: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        EnergyConstants {
            mac_pj: 1.0,
            l1_byte_pj: 1.0,
            l2_byte_pj: 6.0,
            dram_byte_pj: 100.0,
        }
    }
}

/// Systolic-array GEMM accelerator. Defaults: 1024 PEs in 8 clusters at
/// 200 MHz, 4 KB L1 per cluster, 1 MB shared L2, 128 Gbps NoC, 32 Gbps DRAM,
/// output stationary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceleratorConfig {
    pub pe_count: usize,
    pub clusters: usize,
    pub frequency_hz: f64,
    /// Local buffer of each cluster.
    pub l1_bytes: usize,
    pub l2_bytes: usize,
    pub noc_gbps: f64,
    pub dram_gbps: f64,
    pub stationary: Stationary,
    /// Operand width; 4 for FP32, 1 for INT8.
    pub element_bytes: usize,
    pub energy: EnergyConstants,
}

impl Default for AcceleratorConfig {
    fn default() -> Self {
        AcceleratorConfig {
            pe_count: 1024,
            clusters: 8,
            frequency_hz: 200e6,
            l1_bytes: 4096,
            l2_bytes: 1 << 20,
            noc_gbps: 128.0,
            dram_gbps: 32.0,
            stationary: Stationary::Output,
            element_bytes: 4,
            energy: EnergyConstants::default(),
        }
    }
}

impl AcceleratorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("pe_count", self.pe_count),
            ("clusters", self.clusters),
            ("l1_bytes", self.l1_bytes),
            ("l2_bytes", self.l2_bytes),
            ("element_bytes", self.element_bytes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::arg(format!("accelerator {name} must be positive")));
            }
        }
        let rates = [
            ("frequency_hz", self.frequency_hz),
            ("noc_gbps", self.noc_gbps),
            ("dram_gbps", self.dram_gbps),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::arg(format!("accelerator {name} must be positive, got {v}")));
            }
        }
        let e = &self.energy;
        for (name, v) in [
            ("mac_pj", e.mac_pj),
            ("l1_byte_pj", e.l1_byte_pj),
            ("l2_byte_pj", e.l2_byte_pj),
            ("dram_byte_pj", e.dram_byte_pj),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::arg(format!("energy constant {name} must be non-negative, got {v}")));
            }
        }
        if self.pe_count % self.clusters != 0 {
            return Err(Error::arg(format!(
                "pe_count {} is not divisible by {} clusters",
                self.pe_count, self.clusters
            )));
        }
        Ok(())
    }

    pub fn pes_per_cluster(&self) -> usize {
        self.pe_count / self.clusters
    }

    /// Bytes the NoC moves per clock.
    pub fn noc_bytes_per_cycle(&self) -> f64 {
        self.noc_gbps * 1e9 / 8.0 / self.frequency_hz
    }

    pub fn dram_bytes_per_cycle(&self) -> f64 {
        self.dram_gbps * 1e9 / 8.0 / self.frequency_hz
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("accelerator config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: AcceleratorConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

/// One blocking of a GEMM: tile sizes, which operand is pinned in the PEs,
/// and the nesting of the tile loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataflowConfig {
    pub tile_m: usize,
    pub tile_k: usize,
    pub tile_n: usize,
    pub stationary: Stationary,
    pub order: LoopOrder,
}

impl DataflowConfig {
    pub fn new(tile_m: usize, tile_k: usize, tile_n: usize) -> Self {
        DataflowConfig {
            tile_m,
            tile_k,
            tile_n,
            stationary: Stationary::Output,
            order: LoopOrder::Mnk,
        }
    }

    pub fn tile(&self, d: Dim) -> usize {
        match d {
            Dim::M => self.tile_m,
            Dim::K => self.tile_k,
            Dim::N => self.tile_n,
        }
    }
}

impl fmt::Display for DataflowConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{} {}-stationary {}",
            self.tile_m,
            self.tile_k,
            self.tile_n,
            self.stationary.as_str(),
            self.order
        )
    }
}
