use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the elastic approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticConfig {
    /// Horizontal step, the default segment width.
    pub delta_lx: f64,
    /// Vertical budget per segment.
    pub delta_ly: f64,
    /// Expectation threshold; segments whose mean bias exceeds it get corrected.
    pub e_th: f64,
    /// Upper bound on the number of segments.
    pub max_segments: usize,
}

impl ElasticConfig {
    pub const DEFAULT_MAX_SEGMENTS: usize = 65536;

    pub fn new(delta_lx: f64, delta_ly: f64, e_th: f64) -> Self {
        ElasticConfig {
            delta_lx,
            delta_ly,
            e_th,
            max_segments: Self::DEFAULT_MAX_SEGMENTS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.delta_lx.is_finite()
            && self.delta_lx > 0.0
            && self.delta_ly.is_finite()
            && self.delta_ly > 0.0
            && self.e_th.is_finite()
            && self.e_th >= 0.0
            && self.max_segments >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("invalid elastic config {self:?}")))
        }
    }
}

/// Piecewise-linear approximant `y = k[s] * x + b[s]`.
///
/// Segment `s` covers `[x_s, x_{s+1})`; the last one is closed on the right.
/// Inputs left of the first breakpoint use segment 0, inputs right of the last
/// breakpoint use segment `n - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PwlTable {
    function: String,
    breakpoints: Vec<f64>,
    k: Vec<f64>,
    b: Vec<f64>,
    uniform: bool,
    corrected: bool,
    config: Option<ElasticConfig>,
}

impl PwlTable {
    pub fn new(
        function: impl Into<String>,
        breakpoints: Vec<f64>,
        k: Vec<f64>,
        b: Vec<f64>,
    ) -> Result<Self> {
        let n = k.len();
        if n == 0 {
            return Err(Error::arg("a table needs at least one segment"));
        }
        if b.len() != n || breakpoints.len() != n + 1 {
            return Err(Error::arg(format!(
                "table shape mismatch: {} breakpoints, {} slopes, {} intercepts",
                breakpoints.len(),
                n,
                b.len()
            )));
        }
        if breakpoints.iter().chain(&k).chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::arg("table contains non-finite values"));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("breakpoints must be strictly increasing"));
        }
        Ok(PwlTable {
            function: function.into(),
            breakpoints,
            k,
            b,
            uniform: false,
            corrected: false,
            config: None,
        })
    }

    /// The exact two-segment table for `max(x, 0)`.
    pub fn relu() -> Self {
        PwlTable::new("relu", vec![-1.0, 0.0, 1.0], vec![0.0, 1.0], vec![0.0, 0.0])
            .expect("static table")
    }

    /// Marks the breakpoints as evenly spaced, enabling O(1) indexing. Fails
    /// when they are not (within a few ulps of the range).
    pub fn with_uniform(mut self, uniform: bool) -> Result<Self> {
        if uniform {
            let n = self.segments() as f64;
            let (lo, hi) = (self.r_min(), self.r_max());
            let step = (hi - lo) / n;
            let tol = 64.0 * f64::EPSILON * lo.abs().max(hi.abs()).max(step);
            for (i, &x) in self.breakpoints.iter().enumerate() {
                if (lo + step * i as f64 - x).abs() > tol {
                    return Err(Error::arg("breakpoints are not uniformly spaced"));
                }
            }
        }
        self.uniform = uniform;
        Ok(self)
    }

    pub(crate) fn with_corrected(mut self, corrected: bool) -> Self {
        self.corrected = corrected;
        self
    }

    pub fn with_config(mut self, config: Option<ElasticConfig>) -> Self {
        self.config = config;
        self
    }

    pub fn function(&self) -> &str {
        &self.function
    }

    pub fn r_min(&self) -> f64 {
        self.breakpoints[0]
    }

    pub fn r_max(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn slopes(&self) -> &[f64] {
        &self.k
    }

    pub fn intercepts(&self) -> &[f64] {
        &self.b
    }

    pub fn segments(&self) -> usize {
        self.k.len()
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn is_corrected(&self) -> bool {
        self.corrected
    }

    pub fn config(&self) -> Option<&ElasticConfig> {
        self.config.as_ref()
    }

    /// Replaces the intercepts, keeping everything else.
    pub(crate) fn with_intercepts(mut self, b: Vec<f64>) -> Self {
        debug_assert_eq!(b.len(), self.k.len());
        self.b = b;
        self
    }

    /// Replaces slopes and intercepts (used when parameters are re-quantized).
    pub(crate) fn with_params(mut self, k: Vec<f64>, b: Vec<f64>) -> Self {
        debug_assert_eq!(k.len(), self.k.len());
        debug_assert_eq!(b.len(), self.b.len());
        self.k = k;
        self.b = b;
        self
    }

    /// Zero-based segment index of `x`.
    pub fn segment_index(&self, x: f64) -> usize {
        if self.uniform {
            self.segment_index_uniform(x)
        } else {
            self.segment_index_search(x)
        }
    }

    /// Binary search over the breakpoints.
    pub fn segment_index_search(&self, x: f64) -> usize {
        let n = self.segments();
        let count = self.breakpoints.partition_point(|&bp| bp <= x);
        count.saturating_sub(1).min(n - 1)
    }

    /// Closed-form index for evenly spaced breakpoints, nudged against the
    /// stored breakpoints so it agrees with the binary search bit for bit.
    pub fn segment_index_uniform(&self, x: f64) -> usize {
        let n = self.segments();
        let lo = self.r_min();
        let step = (self.r_max() - lo) / n as f64;
        let guess = ((x - lo) / step).floor();
        let mut s = if guess.is_nan() || guess < 0.0 {
            0
        } else {
            (guess as usize).min(n - 1)
        };
        while s > 0 && x < self.breakpoints[s] {
            s -= 1;
        }
        while s + 1 < n && x >= self.breakpoints[s + 1] {
            s += 1;
        }
        s
    }

    pub fn evaluate(&self, x: f64) -> f64 {
        let s = self.segment_index(x);
        self.k[s] * x + self.b[s]
    }

    /// Slope used for `x`; at a breakpoint this is the segment starting there.
    pub fn slope_at(&self, x: f64) -> f64 {
        self.k[self.segment_index(x)]
    }

    /// Elementwise [`evaluate`](Self::evaluate); large inputs are split across threads.
    pub fn evaluate_batch(&self, xs: &[f64]) -> Vec<f64> {
        const PARALLEL_MIN: usize = 1 << 14;
        if xs.len() >= PARALLEL_MIN {
            xs.par_iter().map(|&x| self.evaluate(x)).collect()
        } else {
            xs.iter().map(|&x| self.evaluate(x)).collect()
        }
    }

    /// Bytes needed to store the `(k, b)` pairs at the given width per parameter.
    pub fn parameter_bytes(&self, bytes_per_param: usize) -> usize {
        self.segments() * 2 * bytes_per_param
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Reals go through strings so they round-trip exactly.
#[derive(Serialize, Deserialize)]
struct ConfigFile {
    delta_lx: String,
    delta_ly: String,
    e_th: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_segments: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    function: String,
    r_min: String,
    r_max: String,
    uniform: bool,
    breakpoints: Vec<String>,
    k: Vec<String>,
    b: Vec<String>,
    corrected: bool,
    config: Option<ConfigFile>,
}

pub(crate) fn real_to_string(v: f64) -> String {
    // Display prints the shortest representation that parses back identically
    format!("{v}")
}

pub(crate) fn parse_real(s: &str) -> std::result::Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| format!("bad real '{s}': {e}"))
}

fn strings(v: &[f64]) -> Vec<String> {
    v.iter().map(|&x| real_to_string(x)).collect()
}

fn reals(v: &[String]) -> std::result::Result<Vec<f64>, String> {
    v.iter().map(|s| parse_real(s)).collect()
}

impl Serialize for PwlTable {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        TableFile {
            function: self.function.clone(),
            r_min: real_to_string(self.r_min()),
            r_max: real_to_string(self.r_max()),
            uniform: self.uniform,
            breakpoints: strings(&self.breakpoints),
            k: strings(&self.k),
            b: strings(&self.b),
            corrected: self.corrected,
            config: self.config.map(|c| ConfigFile {
                delta_lx: real_to_string(c.delta_lx),
                delta_ly: real_to_string(c.delta_ly),
                e_th: real_to_string(c.e_th),
                max_segments: Some(c.max_segments),
            }),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PwlTable {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = TableFile::deserialize(deserializer)?;
        let bp = reals(&file.breakpoints).map_err(D::Error::custom)?;
        let k = reals(&file.k).map_err(D::Error::custom)?;
        let b = reals(&file.b).map_err(D::Error::custom)?;
        let r_min = parse_real(&file.r_min).map_err(D::Error::custom)?;
        let r_max = parse_real(&file.r_max).map_err(D::Error::custom)?;
        let config = match file.config {
            Some(c) => Some(ElasticConfig {
                delta_lx: parse_real(&c.delta_lx).map_err(D::Error::custom)?,
                delta_ly: parse_real(&c.delta_ly).map_err(D::Error::custom)?,
                e_th: parse_real(&c.e_th).map_err(D::Error::custom)?,
                max_segments: c.max_segments.unwrap_or(ElasticConfig::DEFAULT_MAX_SEGMENTS),
            }),
            None => None,
        };
        let table = PwlTable::new(file.function, bp, k, b)
            .and_then(|t| t.with_uniform(file.uniform))
            .map_err(D::Error::custom)?;
        if table.r_min() != r_min || table.r_max() != r_max {
            return Err(D::Error::custom("r_min/r_max disagree with the breakpoints"));
        }
        Ok(table.with_corrected(file.corrected).with_config(config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform_table(lo: f64, hi: f64, n: usize) -> PwlTable {
        let step = (hi - lo) / n as f64;
        let mut bp: Vec<f64> = (0..=n).map(|i| lo + step * i as f64).collect();
        bp[n] = hi;
        let k = (0..n).map(|i| i as f64).collect();
        let b = (0..n).map(|i| -(i as f64)).collect();
        PwlTable::new("test", bp, k, b).unwrap().with_uniform(true).unwrap()
    }

    #[test]
    fn uniform_index_edges() {
        let t = uniform_table(0.0, 4.0, 8);
        assert_eq!(t.segment_index(0.0), 0);
        assert_eq!(t.segment_index(3.999), 7);
        assert_eq!(t.segment_index(4.0), 7);
        assert_eq!(t.segment_index(100.0), 7);
        assert_eq!(t.segment_index(-3.0), 0);
        assert_eq!(t.segment_index(0.5), 1);
        assert_eq!(t.segment_index(f64::NAN), 0);
    }

    #[test]
    fn relu_table_is_exact() {
        let t = PwlTable::relu();
        for &x in &[-3.5, -1e-30, 0.0, 1e-30, 0.25, 7.0] {
            assert_eq!(t.evaluate(x), x.max(0.0));
        }
        assert_eq!(t.slope_at(-1.0), 0.0);
        assert_eq!(t.slope_at(1.0), 1.0);
    }

    #[test]
    fn rejects_malformed() {
        assert!(PwlTable::new("x", vec![0.0], vec![], vec![]).is_err());
        assert!(PwlTable::new("x", vec![0.0, 0.0], vec![1.0], vec![0.0]).is_err());
        assert!(PwlTable::new("x", vec![0.0, 1.0], vec![1.0], vec![]).is_err());
        assert!(PwlTable::new("x", vec![0.0, 1.0, 3.0], vec![1.0, 1.0], vec![0.0, 0.0])
            .unwrap()
            .with_uniform(true)
            .is_err());
    }

    fn linear_scan(t: &PwlTable, x: f64) -> usize {
        let bp = t.breakpoints();
        let n = t.segments();
        if x < bp[0] {
            return 0;
        }
        for i in 0..n {
            if bp[i] <= x && x < bp[i + 1] {
                return i;
            }
        }
        n - 1
    }

    #[test]
    fn index_matches_linear_scan_including_breakpoints() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let uniform = uniform_table(-8.0, 8.0, 37);
        let mut bp = vec![-3.0];
        for _ in 0..50 {
            let last = *bp.last().unwrap();
            bp.push(last + rng.gen_range(1e-3..0.5));
        }
        let n = bp.len() - 1;
        let irregular = PwlTable::new("test", bp, vec![0.0; n], vec![0.0; n]).unwrap();
        for t in [&uniform, &irregular] {
            let (lo, hi) = (t.r_min(), t.r_max());
            let mut xs: Vec<f64> = (0..10_000)
                .map(|_| rng.gen_range(lo - 2.0..hi + 2.0))
                .collect();
            xs.extend_from_slice(t.breakpoints());
            for &x in &xs {
                let want = linear_scan(t, x);
                assert_eq!(t.segment_index_search(x), want, "x = {x}");
                assert_eq!(t.segment_index(x), want, "x = {x}");
            }
        }
    }

    proptest! {
        #[test]
        fn uniform_and_search_agree(lo in -50.0f64..50.0, width in 1e-3f64..100.0, n in 1usize..300, x in -200.0f64..200.0) {
            let t = uniform_table(lo, lo + width, n);
            prop_assert_eq!(t.segment_index_uniform(x), t.segment_index_search(x));
            for &bp in t.breakpoints() {
                prop_assert_eq!(t.segment_index_uniform(bp), t.segment_index_search(bp));
            }
        }

        #[test]
        fn json_round_trip_is_exact(lo in -10.0f64..10.0, width in 1e-6f64..20.0, n in 1usize..40, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = uniform_table(lo, lo + width, n);
            let k: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 1e3 - 5e2).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() / 3.0).collect();
            let t = t.with_params(k, b).with_config(Some(ElasticConfig::new(0.1, 1.0 / 3.0, 0.0)));
            let back = PwlTable::from_json(&t.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn batch_is_bit_identical_to_scalar() {
        let t = uniform_table(-4.0, 4.0, 16);
        let xs: Vec<f64> = (0..40_000).map(|i| -6.0 + i as f64 * 3e-4).collect();
        let ys = t.evaluate_batch(&xs);
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(t.evaluate(*x).to_bits(), y.to_bits());
        }
    }
}
