use super::correction::vertical_bias_correction;
use super::func::ScalarFunction;
use super::horizontal::{horizontal_size_optimization, HorizontalPlan};
use super::table::{ElasticConfig, PwlTable};
use crate::error::{Error, Result};

/// Chord interpolant through `f` at the given breakpoints.
pub fn chord_fit<F: ScalarFunction + ?Sized>(f: &F, breakpoints: Vec<f64>) -> Result<PwlTable> {
    if breakpoints.len() < 2 {
        return Err(Error::arg("need at least two breakpoints"));
    }
    f.check_range(breakpoints[0], *breakpoints.last().unwrap())?;
    let values: Vec<f64> = breakpoints.iter().map(|&x| f.eval(x)).collect();
    let mut k = Vec::with_capacity(values.len() - 1);
    let mut b = Vec::with_capacity(values.len() - 1);
    for i in 0..values.len() - 1 {
        let (x0, x1) = (breakpoints[i], breakpoints[i + 1]);
        let slope = (values[i + 1] - values[i]) / (x1 - x0);
        k.push(slope);
        b.push(values[i] - slope * x0);
    }
    PwlTable::new(f.name(), breakpoints, k, b)
}

/// Evenly spaced breakpoints `lo + i * (hi - lo) / n`, with the last one pinned to `hi`.
pub fn uniform_breakpoints(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / n as f64;
    let mut bp: Vec<f64> = (0..=n).map(|i| lo + step * i as f64).collect();
    bp[n] = hi;
    bp
}

/// Chord fit on `n` equal-width segments.
pub fn fit_uniform<F: ScalarFunction + ?Sized>(
    f: &F,
    r_min: f64,
    r_max: f64,
    n: usize,
) -> Result<PwlTable> {
    if n == 0 {
        return Err(Error::arg("segment count must be at least 1"));
    }
    f.check_range(r_min, r_max)?;
    chord_fit(f, uniform_breakpoints(r_min, r_max, n))?.with_uniform(true)
}

/// Horizontal sizing, chord fit and vertical bias correction, in that order.
pub fn build_elastic<F: ScalarFunction + ?Sized>(
    f: &F,
    r_min: f64,
    r_max: f64,
    cfg: &ElasticConfig,
) -> Result<PwlTable> {
    build_elastic_detailed(f, r_min, r_max, cfg).map(|(t, _)| t)
}

/// Like [`build_elastic`], also returning the breakpoint plan with any
/// fallback warnings it recorded.
pub fn build_elastic_detailed<F: ScalarFunction + ?Sized>(
    f: &F,
    r_min: f64,
    r_max: f64,
    cfg: &ElasticConfig,
) -> Result<(PwlTable, HorizontalPlan)> {
    let plan = horizontal_size_optimization(f, cfg, r_min, r_max)?;
    let chord = chord_fit(f, plan.breakpoints.clone())?;
    let table = vertical_bias_correction(f, chord, cfg.e_th)?.with_config(Some(*cfg));
    Ok((table, plan))
}

/// Uniform chord fit followed by bias correction of every segment whose
/// expectation bias exceeds `e_th`.
pub fn fit_uniform_corrected<F: ScalarFunction + ?Sized>(
    f: &F,
    r_min: f64,
    r_max: f64,
    n: usize,
    e_th: f64,
) -> Result<PwlTable> {
    vertical_bias_correction(f, fit_uniform(f, r_min, r_max, n)?, e_th)
}
