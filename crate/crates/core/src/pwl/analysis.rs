use super::func::ScalarFunction;
use super::quad;
use super::table::PwlTable;
use crate::error::{Error, Result};

/// How squared errors are averaged.
#[derive(Debug, Clone, Copy)]
pub enum Weighting<'a> {
    /// Continuous average over the range.
    Uniform,
    /// Average over the given sample points.
    Empirical(&'a [f64]),
}

/// Mean squared error of `table` against `f` on `[lo, hi]`.
pub fn mse<F: ScalarFunction + ?Sized>(
    f: &F,
    table: &PwlTable,
    lo: f64,
    hi: f64,
    weighting: Weighting<'_>,
) -> Result<f64> {
    match weighting {
        Weighting::Empirical(samples) => {
            if samples.is_empty() {
                return Err(Error::arg("empirical weighting needs at least one sample"));
            }
            let sum: f64 = samples
                .iter()
                .map(|&x| {
                    let e = f.eval(x) - table.evaluate(x);
                    e * e
                })
                .sum();
            Ok(sum / samples.len() as f64)
        }
        Weighting::Uniform => {
            f.check_range(lo, hi)?;
            Ok(squared_error_integral(f, table, lo, hi)? / (hi - lo))
        }
    }
}

/// Integral of the squared error over `[lo, hi]`, split at the table's breakpoints.
fn squared_error_integral<F: ScalarFunction + ?Sized>(
    f: &F,
    table: &PwlTable,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    let mut cuts = vec![lo];
    cuts.extend(table.breakpoints().iter().copied().filter(|&x| lo < x && x < hi));
    cuts.push(hi);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let s = table.segment_index(0.5 * (a + b));
        total += segment_integral(f, table, s, a, b)?;
    }
    Ok(total)
}

fn segment_integral<F: ScalarFunction + ?Sized>(
    f: &F,
    table: &PwlTable,
    s: usize,
    a: f64,
    b: f64,
) -> Result<f64> {
    let (k, c) = (table.slopes()[s], table.intercepts()[s]);
    quad::integrate(
        |x| {
            let e = f.eval(x) - (k * x + c);
            e * e
        },
        a,
        b,
    )
    .map_err(|e| Error::Quadrature {
        segment: s,
        detail: e.to_string(),
    })
}

/// Continuous mean squared error on each interior segment.
pub fn segment_mse<F: ScalarFunction + ?Sized>(f: &F, table: &PwlTable) -> Result<Vec<f64>> {
    table
        .breakpoints()
        .windows(2)
        .enumerate()
        .map(|(s, w)| Ok(segment_integral(f, table, s, w[0], w[1])? / (w[1] - w[0])))
        .collect()
}

/// Largest absolute error on `samples + 1` evenly spaced points of `[lo, hi]`.
pub fn max_abs_error<F: ScalarFunction + ?Sized>(
    f: &F,
    table: &PwlTable,
    lo: f64,
    hi: f64,
    samples: usize,
) -> f64 {
    let step = (hi - lo) / samples.max(1) as f64;
    (0..=samples)
        .map(|i| {
            let x = if i == samples { hi } else { lo + step * i as f64 };
            (f.eval(x) - table.evaluate(x)).abs()
        })
        .fold(0.0, f64::max)
}
