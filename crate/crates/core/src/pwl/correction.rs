use super::func::ScalarFunction;
use super::quad;
use super::table::PwlTable;
use crate::error::{Error, Result};

/// Mean of `f` over `[x0, x1]`.
pub fn segment_mean<F: ScalarFunction + ?Sized>(f: &F, x0: f64, x1: f64, segment: usize) -> Result<f64> {
    let integral = match (f.antiderivative(x0), f.antiderivative(x1)) {
        (Some(a), Some(b)) if a.is_finite() && b.is_finite() => b - a,
        _ => quad::integrate(|x| f.eval(x), x0, x1).map_err(|e| Error::Quadrature {
            segment,
            detail: e.to_string(),
        })?,
    };
    Ok(integral / (x1 - x0))
}

/// Expectation bias of the chord on `[x0, x1]`: the mean of `f` minus the mean
/// of the chord, which is the average of the endpoint values.
pub fn expectation_bias<F: ScalarFunction + ?Sized>(
    f: &F,
    x0: f64,
    x1: f64,
    segment: usize,
) -> Result<f64> {
    Ok(segment_mean(f, x0, x1, segment)? - 0.5 * (f.eval(x0) + f.eval(x1)))
}

/// Per-segment expectation biases of an uncorrected table.
pub fn expectation_biases<F: ScalarFunction + ?Sized>(f: &F, table: &PwlTable) -> Result<Vec<f64>> {
    table
        .breakpoints()
        .windows(2)
        .enumerate()
        .map(|(i, w)| expectation_bias(f, w[0], w[1], i))
        .collect()
}

/// Shifts each segment's intercept by its expectation bias when the bias
/// magnitude exceeds `e_th`. With `e_th = 0` every segment with nonzero bias
/// is shifted. The result may be discontinuous at breakpoints.
pub fn vertical_bias_correction<F: ScalarFunction + ?Sized>(
    f: &F,
    table: PwlTable,
    e_th: f64,
) -> Result<PwlTable> {
    if table.is_corrected() {
        return Err(Error::arg("table has already been bias-corrected"));
    }
    if !(e_th.is_finite() && e_th >= 0.0) {
        return Err(Error::arg(format!("expectation threshold must be >= 0, got {e_th}")));
    }
    let biases = expectation_biases(f, &table)?;
    let b = table
        .intercepts()
        .iter()
        .zip(&biases)
        .map(|(&b, &de)| if de.abs() > e_th { b + de } else { b })
        .collect();
    Ok(table.with_intercepts(b).with_corrected(true))
}
