use super::func::{Monotonicity, ScalarFunction};
use super::table::ElasticConfig;
use crate::error::{Error, Result};

/// Bisection stops once the bracket is this narrow.
const BISECT_TOL: f64 = 1e-10;

/// A step that could not be solved by inversion and took the fixed width instead.
#[derive(Debug, Clone, PartialEq)]
pub struct StepWarning {
    pub step: usize,
    pub x: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizontalPlan {
    pub breakpoints: Vec<f64>,
    pub warnings: Vec<StepWarning>,
}

impl HorizontalPlan {
    /// Indices of segments produced by the fixed-width fallback.
    pub fn fallback_segments(&self) -> Vec<usize> {
        self.warnings.iter().map(|w| w.step).collect()
    }
}

/// Chooses breakpoints from `r_min` to `r_max`: a segment takes the full
/// horizontal step when the function moves by at most `delta_ly` across it,
/// and otherwise ends where the function has moved by exactly `delta_ly`.
pub fn horizontal_size_optimization<F: ScalarFunction + ?Sized>(
    f: &F,
    cfg: &ElasticConfig,
    r_min: f64,
    r_max: f64,
) -> Result<HorizontalPlan> {
    cfg.validate()?;
    f.check_range(r_min, r_max)?;
    let snap = (r_max - r_min) * 1e-12;
    let mut xs = vec![r_min];
    let mut warnings = Vec::new();
    let mut x = r_min;
    while x < r_max {
        let step = xs.len() - 1;
        if step >= cfg.max_segments {
            return Err(Error::Capacity(format!(
                "more than {} segments needed for {} on [{r_min}, {r_max}]",
                cfg.max_segments,
                f.name()
            )));
        }
        let probe = (x + cfg.delta_lx).min(r_max);
        let fx = f.eval(x);
        let dy = f.eval(probe) - fx;
        let mut next = if dy.abs() <= cfg.delta_ly {
            probe
        } else {
            let target = fx + dy.signum() * cfg.delta_ly;
            match invert_on_piece(f, x, probe, target) {
                Some(t) => t,
                None => {
                    warnings.push(StepWarning {
                        step,
                        x,
                        message: format!(
                            "{} is not monotone towards {target} on [{x}, {probe}]; using fixed step",
                            f.name()
                        ),
                    });
                    probe
                }
            }
        };
        if r_max - next <= snap {
            next = r_max;
        }
        xs.push(next);
        x = next;
    }
    Ok(HorizontalPlan {
        breakpoints: xs,
        warnings,
    })
}

/// Solves `f(t) = target` for `t` in `(x, probe]`, staying on the monotone
/// piece that contains `x`. Returns the bracket end closest to `x`, so the
/// vertical change never exceeds the budget.
fn invert_on_piece<F: ScalarFunction + ?Sized>(f: &F, x: f64, probe: f64, target: f64) -> Option<f64> {
    let piece = f.piece_at(x)?;
    if piece.direction == Monotonicity::Constant {
        return None;
    }
    let hi = probe.min(piece.hi);
    if hi <= x {
        return None;
    }
    let g = |t: f64| f.eval(t) - target;
    let g_lo = g(x);
    let g_hi = g(hi);
    if g_lo == 0.0 || g_lo.signum() == g_hi.signum() && g_hi != 0.0 {
        return None;
    }
    let (mut a, mut b) = (x, hi);
    while b - a > BISECT_TOL {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if g(m).signum() == g_lo.signum() {
            a = m;
        } else {
            b = m;
        }
    }
    Some(if a > x { a } else { b })
}
