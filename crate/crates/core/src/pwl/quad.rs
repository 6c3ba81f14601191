//! Adaptive Simpson quadrature.
//!
//! Each panel is refined until the Richardson error estimate falls below its
//! share of the absolute tolerance, or below a few ulps of the panel value
//! (below that, halving the interval only measures rounding noise).

/// Default absolute tolerance used throughout the approximation code.
pub const ABS_TOL: f64 = 1e-12;

/// Default recursion depth limit.
pub const MAX_DEPTH: u32 = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadFailure {
    pub a: f64,
    pub b: f64,
    pub reason: String,
}

impl std::fmt::Display for QuadFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} on [{}, {}]", self.reason, self.a, self.b)
    }
}

struct Panel {
    a: f64,
    m: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

/// Integrates `f` over `[a, b]` with the default tolerance and depth.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> Result<f64, QuadFailure> {
    integrate_with(f, a, b, ABS_TOL, MAX_DEPTH)
}

pub fn integrate_with<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    max_depth: u32,
) -> Result<f64, QuadFailure> {
    if a == b {
        return Ok(0.0);
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(QuadFailure {
            a,
            b,
            reason: "infinite bounds".into(),
        });
    }
    // four initial panels so symmetric integrands cannot fool the first test
    const PANELS: usize = 4;
    let h = (b - a) / PANELS as f64;
    let mut total = 0.0;
    for i in 0..PANELS {
        let pa = a + h * i as f64;
        let pb = if i + 1 == PANELS { b } else { a + h * (i + 1) as f64 };
        let pm = 0.5 * (pa + pb);
        let (fa, fm, fb) = (f(pa), f(pm), f(pb));
        let panel = Panel {
            a: pa,
            m: pm,
            b: pb,
            fa,
            fm,
            fb,
            whole: simpson(pa, pb, fa, fm, fb),
        };
        total += refine(&f, panel, abs_tol / PANELS as f64, max_depth)?;
    }
    Ok(total)
}

fn refine<F: Fn(f64) -> f64>(
    f: &F,
    p: Panel,
    tol: f64,
    depth: u32,
) -> Result<f64, QuadFailure> {
    let lm = 0.5 * (p.a + p.m);
    let rm = 0.5 * (p.m + p.b);
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(p.a, p.m, p.fa, flm, p.fm);
    let right = simpson(p.m, p.b, p.fm, frm, p.fb);
    let refined = left + right;
    let delta = refined - p.whole;
    if !delta.is_finite() {
        return Err(QuadFailure {
            a: p.a,
            b: p.b,
            reason: "integrand is not finite".into(),
        });
    }
    let noise = 16.0 * f64::EPSILON * (left.abs() + right.abs());
    if delta.abs() <= 15.0 * tol || delta.abs() <= noise {
        return Ok(refined + delta / 15.0);
    }
    if depth == 0 {
        return Err(QuadFailure {
            a: p.a,
            b: p.b,
            reason: format!("depth limit reached with error estimate {:e}", delta.abs() / 15.0),
        });
    }
    let l = Panel {
        a: p.a,
        m: lm,
        b: p.m,
        fa: p.fa,
        fm: flm,
        fb: p.fm,
        whole: left,
    };
    let r = Panel {
        a: p.m,
        m: rm,
        b: p.b,
        fa: p.fm,
        fm: frm,
        fb: p.fb,
        whole: right,
    };
    Ok(refine(f, l, tol / 2.0, depth - 1)? + refine(f, r, tol / 2.0, depth - 1)?)
}
