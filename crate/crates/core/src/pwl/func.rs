use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Direction of a function on one of its monotone pieces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monotonicity {
    Increasing,
    Decreasing,
    Constant,
}

/// A maximal interval on which the function is monotone. Bounds may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonePiece {
    pub lo: f64,
    pub hi: f64,
    pub direction: Monotonicity,
}

impl MonotonePiece {
    fn new(lo: f64, hi: f64, direction: Monotonicity) -> Self {
        MonotonePiece { lo, hi, direction }
    }
}

/// A scalar function the approximation routines can work with.
///
/// `NonlinearFunc` covers the operators that show up in networks; tests and
/// callers can plug in their own functions (an affine map, for instance).
pub trait ScalarFunction {
    fn name(&self) -> String;

    fn eval(&self, x: f64) -> f64;

    fn derivative(&self, x: f64) -> f64;

    /// Points where the function is undefined.
    fn poles(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Smallest admissible input, if the domain is bounded below.
    fn domain_min(&self) -> Option<f64> {
        None
    }

    /// Monotone pieces covering the domain, in increasing order.
    fn monotone_pieces(&self) -> Vec<MonotonePiece>;

    /// Closed-form antiderivative, when one is numerically usable.
    fn antiderivative(&self, _x: f64) -> Option<f64> {
        None
    }

    /// Fails if `[lo, hi]` touches a pole or leaves the domain.
    fn check_range(&self, lo: f64, hi: f64) -> Result<()> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::arg(format!("range [{lo}, {hi}] is not finite")));
        }
        if lo >= hi {
            return Err(Error::arg(format!(
                "range [{lo}, {hi}] has non-positive width"
            )));
        }
        for p in self.poles() {
            if lo <= p && p <= hi {
                return Err(Error::Domain(format!(
                    "{} has a pole at {p} inside [{lo}, {hi}]",
                    self.name()
                )));
            }
        }
        if let Some(m) = self.domain_min() {
            if lo < m {
                return Err(Error::Domain(format!(
                    "{} is undefined below {m}; got range [{lo}, {hi}]",
                    self.name()
                )));
            }
        }
        Ok(())
    }

    /// The monotone piece that contains `x`, preferring the piece to the right
    /// when `x` sits exactly on a boundary.
    fn piece_at(&self, x: f64) -> Option<MonotonePiece> {
        self.monotone_pieces()
            .into_iter()
            .find(|p| p.lo <= x && x < p.hi)
    }
}

/// The nonlinear operators the toolkit knows how to approximate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonlinearFunc {
    Exp,
    Reciprocal,
    Sqrt,
    Rsqrt,
    Gelu,
    Tanh,
    Sigmoid,
    Erf,
    Square,
}

impl NonlinearFunc {
    pub const ALL: [NonlinearFunc; 9] = [
        NonlinearFunc::Exp,
        NonlinearFunc::Reciprocal,
        NonlinearFunc::Sqrt,
        NonlinearFunc::Rsqrt,
        NonlinearFunc::Gelu,
        NonlinearFunc::Tanh,
        NonlinearFunc::Sigmoid,
        NonlinearFunc::Erf,
        NonlinearFunc::Square,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NonlinearFunc::Exp => "exp",
            NonlinearFunc::Reciprocal => "reciprocal",
            NonlinearFunc::Sqrt => "sqrt",
            NonlinearFunc::Rsqrt => "rsqrt",
            NonlinearFunc::Gelu => "gelu",
            NonlinearFunc::Tanh => "tanh",
            NonlinearFunc::Sigmoid => "sigmoid",
            NonlinearFunc::Erf => "erf",
            NonlinearFunc::Square => "square",
        }
    }
}

impl fmt::Display for NonlinearFunc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NonlinearFunc {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        NonlinearFunc::ALL
            .into_iter()
            .find(|f| f.as_str() == lower)
            .ok_or_else(|| Error::arg(format!("unknown function '{s}'")))
    }
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_derivative(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Location of GELU's minimum, where its derivative vanishes.
pub fn gelu_stationary_point() -> f64 {
    static POINT: OnceLock<f64> = OnceLock::new();
    *POINT.get_or_init(|| {
        // derivative is negative at -2 and positive at 0
        let (mut lo, mut hi) = (-2.0_f64, 0.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gelu_derivative(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 {
                break;
            }
        }
        0.5 * (lo + hi)
    })
}

impl ScalarFunction for NonlinearFunc {
    fn name(&self) -> String {
        self.as_str().to_string()
    }

    fn eval(&self, x: f64) -> f64 {
        match self {
            NonlinearFunc::Exp => x.exp(),
            NonlinearFunc::Reciprocal => 1.0 / x,
            NonlinearFunc::Sqrt => x.sqrt(),
            NonlinearFunc::Rsqrt => 1.0 / x.sqrt(),
            NonlinearFunc::Gelu => gelu(x),
            NonlinearFunc::Tanh => x.tanh(),
            NonlinearFunc::Sigmoid => sigmoid(x),
            NonlinearFunc::Erf => libm::erf(x),
            NonlinearFunc::Square => x * x,
        }
    }

    fn derivative(&self, x: f64) -> f64 {
        match self {
            NonlinearFunc::Exp => x.exp(),
            NonlinearFunc::Reciprocal => -1.0 / (x * x),
            NonlinearFunc::Sqrt => 0.5 / x.sqrt(),
            NonlinearFunc::Rsqrt => -0.5 * x.powf(-1.5),
            NonlinearFunc::Gelu => gelu_derivative(x),
            NonlinearFunc::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            NonlinearFunc::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            NonlinearFunc::Erf => 2.0 / PI.sqrt() * (-x * x).exp(),
            NonlinearFunc::Square => 2.0 * x,
        }
    }

    fn poles(&self) -> Vec<f64> {
        match self {
            NonlinearFunc::Reciprocal | NonlinearFunc::Rsqrt => vec![0.0],
            _ => Vec::new(),
        }
    }

    fn domain_min(&self) -> Option<f64> {
        match self {
            NonlinearFunc::Sqrt | NonlinearFunc::Rsqrt => Some(0.0),
            _ => None,
        }
    }

    fn monotone_pieces(&self) -> Vec<MonotonePiece> {
        use Monotonicity::*;
        let inf = f64::INFINITY;
        match self {
            NonlinearFunc::Exp
            | NonlinearFunc::Tanh
            | NonlinearFunc::Sigmoid
            | NonlinearFunc::Erf => vec![MonotonePiece::new(-inf, inf, Increasing)],
            NonlinearFunc::Sqrt => vec![MonotonePiece::new(0.0, inf, Increasing)],
            NonlinearFunc::Rsqrt => vec![MonotonePiece::new(0.0, inf, Decreasing)],
            NonlinearFunc::Reciprocal => vec![
                MonotonePiece::new(-inf, 0.0, Decreasing),
                MonotonePiece::new(0.0, inf, Decreasing),
            ],
            NonlinearFunc::Gelu => {
                let s = gelu_stationary_point();
                vec![
                    MonotonePiece::new(-inf, s, Decreasing),
                    MonotonePiece::new(s, inf, Increasing),
                ]
            }
            NonlinearFunc::Square => vec![
                MonotonePiece::new(-inf, 0.0, Decreasing),
                MonotonePiece::new(0.0, inf, Increasing),
            ],
        }
    }

    fn antiderivative(&self, x: f64) -> Option<f64> {
        let v = match self {
            NonlinearFunc::Exp => x.exp(),
            NonlinearFunc::Reciprocal => x.abs().ln(),
            NonlinearFunc::Sqrt => 2.0 / 3.0 * x * x.sqrt(),
            NonlinearFunc::Rsqrt => 2.0 * x.sqrt(),
            NonlinearFunc::Square => x * x * x / 3.0,
            NonlinearFunc::Erf => x * libm::erf(x) + (-x * x).exp() / PI.sqrt(),
            NonlinearFunc::Gelu => {
                0.5 * ((x * x - 1.0) * std_normal_cdf(x) + x * std_normal_pdf(x))
            }
            // ln cosh and softplus lose digits to cancellation; integrate numerically
            NonlinearFunc::Tanh | NonlinearFunc::Sigmoid => return None,
        };
        Some(v)
    }
}

/// `f(x) = slope * x + intercept`, mostly useful as a test function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub slope: f64,
    pub intercept: f64,
}

impl ScalarFunction for Affine {
    fn name(&self) -> String {
        "affine".to_string()
    }

    fn eval(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    fn derivative(&self, _x: f64) -> f64 {
        self.slope
    }

    fn monotone_pieces(&self) -> Vec<MonotonePiece> {
        let direction = if self.slope > 0.0 {
            Monotonicity::Increasing
        } else if self.slope < 0.0 {
            Monotonicity::Decreasing
        } else {
            Monotonicity::Constant
        };
        vec![MonotonePiece::new(f64::NEG_INFINITY, f64::INFINITY, direction)]
    }

    fn antiderivative(&self, x: f64) -> Option<f64> {
        Some(0.5 * self.slope * x * x + self.intercept * x)
    }
}

/// GELU via erf in single precision, as the reference executor computes it.
pub fn gelu_f32(x: f32) -> f32 {
    x * 0.5 * (1.0 + libm::erff(x / SQRT_2 as f32))
}
