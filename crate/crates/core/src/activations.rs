//! Activation functions, their derivatives, and Gaussian moments.
//!
//! Moments are expectations over h ~ N(0, K):
//!
//! | kind | integrand |
//! |------|-----------|
//! | `Phi2` | φ(h)² |
//! | `DPhi2` | φ′(h)² |
//! | `Phi1` | φ(h) |
//! | `Delta` | φ″(h)² + φ‴(h)φ′(h) |
//!
//! Each has a closed form ([`moment_closed`]) and an independent quadrature
//! path ([`moment_quadrature`]) used to cross-check it.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use crate::error::{domain, invalid, Error, Result};
use crate::quadrature::{half_gaussian_expectation, trapezoid_expectation};

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// φ(x) = a₊·x for x > 0 and a₋·x for x < 0. ReLU is (1, 0).
    ScaleInvariant { a_plus: f64, a_minus: f64 },
    Erf,
    /// φ(x) = x·Φ(x) with Φ the standard normal CDF.
    Gelu,
}

/// Which Gaussian moment to take.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MomentKind {
    Phi2,
    DPhi2,
    Phi1,
    Delta,
}

impl MomentKind {
    pub const ALL: [MomentKind; 4] = [Self::Phi2, Self::DPhi2, Self::Phi1, Self::Delta];
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

impl Activation {
    pub fn relu() -> Self {
        Activation::ScaleInvariant { a_plus: 1.0, a_minus: 0.0 }
    }

    pub fn scale_invariant(a_plus: f64, a_minus: f64) -> Self {
        Activation::ScaleInvariant { a_plus, a_minus }
    }

    /// φ(x).
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::ScaleInvariant { a_plus, a_minus } => {
                if x > 0.0 {
                    a_plus * x
                } else {
                    a_minus * x
                }
            }
            Activation::Erf => libm::erf(x),
            Activation::Gelu => x * std_normal_cdf(x),
        }
    }

    /// φ′(x). Scale-invariant activations take the left slope at 0.
    #[inline]
    pub fn slope(self, x: f64) -> f64 {
        match self {
            Activation::ScaleInvariant { a_plus, a_minus } => {
                if x > 0.0 {
                    a_plus
                } else {
                    a_minus
                }
            }
            Activation::Erf => 2.0 / PI.sqrt() * (-x * x).exp(),
            Activation::Gelu => std_normal_cdf(x) + x * std_normal_pdf(x),
        }
    }

    /// φ and its first three derivatives; `order` ≤ 3.
    pub fn derivative(self, x: f64, order: u8) -> Option<f64> {
        let v = match (self, order) {
            (_, 0) => self.value(x),
            (_, 1) => self.slope(x),
            (Activation::ScaleInvariant { .. }, 2 | 3) => 0.0,
            (Activation::Erf, 2) => -2.0 * x * self.slope(x),
            (Activation::Erf, 3) => (4.0 * x * x - 2.0) * self.slope(x),
            (Activation::Gelu, 2) => (2.0 - x * x) * std_normal_pdf(x),
            (Activation::Gelu, 3) => (x * x * x - 4.0 * x) * std_normal_pdf(x),
            _ => return None,
        };
        Some(v)
    }

    fn integrand(self, kind: MomentKind, x: f64) -> f64 {
        match kind {
            MomentKind::Phi2 => self.value(x).powi(2),
            MomentKind::DPhi2 => self.slope(x).powi(2),
            MomentKind::Phi1 => self.value(x),
            MomentKind::Delta => {
                let d = |o| self.derivative(x, o).unwrap_or(0.0);
                d(2) * d(2) + d(3) * d(1)
            }
        }
    }

    /// d⟨φ²⟩/dK. The kernel map slope is σ_w² times this.
    pub fn phi2_slope(self, k: f64) -> f64 {
        match self {
            Activation::ScaleInvariant { a_plus, a_minus } => 0.5 * (a_plus * a_plus + a_minus * a_minus),
            Activation::Erf => 4.0 / PI / ((1.0 + 2.0 * k) * (1.0 + 4.0 * k).sqrt()),
            Activation::Gelu => {
                let (r, s) = (k / (1.0 + k), 1.0 / (1.0 + k));
                0.25 + r.asin() / (2.0 * PI)
                    + (4.0 * r * r + 11.0 * r * s + 5.0 * s * s) * k
                        / (2.0 * PI * (1.0 + 2.0 * k).powf(1.5))
            }
        }
    }

    /// lim_{K→∞} ⟨φ′²⟩.
    pub fn dphi2_limit(self) -> f64 {
        match self {
            Activation::ScaleInvariant { a_plus, a_minus } => 0.5 * (a_plus * a_plus + a_minus * a_minus),
            Activation::Erf => 0.0,
            Activation::Gelu => 0.5,
        }
    }

    /// Whether the moments are exactly proportional to K (or constant).
    pub fn is_scale_invariant(self) -> bool {
        matches!(self, Activation::ScaleInvariant { .. })
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Activation::ScaleInvariant { a_plus, a_minus } if a_plus == 1.0 && a_minus == 0.0 => {
                write!(f, "relu")
            }
            Activation::ScaleInvariant { a_plus, a_minus } => {
                write!(f, "scale-invariant:{a_plus}:{a_minus}")
            }
            Activation::Erf => write!(f, "erf"),
            Activation::Gelu => write!(f, "gelu"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => return Ok(Activation::relu()),
            "erf" => return Ok(Activation::Erf),
            "gelu" => return Ok(Activation::Gelu),
            _ => {}
        }
        let rest = s
            .strip_prefix("scale-invariant:")
            .ok_or_else(|| invalid(format!("unknown activation '{s}'")))?;
        let (p, m) = rest
            .split_once(':')
            .ok_or_else(|| invalid(format!("expected scale-invariant:a+:a-, got '{s}'")))?;
        let parse = |v: &str| {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| invalid(format!("bad slope '{v}' in '{s}'")))
        };
        Ok(Activation::scale_invariant(parse(p)?, parse(m)?))
    }
}

/// φ^{(order)}(x) for order 0..=3.
pub fn eval(act: Activation, x: f64, order: u8) -> Result<f64> {
    act.derivative(x, order)
        .ok_or_else(|| invalid(format!("derivative order {order} not supported (max 3)")))
}

fn check_kernel(k: f64) -> Result<()> {
    if k.is_nan() || k < 0.0 {
        return Err(domain(format!("kernel must be nonnegative, got {k}")));
    }
    Ok(())
}

/// Closed-form Gaussian moment at kernel `k`.
pub fn moment_closed(act: Activation, kind: MomentKind, k: f64) -> Result<f64> {
    check_kernel(k)?;
    Ok(closed(act, kind, k))
}

pub(crate) fn closed(act: Activation, kind: MomentKind, k: f64) -> f64 {
    use MomentKind::*;
    match act {
        Activation::ScaleInvariant { a_plus, a_minus } => {
            let c = 0.5 * (a_plus * a_plus + a_minus * a_minus);
            match kind {
                Phi2 => c * k,
                DPhi2 => c,
                Phi1 => (a_plus - a_minus) * (k / (2.0 * PI)).sqrt(),
                Delta => 0.0,
            }
        }
        Activation::Erf => match kind {
            Phi2 => 2.0 / PI * (2.0 * k / (1.0 + 2.0 * k)).asin(),
            DPhi2 => 4.0 / PI / (1.0 + 4.0 * k).sqrt(),
            Phi1 => 0.0,
            Delta => -8.0 / PI / (1.0 + 4.0 * k).powf(1.5),
        },
        Activation::Gelu => {
            let (r, s) = (k / (1.0 + k), 1.0 / (1.0 + k));
            let q = (1.0 + 2.0 * k).sqrt();
            match kind {
                Phi2 => 0.25 * k + k / (2.0 * PI) * r.asin() + k * r / (PI * q),
                DPhi2 => 0.25 + (r.asin() + (3.0 * s + 5.0 * r) * (k / (1.0 + 2.0 * k)) / q) / (2.0 * PI),
                Phi1 => k / (2.0 * PI * (1.0 + k)).sqrt(),
                Delta => gelu_delta(k),
            }
        }
    }
}

// ⟨φ″²⟩ + ⟨φ‴φ′⟩ for GELU. The φ″² and x⁴ϕ² pieces are Gaussian integrals
// of polynomials; the (x³−4x)ϕΦ piece reduces by Stein's lemma.
fn gelu_delta(k: f64) -> f64 {
    let kc = k / (1.0 + 2.0 * k);
    let poly = (4.0 - 8.0 * kc + 6.0 * kc * kc) / (2.0 * PI * (1.0 + 2.0 * k).sqrt());
    let a = k / (1.0 + k);
    let m1 = a / (2.0 * PI * (1.0 + a)).sqrt();
    let m3 = 2.0 * a * m1 + INV_SQRT_2PI * a * a / (1.0 + a).powf(1.5);
    poly + INV_SQRT_2PI / (1.0 + k).sqrt() * (m3 - 4.0 * m1)
}

/// Quadrature estimate of the same moment with `nodes` points.
///
/// Erf and GELU use the truncated trapezoid rule, which keeps resolving
/// their unit-scale structure at large K. Scale-invariant activations are
/// integrated separately on each side of the kink with Gauss–Hermite and
/// Gauss–Laguerre, exact for each polynomial branch.
pub fn moment_quadrature(act: Activation, kind: MomentKind, k: f64, nodes: usize) -> Result<f64> {
    check_kernel(k)?;
    if nodes < 16 {
        return Err(invalid(format!("quadrature needs at least 16 nodes, got {nodes}")));
    }
    let v = match act {
        Activation::ScaleInvariant { a_plus, a_minus } => {
            let right = Activation::scale_invariant(a_plus, a_plus);
            let left = Activation::scale_invariant(a_minus, a_minus);
            half_gaussian_expectation(k, nodes, |h| right.integrand(kind, h))
                + half_gaussian_expectation(k, nodes, |h| left.integrand(kind, -h))
        }
        _ => trapezoid_expectation(k, nodes, |h| act.integrand(kind, h)),
    };
    Ok(v)
}
