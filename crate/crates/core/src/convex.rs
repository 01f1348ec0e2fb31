//! Convex obstacle functions with exact proximal maps.
//!
//! Every supported function is a separable sum of scalar kinds, so all maps
//! act componentwise and are evaluated in closed form: the property suites
//! can then assert the Moreau-Yosida identities at machine precision.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Scalar convex kind. Each satisfies `value(0) = 0 <= value(y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ConvexKind {
    Zero,
    /// Indicator of `[lo, hi]`; either endpoint may be infinite.
    IndicatorInterval {
        lo: f64,
        hi: f64,
    },
    /// `scale * y^2 / 2`.
    Quadratic {
        scale: f64,
    },
    /// `|y|^exponent` for an exponent in [`ABS_POWER_EXPONENTS`].
    AbsPower {
        exponent: f64,
    },
    /// `max(y, 0)`.
    MaxZero,
}

/// Exponents whose proximal map has a closed form.
pub const ABS_POWER_EXPONENTS: [f64; 6] = [1.0, 4.0 / 3.0, 1.5, 2.0, 3.0, 4.0];

impl ConvexKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ConvexKind::Zero | ConvexKind::MaxZero => Ok(()),
            ConvexKind::IndicatorInterval { lo, hi } => {
                if lo.is_nan() || hi.is_nan() || !(lo <= 0.0 && 0.0 <= hi) {
                    return Err(Error::InvalidSpec(format!(
                        "indicator interval [{lo}, {hi}] must contain 0"
                    )));
                }
                Ok(())
            }
            ConvexKind::Quadratic { scale } => {
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(Error::InvalidSpec(format!(
                        "quadratic scale must be positive, got {scale}"
                    )));
                }
                Ok(())
            }
            ConvexKind::AbsPower { exponent } => {
                if !ABS_POWER_EXPONENTS
                    .iter()
                    .any(|&e| (e - exponent).abs() < 1e-12)
                {
                    return Err(Error::InvalidSpec(format!(
                        "abs-power exponent {exponent} has no closed-form prox; \
                         supported: 1, 4/3, 3/2, 2, 3, 4"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ConvexKind::Zero)
    }

    pub fn value(&self, y: f64) -> f64 {
        match *self {
            ConvexKind::Zero => 0.0,
            ConvexKind::IndicatorInterval { lo, hi } => {
                if lo <= y && y <= hi {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ConvexKind::Quadratic { scale } => 0.5 * scale * y * y,
            ConvexKind::AbsPower { exponent } => y.abs().powf(exponent),
            ConvexKind::MaxZero => y.max(0.0),
        }
    }

    /// Closure of the effective domain.
    pub fn domain(&self) -> (f64, f64) {
        match *self {
            ConvexKind::IndicatorInterval { lo, hi } => (lo, hi),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Resolvent `J_eps(y) = argmin_v |y - v|^2 / (2 eps) + value(v)`.
    pub fn prox(&self, y: f64, eps: f64) -> f64 {
        match *self {
            ConvexKind::Zero => y,
            ConvexKind::IndicatorInterval { lo, hi } => y.clamp(lo, hi),
            ConvexKind::Quadratic { scale } => y / (1.0 + eps * scale),
            ConvexKind::AbsPower { exponent } => abs_power_prox(exponent, y, eps),
            ConvexKind::MaxZero => {
                if y > eps {
                    y - eps
                } else if y < 0.0 {
                    y
                } else {
                    0.0
                }
            }
        }
    }

    /// Yosida gradient `(y - J_eps(y)) / eps`.
    pub fn grad(&self, y: f64, eps: f64) -> f64 {
        match *self {
            ConvexKind::Zero => 0.0,
            // (y - b)^+ - (a - y)^+, exact for unbounded endpoints too
            ConvexKind::IndicatorInterval { lo, hi } => {
                ((y - hi).max(0.0) - (lo - y).max(0.0)) / eps
            }
            _ => (y - self.prox(y, eps)) / eps,
        }
    }
}

/// Shrinks `|y|` to the root `s >= 0` of `s + eps * p * s^(p-1) = |y|`.
fn abs_power_prox(p: f64, y: f64, eps: f64) -> f64 {
    let a = y.abs();
    let s = if (p - 1.0).abs() < 1e-12 {
        (a - eps).max(0.0)
    } else if (p - 2.0).abs() < 1e-12 {
        a / (1.0 + 2.0 * eps)
    } else if (p - 3.0).abs() < 1e-12 {
        // s + 3 eps s^2 = a, rationalised root
        2.0 * a / (1.0 + (1.0 + 12.0 * eps * a).sqrt())
    } else if (p - 1.5).abs() < 1e-12 {
        // w = sqrt(s): w^2 + 1.5 eps w - a = 0
        let w = 2.0 * a / (1.5 * eps + (2.25 * eps * eps + 4.0 * a).sqrt());
        w * w
    } else if (p - 4.0).abs() < 1e-12 {
        // s^3 + s / (4 eps) - a / (4 eps) = 0
        depressed_cubic_root(1.0 / (4.0 * eps), -a / (4.0 * eps))
    } else {
        // w = s^(1/3): w^3 + (4 eps / 3) w - a = 0
        let w = depressed_cubic_root(4.0 * eps / 3.0, -a);
        w * w * w
    };
    s.copysign(y)
}

/// Real root of `s^3 + p s + q = 0` for `p > 0` (hyperbolic form, no cancellation).
fn depressed_cubic_root(p: f64, q: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    let r = (p / 3.0).sqrt();
    let arg = 1.5 * q / p / r;
    -2.0 * r * (arg.asinh() / 3.0).sinh()
}

impl fmt::Display for ConvexKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ConvexKind::Zero => write!(f, "zero"),
            ConvexKind::IndicatorInterval { lo, hi } => {
                write!(f, "indicator({},{})", fmt_ext(lo), fmt_ext(hi))
            }
            ConvexKind::Quadratic { scale } => write!(f, "quadratic({scale})"),
            ConvexKind::AbsPower { exponent } => write!(f, "abspower({exponent})"),
            ConvexKind::MaxZero => write!(f, "maxzero"),
        }
    }
}

fn fmt_ext(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x}")
    }
}

impl FromStr for ConvexKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = crate::config::split_call(s)?;
        let kind = match (name.as_str(), args.len()) {
            ("zero", 0) => ConvexKind::Zero,
            ("maxzero", 0) => ConvexKind::MaxZero,
            ("indicator", 2) => ConvexKind::IndicatorInterval {
                lo: args[0],
                hi: args[1],
            },
            ("quadratic", 1) => ConvexKind::Quadratic { scale: args[0] },
            ("abspower", 1) => ConvexKind::AbsPower { exponent: args[0] },
            _ => return Err(Error::InvalidSpec(format!("unknown convex function `{s}`"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// Output of [`ConvexSpec::moreau`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MoreauOutput {
    pub envelope: f64,
    pub resolvent: Vec<f64>,
    pub gradient: Vec<f64>,
    pub epsilon: f64,
}

/// A separable proper l.s.c. convex function on R^m.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexSpec {
    components: Vec<ConvexKind>,
}

impl ConvexSpec {
    /// The same kind in every component. Indicator and max-zero kinds are
    /// one-dimensional; use [`ConvexSpec::product`] for boxes.
    pub fn new(kind: ConvexKind, dim: usize) -> Result<Self> {
        kind.validate()?;
        if dim == 0 {
            return Err(Error::InvalidSpec("dimension must be positive".into()));
        }
        if dim > 1
            && matches!(
                kind,
                ConvexKind::IndicatorInterval { .. } | ConvexKind::MaxZero
            )
        {
            return Err(Error::InvalidSpec(format!(
                "{kind} requires dimension 1 (use a product for m > 1)"
            )));
        }
        Ok(Self {
            components: vec![kind; dim],
        })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            components: vec![ConvexKind::Zero; dim.max(1)],
        }
    }

    pub fn indicator(lo: f64, hi: f64) -> Result<Self> {
        Self::new(ConvexKind::IndicatorInterval { lo, hi }, 1)
    }

    /// Separable product `sum_i kinds[i](y_i)`.
    pub fn product(kinds: Vec<ConvexKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::InvalidSpec("empty product".into()));
        }
        for k in &kinds {
            k.validate()?;
        }
        Ok(Self { components: kinds })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[ConvexKind] {
        &self.components
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(ConvexKind::is_zero)
    }

    fn check(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: y.len(),
            });
        }
        Ok(())
    }

    fn check_eps(eps: f64) -> Result<()> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::Domain(format!("eps must be positive, got {eps}")));
        }
        Ok(())
    }

    /// Unchecked value; `+inf` outside the effective domain.
    pub fn value(&self, y: &[f64]) -> f64 {
        self.components
            .iter()
            .zip(y)
            .map(|(k, &yi)| k.value(yi))
            .sum()
    }

    pub fn in_domain(&self, y: &[f64]) -> bool {
        self.value(y).is_finite()
    }

    pub fn prox(&self, y: &[f64], eps: f64) -> Result<Vec<f64>> {
        self.check(y)?;
        Self::check_eps(eps)?;
        ensure_finite("prox input", y)?;
        let mut out = vec![0.0; y.len()];
        self.prox_into(y, eps, &mut out);
        Ok(out)
    }

    pub fn prox_into(&self, y: &[f64], eps: f64, out: &mut [f64]) {
        for ((k, &yi), o) in self.components.iter().zip(y).zip(out.iter_mut()) {
            *o = k.prox(yi, eps);
        }
    }

    pub fn moreau(&self, y: &[f64], eps: f64) -> Result<MoreauOutput> {
        let resolvent = self.prox(y, eps)?;
        let gradient: Vec<f64> = self
            .components
            .iter()
            .zip(y)
            .map(|(k, &yi)| k.grad(yi, eps))
            .collect();
        let dist2: f64 = y
            .iter()
            .zip(&resolvent)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let envelope = dist2 / (2.0 * eps) + self.value(&resolvent);
        Ok(MoreauOutput {
            envelope,
            resolvent,
            gradient,
            epsilon: eps,
        })
    }

    /// Moreau envelope value without allocation checks.
    pub fn envelope(&self, y: &[f64], eps: f64) -> f64 {
        self.components
            .iter()
            .zip(y)
            .map(|(k, &yi)| {
                let j = k.prox(yi, eps);
                (yi - j) * (yi - j) / (2.0 * eps) + k.value(j)
            })
            .sum()
    }

    pub fn grad(&self, y: &[f64], eps: f64) -> Result<Vec<f64>> {
        self.check(y)?;
        Self::check_eps(eps)?;
        ensure_finite("gradient input", y)?;
        let mut out = vec![0.0; y.len()];
        self.grad_into(y, eps, &mut out);
        Ok(out)
    }

    pub fn grad_into(&self, y: &[f64], eps: f64, out: &mut [f64]) {
        for ((k, &yi), o) in self.components.iter().zip(y).zip(out.iter_mut()) {
            *o = k.grad(yi, eps);
        }
    }

    /// `-<u - v, grad_a(u) - grad_b(v)> - (eps_a + eps_b) <grad_a(u), grad_b(v)>`,
    /// which is never positive.
    pub fn cross_yosida_residual(
        &self,
        u: &[f64],
        eps_a: f64,
        v: &[f64],
        eps_b: f64,
    ) -> Result<f64> {
        let gu = self.grad(u, eps_a)?;
        let gv = self.grad(v, eps_b)?;
        let mut lhs = 0.0;
        let mut cross = 0.0;
        for i in 0..u.len() {
            lhs -= (u[i] - v[i]) * (gu[i] - gv[i]);
            cross += gu[i] * gv[i];
        }
        Ok(lhs - (eps_a + eps_b) * cross)
    }

    /// Metric projection onto the closed effective domain.
    pub fn project_domain_into(&self, y: &[f64], out: &mut [f64]) {
        for ((k, &yi), o) in self.components.iter().zip(y).zip(out.iter_mut()) {
            let (lo, hi) = k.domain();
            *o = yi.clamp(lo, hi);
        }
    }

    pub fn domain(&self, i: usize) -> (f64, f64) {
        self.components[i].domain()
    }
}

impl fmt::Display for ConvexSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let first = self.components[0];
        if self.components.iter().all(|k| *k == first) {
            write!(f, "{first}")
        } else {
            let parts: Vec<String> = self.components.iter().map(|k| k.to_string()).collect();
            write!(f, "product[{}]", parts.join(";"))
        }
    }
}

/// Solves `v + h * (a * grad phi_eps(v) + b * grad psi_eps(v)) = x` componentwise,
/// the implicit backward-Euler penalty step.
///
/// With a single active obstacle the resolvent of `I + h grad phi_eps` is
/// `eps/(eps+h) x + h/(eps+h) J_{eps+h}(x)`. Two distinct active obstacles
/// fall back to bisection on the strictly increasing scalar map.
#[allow(clippy::too_many_arguments)]
pub fn implicit_penalty_step(
    phi: &ConvexSpec,
    psi: &ConvexSpec,
    a: f64,
    b: f64,
    h: f64,
    eps: f64,
    x: &[f64],
    out: &mut [f64],
) {
    for i in 0..x.len() {
        let kp = phi.components[i];
        let ks = psi.components[i];
        let wa = if kp.is_zero() { 0.0 } else { a * h };
        let wb = if ks.is_zero() { 0.0 } else { b * h };
        out[i] = if wa == 0.0 && wb == 0.0 {
            x[i]
        } else if wb == 0.0 {
            single_resolvent(kp, wa, eps, x[i])
        } else if wa == 0.0 {
            single_resolvent(ks, wb, eps, x[i])
        } else if kp == ks {
            single_resolvent(kp, wa + wb, eps, x[i])
        } else {
            bisect_step(kp, ks, wa, wb, eps, x[i])
        };
    }
}

fn single_resolvent(k: ConvexKind, hw: f64, eps: f64, x: f64) -> f64 {
    let j = k.prox(x, eps + hw);
    (eps * x + hw * j) / (eps + hw)
}

fn bisect_step(kp: ConvexKind, ks: ConvexKind, wa: f64, wb: f64, eps: f64, x: f64) -> f64 {
    let f = |v: f64| v + wa * kp.grad(v, eps) + wb * ks.grad(v, eps) - x;
    // f(v) - (v - x) is nondecreasing with slope <= (wa + wb)/eps
    let mut lo = x;
    let mut hi = x;
    let mut step = 1.0 + x.abs();
    while f(lo) > 0.0 {
        lo -= step;
        step *= 2.0;
    }
    step = 1.0 + x.abs();
    while f(hi) < 0.0 {
        hi += step;
        step *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}
