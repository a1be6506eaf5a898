//! Terminal payoffs, their regularity classes and the smooth/irregular
//! localization split used by the accelerated multi-level estimator.
//!
//! A payoff acts on the first state component of a terminal value.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Regularity class of a payoff, ordered from smoothest to roughest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Regularity {
    /// Twice differentiable with bounded first and second derivatives.
    C2Bounded,
    Lipschitz,
    Discontinuous,
}

/// Sup-norm bounds on the first and second derivative of a `C2Bounded` payoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeBounds {
    pub first: f64,
    pub second: f64,
}

type PayoffFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Kind {
    Call { strike: f64 },
    Digital { strike: f64 },
    SmoothedDigital { strike: f64, h: f64 },
    Tanh { center: f64, scale: f64 },
    Sine,
    Zero,
    Difference(Box<Payoff>, Box<Payoff>),
    Custom {
        f: PayoffFn,
        regularity: Regularity,
        lipschitz: Option<f64>,
        bounds: Option<DerivativeBounds>,
    },
}

/// A terminal functional `f: R -> R`.
#[derive(Clone)]
pub struct Payoff {
    kind: Kind,
    label: String,
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Payoff")
            .field("label", &self.label)
            .field("regularity", &self.regularity())
            .finish()
    }
}

/// `max(0, x - strike)`.
pub fn european_call(strike: f64) -> Payoff {
    Payoff {
        kind: Kind::Call { strike },
        label: format!("call(K={strike})"),
    }
}

/// `1{x >= strike}`, closed at the strike.
pub fn digital(strike: f64) -> Payoff {
    Payoff {
        kind: Kind::Digital { strike },
        label: format!("digital(K={strike})"),
    }
}

/// Linear ramp from 0 at `strike - h` to 1 at `strike + h`, i.e. a call
/// spread `(max(x-K+h, 0) - max(x-K-h, 0)) / 2h`.
pub fn smoothed_digital(strike: f64, h: f64) -> Result<Payoff> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("ramp half-width must be positive, got {h}")));
    }
    Ok(Payoff {
        kind: Kind::SmoothedDigital { strike, h },
        label: format!("smoothed_digital(K={strike},h={h})"),
    })
}

/// `tanh((x - center) / scale)`, a bounded `C2` payoff.
pub fn tanh_payoff(center: f64, scale: f64) -> Result<Payoff> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Domain(format!("tanh scale must be positive, got {scale}")));
    }
    Ok(Payoff {
        kind: Kind::Tanh { center, scale },
        label: format!("tanh((x-{center})/{scale})"),
    })
}

pub fn sine() -> Payoff {
    Payoff {
        kind: Kind::Sine,
        label: "sin(x)".into(),
    }
}

/// The zero functional; as a smooth part it turns the localized estimator
/// into the standard one.
pub fn zero() -> Payoff {
    Payoff {
        kind: Kind::Zero,
        label: "zero".into(),
    }
}

/// Wraps an arbitrary function. `bounds` is required for the second-order
/// bound check and should be given for `C2Bounded` payoffs.
pub fn custom<F>(
    label: impl Into<String>,
    f: F,
    regularity: Regularity,
    lipschitz: Option<f64>,
    bounds: Option<DerivativeBounds>,
) -> Payoff
where
    F: Fn(f64) -> f64 + Send + Sync + 'static,
{
    Payoff {
        kind: Kind::Custom {
            f: Arc::new(f),
            regularity,
            lipschitz,
            bounds,
        },
        label: label.into(),
    }
}

/// `C2Bounded` payoffs known to the library. Property tests of the
/// second-order bound run over this list.
pub fn registered_smooth_payoffs() -> Vec<Payoff> {
    vec![
        tanh_payoff(100.0, 10.0).expect("positive scale"),
        tanh_payoff(0.0, 1.0).expect("positive scale"),
        sine(),
    ]
}

impl Payoff {
    #[inline]
    pub fn evaluate(&self, x: f64) -> f64 {
        match &self.kind {
            Kind::Call { strike } => (x - strike).max(0.0),
            Kind::Digital { strike } => {
                if x >= *strike {
                    1.0
                } else {
                    0.0
                }
            }
            Kind::SmoothedDigital { strike, h } => {
                ((x - strike + h).max(0.0) - (x - strike - h).max(0.0)) / (2.0 * h)
            }
            Kind::Tanh { center, scale } => ((x - center) / scale).tanh(),
            Kind::Sine => x.sin(),
            Kind::Zero => 0.0,
            Kind::Difference(a, b) => a.evaluate(x) - b.evaluate(x),
            Kind::Custom { f, .. } => f(x),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn regularity(&self) -> Regularity {
        match &self.kind {
            Kind::Call { .. } | Kind::SmoothedDigital { .. } => Regularity::Lipschitz,
            Kind::Digital { .. } => Regularity::Discontinuous,
            Kind::Tanh { .. } | Kind::Sine | Kind::Zero => Regularity::C2Bounded,
            Kind::Difference(a, b) => a.regularity().max(b.regularity()),
            Kind::Custom { regularity, .. } => *regularity,
        }
    }

    /// Finite Lipschitz constant, when the payoff has one.
    pub fn lipschitz_constant(&self) -> Option<f64> {
        match &self.kind {
            Kind::Call { .. } => Some(1.0),
            Kind::Digital { .. } => None,
            Kind::SmoothedDigital { h, .. } => Some(1.0 / (2.0 * h)),
            Kind::Tanh { scale, .. } => Some(1.0 / scale),
            Kind::Sine => Some(1.0),
            Kind::Zero => Some(0.0),
            Kind::Difference(a, b) => Some(a.lipschitz_constant()? + b.lipschitz_constant()?),
            Kind::Custom { lipschitz, .. } => *lipschitz,
        }
    }

    pub fn derivative_bounds(&self) -> Option<DerivativeBounds> {
        match &self.kind {
            Kind::Tanh { scale, .. } => Some(DerivativeBounds {
                first: 1.0 / scale,
                // max |d2/du2 tanh u| = 4 / (3 sqrt 3)
                second: 4.0 / (3.0 * 3f64.sqrt()) / (scale * scale),
            }),
            Kind::Sine => Some(DerivativeBounds {
                first: 1.0,
                second: 1.0,
            }),
            Kind::Zero => Some(DerivativeBounds {
                first: 0.0,
                second: 0.0,
            }),
            Kind::Difference(a, b) => {
                let (a, b) = (a.derivative_bounds()?, b.derivative_bounds()?);
                Some(DerivativeBounds {
                    first: a.first + b.first,
                    second: a.second + b.second,
                })
            }
            Kind::Custom { bounds, .. } => *bounds,
            _ => None,
        }
    }

    /// Closed-form parameters used by the log-normal pricing formulas.
    pub(crate) fn shape(&self) -> PayoffShape<'_> {
        match &self.kind {
            Kind::Call { strike } => PayoffShape::Call(*strike),
            Kind::Digital { strike } => PayoffShape::Digital(*strike),
            Kind::SmoothedDigital { strike, h } => PayoffShape::SmoothedDigital(*strike, *h),
            Kind::Zero => PayoffShape::Zero,
            Kind::Difference(a, b) => PayoffShape::Difference(a, b),
            _ => PayoffShape::Other,
        }
    }
}

pub(crate) enum PayoffShape<'a> {
    Call(f64),
    Digital(f64),
    SmoothedDigital(f64, f64),
    Zero,
    Difference(&'a Payoff, &'a Payoff),
    Other,
}

/// A payoff split as `f = f_s + f_ir`.
#[derive(Debug, Clone)]
pub struct LocalizedPayoff {
    pub smooth_part: Payoff,
    pub irregular_part: Payoff,
    pub original: Payoff,
}

/// Splits `f` into the supplied smooth part and the remainder `f - f_s`.
pub fn localize(f: Payoff, f_s: Payoff) -> LocalizedPayoff {
    let label = format!("{} - {}", f.label(), f_s.label());
    let irregular_part = Payoff {
        kind: Kind::Difference(Box::new(f.clone()), Box::new(f_s.clone())),
        label,
    };
    LocalizedPayoff {
        smooth_part: f_s,
        irregular_part,
        original: f,
    }
}

/// Evaluates the second-order difference bound
///
/// ```text
/// |f(x1) - f(y1) + f(y2) - f(x2)|
///     <= |f''|/2 (|x1 - x2| + |y1 - y2|) |x1 - y1| + |f'| |x1 - y1 + y2 - x2|
/// ```
///
/// at one quadruple. A rounding allowance of a few ulps of the evaluated
/// payoff values is added to the right-hand side.
pub fn second_order_bound_check(f: &Payoff, x1: f64, y1: f64, y2: f64, x2: f64) -> Result<bool> {
    if f.regularity() != Regularity::C2Bounded {
        return Err(Error::Domain(format!(
            "{} is not a C2 payoff with bounded derivatives",
            f.label()
        )));
    }
    let bounds = f
        .derivative_bounds()
        .ok_or_else(|| Error::Domain(format!("{} has no derivative bounds", f.label())))?;
    let values = [f.evaluate(x1), f.evaluate(y1), f.evaluate(y2), f.evaluate(x2)];
    let lhs = (values[0] - values[1] + values[2] - values[3]).abs();
    let rhs = 0.5 * bounds.second * ((x1 - x2).abs() + (y1 - y2).abs()) * (x1 - y1).abs()
        + bounds.first * (x1 - y1 + y2 - x2).abs();
    let slack = 8.0 * f64::EPSILON * values.iter().map(|v| v.abs()).sum::<f64>();
    Ok(lhs <= rhs + slack)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn call_values() {
        let c = european_call(100.0);
        assert_eq!(c.evaluate(100.0), 0.0);
        assert_eq!(c.evaluate(110.0), 10.0);
        assert_eq!(c.evaluate(90.0), 0.0);
        assert_eq!(c.lipschitz_constant(), Some(1.0));
        assert_eq!(c.regularity(), Regularity::Lipschitz);
    }

    #[test]
    fn digital_closed_at_strike() {
        let d = digital(100.0);
        assert_eq!(d.evaluate(100.0), 1.0);
        assert_eq!(d.evaluate(99.999), 0.0);
        assert_eq!(d.evaluate(101.0), 1.0);
        assert_eq!(d.regularity(), Regularity::Discontinuous);
        assert_eq!(d.lipschitz_constant(), None);
    }

    #[test]
    fn ramp_values() {
        let s = smoothed_digital(100.0, 1.0).unwrap();
        assert_eq!(s.evaluate(100.0), 0.5);
        assert_eq!(s.evaluate(100.5), 0.75);
        assert_eq!(s.evaluate(99.0), 0.0);
        assert_eq!(s.evaluate(50.0), 0.0);
        assert_eq!(s.evaluate(101.0), 1.0);
        assert_eq!(s.evaluate(150.0), 1.0);
        assert_eq!(s.lipschitz_constant(), Some(0.5));
        assert!(smoothed_digital(100.0, 0.0).is_err());
        assert!(smoothed_digital(100.0, -1.0).is_err());
    }

    #[test]
    fn ramp_converges_to_digital_off_strike() {
        let d = digital(100.0);
        for &x in &[98.0, 99.95, 100.05, 103.0] {
            let errs: Vec<f64> = [1.0, 0.1, 0.01]
                .iter()
                .map(|&h| (smoothed_digital(100.0, h).unwrap().evaluate(x) - d.evaluate(x)).abs())
                .collect();
            assert!(errs[2] <= errs[1] + 1e-12 && errs[1] <= errs[0] + 1e-12);
            assert!(errs[2] < 1e-12, "x={x}");
        }
    }

    #[test]
    fn localization_of_digital() {
        let loc = localize(digital(100.0), smoothed_digital(100.0, 1.0).unwrap());
        for i in 0..=4000 {
            let x = 90.0 + i as f64 * 0.005;
            let ir = loc.irregular_part.evaluate(x);
            if !(99.0..=101.0).contains(&x) {
                assert_eq!(ir, 0.0, "x={x}");
            } else {
                assert!(ir.abs() <= 0.5, "x={x} ir={ir}");
            }
            let total = loc.smooth_part.evaluate(x) + ir;
            assert!((total - loc.original.evaluate(x)).abs() <= 1e-12);
        }
        assert_eq!(loc.irregular_part.regularity(), Regularity::Discontinuous);
    }

    #[test]
    fn localization_degenerate_cases() {
        let c = european_call(100.0);
        let same = localize(c.clone(), c.clone());
        let standard = localize(c.clone(), zero());
        for i in 0..200 {
            let x = 50.0 + i as f64;
            assert_eq!(same.irregular_part.evaluate(x), 0.0);
            assert_eq!(standard.irregular_part.evaluate(x), c.evaluate(x));
        }
    }

    #[test]
    fn bound_check_trivial_quadruples() {
        let f = sine();
        assert!(second_order_bound_check(&f, 1.0, 1.0, 2.0, 2.0).unwrap());
        assert!(second_order_bound_check(&f, 0.3, 0.3, 0.3, 0.3).unwrap());
        assert!(second_order_bound_check(&european_call(1.0), 0.0, 1.0, 2.0, 3.0).is_err());
        let unbounded = custom("x^2", |x| x * x, Regularity::C2Bounded, None, None);
        assert!(second_order_bound_check(&unbounded, 0.0, 1.0, 2.0, 3.0).is_err());
    }

    #[test]
    fn tanh_bounds_dominate_finite_differences() {
        let f = tanh_payoff(100.0, 10.0).unwrap();
        let b = f.derivative_bounds().unwrap();
        let h = 1e-3;
        for i in 0..4000 {
            let x = 60.0 + i as f64 * 0.02;
            let d1 = (f.evaluate(x + h) - f.evaluate(x - h)) / (2.0 * h);
            let d2 = (f.evaluate(x + h) - 2.0 * f.evaluate(x) + f.evaluate(x - h)) / (h * h);
            assert!(d1.abs() <= b.first * (1.0 + 1e-6));
            assert!(d2.abs() <= b.second * (1.0 + 1e-4));
        }
    }
}
