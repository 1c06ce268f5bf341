//! Closed-form curves, bands between them, and small index types.

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Twice continuously differentiable curve on `[0, 1]` with analytic
/// derivatives. No numeric differentiation happens in production paths.
#[derive(Clone, Debug, PartialEq)]
pub enum Curve {
    Const(f64),
    Linear { intercept: f64, slope: f64 },
    Quadratic { c0: f64, c1: f64, c2: f64 },
    /// `amplitude * sin(angular_freq * t + phase)`
    Sine { amplitude: f64, angular_freq: f64, phase: f64 },
    /// `sqrt((t - center)^2 + width^2)`: a mollified `|t - center|`, smooth
    /// for positive widths and converging to the kink as the width shrinks.
    SmoothAbs { center: f64, width: f64 },
    Scaled(f64, Box<Curve>),
    Offset(f64, Box<Curve>),
}

impl Curve {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Curve::Const(c) => *c,
            Curve::Linear { intercept, slope } => intercept + slope * t,
            Curve::Quadratic { c0, c1, c2 } => c0 + t * (c1 + t * c2),
            Curve::Sine { amplitude, angular_freq, phase } => {
                amplitude * math::sin(angular_freq * t + phase)
            }
            Curve::SmoothAbs { center, width } => {
                let u = t - center;
                math::sqrt(u * u + width * width)
            }
            Curve::Scaled(s, inner) => s * inner.value(t),
            Curve::Offset(o, inner) => o + inner.value(t),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            Curve::Const(_) => 0.0,
            Curve::Linear { slope, .. } => *slope,
            Curve::Quadratic { c1, c2, .. } => c1 + 2.0 * c2 * t,
            Curve::Sine { amplitude, angular_freq, phase } => {
                amplitude * angular_freq * math::cos(angular_freq * t + phase)
            }
            Curve::SmoothAbs { center, width } => {
                let u = t - center;
                u / math::sqrt(u * u + width * width)
            }
            Curve::Scaled(s, inner) => s * inner.derivative(t),
            Curve::Offset(_, inner) => inner.derivative(t),
        }
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        match self {
            Curve::Const(_) | Curve::Linear { .. } => 0.0,
            Curve::Quadratic { c2, .. } => 2.0 * c2,
            Curve::Sine { amplitude, angular_freq, phase } => {
                -amplitude * angular_freq * angular_freq * math::sin(angular_freq * t + phase)
            }
            Curve::SmoothAbs { center, width } => {
                let u = t - center;
                let r = u * u + width * width;
                width * width / (r * math::sqrt(r))
            }
            Curve::Scaled(s, inner) => s * inner.second_derivative(t),
            Curve::Offset(_, inner) => inner.second_derivative(t),
        }
    }

    pub fn negated(&self) -> Curve {
        Curve::Scaled(-1.0, Box::new(self.clone()))
    }

    pub fn shifted(&self, offset: f64) -> Curve {
        match self {
            Curve::Const(c) => Curve::Const(c + offset),
            other => Curve::Offset(offset, Box::new(other.clone())),
        }
    }

    /// True when the curve has zero slope everywhere (its Cameron-Martin
    /// weight is identically one).
    pub fn is_const(&self) -> bool {
        match self {
            Curve::Const(_) => true,
            Curve::Linear { slope, .. } => *slope == 0.0,
            Curve::Quadratic { c1, c2, .. } => *c1 == 0.0 && *c2 == 0.0,
            Curve::Sine { amplitude, .. } => *amplitude == 0.0,
            Curve::SmoothAbs { .. } => false,
            Curve::Scaled(s, inner) => *s == 0.0 || inner.is_const(),
            Curve::Offset(_, inner) => inner.is_const(),
        }
    }

    /// Check the analytic derivatives against central finite differences on a
    /// probe grid.
    pub fn check_derivatives(&self, probes: usize, tol: f64) -> bool {
        let eps = 1e-5;
        for i in 0..=probes {
            let t = 0.01 + 0.98 * i as f64 / probes as f64;
            let d_fd = (self.value(t + eps) - self.value(t - eps)) / (2.0 * eps);
            let dd_fd =
                (self.value(t + eps) - 2.0 * self.value(t) + self.value(t - eps)) / (eps * eps);
            if math::abs(d_fd - self.derivative(t)) > tol
                || math::abs(dd_fd - self.second_derivative(t)) > tol * 10.0
            {
                return false;
            }
        }
        true
    }
}

/// Which curve of a band an endpoint sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Side {
    Lower,
    Upper,
}

/// Sign attached to a boundary contribution: `Plus` selects the upper curve,
/// `Minus` the lower.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Sign {
    Minus,
    Plus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Minus => -1.0,
            Sign::Plus => 1.0,
        }
    }

    pub fn side(self) -> Side {
        match self {
            Sign::Minus => Side::Lower,
            Sign::Plus => Side::Upper,
        }
    }

    pub fn flipped(self) -> Sign {
        match self {
            Sign::Minus => Sign::Plus,
            Sign::Plus => Sign::Minus,
        }
    }

    /// All sign tuples of length `j`, lexicographic with `Minus < Plus`.
    pub fn tuples(j: usize) -> Vec<Vec<Sign>> {
        let mut out = Vec::with_capacity(1 << j);
        for bits in 0..(1u32 << j) {
            out.push(
                (0..j)
                    .map(|i| {
                        if bits >> (j - 1 - i) & 1 == 1 {
                            Sign::Plus
                        } else {
                            Sign::Minus
                        }
                    })
                    .collect(),
            );
        }
        out
    }
}

/// Tuple of boundary signs, one per pinned time.
pub type SignVector = Vec<Sign>;

/// Region between two curves; either side may be absent (unbounded).
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    lower: Option<Curve>,
    upper: Option<Curve>,
}

impl Band {
    /// Band with both sides present; the gap must be strictly positive,
    /// checked on a 10^4-point probe grid.
    pub fn between(lower: Curve, upper: Curve) -> Result<Band> {
        Band::new(Some(lower), Some(upper))
    }

    pub fn new(lower: Option<Curve>, upper: Option<Curve>) -> Result<Band> {
        if let (Some(lo), Some(up)) = (&lower, &upper) {
            let probes = 10_000;
            for i in 0..=probes {
                let t = i as f64 / probes as f64;
                if up.value(t) - lo.value(t) <= 0.0 {
                    return Err(Error::Domain("band gap must be strictly positive"));
                }
            }
        }
        Ok(Band { lower, upper })
    }

    pub fn above(lower: Curve) -> Band {
        Band { lower: Some(lower), upper: None }
    }

    pub fn below(upper: Curve) -> Band {
        Band { lower: None, upper: Some(upper) }
    }

    /// Unconstrained band (no curve on either side).
    pub fn free() -> Band {
        Band { lower: None, upper: None }
    }

    pub fn lower(&self) -> Option<&Curve> {
        self.lower.as_ref()
    }

    pub fn upper(&self) -> Option<&Curve> {
        self.upper.as_ref()
    }

    pub fn curve(&self, side: Side) -> Option<&Curve> {
        match side {
            Side::Lower => self.lower.as_ref(),
            Side::Upper => self.upper.as_ref(),
        }
    }

    pub fn is_free(&self) -> bool {
        self.lower.is_none() && self.upper.is_none()
    }

    /// Closed-band membership at a single time.
    #[inline]
    pub fn contains(&self, t: f64, x: f64) -> bool {
        if let Some(lo) = &self.lower {
            if x < lo.value(t) {
                return false;
            }
        }
        if let Some(up) = &self.upper {
            if x > up.value(t) {
                return false;
            }
        }
        true
    }

    /// Strict interior membership at a single time.
    pub fn contains_interior(&self, t: f64, x: f64) -> bool {
        if let Some(lo) = &self.lower {
            if x <= lo.value(t) {
                return false;
            }
        }
        if let Some(up) = &self.upper {
            if x >= up.value(t) {
                return false;
            }
        }
        true
    }

    /// Band widened by `eta` on each finite side.
    pub fn widened(&self, eta: f64) -> Band {
        Band {
            lower: self.lower.as_ref().map(|c| c.shifted(-eta)),
            upper: self.upper.as_ref().map(|c| c.shifted(eta)),
        }
    }

    /// Upside-down reflection: negate both curves and swap sides.
    pub fn flipped(&self) -> Band {
        Band {
            lower: self.upper.as_ref().map(Curve::negated),
            upper: self.lower.as_ref().map(Curve::negated),
        }
    }
}

/// Strictly increasing times in the open unit interval.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeTuple(Vec<f64>);

impl TimeTuple {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Domain("time tuple must be non-empty"));
        }
        for w in times.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Domain("time tuple must be strictly increasing"));
            }
        }
        if times[0] <= 0.0 || times[times.len() - 1] >= 1.0 {
            return Err(Error::Domain("time tuple must lie strictly inside (0, 1)"));
        }
        Ok(TimeTuple(times))
    }

    pub fn times(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let curves = [
            Curve::Const(0.7),
            Curve::Linear { intercept: -0.2, slope: 1.3 },
            Curve::Quadratic { c0: 0.1, c1: -0.4, c2: 2.0 },
            Curve::Sine { amplitude: 0.2, angular_freq: math::PI, phase: 0.0 },
            Curve::Scaled(-1.0, Box::new(Curve::Sine {
                amplitude: 0.5,
                angular_freq: 2.0 * math::PI,
                phase: 0.3,
            })),
            Curve::Offset(0.05, Box::new(Curve::Quadratic { c0: 0.0, c1: 1.0, c2: -1.0 })),
            Curve::SmoothAbs { center: 0.4, width: 0.05 },
        ];
        for c in curves {
            assert!(c.check_derivatives(100, 1e-6), "curve {c:?}");
        }
    }

    #[test]
    fn band_requires_positive_gap() {
        let crossing = Band::between(
            Curve::Linear { intercept: 0.0, slope: 1.0 },
            Curve::Const(0.5),
        );
        assert_eq!(crossing, Err(Error::Domain("band gap must be strictly positive")));
        assert!(Band::between(Curve::Const(0.0), Curve::Const(1.0)).is_ok());
    }

    #[test]
    fn one_sided_and_free_bands() {
        let above = Band::above(Curve::Const(0.0));
        assert!(above.contains(0.3, 5.0));
        assert!(above.contains(0.3, 0.0));
        assert!(!above.contains(0.3, -1e-12));
        assert!(Band::free().contains(0.5, 1e9));
    }

    #[test]
    fn flipped_band_swaps_and_negates() {
        let band = Band::between(Curve::Const(0.0), Curve::Const(1.0)).unwrap();
        let flip = band.flipped();
        assert_eq!(flip.lower().unwrap().value(0.3), -1.0);
        assert_eq!(flip.upper().unwrap().value(0.3), 0.0);
    }

    #[test]
    fn sign_tuples_enumerate_all_combinations() {
        let tuples = Sign::tuples(2);
        assert_eq!(tuples.len(), 4);
        assert_eq!(tuples[0], [Sign::Minus, Sign::Minus]);
        assert_eq!(tuples[3], [Sign::Plus, Sign::Plus]);
    }

    #[test]
    fn time_tuple_validation() {
        assert!(TimeTuple::new(alloc::vec![0.2, 0.5, 0.8]).is_ok());
        assert!(TimeTuple::new(alloc::vec![0.5, 0.5]).is_err());
        assert!(TimeTuple::new(alloc::vec![0.0, 0.5]).is_err());
        assert!(TimeTuple::new(alloc::vec![]).is_err());
    }
}
