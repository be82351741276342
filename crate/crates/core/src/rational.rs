//! Exact rational arithmetic for learning coefficients.
//!
//! Every closed-form learning coefficient produced by this crate is a
//! rational number with a small denominator (a divisor of 8), so values are
//! kept exact and only converted to `f64` at the display/estimation boundary.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use num_rational::Ratio;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// An exact rational number, always stored normalized: gcd(num, den) = 1 and
/// den > 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rational(Ratio<i64>);

impl Rational {
    /// Builds `num/den`, normalizing sign and gcd. Errors on `den == 0`.
    pub fn new(num: i64, den: i64) -> Result<Self> {
        if den == 0 {
            return Err(Error::validation("rational denominator must be nonzero"));
        }
        Ok(Rational(Ratio::new(num, den)))
    }

    pub fn int(n: i64) -> Self {
        Rational(Ratio::from_integer(n))
    }

    pub fn zero() -> Self {
        Self::int(0)
    }

    /// Numerator of the normalized fraction (carries the sign).
    pub fn num(&self) -> i64 {
        *self.0.numer()
    }

    /// Denominator of the normalized fraction, always positive.
    pub fn den(&self) -> i64 {
        *self.0.denom()
    }

    pub fn to_f64(&self) -> f64 {
        self.num() as f64 / self.den() as f64
    }

    pub fn is_integer(&self) -> bool {
        self.den() == 1
    }
}

impl fmt::Display for Rational {
    /// Renders `3/2` for proper fractions and `3` for integers.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_integer() {
            write!(f, "{}", self.num())
        } else {
            write!(f, "{}/{}", self.num(), self.den())
        }
    }
}

impl Add for Rational {
    type Output = Rational;
    fn add(self, rhs: Rational) -> Rational {
        Rational(self.0 + rhs.0)
    }
}

impl Sub for Rational {
    type Output = Rational;
    fn sub(self, rhs: Rational) -> Rational {
        Rational(self.0 - rhs.0)
    }
}

impl Mul for Rational {
    type Output = Rational;
    fn mul(self, rhs: Rational) -> Rational {
        Rational(self.0 * rhs.0)
    }
}

impl Serialize for Rational {
    /// Serializes as `{"num": .., "den": .., "value": ..}` so JSON consumers
    /// get both the exact fraction and a ready-to-plot decimal.
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("Rational", 3)?;
        s.serialize_field("num", &self.num())?;
        s.serialize_field("den", &self.den())?;
        s.serialize_field("value", &self.to_f64())?;
        s.end()
    }
}

impl<'de> serde::Deserialize<'de> for Rational {
    /// Reads the exact fraction back; the redundant `value` field is
    /// ignored rather than trusted.
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        #[derive(serde::Deserialize)]
        struct Repr {
            num: i64,
            den: i64,
        }
        let repr = Repr::deserialize(deserializer)?;
        Rational::new(repr.num, repr.den).map_err(serde::de::Error::custom)
    }
}
