//! Scalar abstraction shared by the numeric parts of the crate.
//!
//! Attribution, E³ metrics and rank statistics are written once against
//! [`Scalar`] and instantiated for `f32`, `f64` and exact [`Rational`].

use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, One, Signed, ToPrimitive, Zero};

/// Exact arbitrary-precision rational.
pub type Rational = BigRational;

/// Numeric field the attribution and metric code is generic over.
pub trait Scalar:
    Clone
    + Debug
    + PartialOrd
    + Send
    + Sync
    + Zero
    + One
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + 'static
{
    /// `num / den`; `den` must be nonzero.
    fn from_ratio(num: i64, den: i64) -> Self;
    fn from_rational(r: &Rational) -> Self;
    fn to_f64(&self) -> f64;
    fn abs_val(&self) -> Self;

    fn from_int(n: i64) -> Self {
        Self::from_ratio(n, 1)
    }
}

macro_rules! float_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn from_ratio(num: i64, den: i64) -> Self {
                (num as f64 / den as f64) as $t
            }
            fn from_rational(r: &Rational) -> Self {
                rational_to_f64(r) as $t
            }
            fn to_f64(&self) -> f64 {
                *self as f64
            }
            fn abs_val(&self) -> Self {
                self.abs()
            }
        }
    };
}

float_scalar!(f32);
float_scalar!(f64);

impl Scalar for Rational {
    fn from_ratio(num: i64, den: i64) -> Self {
        Rational::new(BigInt::from(num), BigInt::from(den))
    }
    fn from_rational(r: &Rational) -> Self {
        r.clone()
    }
    fn to_f64(&self) -> f64 {
        rational_to_f64(self)
    }
    fn abs_val(&self) -> Self {
        self.abs()
    }
}

/// Lossy conversion that stays finite for huge numerators/denominators.
pub fn rational_to_f64(r: &Rational) -> f64 {
    if let Some(v) = ToPrimitive::to_f64(r) {
        if v.is_finite() {
            return v;
        }
    }
    let n = r.numer().to_f64().unwrap_or(f64::NAN);
    let d = r.denom().to_f64().unwrap_or(f64::NAN);
    n / d
}

/// Nearest rational to a finite float (exact binary expansion).
pub fn rational_from_f64(v: f64) -> Option<Rational> {
    Rational::from_f64(v)
}

pub fn rational_from_int(n: i64) -> Rational {
    Rational::from_integer(BigInt::from(n))
}

/// Parses `12`, `-3.25`, `1/3`, `-7/2`, `1e-6`, `2.5e3` into an exact rational.
pub fn parse_rational(text: &str) -> Option<Rational> {
    let t = text.trim();
    if t.is_empty() {
        return None;
    }
    if let Some((n, d)) = t.split_once('/') {
        let n = parse_decimal(n.trim())?;
        let d = parse_decimal(d.trim())?;
        if d.is_zero() {
            return None;
        }
        return Some(n / d);
    }
    parse_decimal(t)
}

fn parse_decimal(t: &str) -> Option<Rational> {
    let (mantissa, exponent) = match t.find(['e', 'E']) {
        Some(pos) => (&t[..pos], t[pos + 1..].parse::<i32>().ok()?),
        None => (t, 0),
    };
    let (neg, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((i, f)) => (i, f),
        None => (digits, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    if exponent.unsigned_abs() > 4096 {
        return None;
    }
    let all: String = format!("{int_part}{frac_part}");
    let numer: BigInt = if all.is_empty() { BigInt::zero() } else { all.parse().ok()? };
    let scale = exponent - frac_part.len() as i32;
    let ten = BigInt::from(10);
    let mut value = Rational::from_integer(numer);
    if scale >= 0 {
        value *= Rational::from_integer(num_traits::pow(ten, scale as usize));
    } else {
        value /= Rational::from_integer(num_traits::pow(ten, (-scale) as usize));
    }
    Some(if neg { -value } else { value })
}

/// Canonical text for a rational: integers and terminating decimals print as
/// decimals, everything else as `p/q`.
pub fn format_rational(r: &Rational) -> String {
    if r.is_integer() {
        return r.numer().to_string();
    }
    match terminating_decimal(r) {
        Some(s) => s,
        None => format!("{}/{}", r.numer(), r.denom()),
    }
}

fn terminating_decimal(r: &Rational) -> Option<String> {
    let mut d = r.denom().clone();
    let two = BigInt::from(2);
    let five = BigInt::from(5);
    let (mut twos, mut fives) = (0usize, 0usize);
    while (&d % &two).is_zero() {
        d /= &two;
        twos += 1;
    }
    while (&d % &five).is_zero() {
        d /= &five;
        fives += 1;
    }
    if !d.is_one() {
        return None;
    }
    let places = twos.max(fives);
    let scaled = r * Rational::from_integer(num_traits::pow(BigInt::from(10), places));
    debug_assert!(scaled.is_integer());
    let n = scaled.to_integer();
    let neg = n.is_negative();
    let digits = n.abs().to_string();
    let digits = format!("{digits:0>width$}", width = places + 1);
    let (i, f) = digits.split_at(digits.len() - places);
    Some(format!("{}{}.{}", if neg { "-" } else { "" }, i, f))
}

/// Serde adapter storing a rational as its canonical string.
pub mod rational_serde {
    use super::{format_rational, parse_rational, Rational};
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_rational(r))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Int(i64),
            Float(f64),
        }
        match Repr::deserialize(d)? {
            Repr::Text(t) => parse_rational(&t)
                .ok_or_else(|| de::Error::custom(format!("invalid rational `{t}`"))),
            Repr::Int(i) => Ok(super::rational_from_int(i)),
            Repr::Float(f) => parse_rational(&f.to_string())
                .ok_or_else(|| de::Error::custom(format!("invalid rational `{f}`"))),
        }
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(r: &Option<Rational>, s: S) -> Result<S::Ok, S::Error> {
            match r {
                Some(r) => s.serialize_str(&format_rational(r)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Rational>, D::Error> {
            #[derive(Deserialize)]
            struct Wrap(#[serde(with = "super")] Rational);
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: i64, d: i64) -> Rational {
        Rational::from_ratio(n, d)
    }

    #[test]
    fn parses_decimal_and_fraction_forms() {
        assert_eq!(parse_rational("12"), Some(q(12, 1)));
        assert_eq!(parse_rational("-3.25"), Some(q(-13, 4)));
        assert_eq!(parse_rational("1/3"), Some(q(1, 3)));
        assert_eq!(parse_rational("0.333333"), Some(q(333333, 1_000_000)));
        assert_eq!(parse_rational("1e-4"), Some(q(1, 10_000)));
        assert_eq!(parse_rational(".5"), Some(q(1, 2)));
        assert_eq!(parse_rational("1/0"), None);
        assert_eq!(parse_rational("abc"), None);
        assert_eq!(parse_rational(""), None);
    }

    #[test]
    fn formats_canonically() {
        assert_eq!(format_rational(&q(24, 1)), "24");
        assert_eq!(format_rational(&q(-13, 4)), "-3.25");
        assert_eq!(format_rational(&q(1, 3)), "1/3");
        assert_eq!(format_rational(&q(1, 20)), "0.05");
        assert_eq!(format_rational(&q(-1, 8)), "-0.125");
    }

    #[test]
    fn format_parse_round_trip() {
        for (n, d) in [(1, 3), (22, 7), (-5, 16), (0, 1), (1_000_001, 1000)] {
            let r = q(n, d);
            assert_eq!(parse_rational(&format_rational(&r)), Some(r));
        }
    }

    #[test]
    fn scalar_ratio_agrees_across_types() {
        assert_eq!(<f64 as Scalar>::from_ratio(3, 4), 0.75);
        assert_eq!(<f32 as Scalar>::from_ratio(1, 2), 0.5f32);
        assert_eq!(<Rational as Scalar>::from_ratio(6, 8), q(3, 4));
        assert_eq!(<Rational as Scalar>::to_f64(&q(1, 4)), 0.25);
    }
}
