//! Fixed-point numbers. Nothing in the VM touches floating point, so traces
//! and reports hash identically on every platform.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FixedError {
    #[error("confidence {0} outside [0, 1]")]
    OutOfRange(String),
    #[error("malformed number `{0}`")]
    Malformed(String),
}

/// Integer division rounding to nearest, ties to even.
pub fn div_round_half_even(num: u128, den: u128) -> u128 {
    assert!(den != 0);
    let q = num / den;
    let r = num % den;
    match (2 * r).cmp(&den) {
        Ordering::Less => q,
        Ordering::Greater => q + 1,
        Ordering::Equal => q + (q & 1),
    }
}

/// A fraction in [0, 1] with a resolution of 10^-4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Confidence(u16);

impl Confidence {
    pub const SCALE: u16 = 10_000;
    pub const ONE: Confidence = Confidence(10_000);
    pub const ZERO: Confidence = Confidence(0);

    pub fn from_units(units: u32) -> Result<Confidence, FixedError> {
        if units > u32::from(Self::SCALE) {
            return Err(FixedError::OutOfRange(format!("{units}e-4")));
        }
        Ok(Confidence(units as u16))
    }

    pub fn units(self) -> u16 {
        self.0
    }

    /// `num / den`, rounded half-even to the fixed-point grid.
    pub fn from_ratio(num: u64, den: u64) -> Result<Confidence, FixedError> {
        if den == 0 || num > den {
            return Err(FixedError::OutOfRange(format!("{num}/{den}")));
        }
        let units = div_round_half_even(u128::from(num) * u128::from(Self::SCALE), u128::from(den));
        Ok(Confidence(units as u16))
    }

    pub fn from_f64(x: f64) -> Result<Confidence, FixedError> {
        if !(0.0..=1.0).contains(&x) {
            return Err(FixedError::OutOfRange(x.to_string()));
        }
        Ok(Confidence((x * f64::from(Self::SCALE)).round_ties_even() as u16))
    }

    /// Product of two confidences, rounded half-even.
    pub fn combine(self, other: Confidence) -> Confidence {
        let p = u128::from(self.0) * u128::from(other.0);
        Confidence(div_round_half_even(p, u128::from(Self::SCALE)) as u16)
    }
}

impl Default for Confidence {
    fn default() -> Self {
        Confidence::ONE
    }
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:04}", self.0 / Self::SCALE, self.0 % Self::SCALE)
    }
}

impl FromStr for Confidence {
    type Err = FixedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let d: Decimal = s.parse()?;
        if d.units < 0 {
            return Err(FixedError::OutOfRange(s.to_string()));
        }
        let units = d.rescale_round(4).ok_or_else(|| FixedError::OutOfRange(s.to_string()))?;
        Confidence::from_units(u32::try_from(units).map_err(|_| FixedError::OutOfRange(s.to_string()))?)
    }
}

/// Fixed-point decimal: `units * 10^-scale`.
#[derive(Debug, Clone, Copy, Hash)]
pub struct Decimal {
    pub units: i64,
    pub scale: u8,
}

impl Decimal {
    pub const MAX_SCALE: u8 = 18;

    pub fn new(units: i64, scale: u8) -> Decimal {
        assert!(scale <= Self::MAX_SCALE);
        Decimal { units, scale }
    }

    pub fn integer(v: i64) -> Decimal {
        Decimal { units: v, scale: 0 }
    }

    fn widened(self, scale: u8) -> i128 {
        i128::from(self.units) * 10i128.pow(u32::from(scale - self.scale))
    }

    /// Units at a smaller or equal scale, rounded half-even. `None` on overflow.
    pub fn rescale_round(self, scale: u8) -> Option<i64> {
        if scale >= self.scale {
            return i64::try_from(self.widened(scale)).ok();
        }
        let den = 10u128.pow(u32::from(self.scale - scale));
        let mag = div_round_half_even(self.units.unsigned_abs() as u128, den);
        let v = i64::try_from(mag).ok()?;
        Some(if self.units < 0 { -v } else { v })
    }

    /// |self - other| <= tolerance, compared exactly.
    pub fn within(self, other: Decimal, tolerance: Decimal) -> bool {
        let s = self.scale.max(other.scale).max(tolerance.scale);
        (self.widened(s) - other.widened(s)).abs() <= tolerance.widened(s).abs()
    }
}

impl PartialEq for Decimal {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Decimal {}

impl PartialOrd for Decimal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Decimal {
    fn cmp(&self, other: &Self) -> Ordering {
        let s = self.scale.max(other.scale);
        self.widened(s).cmp(&other.widened(s))
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.scale == 0 {
            return write!(f, "{}", self.units);
        }
        let p = 10u64.pow(u32::from(self.scale));
        let mag = self.units.unsigned_abs();
        let sign = if self.units < 0 { "-" } else { "" };
        write!(
            f,
            "{sign}{}.{:0width$}",
            mag / p,
            mag % p,
            width = self.scale as usize
        )
    }
}

impl FromStr for Decimal {
    type Err = FixedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FixedError::Malformed(s.to_string());
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int, frac) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        let digits_ok = |t: &str| t.bytes().all(|b| b.is_ascii_digit());
        if int.is_empty() || !digits_ok(int) || !digits_ok(frac) || (body.contains('.') && frac.is_empty()) {
            return Err(bad());
        }
        if frac.len() > Self::MAX_SCALE as usize {
            return Err(bad());
        }
        let joined = format!("{int}{frac}");
        let mag: i64 = joined.parse().map_err(|_| bad())?;
        Ok(Decimal {
            units: if neg { -mag } else { mag },
            scale: frac.len() as u8,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_even() {
        assert_eq!(div_round_half_even(5, 2), 2);
        assert_eq!(div_round_half_even(7, 2), 4);
        assert_eq!(div_round_half_even(11, 4), 3);
        assert_eq!(div_round_half_even(9, 4), 2);
    }

    #[test]
    fn confidence_product() {
        let a: Confidence = "0.9".parse().unwrap();
        let b: Confidence = "0.8".parse().unwrap();
        assert_eq!(a.combine(b).to_string(), "0.7200");
        assert_eq!(Confidence::ONE.to_string(), "1.0000");
        assert_eq!(a.combine(Confidence::ZERO), Confidence::ZERO);
        // 0.5001 * 0.5 = 0.25005 -> ties to even 0.2500
        let c = Confidence::from_units(5001).unwrap();
        let h = Confidence::from_units(5000).unwrap();
        assert_eq!(c.combine(h).units(), 2500);
        // 0.5003 * 0.5 = 0.25015 -> 0.2502
        assert_eq!(Confidence::from_units(5003).unwrap().combine(h).units(), 2502);
    }

    #[test]
    fn confidence_range() {
        assert!("1.0001".parse::<Confidence>().is_err());
        assert!("-0.1".parse::<Confidence>().is_err());
        assert!(Confidence::from_units(10_001).is_err());
        assert_eq!(Confidence::from_ratio(1, 3).unwrap().units(), 3333);
        assert!(Confidence::from_ratio(4, 3).is_err());
    }

    #[test]
    fn decimal_parse_and_compare() {
        let a: Decimal = "90".parse().unwrap();
        let b: Decimal = "90.00".parse().unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_string(), "90.00");
        let c: Decimal = "-1.05".parse().unwrap();
        assert_eq!(c.to_string(), "-1.05");
        assert!(c < a);
        assert!("1.".parse::<Decimal>().is_err());
        assert!("x".parse::<Decimal>().is_err());
        let tol: Decimal = "0.5".parse().unwrap();
        assert!(a.within("90.5".parse().unwrap(), tol));
        assert!(!a.within("90.51".parse().unwrap(), tol));
    }
}
