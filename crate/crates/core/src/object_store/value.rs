use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::fixed::Decimal;

/// Value of one attribute. `Absent` is a value in its own right, distinct
/// from zero or false.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AttrValue {
    Integer(i64),
    Decimal(Decimal),
    Code(String),
    Bool(bool),
    Absent,
}

impl AttrValue {
    pub fn is_absent(&self) -> bool {
        matches!(self, AttrValue::Absent)
    }

    pub fn as_decimal(&self) -> Option<Decimal> {
        match self {
            AttrValue::Integer(v) => Some(Decimal::integer(*v)),
            AttrValue::Decimal(d) => Some(*d),
            _ => None,
        }
    }

    /// Equality used by matrix classification: numerics compare by value
    /// within `tolerance`, everything else exactly. Absent never equals
    /// anything, itself included.
    pub fn matches(&self, other: &AttrValue, tolerance: Decimal) -> bool {
        match (self.as_decimal(), other.as_decimal()) {
            (Some(a), Some(b)) => a.within(b, tolerance),
            _ => match (self, other) {
                (AttrValue::Code(a), AttrValue::Code(b)) => a == b,
                (AttrValue::Bool(a), AttrValue::Bool(b)) => a == b,
                _ => false,
            },
        }
    }

    /// Numeric ordering; `None` when either side is not a number.
    pub fn compare(&self, other: &AttrValue) -> Option<Ordering> {
        Some(self.as_decimal()?.cmp(&other.as_decimal()?))
    }

    /// Non-absent and not `false`.
    pub fn is_truthy(&self) -> bool {
        !matches!(self, AttrValue::Absent | AttrValue::Bool(false))
    }

    fn valid_code(s: &str) -> bool {
        !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == '"' || c == '=')
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BadValue(pub String);

impl fmt::Display for BadValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed attribute value `{}`", self.0)
    }
}

impl std::error::Error for BadValue {}

impl FromStr for AttrValue {
    type Err = BadValue;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BadValue(s.to_string());
        match s {
            "~" => return Ok(AttrValue::Absent),
            "true" => return Ok(AttrValue::Bool(true)),
            "false" => return Ok(AttrValue::Bool(false)),
            _ => {}
        }
        if let Some(inner) = s.strip_prefix('"') {
            let inner = inner.strip_suffix('"').ok_or_else(bad)?;
            return if AttrValue::valid_code(inner) {
                Ok(AttrValue::Code(inner.to_string()))
            } else {
                Err(bad())
            };
        }
        let numeric = s.strip_prefix('-').unwrap_or(s);
        if numeric.starts_with(|c: char| c.is_ascii_digit()) {
            if s.contains('.') {
                return s.parse::<Decimal>().map(AttrValue::Decimal).map_err(|_| bad());
            }
            return s.parse::<i64>().map(AttrValue::Integer).map_err(|_| bad());
        }
        if AttrValue::valid_code(s) {
            Ok(AttrValue::Code(s.to_string()))
        } else {
            Err(bad())
        }
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Integer(v) => write!(f, "{v}"),
            AttrValue::Decimal(d) => write!(f, "{d}"),
            AttrValue::Code(c) => write!(f, "\"{c}\""),
            AttrValue::Bool(b) => write!(f, "{b}"),
            AttrValue::Absent => f.write_str("~"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Attribute {
    pub name: String,
    pub value: AttrValue,
}

impl Attribute {
    pub fn new(name: impl Into<String>, value: AttrValue) -> Attribute {
        Attribute {
            name: name.into(),
            value,
        }
    }
}
