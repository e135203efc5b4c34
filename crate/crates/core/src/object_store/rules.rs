//! Medical safety and conflict rules.
//!
//! A rule pairs a predicate over one attribute with a second condition, which
//! is either a procedure tag or another predicate:
//!
//! ```text
//! RULE hard diabetes=true sugar_load R1
//! RULE soft anticoagulant=true surgery_class=major R7
//! ```

use std::fmt;
use std::str::FromStr;

use super::value::AttrValue;
use super::MedicalObject;

/// Attribute holding a procedure's `|`-separated tags.
pub const TAGS_ATTRIBUTE: &str = "tags";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Severity {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    /// Bare attribute name: present and not `false`.
    Present,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Predicate {
    pub attribute: String,
    pub op: CmpOp,
    pub value: AttrValue,
}

impl Predicate {
    pub fn holds(&self, v: &AttrValue) -> bool {
        use std::cmp::Ordering::*;
        if v.is_absent() {
            return false;
        }
        let exact = v.matches(&self.value, crate::fixed::Decimal::integer(0));
        match self.op {
            CmpOp::Present => v.is_truthy(),
            CmpOp::Eq => exact,
            CmpOp::Ne => !exact,
            CmpOp::Lt => v.compare(&self.value) == Some(Less),
            CmpOp::Le => matches!(v.compare(&self.value), Some(Less | Equal)),
            CmpOp::Gt => v.compare(&self.value) == Some(Greater),
            CmpOp::Ge => matches!(v.compare(&self.value), Some(Greater | Equal)),
        }
    }

    pub fn holds_on(&self, obj: &MedicalObject) -> bool {
        obj.get(&self.attribute).is_some_and(|v| self.holds(v))
    }
}

impl FromStr for Predicate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        const OPS: [(&str, CmpOp); 6] = [
            ("!=", CmpOp::Ne),
            ("<=", CmpOp::Le),
            (">=", CmpOp::Ge),
            ("=", CmpOp::Eq),
            ("<", CmpOp::Lt),
            (">", CmpOp::Gt),
        ];
        for (tok, op) in OPS {
            if let Some((name, value)) = s.split_once(tok) {
                if name.is_empty() || !super::valid_name(name) {
                    return Err(format!("bad attribute name in `{s}`"));
                }
                let value: AttrValue = value.parse().map_err(|e| format!("{e}"))?;
                return Ok(Predicate {
                    attribute: name.to_string(),
                    op,
                    value,
                });
            }
        }
        if super::valid_name(s) {
            Ok(Predicate {
                attribute: s.to_string(),
                op: CmpOp::Present,
                value: AttrValue::Absent,
            })
        } else {
            Err(format!("malformed predicate `{s}`"))
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            CmpOp::Present => return f.write_str(&self.attribute),
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        };
        write!(f, "{}{}{}", self.attribute, op, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Condition {
    Tag(String),
    Attr(Predicate),
}

impl Condition {
    /// Does a single matrix cell (column name, value) satisfy this condition?
    pub fn holds_on_cell(&self, column: &str, value: &AttrValue) -> bool {
        match self {
            Condition::Tag(t) => column == TAGS_ATTRIBUTE && has_tag(value, t),
            Condition::Attr(p) => p.attribute == column && p.holds(value),
        }
    }

    pub fn holds_on(&self, obj: &MedicalObject) -> bool {
        match self {
            Condition::Tag(t) => obj.get(TAGS_ATTRIBUTE).is_some_and(|v| has_tag(v, t)),
            Condition::Attr(p) => p.holds_on(obj),
        }
    }
}

pub fn has_tag(value: &AttrValue, tag: &str) -> bool {
    match value {
        AttrValue::Code(c) => c.split('|').any(|t| t == tag),
        _ => false,
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.contains(['=', '<', '>']) {
            s.parse().map(Condition::Attr)
        } else if super::valid_name(s) {
            Ok(Condition::Tag(s.to_string()))
        } else {
            Err(format!("malformed condition `{s}`"))
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Tag(t) => f.write_str(t),
            Condition::Attr(p) => write!(f, "{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub id: String,
    pub severity: Severity,
    /// Predicate on the patient (or first) object.
    pub attribute: Predicate,
    /// Tag or predicate on the procedure (or second) object.
    pub against: Condition,
}

impl Rule {
    pub fn new(id: &str, severity: Severity, attribute: &str, against: &str) -> Result<Rule, String> {
        Ok(Rule {
            id: id.to_string(),
            severity,
            attribute: attribute.parse()?,
            against: against.parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> RuleSet {
        RuleSet { rules }
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter()
    }
}
