//! Safety checks of sub-procedures against a patient.

use std::fmt;

use crate::object_store::{ObjectId, ObjectStore, RuleSet, Severity, StoreError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Allow,
    /// Only soft rules fired.
    Warn(Vec<String>),
    /// At least one hard rule fired; lists every rule that fired.
    Block(Vec<String>),
}

impl Verdict {
    pub fn is_block(&self) -> bool {
        matches!(self, Verdict::Block(_))
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Allow => f.write_str("ALLOW"),
            Verdict::Warn(ids) => write!(f, "WARN({})", ids.join(",")),
            Verdict::Block(ids) => write!(f, "BLOCK({})", ids.join(",")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafetyReport {
    pub patient: ObjectId,
    /// Row order.
    pub procedures: Vec<ObjectId>,
    /// Column order: the patient's attribute names.
    pub attributes: Vec<String>,
    /// Rule ids fired in each (procedure, attribute) cell.
    pub matrix: Vec<Vec<Vec<String>>>,
    pub verdicts: Vec<Verdict>,
    /// Set when the check ran with an empty rule set.
    pub no_rules: bool,
}

impl SafetyReport {
    pub fn n(&self) -> usize {
        self.procedures.len()
    }

    pub fn m(&self) -> usize {
        self.attributes.len()
    }

    pub fn verdict_of(&self, procedure: ObjectId) -> Option<&Verdict> {
        self.procedures
            .iter()
            .position(|p| *p == procedure)
            .map(|i| &self.verdicts[i])
    }

    pub fn blocked(&self) -> usize {
        self.verdicts.iter().filter(|v| v.is_block()).count()
    }

    pub fn warned(&self) -> usize {
        self.verdicts.iter().filter(|v| matches!(v, Verdict::Warn(_))).count()
    }
}

/// Fires every rule whose patient predicate and procedure condition both
/// hold. Never mutates the store.
pub fn safecheck(
    store: &ObjectStore,
    patient: ObjectId,
    procedures: &[ObjectId],
    rules: &RuleSet,
) -> Result<SafetyReport, StoreError> {
    let p = store.object(patient)?;
    let procs = procedures
        .iter()
        .map(|id| store.object(*id))
        .collect::<Result<Vec<_>, _>>()?;
    let attributes: Vec<String> = p.attributes().iter().map(|a| a.name.clone()).collect();
    let mut matrix = Vec::with_capacity(procs.len());
    let mut verdicts = Vec::with_capacity(procs.len());
    for proc in &procs {
        let mut row = vec![Vec::new(); attributes.len()];
        let mut fired = Vec::new();
        let mut hard = false;
        for rule in rules.iter() {
            if !rule.against.holds_on(proc) {
                continue;
            }
            for (j, attr) in p.attributes().iter().enumerate() {
                if attr.name == rule.attribute.attribute && rule.attribute.holds(&attr.value) {
                    row[j].push(rule.id.clone());
                    fired.push(rule.id.clone());
                    hard |= rule.severity == Severity::Hard;
                }
            }
        }
        verdicts.push(match (fired.is_empty(), hard) {
            (true, _) => Verdict::Allow,
            (false, true) => Verdict::Block(fired),
            (false, false) => Verdict::Warn(fired),
        });
        matrix.push(row);
    }
    Ok(SafetyReport {
        patient,
        procedures: procedures.to_vec(),
        attributes,
        matrix,
        verdicts,
        no_rules: rules.is_empty(),
    })
}
