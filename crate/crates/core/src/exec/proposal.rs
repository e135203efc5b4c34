//! Knowledge-base change proposals and their quorum lifecycle.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProposalKind {
    NewRelation = 1,
    NewMacroOpcode = 2,
    ObjectUpdate = 3,
}

impl ProposalKind {
    pub fn name(self) -> &'static str {
        match self {
            ProposalKind::NewRelation => "NEW_RELATION",
            ProposalKind::NewMacroOpcode => "NEW_MACRO_OPCODE",
            ProposalKind::ObjectUpdate => "OBJECT_UPDATE",
        }
    }

    pub fn parse(s: &str) -> Option<ProposalKind> {
        [
            ProposalKind::NewRelation,
            ProposalKind::NewMacroOpcode,
            ProposalKind::ObjectUpdate,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }

    pub fn from_byte(b: u8) -> Option<ProposalKind> {
        match b {
            1 => Some(ProposalKind::NewRelation),
            2 => Some(ProposalKind::NewMacroOpcode),
            3 => Some(ProposalKind::ObjectUpdate),
            _ => None,
        }
    }
}

impl fmt::Display for ProposalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProposalStatus {
    Pending,
    Committed,
    Rejected,
}

impl ProposalStatus {
    pub fn name(self) -> &'static str {
        match self {
            ProposalStatus::Pending => "PENDING",
            ProposalStatus::Committed => "COMMITTED",
            ProposalStatus::Rejected => "REJECTED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProposalError {
    #[error("proposal {id} has {have} endorsements, quorum is {quorum}")]
    BelowQuorum { id: u32, have: usize, quorum: usize },
    #[error("proposal {0} is no longer pending")]
    NotPending(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KbProposal {
    pub id: u32,
    pub kind: ProposalKind,
    /// Subject identifier of the bank the change is meant for, if known.
    pub target: Option<String>,
    payload: Vec<u8>,
    endorsements: BTreeSet<u16>,
    status: ProposalStatus,
}

impl KbProposal {
    pub fn new(id: u32, kind: ProposalKind, target: Option<String>, payload: Vec<u8>) -> KbProposal {
        KbProposal {
            id,
            kind,
            target,
            payload,
            endorsements: BTreeSet::new(),
            status: ProposalStatus::Pending,
        }
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn endorsements(&self) -> &BTreeSet<u16> {
        &self.endorsements
    }

    pub fn status(&self) -> ProposalStatus {
        self.status
    }

    /// Records one endorsing node; repeats count once.
    pub fn endorse(&mut self, node: u16) -> Result<bool, ProposalError> {
        if self.status != ProposalStatus::Pending {
            return Err(ProposalError::NotPending(self.id));
        }
        Ok(self.endorsements.insert(node))
    }

    pub fn commit(&mut self, quorum: usize) -> Result<(), ProposalError> {
        if self.status != ProposalStatus::Pending {
            return Err(ProposalError::NotPending(self.id));
        }
        if self.endorsements.len() < quorum {
            return Err(ProposalError::BelowQuorum {
                id: self.id,
                have: self.endorsements.len(),
                quorum,
            });
        }
        self.status = ProposalStatus::Committed;
        Ok(())
    }

    pub fn reject(&mut self) -> Result<(), ProposalError> {
        if self.status != ProposalStatus::Pending {
            return Err(ProposalError::NotPending(self.id));
        }
        self.status = ProposalStatus::Rejected;
        Ok(())
    }

    /// Human-readable payload: pairs, opcode lists or record text.
    pub fn describe_payload(&self) -> String {
        match self.kind {
            ProposalKind::NewRelation if self.payload.len() == 4 => {
                let a = u16::from_be_bytes([self.payload[0], self.payload[1]]);
                let b = u16::from_be_bytes([self.payload[2], self.payload[3]]);
                format!("{a},{b}")
            }
            ProposalKind::NewMacroOpcode => {
                let ops: Vec<String> = self.payload.iter().map(|b| format!("{b:02X}")).collect();
                ops.join(",")
            }
            _ => String::from_utf8_lossy(&self.payload).replace('\t', " "),
        }
    }
}
