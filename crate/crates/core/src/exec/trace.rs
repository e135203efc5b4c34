//! Per-instruction execution log.

use std::fmt::Write as _;

use crate::fixed::Confidence;
use crate::hash;
use crate::isa::Mode;
use crate::object_store::{AttrValue, ObjectId};

/// Result of one element of a work list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkResult {
    /// Object the item ran on; `None` for opcodes without object operands.
    pub object: Option<ObjectId>,
    pub process: &'static str,
    pub value: AttrValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub tick: u64,
    pub pc: u32,
    pub word: u32,
    pub opcode: u8,
    /// `?` when the word did not decode.
    pub mnemonic: &'static str,
    pub mode: Option<Mode>,
    /// Distinct operand object ids in operand order.
    pub operands: Vec<ObjectId>,
    pub result: u32,
    pub step_confidence: Confidence,
    /// Collective confidence after this step.
    pub confidence: Confidence,
    pub work: Vec<WorkResult>,
}

/// Result codes with this bit set report a fault.
pub const FAULT_BIT: u32 = 0x8000_0000;
/// Result codes with this bit set report a network NAK.
pub const NAK_BIT: u32 = 0x4000_0000;

impl TraceRecord {
    pub fn faulted(&self) -> bool {
        self.result & FAULT_BIT != 0
    }

    /// Tab-separated line without the trailing newline.
    pub fn line(&self) -> String {
        let mode = self.mode.map_or_else(|| "?".to_string(), |m| m.to_string());
        let operands = if self.operands.is_empty() {
            "-".to_string()
        } else {
            self.operands
                .iter()
                .map(u16::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "{}\t{}\t{:08X}\t{:02X}\t{}\t{}\t{}\t{:08X}\t{}",
            self.tick, self.pc, self.word, self.opcode, self.mnemonic, mode, operands, self.result, self.confidence
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    records: Vec<TraceRecord>,
    /// Whether switch S-1 was closed during the run.
    pub learning: bool,
}

impl Trace {
    pub fn new(learning: bool) -> Trace {
        Trace {
            records: Vec::new(),
            learning,
        }
    }

    pub fn push(&mut self, r: TraceRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Text form ending in the `TRACEHASH` line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}", r.line());
        }
        hash::seal(&mut out, "TRACEHASH");
        out
    }

    pub fn hash(&self) -> u64 {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}", r.line());
        }
        hash::fnv1a(out.as_bytes())
    }
}
