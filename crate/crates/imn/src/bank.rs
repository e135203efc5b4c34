//! Knowledge-bank node state and the wire encodings of its commands.

use std::fmt::Write as _;

use mpu_core::dataset::{parse_obj_line, Dataset};
use mpu_core::exec::nak;
use mpu_core::exec::proposal::ProposalKind;
use mpu_core::exec::RemoteMatch;
use mpu_core::hash::fnv1a;
use mpu_core::object_store::RelationKind;

use crate::packet::MAX_PAYLOAD;

/// Command operation carried in the first CMD payload byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Echo = 0,
    Match = 1,
    Apply = 2,
    Resolve = 3,
}

impl Op {
    pub fn from_byte(b: u8) -> Option<Op> {
        [Op::Echo, Op::Match, Op::Apply, Op::Resolve].into_iter().find(|o| *o as u8 == b)
    }
}

/// Decoded CMD payload: `op(1) burst(2) args`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CmdPayload {
    pub op: u8,
    pub burst: u16,
    pub args: Vec<u8>,
}

impl CmdPayload {
    pub fn new(op: Op, burst: u16, args: Vec<u8>) -> CmdPayload {
        CmdPayload { op: op as u8, burst, args }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.op];
        out.extend_from_slice(&self.burst.to_be_bytes());
        out.extend_from_slice(&self.args);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<CmdPayload> {
        if bytes.len() < 3 {
            return None;
        }
        Some(CmdPayload {
            op: bytes[0],
            burst: u16::from_be_bytes([bytes[1], bytes[2]]),
            args: bytes[3..].to_vec(),
        })
    }
}

/// `schema_id(4) codes(8 each)`.
pub fn encode_query(schema_id: u32, codes: &[u64]) -> Vec<u8> {
    let mut out = schema_id.to_be_bytes().to_vec();
    for c in codes {
        out.extend_from_slice(&c.to_be_bytes());
    }
    out
}

pub fn decode_query(bytes: &[u8]) -> Option<(u32, Vec<u64>)> {
    if bytes.len() < 4 || (bytes.len() - 4) % 8 != 0 {
        return None;
    }
    let id = u32::from_be_bytes(bytes[..4].try_into().ok()?);
    let codes = bytes[4..]
        .chunks(8)
        .map(|c| u64::from_be_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Some((id, codes))
}

/// `record_id(4) distance(4) max_distance(4) label_len(1) label`.
pub fn encode_match(m: &RemoteMatch) -> Vec<u8> {
    let label = &m.label.as_bytes()[..m.label.len().min(255)];
    let mut out = Vec::with_capacity(13 + label.len());
    out.extend_from_slice(&m.record_id.to_be_bytes());
    out.extend_from_slice(&(m.distance.min(u64::from(u32::MAX)) as u32).to_be_bytes());
    out.extend_from_slice(&(m.max_distance.min(u64::from(u32::MAX)) as u32).to_be_bytes());
    out.push(label.len() as u8);
    out.extend_from_slice(label);
    out
}

/// Parses a run of concatenated match records.
pub fn decode_matches(mut bytes: &[u8]) -> Option<Vec<RemoteMatch>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        if bytes.len() < 13 {
            return None;
        }
        let be = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let len = usize::from(bytes[12]);
        let label = bytes.get(13..13 + len)?;
        out.push(RemoteMatch {
            record_id: be(0),
            distance: u64::from(be(4)),
            max_distance: u64::from(be(8)),
            label: String::from_utf8_lossy(label).into_owned(),
        });
        bytes = &bytes[13 + len..];
    }
    Some(out)
}

/// Packs encoded records into as few payloads as fit; at least one.
pub fn pack(records: &[Vec<u8>]) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    for r in records {
        let cur = out.last_mut().expect("never empty");
        if !cur.is_empty() && cur.len() + r.len() > MAX_PAYLOAD {
            out.push(r.clone());
        } else {
            cur.extend_from_slice(r);
        }
    }
    out
}

/// APPLY arguments: `kind(1) proposal_id(4) count(1) endorsers(2 each)`.
pub fn encode_apply(kind: ProposalKind, proposal: u32, endorsers: &[u16]) -> Vec<u8> {
    let mut out = vec![kind as u8];
    out.extend_from_slice(&proposal.to_be_bytes());
    out.push(endorsers.len() as u8);
    for e in endorsers {
        out.extend_from_slice(&e.to_be_bytes());
    }
    out
}

pub fn decode_apply(bytes: &[u8]) -> Option<(ProposalKind, u32, Vec<u16>)> {
    let kind = ProposalKind::from_byte(*bytes.first()?)?;
    let id = u32::from_be_bytes(bytes.get(1..5)?.try_into().ok()?);
    let n = usize::from(*bytes.get(5)?);
    let list = bytes.get(6..6 + 2 * n)?;
    if bytes.len() != 6 + 2 * n {
        return None;
    }
    Some((kind, id, list.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankState {
    pub dataset: Dataset,
    /// Committed macro-opcode definitions, in commit order.
    pub macros: Vec<Vec<u8>>,
    pub version: u32,
}

impl BankState {
    pub fn new(dataset: Dataset) -> BankState {
        BankState {
            dataset,
            macros: Vec::new(),
            version: 0,
        }
    }

    /// Content hash over records, macros and version.
    pub fn hash(&self) -> u64 {
        let mut text = self.dataset.dump();
        for m in &self.macros {
            text.push_str("MACRO ");
            for b in m {
                let _ = write!(text, "{b:02x}");
            }
            text.push('\n');
        }
        let _ = writeln!(text, "VERSION {}", self.version);
        fnv1a(text.as_bytes())
    }

    /// Nearest-k over the bank's signatures, or a refusal reason.
    pub fn query(&self, k: u16, data: &[u8]) -> Result<Vec<RemoteMatch>, u8> {
        if k == 0 {
            return Err(nak::BAD_COMMAND);
        }
        let bank = match &self.dataset.bank {
            Some(b) if !b.is_empty() => b,
            _ => return Err(nak::EMPTY_BANK),
        };
        let (schema_id, codes) = decode_query(data).ok_or(nak::BAD_COMMAND)?;
        if schema_id != bank.schema().id() {
            return Err(nak::SCHEMA_MISMATCH);
        }
        let q = bank.schema().vector(codes).map_err(|_| nak::SCHEMA_MISMATCH)?;
        let hits = bank.nearest_k(&q, usize::from(k)).map_err(|_| nak::SCHEMA_MISMATCH)?;
        let max = bank.max_distance();
        Ok(hits
            .into_iter()
            .map(|(id, d)| RemoteMatch {
                record_id: id,
                distance: d,
                label: bank.get(id).map(|s| s.label.clone()).unwrap_or_default(),
                max_distance: max,
            })
            .collect())
    }

    /// Applies a committed proposal payload. On error nothing changes.
    pub fn apply(&mut self, kind: ProposalKind, payload: &[u8]) -> Result<(), String> {
        let mut next = self.clone();
        match kind {
            ProposalKind::NewMacroOpcode => next.macros.push(payload.to_vec()),
            ProposalKind::NewRelation => {
                let [a0, a1, b0, b1] = payload else {
                    return Err("relation payload is four bytes".into());
                };
                let (a, b) = (u16::from_be_bytes([*a0, *a1]), u16::from_be_bytes([*b0, *b1]));
                let added = next
                    .dataset
                    .store
                    .add_relation(a, b, RelationKind::Secondary, "learned")
                    .map_err(|e| e.to_string())?;
                if !added {
                    return Err("relation already present".into());
                }
            }
            ProposalKind::ObjectUpdate => {
                let text = std::str::from_utf8(payload).map_err(|_| "payload is not UTF-8".to_string())?;
                if text.starts_with("OBJ\t") && !text.trim_end().contains('\n') {
                    let spec = parse_obj_line(text.trim_end_matches('\n'))?;
                    next.dataset.store.put_object(spec).map_err(|e| e.to_string())?;
                } else {
                    next.dataset.load(text).map_err(|e| e.to_string())?;
                }
            }
        }
        next.version += 1;
        *self = next;
        Ok(())
    }
}
