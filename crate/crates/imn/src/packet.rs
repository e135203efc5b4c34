//! Node addressing and the fixed big-endian packet layout.
//!
//! ```text
//! seq u32 | src u16 | dst u16 | kind u8 | proc u32 | sub u16 | len u16 | payload
//! ```

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Largest payload one packet may carry.
pub const MAX_PAYLOAD: usize = 1024;
/// Header size in bytes.
pub const HEADER_LEN: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeKind {
    Mpu = 1,
    Bank = 2,
    ControlPoint = 3,
    Kms = 4,
}

impl NodeKind {
    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Mpu => "MPU",
            NodeKind::Bank => "BANK",
            NodeKind::ControlPoint => "CP",
            NodeKind::Kms => "KMS",
        }
    }

    pub fn parse(s: &str) -> Option<NodeKind> {
        match s.to_ascii_uppercase().as_str() {
            "MPU" => Some(NodeKind::Mpu),
            "BANK" => Some(NodeKind::Bank),
            "CP" | "CONTROL_POINT" => Some(NodeKind::ControlPoint),
            "KMS" => Some(NodeKind::Kms),
            _ => None,
        }
    }

    fn from_byte(b: u8) -> Option<NodeKind> {
        match b {
            1 => Some(NodeKind::Mpu),
            2 => Some(NodeKind::Bank),
            3 => Some(NodeKind::ControlPoint),
            4 => Some(NodeKind::Kms),
            _ => None,
        }
    }
}

/// `kind << 8 | index` on the wire; printed as `MPU0`, `BANK2`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub kind: NodeKind,
    pub index: u8,
}

impl NodeId {
    pub fn new(kind: NodeKind, index: u8) -> NodeId {
        NodeId { kind, index }
    }

    pub fn to_wire(self) -> u16 {
        (self.kind as u16) << 8 | u16::from(self.index)
    }

    pub fn from_wire(w: u16) -> Option<NodeId> {
        Some(NodeId {
            kind: NodeKind::from_byte((w >> 8) as u8)?,
            index: w as u8,
        })
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.name(), self.index)
    }
}

impl FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let split = s.find(|c: char| c.is_ascii_digit()).ok_or_else(|| format!("bad node `{s}`"))?;
        let kind = NodeKind::parse(&s[..split]).ok_or_else(|| format!("bad node kind in `{s}`"))?;
        let index = s[split..].parse().map_err(|_| format!("bad node index in `{s}`"))?;
        Ok(NodeId { kind, index })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PacketKind {
    Cmd = 1,
    Data = 2,
    Result = 3,
    Ack = 4,
    Propose = 5,
    Endorse = 6,
    Nak = 7,
}

impl PacketKind {
    pub const ALL: [PacketKind; 7] = [
        PacketKind::Cmd,
        PacketKind::Data,
        PacketKind::Result,
        PacketKind::Ack,
        PacketKind::Propose,
        PacketKind::Endorse,
        PacketKind::Nak,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PacketKind::Cmd => "CMD",
            PacketKind::Data => "DATA",
            PacketKind::Result => "RESULT",
            PacketKind::Ack => "ACK",
            PacketKind::Propose => "PROPOSE",
            PacketKind::Endorse => "ENDORSE",
            PacketKind::Nak => "NAK",
        }
    }

    pub fn parse(s: &str) -> Option<PacketKind> {
        PacketKind::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(s))
    }

    pub fn from_byte(b: u8) -> Option<PacketKind> {
        PacketKind::ALL.into_iter().find(|k| *k as u8 == b)
    }

    /// ACK and NAK close a sub-procedure.
    pub fn is_terminal(self) -> bool {
        matches!(self, PacketKind::Ack | PacketKind::Nak)
    }
}

impl fmt::Display for PacketKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub seq: u32,
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: PacketKind,
    pub procedure: u32,
    pub sub: u16,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PacketError {
    #[error("payload of {0} bytes exceeds {MAX_PAYLOAD}")]
    PayloadTooLarge(usize),
    #[error("packet truncated")]
    Truncated,
    #[error("length field says {declared}, {actual} bytes follow")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("bad node address {0:#06x}")]
    BadNode(u16),
    #[error("bad packet kind {0}")]
    BadKind(u8),
}

impl Packet {
    pub fn encode(&self) -> Result<Vec<u8>, PacketError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(PacketError::PayloadTooLarge(self.payload.len()));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.src.to_wire().to_be_bytes());
        out.extend_from_slice(&self.dst.to_wire().to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.procedure.to_be_bytes());
        out.extend_from_slice(&self.sub.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Packet, PacketError> {
        if bytes.len() < HEADER_LEN {
            return Err(PacketError::Truncated);
        }
        let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_be_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let node = |w: u16| NodeId::from_wire(w).ok_or(PacketError::BadNode(w));
        let len = usize::from(u16_at(15));
        let actual = bytes.len() - HEADER_LEN;
        if len != actual {
            return Err(PacketError::LengthMismatch { declared: len, actual });
        }
        if len > MAX_PAYLOAD {
            return Err(PacketError::PayloadTooLarge(len));
        }
        Ok(Packet {
            seq: u32_at(0),
            src: node(u16_at(4))?,
            dst: node(u16_at(6))?,
            kind: PacketKind::from_byte(bytes[8]).ok_or(PacketError::BadKind(bytes[8]))?,
            procedure: u32_at(9),
            sub: u16_at(13),
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }
}
