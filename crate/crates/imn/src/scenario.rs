//! Timed event scripts.
//!
//! ```text
//! EVENT 0 run MPU0 diag.mpa learn
//! EVENT 0 dispatch MPU0 579.1 echo 0a0b 0c
//! EVENT 0 dispatch MPU0 579.1 match 3 1 0 2
//! EVENT 4 propose MPU0 579.1 NEW_MACRO_OPCODE 01a0
//! EVENT 0 policy KMS1 endorse_kind NEW_RELATION
//! EVENT 6 drop MPU0 CP0
//! EVENT 9 inject BANK0 BANK2 CMD 77 0
//! EVENT 0 config timeout 32
//! ```
//!
//! Events sharing a tick fire in file order.

use thiserror::Error;

use mpu_core::asm::Program;
use mpu_core::exec::proposal::ProposalKind;

use crate::packet::{NodeId, NodeKind, PacketKind, MAX_PAYLOAD};
use crate::topology::valid_subject;

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    EndorseAll,
    RejectAll,
    EndorseKind(ProposalKind),
    /// Endorse with this probability, drawn from the seeded simulation RNG.
    Random(f64),
}

impl Policy {
    fn parse(args: &[&str]) -> Result<Policy, String> {
        match args {
            ["endorse_all"] => Ok(Policy::EndorseAll),
            ["reject_all"] => Ok(Policy::RejectAll),
            ["endorse_kind", k] => ProposalKind::parse(k)
                .map(Policy::EndorseKind)
                .ok_or_else(|| format!("unknown proposal kind `{k}`")),
            ["random", p] => p
                .parse::<f64>()
                .ok()
                .filter(|p| (0.0..=1.0).contains(p))
                .map(Policy::Random)
                .ok_or_else(|| format!("probability `{p}` outside 0..=1")),
            _ => Err("policy is endorse_all | reject_all | endorse_kind KIND | random P".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    /// Each payload becomes one DATA packet; the bank echoes them back.
    Echo(Vec<Vec<u8>>),
    /// Nearest-k query with raw codes under the MPU's own schema.
    Match { k: u16, codes: Vec<u64> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Run { mpu: NodeId, program: Program, learn: bool },
    Dispatch { mpu: NodeId, subject: String, command: Command },
    Propose { mpu: NodeId, subject: String, kind: ProposalKind, payload: Vec<u8> },
    Policy { kms: NodeId, policy: Policy },
    Drop { from: NodeId, to: NodeId },
    Inject { src: NodeId, dst: NodeId, kind: PacketKind, procedure: u32, sub: u16, payload: Vec<u8> },
    Timeout(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub tick: u64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scenario {
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

pub fn parse_hex(s: &str) -> Result<Vec<u8>, String> {
    if s.len() % 2 != 0 {
        return Err(format!("odd-length hex `{s}`"));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| format!("bad hex `{s}`")))
        .collect()
}

fn node_of(s: &str, kind: NodeKind) -> Result<NodeId, String> {
    let n: NodeId = s.parse()?;
    if n.kind != kind {
        return Err(format!("{n} is not a {} node", kind.name()));
    }
    Ok(n)
}

fn subject(s: &str) -> Result<String, String> {
    if valid_subject(s) {
        Ok(s.to_string())
    } else {
        Err(format!("bad subject identifier `{s}`"))
    }
}

fn parse_action(args: &[&str], load: &mut dyn FnMut(&str) -> Result<Program, String>) -> Result<Action, String> {
    Ok(match args {
        ["run", mpu, path, rest @ ..] => {
            let learn = match rest {
                [] => false,
                ["learn"] => true,
                _ => return Err("run takes MPU, program and an optional `learn`".into()),
            };
            Action::Run {
                mpu: node_of(mpu, NodeKind::Mpu)?,
                program: load(path).map_err(|e| format!("{path}: {e}"))?,
                learn,
            }
        }
        ["dispatch", mpu, subj, "echo", data @ ..] => {
            let burst = data.iter().map(|d| parse_hex(d)).collect::<Result<Vec<_>, _>>()?;
            if burst.iter().any(|d| d.len() > MAX_PAYLOAD) {
                return Err("echo payload exceeds packet limit".into());
            }
            Action::Dispatch {
                mpu: node_of(mpu, NodeKind::Mpu)?,
                subject: subject(subj)?,
                command: Command::Echo(burst),
            }
        }
        ["dispatch", mpu, subj, "match", k, codes @ ..] => Action::Dispatch {
            mpu: node_of(mpu, NodeKind::Mpu)?,
            subject: subject(subj)?,
            command: Command::Match {
                k: k.parse().map_err(|_| format!("bad k `{k}`"))?,
                codes: codes
                    .iter()
                    .map(|c| c.parse::<u64>().map_err(|_| format!("bad code `{c}`")))
                    .collect::<Result<_, _>>()?,
            },
        },
        ["propose", mpu, subj, kind, rest @ ..] => Action::Propose {
            mpu: node_of(mpu, NodeKind::Mpu)?,
            subject: subject(subj)?,
            kind: ProposalKind::parse(kind).ok_or_else(|| format!("unknown proposal kind `{kind}`"))?,
            payload: match rest {
                [] => Vec::new(),
                [hex] => parse_hex(hex)?,
                _ => return Err("propose takes one hex payload".into()),
            },
        },
        ["policy", kms, policy @ ..] => Action::Policy {
            kms: node_of(kms, NodeKind::Kms)?,
            policy: Policy::parse(policy)?,
        },
        ["drop", a, b] => Action::Drop {
            from: a.parse()?,
            to: b.parse()?,
        },
        ["inject", src, dst, kind, procedure, sub, rest @ ..] => Action::Inject {
            src: src.parse()?,
            dst: dst.parse()?,
            kind: PacketKind::parse(kind).ok_or_else(|| format!("unknown packet kind `{kind}`"))?,
            procedure: procedure.parse().map_err(|_| format!("bad procedure id `{procedure}`"))?,
            sub: sub.parse().map_err(|_| format!("bad sub-procedure index `{sub}`"))?,
            payload: match rest {
                [] => Vec::new(),
                [hex] => {
                    let p = parse_hex(hex)?;
                    if p.len() > MAX_PAYLOAD {
                        return Err("payload exceeds packet limit".into());
                    }
                    p
                }
                _ => return Err("inject takes one hex payload".into()),
            },
        },
        ["config", "timeout", n] => Action::Timeout(
            n.parse()
                .ok()
                .filter(|n| *n >= 1)
                .ok_or_else(|| format!("timeout `{n}` must be an integer >= 1"))?,
        ),
        _ => return Err(format!("unknown action `{}`", args.join(" "))),
    })
}

impl Scenario {
    /// Parses a script; `load` supplies the program named by each `run`.
    pub fn parse(text: &str, load: &mut dyn FnMut(&str) -> Result<Program, String>) -> Result<Scenario, ScenarioError> {
        let mut events = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |message: String| ScenarioError { line: i + 1, message };
            let toks: Vec<&str> = raw.split_whitespace().collect();
            match toks.as_slice() {
                [] => {}
                [first, ..] if first.starts_with('#') => {}
                ["EVENT", tick, args @ ..] => {
                    let tick = tick.parse().map_err(|_| err(format!("bad tick `{tick}`")))?;
                    let action = parse_action(args, load).map_err(err)?;
                    events.push(Event { tick, action });
                }
                _ => return Err(err(format!("expected EVENT, got `{}`", raw.trim()))),
            }
        }
        Ok(Scenario { events })
    }

    /// Every subject identifier the script names.
    pub fn subjects(&self) -> Vec<&str> {
        self.events
            .iter()
            .filter_map(|e| match &e.action {
                Action::Dispatch { subject, .. } | Action::Propose { subject, .. } => Some(subject.as_str()),
                _ => None,
            })
            .collect()
    }
}
