//! The MPU: fetch, decode and execute over object registers.
//!
//! A step runs the decoded instruction over a work list built from its
//! execution mode. Single-object modes take exactly one object from the
//! operand register; multi-object modes fold over the register's set in
//! ascending id order. Multi-process modes record one result per entry of
//! the opcode's sub-process chain, single-process modes one per object.
//!
//! Result codes summarise the work list: the sum of integer results, one
//! for every other non-absent value. Faults set bit 31 and carry the fault
//! code; network NAKs set bit 30 and carry the reason.

pub mod learn;
pub mod proposal;
pub mod report;
pub mod safety;
pub mod trace;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::asm::Program;
use crate::dataset::{obj_line, Dataset};
use crate::fixed::Confidence;
use crate::isa::*;
use crate::object_store::{
    build_matrix, classify_cells, pair_counts, AttrValue, Attribute, KnowledgeTree, MedicalObject, ObjectId,
    ObjectSpec, ObjectStore, RelationKind, RuleSet, StoreError, Subtree, TreeError, TreeNodeId,
};
use crate::symptom::{MatchError, Schema, SignatureBank, SymptomVector};

pub use learn::{learn_from_trace, LearnError, LearnParams};
pub use proposal::{KbProposal, ProposalError, ProposalKind, ProposalStatus};
pub use safety::{safecheck, SafetyReport, Verdict};
pub use trace::{Trace, TraceRecord, WorkResult, FAULT_BIT, NAK_BIT};

/// Class of objects that group other objects.
pub const CLUSTER_CLASS: &str = "cluster";
/// Attribute listing a cluster's members as `id|id|...`.
pub const MEMBERS_ATTRIBUTE: &str = "members";
/// Class of objects naming a knowledge bank by subject identifier.
pub const SUBJECT_CLASS: &str = "subject";
/// Attribute holding the subject identifier, or several joined by `|`.
pub const SUBJECT_ATTRIBUTE: &str = "code";
/// Optional subject attribute giving the result count a NETGET asks for.
pub const SUBJECT_K_ATTRIBUTE: &str = "k";

/// Network refusal reasons.
pub mod nak {
    pub const NO_SUBJECT: u8 = 1;
    pub const TIMEOUT: u8 = 2;
    pub const BAD_COMMAND: u8 = 3;
    pub const EMPTY_BANK: u8 = 4;
    pub const SCHEMA_MISMATCH: u8 = 5;
    pub const UNREACHABLE: u8 = 6;
    pub const REJECTED: u8 = 7;

    pub fn name(reason: u8) -> &'static str {
        match reason {
            NO_SUBJECT => "NO_SUBJECT",
            TIMEOUT => "TIMEOUT",
            BAD_COMMAND => "BAD_COMMAND",
            EMPTY_BANK => "EMPTY_BANK",
            SCHEMA_MISMATCH => "SCHEMA_MISMATCH",
            UNREACHABLE => "UNREACHABLE",
            REJECTED => "REJECTED",
            _ => "UNKNOWN",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Reg {
    #[default]
    Empty,
    Object(ObjectId),
    /// Sorted, without repeats.
    Set(Vec<ObjectId>),
}

impl Reg {
    pub fn set(mut ids: Vec<ObjectId>) -> Reg {
        ids.sort_unstable();
        ids.dedup();
        Reg::Set(ids)
    }

    pub fn ids(&self) -> Vec<ObjectId> {
        match self {
            Reg::Empty => vec![],
            Reg::Object(id) => vec![*id],
            Reg::Set(ids) => ids.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Fault {
    #[error("decode fault: {0}")]
    Decode(IsaError),
    #[error("object fault on r{reg}: {reason}")]
    ObjectFault { reg: usize, reason: &'static str },
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("object store: {0}")]
    Store(StoreError),
    #[error("match: {0}")]
    Match(MatchError),
    #[error("bad operand: {0}")]
    BadOperand(String),
    #[error("confidence {0}/1000 out of range")]
    ConfidenceOutOfRange(u16),
    #[error("unknown outcome code {0}")]
    UnknownOutcomeCode(u8),
    #[error("knowledge tree: {0}")]
    Tree(TreeError),
    #[error("pc {0} outside the program")]
    PcOutOfRange(u32),
}

impl Fault {
    pub fn code(&self) -> u32 {
        match self {
            Fault::Decode(_) => 1,
            Fault::ObjectFault { .. } => 2,
            Fault::UnknownObject(_) => 3,
            Fault::Store(_) => 4,
            Fault::Match(_) => 5,
            Fault::BadOperand(_) => 6,
            Fault::ConfidenceOutOfRange(_) => 7,
            Fault::UnknownOutcomeCode(_) => 8,
            Fault::Tree(_) => 9,
            Fault::PcOutOfRange(_) => 10,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Fault::Decode(_) => "DecodeFault",
            Fault::ObjectFault { .. } => "ObjectFault",
            Fault::UnknownObject(_) => "UnknownObject",
            Fault::Store(_) => "StoreFault",
            Fault::Match(_) => "MatchFault",
            Fault::BadOperand(_) => "BadOperand",
            Fault::ConfidenceOutOfRange(_) => "OutOfRange",
            Fault::UnknownOutcomeCode(_) => "UnknownOutcomeCode",
            Fault::Tree(_) => "TreeFault",
            Fault::PcOutOfRange(_) => "PcOutOfRange",
        }
    }
}

impl From<StoreError> for Fault {
    fn from(e: StoreError) -> Fault {
        match e {
            StoreError::UnknownObject(id) => Fault::UnknownObject(id),
            other => Fault::Store(other),
        }
    }
}

impl From<MatchError> for Fault {
    fn from(e: MatchError) -> Fault {
        Fault::Match(e)
    }
}

impl From<TreeError> for Fault {
    fn from(e: TreeError) -> Fault {
        Fault::Tree(e)
    }
}

/// Query a blocked `NETGET` needs answered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetRequest {
    pub object: ObjectId,
    /// One sub-procedure per subject, in this order.
    pub subjects: Vec<String>,
    pub vector: SymptomVector,
    pub k: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteMatch {
    pub record_id: u32,
    pub distance: u64,
    pub label: String,
    pub max_distance: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetReply {
    Matches(Vec<RemoteMatch>),
    Nak(u8),
}

/// Source of replies for a standalone run.
pub trait NetPort {
    fn request(&mut self, req: &NetRequest) -> NetReply;
}

/// Port with no network behind it: every request is refused.
#[derive(Debug, Clone, Copy, Default)]
pub struct Offline;

impl NetPort for Offline {
    fn request(&mut self, _req: &NetRequest) -> NetReply {
        NetReply::Nak(nak::UNREACHABLE)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    /// One record was appended to the trace.
    Traced,
    /// The VM was already halted; nothing happened.
    Halted,
    /// A `NETGET` waits for [`MpuState::deliver`]; nothing was traced.
    NeedsNet(NetRequest),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("step limit of {0} reached before HALT")]
    StepLimitExceeded(usize),
}

/// One element of an instruction's work list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkItem {
    pub object: Option<ObjectId>,
    pub process: &'static str,
}

/// Work list for `objects` under `mode`, in execution order.
pub fn exec_mode_dispatch(info: &OpcodeInfo, mode: ExecMode, objects: &[Option<ObjectId>]) -> Vec<WorkItem> {
    let objects: &[Option<ObjectId>] = if mode.multi_object() {
        objects
    } else {
        &objects[..objects.len().min(1)]
    };
    let mut out = Vec::new();
    for obj in objects {
        if mode.multi_process() {
            out.extend(info.chain.iter().map(|p| WorkItem {
                object: *obj,
                process: p,
            }));
        } else {
            out.push(WorkItem {
                object: *obj,
                process: info.mnemonic,
            });
        }
    }
    out
}

/// Product of step confidences; 1 for an empty list.
pub fn collective_confidence(steps: &[Confidence]) -> Confidence {
    update_confidence(Confidence::ONE, steps)
}

pub fn update_confidence(current: Confidence, steps: &[Confidence]) -> Confidence {
    steps.iter().fold(current, |acc, s| acc.combine(*s))
}

/// Presence-weighted object score; with an empty table every attribute weighs 1.
pub fn kfilter_score(obj: &MedicalObject, scores: &BTreeMap<String, u32>) -> u64 {
    obj.attributes()
        .iter()
        .filter(|a| !a.value.is_absent())
        .map(|a| {
            if scores.is_empty() {
                1
            } else {
                u64::from(scores.get(&a.name).copied().unwrap_or(0))
            }
        })
        .sum()
}

/// Objects scoring at least `threshold`, order preserved.
pub fn kfilter(
    store: &ObjectStore,
    ids: &[ObjectId],
    scores: &BTreeMap<String, u32>,
    threshold: u64,
) -> Result<Vec<ObjectId>, StoreError> {
    let mut out = Vec::new();
    for id in ids {
        if kfilter_score(store.object(*id)?, scores) >= threshold {
            out.push(*id);
        }
    }
    Ok(out)
}

/// Reads an object's signature from attributes named after the schema's
/// dimensions. Missing or absent attributes read as 0.
pub fn object_vector(schema: &Schema, obj: &MedicalObject) -> Result<SymptomVector, Fault> {
    let mut codes = Vec::with_capacity(schema.len());
    for d in schema.dims() {
        let code = match obj.get(&d.name) {
            None | Some(AttrValue::Absent) => 0,
            Some(AttrValue::Integer(v)) if *v >= 0 => *v as u64,
            Some(AttrValue::Code(c)) => c
                .strip_prefix("0x")
                .and_then(|h| u64::from_str_radix(h, 16).ok())
                .ok_or_else(|| Fault::BadOperand(format!("`{}` is not a hex code", d.name)))?,
            Some(v) => return Err(Fault::BadOperand(format!("`{}`={v} is not a code", d.name))),
        };
        codes.push(code);
    }
    Ok(schema.vector(codes)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnosis {
    pub tick: u64,
    pub object: ObjectId,
    pub record_id: u32,
    pub label: String,
    pub distance: u64,
    pub max_distance: u64,
    pub confidence: Confidence,
    pub remote: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub tick: u64,
    pub patient: ObjectId,
    pub scheduled: Vec<ObjectId>,
    pub blocked: Vec<ObjectId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub tick: u64,
    pub predicted: u8,
    pub observed: u8,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PredictionLog {
    entries: Vec<Prediction>,
}

impl PredictionLog {
    pub fn entries(&self) -> &[Prediction] {
        &self.entries
    }

    pub fn push(&mut self, p: Prediction) {
        self.entries.push(p);
    }

    pub fn mismatches(&self) -> usize {
        self.entries.iter().filter(|e| !e.matched).count()
    }

    /// Mismatches over entries; 0 for an empty log.
    pub fn divergence_rate(&self) -> Confidence {
        if self.entries.is_empty() {
            return Confidence::ZERO;
        }
        Confidence::from_ratio(self.mismatches() as u64, self.entries.len() as u64).unwrap_or(Confidence::ONE)
    }
}

#[derive(Debug, Default)]
struct Effect {
    work: Vec<WorkResult>,
    step_confidence: Option<Confidence>,
    item_confidence: Vec<Confidence>,
    next_pc: Option<u32>,
    halt: bool,
    nak: Option<u8>,
}

#[derive(Debug, Clone)]
pub struct MpuState {
    pub pc: u32,
    pub registers: [Reg; REGISTER_COUNT],
    pub store: ObjectStore,
    pub program: Program,
    pub s1_closed: bool,
    pub confidence: Confidence,
    pub halted: bool,
    pub fault: Option<Fault>,
    pub tick: u64,
    /// Value moved by GETATTR and SETATTR.
    pub latch: AttrValue,
    /// Result count a NETGET asks for when its subject gives none.
    pub match_k: u16,
    pub bank: Option<SignatureBank>,
    pub rules: RuleSet,
    pub outcomes: BTreeMap<u8, String>,
    pub scores: BTreeMap<String, u32>,
    pub tree: KnowledgeTree,
    pub trace: Trace,
    pub predictions: PredictionLog,
    pub proposals: Vec<KbProposal>,
    pub safety: Vec<SafetyReport>,
    pub schedules: Vec<Schedule>,
    pub diagnoses: Vec<Diagnosis>,
    /// Local MATCH results per object.
    pub matches: Vec<(ObjectId, Vec<(u32, u64)>)>,
    /// Remote results per object from the latest NETGET.
    pub remote: BTreeMap<ObjectId, Vec<RemoteMatch>>,
    reply: Option<NetReply>,
}

impl MpuState {
    pub fn new(program: Program, dataset: Dataset, learn: bool) -> MpuState {
        MpuState {
            pc: 0,
            registers: Default::default(),
            store: dataset.store,
            program,
            s1_closed: learn,
            confidence: Confidence::ONE,
            halted: false,
            fault: None,
            tick: 0,
            latch: AttrValue::Absent,
            match_k: 5,
            bank: dataset.bank,
            rules: dataset.rules,
            outcomes: dataset.outcomes,
            scores: dataset.scores,
            tree: KnowledgeTree::new(),
            trace: Trace::new(learn),
            predictions: PredictionLog::default(),
            proposals: Vec::new(),
            safety: Vec::new(),
            schedules: Vec::new(),
            diagnoses: Vec::new(),
            matches: Vec::new(),
            remote: BTreeMap::new(),
            reply: None,
        }
    }

    fn table() -> &'static OpcodeTable {
        OpcodeTable::standard()
    }

    /// Answers the pending NETGET; the next [`step`](Self::step) consumes it.
    pub fn deliver(&mut self, reply: NetReply) {
        self.reply = Some(reply);
    }

    /// Steps until HALT or a fault, answering network requests from `port`.
    /// Returns the number of records traced.
    pub fn run(&mut self, max_steps: usize, port: &mut dyn NetPort) -> Result<usize, ExecError> {
        let mut steps = 0;
        while !self.halted {
            if steps >= max_steps {
                return Err(ExecError::StepLimitExceeded(max_steps));
            }
            match self.step() {
                Step::Traced => steps += 1,
                Step::Halted => break,
                Step::NeedsNet(req) => {
                    let reply = port.request(&req);
                    self.deliver(reply);
                }
            }
        }
        Ok(steps)
    }

    pub fn step(&mut self) -> Step {
        if self.halted {
            return Step::Halted;
        }
        let pc = self.pc;
        let Some(&word) = self.program.words.get(pc as usize) else {
            self.halted = true;
            self.fault = Some(Fault::PcOutOfRange(pc));
            return Step::Halted;
        };
        self.store.tick = self.tick;
        let decoded = Self::table().decode(word);
        let (instr, info) = match decoded {
            Ok(i) => (i, Self::table().lookup(i.opcode).expect("decoded opcode is defined")),
            Err(e) => {
                self.record_fault(pc, word, None, Vec::new(), Fault::Decode(e));
                return Step::Traced;
            }
        };
        let operands = self.operand_ids(&instr, info);
        if instr.opcode == NETGET && self.reply.is_none() {
            match self.net_request(&instr) {
                Ok(req) => return Step::NeedsNet(req),
                Err(f) => {
                    self.record_fault(pc, word, Some(&instr), operands, f);
                    return Step::Traced;
                }
            }
        }
        match self.execute(&instr, info) {
            Err(f) => self.record_fault(pc, word, Some(&instr), operands, f),
            Ok(effect) => {
                let mut step = effect.step_confidence.unwrap_or_else(|| {
                    Confidence::from_units(u32::from(info.base_confidence)).unwrap_or(Confidence::ONE)
                });
                step = update_confidence(step, &effect.item_confidence);
                self.confidence = self.confidence.combine(step);
                let result = match effect.nak {
                    Some(r) => NAK_BIT | u32::from(r),
                    None => summarise(&effect.work),
                };
                self.trace.push(TraceRecord {
                    tick: self.tick,
                    pc,
                    word,
                    opcode: instr.opcode,
                    mnemonic: info.mnemonic,
                    mode: Some(instr.mode),
                    operands,
                    result,
                    step_confidence: step,
                    confidence: self.confidence,
                    work: effect.work,
                });
                self.tick += 1;
                if effect.halt {
                    self.halted = true;
                } else {
                    self.pc = effect.next_pc.unwrap_or(pc + 1);
                    if self.pc as usize >= self.program.words.len() {
                        self.halted = true;
                        self.fault = Some(Fault::PcOutOfRange(self.pc));
                    }
                }
            }
        }
        Step::Traced
    }

    fn record_fault(&mut self, pc: u32, word: u32, instr: Option<&Instruction>, operands: Vec<ObjectId>, f: Fault) {
        self.reply = None;
        self.confidence = self.confidence.combine(Confidence::ZERO);
        let opcode = (word >> 24) as u8;
        self.trace.push(TraceRecord {
            tick: self.tick,
            pc,
            word,
            opcode,
            mnemonic: Self::table().get(opcode).map_or("?", |i| i.mnemonic),
            mode: instr.map(|i| i.mode),
            operands,
            result: FAULT_BIT | f.code(),
            step_confidence: Confidence::ZERO,
            confidence: self.confidence,
            work: Vec::new(),
        });
        self.tick += 1;
        self.halted = true;
        self.fault = Some(f);
    }

    /// Object ids the instruction reads, in operand order, without repeats.
    fn operand_ids(&self, instr: &Instruction, info: &OpcodeInfo) -> Vec<ObjectId> {
        let mut ids = Vec::new();
        let dest_only = matches!(instr.opcode, LOADO | OMFETCH | JUMP);
        if info.operands[0] == OperandKind::Reg && !dest_only {
            ids.extend(self.reg(instr.reg_a()).ids());
        }
        match info.operands[1] {
            OperandKind::Reg => ids.extend(self.reg(instr.reg_b()).ids()),
            OperandKind::Addr if instr.opcode != JUMP => ids.push(instr.address()),
            _ => {}
        }
        let mut seen = Vec::with_capacity(ids.len());
        for id in ids {
            if !seen.contains(&id) {
                seen.push(id);
            }
        }
        seen
    }

    fn reg(&self, r: usize) -> &Reg {
        static EMPTY: Reg = Reg::Empty;
        self.registers.get(r).unwrap_or(&EMPTY)
    }

    fn check_reg(r: usize) -> Result<(), Fault> {
        if r >= REGISTER_COUNT {
            Err(Fault::BadOperand(format!("register r{r}")))
        } else {
            Ok(())
        }
    }

    fn single(&self, r: usize) -> Result<ObjectId, Fault> {
        Self::check_reg(r)?;
        match &self.registers[r] {
            Reg::Object(id) => Ok(*id),
            Reg::Set(ids) if ids.len() == 1 => Ok(ids[0]),
            Reg::Empty => Err(Fault::ObjectFault {
                reg: r,
                reason: "register empty",
            }),
            Reg::Set(_) => Err(Fault::ObjectFault {
                reg: r,
                reason: "single-object mode needs exactly one object",
            }),
        }
    }

    /// Any register contents as a set; empty registers fault.
    fn set_arg(&self, r: usize) -> Result<Vec<ObjectId>, Fault> {
        Self::check_reg(r)?;
        match &self.registers[r] {
            Reg::Empty => Err(Fault::ObjectFault {
                reg: r,
                reason: "register empty",
            }),
            other => Ok(other.ids()),
        }
    }

    fn elements(&self, r: usize, mode: ExecMode) -> Result<Vec<ObjectId>, Fault> {
        if mode.multi_object() {
            self.set_arg(r)
        } else {
            self.single(r).map(|id| vec![id])
        }
    }

    fn subject_of(&self, addr: ObjectId) -> Result<String, Fault> {
        let s = self.store.object(addr)?;
        match (s.class_tag.as_str(), s.get(SUBJECT_ATTRIBUTE)) {
            (SUBJECT_CLASS, Some(AttrValue::Code(c))) => Ok(c.clone()),
            (SUBJECT_CLASS, Some(AttrValue::Decimal(d))) => Ok(d.to_string()),
            (SUBJECT_CLASS, Some(AttrValue::Integer(v))) => Ok(v.to_string()),
            _ => Err(Fault::BadOperand(format!("object {addr} is not a subject identifier"))),
        }
    }

    fn schema(&self) -> Result<&Schema, Fault> {
        self.bank
            .as_ref()
            .map(SignatureBank::schema)
            .ok_or_else(|| Fault::BadOperand("no signature schema loaded".into()))
    }

    fn net_request(&self, instr: &Instruction) -> Result<NetRequest, Fault> {
        let object = self.single(instr.reg_a())?;
        let subjects = self.subject_of(instr.address())?.split('|').map(str::to_string).collect();
        let vector = object_vector(self.schema()?, self.store.object(object)?)?;
        let k = match self.store.object(instr.address())?.get(SUBJECT_K_ATTRIBUTE) {
            Some(AttrValue::Integer(k)) if (1..=i64::from(u16::MAX)).contains(k) => *k as u16,
            None | Some(AttrValue::Absent) => self.match_k,
            Some(v) => return Err(Fault::BadOperand(format!("bad result count {v}"))),
        };
        Ok(NetRequest {
            object,
            subjects,
            vector,
            k,
        })
    }

    fn next_proposal_id(&self) -> u32 {
        self.proposals.iter().map(|p| p.id).max().unwrap_or(0) + 1
    }

    fn execute(&mut self, instr: &Instruction, info: &'static OpcodeInfo) -> Result<Effect, Fault> {
        let mode = instr.mode.exec;
        let mut fx = Effect::default();
        let a = instr.reg_a();
        match instr.opcode {
            HALT => {
                fx.halt = true;
                no_object(&mut fx, info, mode, AttrValue::Absent);
            }
            NOPO => no_object(&mut fx, info, mode, AttrValue::Absent),
            JUMP => {
                let target = u32::from(instr.address());
                if target as usize >= self.program.words.len() {
                    return Err(Fault::PcOutOfRange(target));
                }
                fx.next_pc = Some(target);
                no_object(&mut fx, info, mode, AttrValue::Integer(target.into()));
            }
            CONF => {
                let v = instr.operand_b;
                if v > 1000 {
                    return Err(Fault::ConfidenceOutOfRange(v));
                }
                fx.step_confidence = Some(Confidence::from_ratio(v.into(), 1000).expect("v <= 1000"));
                no_object(&mut fx, info, mode, AttrValue::Integer(v.into()));
            }
            PREDLOG => {
                let (pred, obs) = (instr.operand_a, instr.operand_b);
                let code = |v: u16| -> Result<u8, Fault> {
                    u8::try_from(v)
                        .ok()
                        .filter(|c| self.outcomes.contains_key(c))
                        .ok_or(Fault::UnknownOutcomeCode(v.min(255) as u8))
                };
                let (pred, obs) = (code(pred)?, code(obs)?);
                let matched = pred == obs;
                self.predictions.push(Prediction {
                    tick: self.tick,
                    predicted: pred,
                    observed: obs,
                    matched,
                });
                if !matched && self.s1_closed {
                    let id = self.next_proposal_id();
                    let payload = format!("PRED {} {} {}", self.tick, pred, obs).into_bytes();
                    self.proposals
                        .push(KbProposal::new(id, ProposalKind::ObjectUpdate, None, payload));
                }
                no_object(&mut fx, info, mode, AttrValue::Bool(matched));
            }
            PRUNE => {
                self.tree = self.tree.prune(TreeNodeId::from(instr.operand_b))?;
                no_object(&mut fx, info, mode, AttrValue::Integer(self.tree.len() as i64));
            }
            LOADO => {
                Self::check_reg(a)?;
                let addr = instr.address();
                self.store.object(addr)?;
                self.registers[a] = Reg::Object(addr);
                push_values(&mut fx, info, mode, Some(addr), vec![AttrValue::Integer(addr.into())]);
            }
            STOREO => {
                let src = self.single(a)?;
                let addr = instr.address();
                if src != addr {
                    let mut spec = ObjectSpec::from_object(self.store.object(src)?);
                    spec.id = addr;
                    self.store.put_object(spec)?;
                }
                push_values(&mut fx, info, mode, Some(src), vec![AttrValue::Integer(addr.into())]);
            }
            OMFETCH => {
                Self::check_reg(a)?;
                let addr = instr.address();
                let obj = self.store.object(addr)?;
                let ids = if obj.class_tag == CLUSTER_CLASS {
                    members_of(obj)?
                } else {
                    self.store.ids_of_class(&obj.class_tag.clone())
                };
                let n = ids.len();
                self.registers[a] = Reg::set(ids);
                push_values(&mut fx, info, mode, Some(addr), vec![AttrValue::Integer(n as i64)]);
            }
            OMSTORE => {
                let ids = self.set_arg(a)?;
                let addr = instr.address();
                let members = if ids.is_empty() {
                    AttrValue::Absent
                } else {
                    AttrValue::Code(ids.iter().map(u16::to_string).collect::<Vec<_>>().join("|"))
                };
                self.store.put_object(ObjectSpec {
                    id: addr,
                    class_tag: CLUSTER_CLASS.into(),
                    attributes: vec![Attribute::new(MEMBERS_ATTRIBUTE, members)],
                })?;
                push_values(&mut fx, info, mode, Some(addr), vec![AttrValue::Integer(ids.len() as i64)]);
            }
            NETGET => {
                let object = self.single(a)?;
                match self.reply.take() {
                    Some(NetReply::Matches(list)) => {
                        let n = list.len();
                        self.remote.insert(object, list);
                        push_values(&mut fx, info, mode, Some(object), vec![AttrValue::Integer(n as i64)]);
                    }
                    Some(NetReply::Nak(reason)) => {
                        self.remote.remove(&object);
                        fx.nak = Some(reason);
                        let v = AttrValue::Code(format!("NAK:{}", nak::name(reason)));
                        push_values(&mut fx, info, mode, Some(object), vec![v]);
                    }
                    None => unreachable!("step() blocks NETGET until a reply arrives"),
                }
            }
            NETPUT => {
                let object = self.single(a)?;
                let subject = self.subject_of(instr.address())?;
                if subject.contains('|') {
                    return Err(Fault::BadOperand("NETPUT needs a single subject".into()));
                }
                let line = obj_line(self.store.object(object)?);
                let id = self.next_proposal_id();
                self.proposals.push(KbProposal::new(
                    id,
                    ProposalKind::ObjectUpdate,
                    Some(subject),
                    line.into_bytes(),
                ));
                push_values(&mut fx, info, mode, Some(object), vec![AttrValue::Integer(id.into())]);
            }
            SAFECHK => {
                let patient = self.single(a)?;
                let procs = self.set_arg(instr.reg_b())?;
                let report = safecheck(&self.store, patient, &procs, &self.rules)?;
                let blocked = report.blocked();
                self.safety.push(report);
                push_values(&mut fx, info, mode, Some(patient), vec![AttrValue::Integer(blocked as i64)]);
            }
            RXPLAN => {
                let patient = self.single(a)?;
                let procs = self.set_arg(instr.reg_b())?;
                let report = safecheck(&self.store, patient, &procs, &self.rules)?;
                let (blocked, scheduled): (Vec<ObjectId>, Vec<ObjectId>) = report
                    .procedures
                    .iter()
                    .partition(|p| report.verdict_of(**p).is_some_and(Verdict::is_block));
                let values = vec![
                    AttrValue::Integer(blocked.len() as i64),
                    AttrValue::Integer(scheduled.len() as i64),
                ];
                self.safety.push(report);
                self.schedules.push(Schedule {
                    tick: self.tick,
                    patient,
                    scheduled,
                    blocked,
                });
                push_values(&mut fx, info, mode, Some(patient), values);
            }
            _ => self.execute_per_object(instr, info, &mut fx)?,
        }
        Ok(fx)
    }

    /// Opcodes whose work list ranges over a register's objects.
    fn execute_per_object(&mut self, instr: &Instruction, info: &'static OpcodeInfo, fx: &mut Effect) -> Result<(), Fault> {
        let mode = instr.mode.exec;
        let a = instr.reg_a();
        let binary = info.operands[1] == OperandKind::Reg;
        let (target, objects) = if binary {
            (Some(self.single(a)?), self.elements(instr.reg_b(), mode)?)
        } else {
            (None, self.elements(a, mode)?)
        };
        let mut kept = Vec::new();
        for x in &objects {
            let values = match instr.opcode {
                GETATTR => {
                    let idx = usize::from(instr.operand_b);
                    let v = self
                        .store
                        .object(*x)?
                        .attributes()
                        .get(idx)
                        .map_or(AttrValue::Absent, |a| a.value.clone());
                    self.latch = v.clone();
                    vec![AttrValue::Integer((*x).into()), v]
                }
                SETATTR => {
                    let idx = usize::from(instr.operand_b);
                    let name = self
                        .store
                        .object(*x)?
                        .attributes()
                        .get(idx)
                        .map(|a| a.name.clone())
                        .ok_or_else(|| Fault::BadOperand(format!("object {x} has no attribute {idx}")))?;
                    self.store.set_attribute(*x, &name, self.latch.clone())?;
                    vec![AttrValue::Integer((*x).into()), self.latch.clone()]
                }
                KFILTER => {
                    let score = kfilter_score(self.store.object(*x)?, &self.scores);
                    let keep = score >= u64::from(instr.operand_b);
                    if keep {
                        kept.push(*x);
                    }
                    vec![AttrValue::Integer(score as i64), AttrValue::Bool(keep)]
                }
                MATCH => {
                    let bank = self
                        .bank
                        .as_ref()
                        .ok_or_else(|| Fault::BadOperand("no signature bank loaded".into()))?;
                    let v = object_vector(bank.schema(), self.store.object(*x)?)?;
                    let found = bank.nearest_k(&v, usize::from(instr.operand_b))?;
                    let n = found.len();
                    self.matches.push((*x, found));
                    vec![AttrValue::Integer(bank.schema().len() as i64), AttrValue::Integer(n as i64)]
                }
                DIAG => {
                    let (values, conf) = self.diagnose(*x)?;
                    fx.item_confidence.push(conf);
                    values
                }
                GRAFT => {
                    let sub = self.subtree_of(*x)?;
                    let (tree, top) = self.tree.graft(&sub, TreeNodeId::from(instr.operand_b))?;
                    self.tree = tree;
                    vec![AttrValue::Integer(top.into())]
                }
                MERGE => {
                    let t = target.expect("binary opcode");
                    let (added, version) = self.merge_into(t, *x)?;
                    vec![AttrValue::Integer(added as i64), AttrValue::Integer(version as i64)]
                }
                COMMON | OVERLAP => {
                    let t = target.expect("binary opcode");
                    let m = build_matrix(&self.store, &[t, *x])?;
                    let m = classify_cells(&m, crate::fixed::Decimal::integer(0), &self.rules);
                    let (c, o) = pair_counts(&m, 0, 1);
                    let n = if instr.opcode == COMMON { c } else { o };
                    vec![AttrValue::Integer(m.m() as i64), AttrValue::Integer(n as i64)]
                }
                LINKP | LINKS => {
                    let t = target.expect("binary opcode");
                    let (kind, label) = if instr.opcode == LINKP {
                        (RelationKind::Primary, "linkp")
                    } else {
                        (RelationKind::Secondary, "links")
                    };
                    vec![AttrValue::Bool(self.store.add_relation(t, *x, kind, label)?)]
                }
                other => unreachable!("opcode {other:#04x} handled elsewhere"),
            };
            push_values(fx, info, mode, Some(*x), values);
        }
        if instr.opcode == KFILTER {
            self.registers[a] = if mode.multi_object() {
                Reg::Set(kept)
            } else {
                match kept.as_slice() {
                    [id] => Reg::Object(*id),
                    _ => Reg::Set(vec![]),
                }
            };
        }
        Ok(())
    }

    fn merge_into(&mut self, target: ObjectId, src: ObjectId) -> Result<(usize, u64), Fault> {
        let t = self.store.object(target)?;
        let s = self.store.object(src)?;
        let mut spec = ObjectSpec::from_object(t);
        let mut added = 0;
        for attr in s.attributes() {
            if attr.value.is_absent() {
                continue;
            }
            match spec.attributes.iter_mut().find(|a| a.name == attr.name) {
                Some(a) if a.value.is_absent() => {
                    a.value = attr.value.clone();
                    added += 1;
                }
                Some(_) => {}
                None => {
                    spec.attributes.push(attr.clone());
                    added += 1;
                }
            }
        }
        if added > 0 {
            self.store.put_object(spec)?;
        }
        Ok((added, self.store.object(target)?.version()))
    }

    fn diagnose(&mut self, x: ObjectId) -> Result<(Vec<AttrValue>, Confidence), Fault> {
        let schema = self.schema()?;
        let dims = schema.len() as i64;
        let mut best: Option<(RemoteMatch, bool)> = None;
        let mut candidates = 0;
        if let Some(list) = self.remote.get(&x).filter(|l| !l.is_empty()) {
            candidates = list.len();
            best = list
                .iter()
                .min_by_key(|m| (m.distance, m.record_id))
                .map(|m| (m.clone(), true));
        } else if let Some(bank) = self.bank.as_ref().filter(|b| !b.is_empty()) {
            let v = object_vector(bank.schema(), self.store.object(x)?)?;
            let found = bank.nearest_k(&v, 1)?;
            candidates = bank.len();
            best = found.first().map(|(id, d)| {
                let label = bank.get(*id).map(|s| s.label.clone()).unwrap_or_default();
                (
                    RemoteMatch {
                        record_id: *id,
                        distance: *d,
                        label,
                        max_distance: bank.max_distance(),
                    },
                    false,
                )
            });
        }
        let Some((m, remote)) = best else {
            return Ok((
                vec![AttrValue::Integer(dims), AttrValue::Integer(0), AttrValue::Absent],
                Confidence::ZERO,
            ));
        };
        let conf = if m.max_distance == 0 {
            Confidence::ONE
        } else {
            Confidence::from_ratio(m.max_distance.saturating_sub(m.distance), m.max_distance)
                .unwrap_or(Confidence::ZERO)
        };
        let label = m.label.clone();
        self.diagnoses.push(Diagnosis {
            tick: self.tick,
            object: x,
            record_id: m.record_id,
            label: m.label,
            distance: m.distance,
            max_distance: m.max_distance,
            confidence: conf,
            remote,
        });
        let label_value = if label.is_empty() {
            AttrValue::Absent
        } else {
            AttrValue::Code(label)
        };
        Ok((
            vec![
                AttrValue::Integer(dims),
                AttrValue::Integer(candidates as i64),
                label_value,
            ],
            conf,
        ))
    }

    fn subtree_of(&self, x: ObjectId) -> Result<Subtree, Fault> {
        let obj = self.store.object(x)?;
        if obj.class_tag == CLUSTER_CLASS {
            let twigs = members_of(obj)?
                .into_iter()
                .map(|m| self.twig_of(self.store.object(m)?))
                .collect::<Result<Vec<_>, Fault>>()?;
            Ok(Subtree::branch(format!("{CLUSTER_CLASS}:{x}"), twigs))
        } else {
            self.twig_of(obj)
        }
    }

    fn twig_of(&self, obj: &MedicalObject) -> Result<Subtree, Fault> {
        let leaves = obj
            .attributes()
            .iter()
            .filter(|a| !a.value.is_absent())
            .map(|a| Subtree::leaf(format!("{}={}", a.name, a.value)))
            .collect();
        Ok(Subtree::twig(obj.id, leaves))
    }
}

fn members_of(obj: &MedicalObject) -> Result<Vec<ObjectId>, Fault> {
    match obj.get(MEMBERS_ATTRIBUTE) {
        None | Some(AttrValue::Absent) => Ok(vec![]),
        Some(AttrValue::Integer(v)) => ObjectId::try_from(*v)
            .map(|id| vec![id])
            .map_err(|_| Fault::BadOperand(format!("bad member {v}"))),
        Some(AttrValue::Code(c)) => {
            let mut ids = c
                .split('|')
                .map(|t| t.parse::<ObjectId>().map_err(|_| Fault::BadOperand(format!("bad member `{t}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            ids.sort_unstable();
            ids.dedup();
            Ok(ids)
        }
        Some(v) => Err(Fault::BadOperand(format!("bad members value {v}"))),
    }
}

fn no_object(fx: &mut Effect, info: &'static OpcodeInfo, mode: ExecMode, value: AttrValue) {
    push_values(fx, info, mode, None, vec![value]);
}

/// Records one object's results: every chain step in multi-process modes,
/// the final value otherwise.
fn push_values(fx: &mut Effect, info: &'static OpcodeInfo, mode: ExecMode, object: Option<ObjectId>, values: Vec<AttrValue>) {
    if mode.multi_process() {
        let last = values.last().cloned().unwrap_or(AttrValue::Absent);
        for (i, process) in info.chain.iter().enumerate() {
            fx.work.push(WorkResult {
                object,
                process,
                value: values.get(i).cloned().unwrap_or_else(|| last.clone()),
            });
        }
    } else {
        fx.work.push(WorkResult {
            object,
            process: info.mnemonic,
            value: values.last().cloned().unwrap_or(AttrValue::Absent),
        });
    }
}

fn summarise(work: &[WorkResult]) -> u32 {
    let total: u64 = work
        .iter()
        .map(|w| match &w.value {
            AttrValue::Integer(v) => (*v).clamp(0, i64::from(u32::MAX)) as u64,
            v if v.is_truthy() => 1,
            _ => 0,
        })
        .sum();
    total.min(u64::from(!(FAULT_BIT | NAK_BIT))) as u32
}

#[cfg(test)]
mod tests;
