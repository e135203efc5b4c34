//! The discrete-event loop.
//!
//! Events are keyed `(tick, priority, n)`: packet arrivals and link drops
//! first (ordered by seq), then timers, script events, and finally one VM
//! step per running MPU.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use mpu_core::asm::Program;
use mpu_core::dataset::Dataset;
use mpu_core::exec::proposal::{KbProposal, ProposalStatus};
use mpu_core::exec::{nak, MpuState, NetReply, RemoteMatch, Step};
use mpu_core::hash::{fnv1a, seal};

use crate::bank::{self, BankState, CmdPayload, Op};
use crate::packet::{NodeId, NodeKind, Packet, PacketKind, MAX_PAYLOAD};
use crate::scenario::{Action, Command, Policy, Scenario};
use crate::topology::{resolve, Topology};

/// Ticks a CMD sender waits for ACK or NAK unless the route needs longer.
pub const DEFAULT_TIMEOUT: u64 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("simulation still busy after {0} ticks")]
    MaxTicksExceeded(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropCause {
    Link,
    Firewall,
}

impl DropCause {
    pub fn name(self) -> &'static str {
        match self {
            DropCause::Link => "LINK",
            DropCause::Firewall => "FIREWALL",
        }
    }
}

/// One packet arrival or logged loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub tick: u64,
    pub packet: Packet,
    pub drop: Option<DropCause>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Transcript {
    pub entries: Vec<Entry>,
}

impl Transcript {
    /// Header lines in event order, then `NETHASH`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let p = &e.packet;
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.tick,
                p.seq,
                p.src,
                p.dst,
                p.kind,
                p.procedure,
                p.sub,
                p.payload.len()
            );
            if let Some(c) = e.drop {
                let _ = write!(out, "\tDROP:{}", c.name());
            }
            out.push('\n');
        }
        seal(&mut out, "NETHASH");
        out
    }

    pub fn hash(&self) -> u64 {
        let text = self.render();
        let body = &text[..text.len() - "NETHASH 0000000000000000\n".len()];
        fnv1a(body.as_bytes())
    }

    pub fn delivered(&self) -> impl Iterator<Item = &Packet> {
        self.entries.iter().filter(|e| e.drop.is_none()).map(|e| &e.packet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Stats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped_link: u64,
    pub dropped_firewall: u64,
}

impl Stats {
    pub fn dropped(&self) -> u64 {
        self.dropped_link + self.dropped_firewall
    }
}

/// One sub-procedure's accumulated output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubResult {
    pub sub: u16,
    /// Concatenated RESULT payloads, or the NAK reason.
    pub outcome: Result<Vec<u8>, u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("procedure {procedure} sub-procedure {sub} has no ACK or NAK")]
pub struct IncompleteProcedure {
    pub procedure: u32,
    pub sub: u16,
}

/// Results of one procedure grouped by sub-procedure index.
pub fn accumulate(transcript: &Transcript, procedure: u32) -> Result<Vec<SubResult>, IncompleteProcedure> {
    let mut packets: Vec<&Packet> = transcript
        .delivered()
        .filter(|p| p.procedure == procedure)
        .filter(|p| matches!(p.kind, PacketKind::Cmd | PacketKind::Result | PacketKind::Ack | PacketKind::Nak))
        .collect();
    packets.sort_by_key(|p| p.seq);
    let mut groups: BTreeMap<u16, (Vec<u8>, Option<Result<(), u8>>)> = BTreeMap::new();
    for p in packets {
        let g = groups.entry(p.sub).or_default();
        if g.1.is_some() {
            continue;
        }
        match p.kind {
            PacketKind::Result => g.0.extend_from_slice(&p.payload),
            PacketKind::Ack => g.1 = Some(Ok(())),
            PacketKind::Nak => g.1 = Some(Err(p.payload.first().copied().unwrap_or(0))),
            _ => {}
        }
    }
    groups
        .into_iter()
        .map(|(sub, (data, end))| match end {
            Some(Ok(())) => Ok(SubResult { sub, outcome: Ok(data) }),
            Some(Err(r)) => Ok(SubResult { sub, outcome: Err(r) }),
            None => Err(IncompleteProcedure { procedure, sub }),
        })
        .collect()
}

/// Merges match results from every ACKed group into the best `k`, or the
/// first refusal when no group succeeded.
pub fn merge_matches(groups: &[SubResult], k: u16) -> NetReply {
    let mut all: Vec<RemoteMatch> = Vec::new();
    let mut first_nak = None;
    let mut any_ok = false;
    for g in groups {
        match &g.outcome {
            Ok(bytes) => match bank::decode_matches(bytes) {
                Some(m) => {
                    any_ok = true;
                    all.extend(m);
                }
                None => {
                    first_nak.get_or_insert(nak::BAD_COMMAND);
                }
            },
            Err(r) => {
                first_nak.get_or_insert(*r);
            }
        }
    }
    if !any_ok {
        return NetReply::Nak(first_nak.unwrap_or(nak::UNREACHABLE));
    }
    all.sort_by(|a, b| (a.distance, a.record_id, &a.label).cmp(&(b.distance, b.record_id, &b.label)));
    all.truncate(usize::from(k));
    NetReply::Matches(all)
}

/// One program execution on an MPU node.
#[derive(Debug, Clone)]
pub struct Run {
    pub node: NodeId,
    pub state: MpuState,
    pub learn: bool,
    pub started: u64,
    pub finished: Option<u64>,
}

/// A proposal's trip through consensus.
#[derive(Debug, Clone)]
pub struct ProposalRecord {
    pub node: NodeId,
    pub proposal: KbProposal,
    pub bank: Option<NodeId>,
    pub procedure: u32,
    /// Whether the target bank accepted the committed payload.
    pub applied: bool,
    /// `(run, index)` when the proposal came from a VM run.
    pub origin: Option<(usize, usize)>,
}

/// A query procedure: a scripted dispatch or a VM `NETGET`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcedureRecord {
    pub procedure: u32,
    pub owner: NodeId,
    pub subjects: Vec<String>,
    pub op: u8,
    /// Index into [`Outcome::runs`] for a `NETGET`.
    pub run: Option<usize>,
    pub reply: Option<NetReply>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub transcript: Transcript,
    pub stats: Stats,
    pub final_tick: u64,
    pub runs: Vec<Run>,
    pub proposals: Vec<ProposalRecord>,
    pub procedures: Vec<ProcedureRecord>,
    pub banks: BTreeMap<NodeId, BankState>,
}

type Key = (u64, u8, u64);

#[derive(Debug, Clone)]
enum Ev {
    Deliver(Packet),
    Drop(Packet),
    CmdTimeout { src: NodeId, procedure: u32, sub: u16 },
    Deadline(u32),
    Script(usize),
    Step(NodeId),
}

#[derive(Debug, Clone)]
enum GetCmd {
    Echo(Vec<Vec<u8>>),
    Match { k: u16, query: Vec<u8> },
}

#[derive(Debug, Clone)]
enum FlowKind {
    Resolve { parent: u32, count: u16 },
    Get { record: usize, cmd: GetCmd, count: u16 },
    Propose { record: usize, kms: Vec<NodeId>, replies: usize, deadline: Option<Key>, decided: bool },
}

#[derive(Debug, Clone, Default)]
struct Sub {
    results: Vec<Vec<u8>>,
    done: Option<Result<(), u8>>,
}

#[derive(Debug, Clone)]
struct Flow {
    owner: NodeId,
    kind: FlowKind,
    subs: BTreeMap<u16, Sub>,
}

impl Flow {
    fn all_done(&self, count: u16) -> bool {
        (0..count).all(|i| self.subs.get(&i).is_some_and(|s| s.done.is_some()))
    }
}

#[derive(Debug, Clone, Default)]
struct MpuNode {
    dataset: Dataset,
    current: Option<usize>,
    queue: VecDeque<(Program, bool)>,
}

#[derive(Debug, Clone)]
struct BankNode {
    state: BankState,
    private: bool,
    pending: BTreeMap<(NodeId, u32, u16), (CmdPayload, Vec<Vec<u8>>)>,
}

struct Sim<'a> {
    topo: &'a Topology,
    script: &'a Scenario,
    rng: ChaCha8Rng,
    queue: BTreeMap<Key, Ev>,
    now: u64,
    next_seq: u32,
    next_proc: u32,
    next_timer: u64,
    timeout: u64,
    drops: BTreeSet<(u64, NodeId, NodeId)>,
    open: BTreeMap<(NodeId, u32, u16), Key>,
    flows: BTreeMap<u32, Flow>,
    mpus: BTreeMap<NodeId, MpuNode>,
    banks: BTreeMap<NodeId, BankNode>,
    policies: BTreeMap<NodeId, Policy>,
    out: Outcome,
}

/// Runs `scenario` on `topology` until no events remain.
pub fn run_events(topology: &Topology, scenario: &Scenario, seed: u64, max_ticks: u64) -> Result<Outcome, SimError> {
    let mut sim = Sim::new(topology, scenario, seed);
    sim.run(max_ticks)?;
    Ok(sim.finish())
}

impl<'a> Sim<'a> {
    fn new(topo: &'a Topology, script: &'a Scenario, seed: u64) -> Sim<'a> {
        let mut queue = BTreeMap::new();
        let mut drops = BTreeSet::new();
        for (i, e) in script.events.iter().enumerate() {
            if let Action::Drop { from, to } = &e.action {
                drops.insert((e.tick, *from, *to));
            } else {
                queue.insert((e.tick, 2, i as u64), Ev::Script(i));
            }
        }
        let mut mpus = BTreeMap::new();
        let mut banks = BTreeMap::new();
        let mut policies = BTreeMap::new();
        for (id, spec) in &topo.nodes {
            let ds = spec.dataset.clone().unwrap_or_else(Dataset::new);
            match id.kind {
                NodeKind::Mpu => {
                    mpus.insert(*id, MpuNode { dataset: ds, ..MpuNode::default() });
                }
                NodeKind::Bank => {
                    banks.insert(
                        *id,
                        BankNode {
                            state: BankState::new(ds),
                            private: spec.private,
                            pending: BTreeMap::new(),
                        },
                    );
                }
                NodeKind::Kms => {
                    policies.insert(*id, Policy::EndorseAll);
                }
                NodeKind::ControlPoint => {}
            }
        }
        Sim {
            topo,
            script,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue,
            now: 0,
            next_seq: 0,
            next_proc: 1,
            next_timer: 0,
            timeout: DEFAULT_TIMEOUT,
            drops,
            open: BTreeMap::new(),
            flows: BTreeMap::new(),
            mpus,
            banks,
            policies,
            out: Outcome {
                transcript: Transcript::default(),
                stats: Stats::default(),
                final_tick: 0,
                runs: Vec::new(),
                proposals: Vec::new(),
                procedures: Vec::new(),
                banks: BTreeMap::new(),
            },
        }
    }

    fn finish(mut self) -> Outcome {
        self.out.banks = self.banks.into_iter().map(|(id, b)| (id, b.state)).collect();
        self.out
    }

    fn run(&mut self, max_ticks: u64) -> Result<(), SimError> {
        while let Some((key, ev)) = self.queue.pop_first() {
            if key.0 > max_ticks {
                return Err(SimError::MaxTicksExceeded(max_ticks));
            }
            self.now = key.0;
            self.out.final_tick = key.0;
            match ev {
                Ev::Deliver(p) => self.deliver(p),
                Ev::Drop(p) => {
                    self.out.stats.dropped_link += 1;
                    self.log(p, Some(DropCause::Link));
                }
                Ev::CmdTimeout { src, procedure, sub } => {
                    if self.open.remove(&(src, procedure, sub)).is_some() {
                        self.send(src, src, PacketKind::Nak, procedure, sub, vec![nak::TIMEOUT]);
                    }
                }
                Ev::Deadline(procedure) => self.decide(procedure),
                Ev::Script(i) => self.script_event(i),
                Ev::Step(node) => self.step(node),
            }
        }
        Ok(())
    }

    fn log(&mut self, packet: Packet, drop: Option<DropCause>) {
        self.out.transcript.entries.push(Entry {
            tick: self.now,
            packet,
            drop,
        });
    }

    fn timer(&mut self, at: u64, ev: Ev) -> Key {
        let key = (at, 1, self.next_timer);
        self.next_timer += 1;
        self.queue.insert(key, ev);
        key
    }

    fn latency(&self, a: NodeId, b: NodeId) -> u64 {
        self.topo.path_latency(a, b).expect("topology is connected")
    }

    fn send(&mut self, src: NodeId, dst: NodeId, kind: PacketKind, procedure: u32, sub: u16, payload: Vec<u8>) {
        debug_assert!(payload.len() <= MAX_PAYLOAD);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.out.stats.sent += 1;
        let packet = Packet {
            seq,
            src,
            dst,
            kind,
            procedure,
            sub,
            payload,
        };
        let mut t = self.now;
        for (a, b, lat) in self.topo.route(src, dst).expect("topology is connected") {
            if self.drops.contains(&(t, a, b)) {
                self.queue.insert((t, 0, u64::from(seq)), Ev::Drop(packet));
                return;
            }
            t += lat;
        }
        self.queue.insert((t, 0, u64::from(seq)), Ev::Deliver(packet));
    }

    /// Sends a CMD and arms its timeout.
    fn command(&mut self, src: NodeId, dst: NodeId, procedure: u32, sub: u16, payload: Vec<u8>) {
        let wait = self.timeout.max(2 * self.latency(src, dst) + 1);
        let key = self.timer(self.now + wait, Ev::CmdTimeout { src, procedure, sub });
        if let Some(old) = self.open.insert((src, procedure, sub), key) {
            self.queue.remove(&old);
        }
        self.send(src, dst, PacketKind::Cmd, procedure, sub, payload);
    }

    fn reply_all(&mut self, from: NodeId, to: NodeId, procedure: u32, sub: u16, results: Vec<Vec<u8>>) {
        for r in results {
            self.send(from, to, PacketKind::Result, procedure, sub, r);
        }
        self.send(from, to, PacketKind::Ack, procedure, sub, Vec::new());
    }

    fn nak(&mut self, from: NodeId, to: NodeId, procedure: u32, sub: u16, reason: u8) {
        self.send(from, to, PacketKind::Nak, procedure, sub, vec![reason]);
    }

    fn deliver(&mut self, p: Packet) {
        let dst = p.dst;
        if p.src != dst && self.banks.get(&dst).is_some_and(|b| b.private) && !matches!(p.src.kind, NodeKind::Mpu | NodeKind::Kms) {
            self.out.stats.dropped_firewall += 1;
            self.log(p, Some(DropCause::Firewall));
            return;
        }
        self.out.stats.delivered += 1;
        self.log(p.clone(), None);
        if p.kind.is_terminal() {
            if let Some(key) = self.open.remove(&(dst, p.procedure, p.sub)) {
                self.queue.remove(&key);
            }
        }
        let owned = self.flows.get(&p.procedure).is_some_and(|f| f.owner == dst);
        if owned && matches!(p.kind, PacketKind::Result | PacketKind::Ack | PacketKind::Nak | PacketKind::Endorse) {
            self.flow_packet(p);
            return;
        }
        match (dst.kind, p.kind) {
            (NodeKind::Bank, PacketKind::Cmd) => self.bank_cmd(p),
            (NodeKind::Bank, PacketKind::Data) => self.bank_data(p),
            (NodeKind::ControlPoint, PacketKind::Cmd) => self.cp_cmd(p),
            (NodeKind::Kms, PacketKind::Propose) => self.kms_propose(p),
            (_, PacketKind::Cmd) => self.nak(dst, p.src, p.procedure, p.sub, nak::BAD_COMMAND),
            _ => {}
        }
    }

    fn cp_cmd(&mut self, p: Packet) {
        let cp = p.dst;
        match CmdPayload::decode(&p.payload) {
            Some(c) if c.op == Op::Resolve as u8 => {
                let subject = String::from_utf8_lossy(&c.args).into_owned();
                match resolve(&self.topo.directory, &subject) {
                    Ok(bank) => {
                        let r = bank.to_wire().to_be_bytes().to_vec();
                        self.reply_all(cp, p.src, p.procedure, p.sub, vec![r]);
                    }
                    Err(_) => self.nak(cp, p.src, p.procedure, p.sub, nak::NO_SUBJECT),
                }
            }
            _ => self.nak(cp, p.src, p.procedure, p.sub, nak::BAD_COMMAND),
        }
    }

    fn bank_cmd(&mut self, p: Packet) {
        let Some(cmd) = CmdPayload::decode(&p.payload).filter(|c| {
            matches!(Op::from_byte(c.op), Some(Op::Echo | Op::Match | Op::Apply))
        }) else {
            self.nak(p.dst, p.src, p.procedure, p.sub, nak::BAD_COMMAND);
            return;
        };
        let key = (p.src, p.procedure, p.sub);
        if cmd.burst == 0 {
            self.bank_complete(p.dst, key, cmd, Vec::new());
        } else {
            let bank = self.banks.get_mut(&p.dst).expect("bank node exists");
            bank.pending.insert(key, (cmd, Vec::new()));
        }
    }

    fn bank_data(&mut self, p: Packet) {
        let key = (p.src, p.procedure, p.sub);
        let bank = self.banks.get_mut(&p.dst).expect("bank node exists");
        let Some((cmd, data)) = bank.pending.get_mut(&key) else {
            return;
        };
        data.push(p.payload);
        if data.len() == usize::from(cmd.burst) {
            let (cmd, data) = bank.pending.remove(&key).expect("just seen");
            self.bank_complete(p.dst, key, cmd, data);
        }
    }

    fn bank_complete(&mut self, id: NodeId, (src, procedure, sub): (NodeId, u32, u16), cmd: CmdPayload, data: Vec<Vec<u8>>) {
        let reply: Result<Vec<Vec<u8>>, u8> = match Op::from_byte(cmd.op) {
            Some(Op::Echo) if data.is_empty() => Ok(vec![Vec::new()]),
            Some(Op::Echo) => Ok(data),
            Some(Op::Match) => match (cmd.args.as_slice(), data.as_slice()) {
                ([k0, k1], [query]) => {
                    let bank = &self.banks[&id].state;
                    bank.query(u16::from_be_bytes([*k0, *k1]), query)
                        .map(|hits| bank::pack(&hits.iter().map(bank::encode_match).collect::<Vec<_>>()))
                }
                _ => Err(nak::BAD_COMMAND),
            },
            Some(Op::Apply) => self.bank_apply(id, &cmd.args, data.concat()),
            _ => Err(nak::BAD_COMMAND),
        };
        match reply {
            Ok(results) => self.reply_all(id, src, procedure, sub, results),
            Err(r) => self.nak(id, src, procedure, sub, r),
        }
    }

    fn bank_apply(&mut self, id: NodeId, args: &[u8], payload: Vec<u8>) -> Result<Vec<Vec<u8>>, u8> {
        let (kind, _, endorsers) = bank::decode_apply(args).ok_or(nak::BAD_COMMAND)?;
        let distinct: BTreeSet<u16> = endorsers.iter().copied().collect();
        let valid = distinct.len() == endorsers.len()
            && distinct
                .iter()
                .all(|w| NodeId::from_wire(*w).is_some_and(|n| n.kind == NodeKind::Kms && self.topo.nodes.contains_key(&n)));
        if !valid || distinct.is_empty() || distinct.len() < self.topo.quorum {
            return Err(nak::REJECTED);
        }
        let bank = &mut self.banks.get_mut(&id).expect("bank node exists").state;
        bank.apply(kind, &payload).map_err(|_| nak::BAD_COMMAND)?;
        let mut r = bank.version.to_be_bytes().to_vec();
        r.extend_from_slice(&bank.hash().to_be_bytes());
        Ok(vec![r])
    }

    fn kms_propose(&mut self, p: Packet) {
        let kms = p.dst;
        let Some(kind) = p.payload.get(4).and_then(|b| mpu_core::exec::proposal::ProposalKind::from_byte(*b)) else {
            self.nak(kms, p.src, p.procedure, p.sub, nak::BAD_COMMAND);
            return;
        };
        let endorse = match self.policies.get(&kms).cloned().unwrap_or(Policy::EndorseAll) {
            Policy::EndorseAll => true,
            Policy::RejectAll => false,
            Policy::EndorseKind(k) => k == kind,
            Policy::Random(prob) => self.rng.gen_bool(prob),
        };
        if endorse {
            self.send(kms, p.src, PacketKind::Endorse, p.procedure, p.sub, p.payload[..4].to_vec());
        } else {
            self.nak(kms, p.src, p.procedure, p.sub, nak::REJECTED);
        }
    }

    fn script_event(&mut self, i: usize) {
        match self.script.events[i].action.clone() {
            Action::Run { mpu, program, learn } => {
                let node = self.mpus.get_mut(&mpu).expect("script names a topology MPU");
                node.queue.push_back((program, learn));
                if node.current.is_none() {
                    self.start_next(mpu, self.now);
                }
            }
            Action::Dispatch { mpu, subject, command } => {
                let (op, cmd) = match command {
                    Command::Echo(burst) => (Op::Echo, GetCmd::Echo(burst)),
                    Command::Match { k, codes } => {
                        let schema = self.mpus[&mpu].dataset.bank.as_ref().map_or(0, |b| b.schema().id());
                        (
                            Op::Match,
                            GetCmd::Match {
                                k,
                                query: bank::encode_query(schema, &codes),
                            },
                        )
                    }
                };
                self.start_get(mpu, vec![subject], op, cmd, None);
            }
            Action::Propose { mpu, subject, kind, payload } => {
                let id = self.out.proposals.len() as u32 + 1;
                let proposal = KbProposal::new(id, kind, Some(subject), payload);
                self.start_propose(mpu, proposal, None);
            }
            Action::Policy { kms, policy } => {
                self.policies.insert(kms, policy);
            }
            Action::Drop { .. } => {}
            Action::Inject {
                src,
                dst,
                kind,
                procedure,
                sub,
                payload,
            } => {
                if kind == PacketKind::Cmd {
                    self.command(src, dst, procedure, sub, payload);
                } else {
                    self.send(src, dst, kind, procedure, sub, payload);
                }
            }
            Action::Timeout(t) => self.timeout = t,
        }
    }

    fn start_next(&mut self, mpu: NodeId, at: u64) {
        let node = self.mpus.get_mut(&mpu).expect("MPU node exists");
        let Some((program, learn)) = node.queue.pop_front() else {
            node.current = None;
            return;
        };
        let state = MpuState::new(program, node.dataset.clone(), learn);
        node.current = Some(self.out.runs.len());
        self.out.runs.push(Run {
            node: mpu,
            state,
            learn,
            started: at,
            finished: None,
        });
        self.queue.insert((at, 3, u64::from(mpu.to_wire())), Ev::Step(mpu));
    }

    fn step(&mut self, mpu: NodeId) {
        let Some(r) = self.mpus[&mpu].current else {
            return;
        };
        let state = &mut self.out.runs[r].state;
        match state.step() {
            Step::Traced if !state.halted => {
                self.queue.insert((self.now + 1, 3, u64::from(mpu.to_wire())), Ev::Step(mpu));
            }
            Step::Traced | Step::Halted => self.finish_run(mpu, r),
            Step::NeedsNet(req) => {
                let query = bank::encode_query(req.vector.schema_id(), req.vector.codes());
                let cmd = GetCmd::Match { k: req.k, query };
                self.start_get(mpu, req.subjects, Op::Match, cmd, Some(r));
            }
        }
    }

    fn finish_run(&mut self, mpu: NodeId, r: usize) {
        self.out.runs[r].finished = Some(self.now);
        let pending: Vec<(usize, KbProposal)> = self.out.runs[r]
            .state
            .proposals
            .iter()
            .enumerate()
            .filter(|(_, p)| p.target.is_some() && p.status() == ProposalStatus::Pending)
            .map(|(i, p)| (i, p.clone()))
            .collect();
        for (i, p) in pending {
            self.start_propose(mpu, p, Some((r, i)));
        }
        self.start_next(mpu, self.now + 1);
    }

    fn new_proc(&mut self) -> u32 {
        let p = self.next_proc;
        self.next_proc += 1;
        p
    }

    /// Opens a resolution procedure for `subjects` on behalf of `parent`.
    fn start_resolve(&mut self, owner: NodeId, parent: u32, subjects: &[String]) {
        let procedure = self.new_proc();
        self.flows.insert(
            procedure,
            Flow {
                owner,
                kind: FlowKind::Resolve {
                    parent,
                    count: subjects.len() as u16,
                },
                subs: BTreeMap::new(),
            },
        );
        let cp = self.topo.control_point();
        for (i, s) in subjects.iter().enumerate() {
            let cmd = CmdPayload::new(Op::Resolve, 0, s.as_bytes().to_vec());
            self.command(owner, cp, procedure, i as u16, cmd.encode());
        }
    }

    fn start_get(&mut self, owner: NodeId, subjects: Vec<String>, op: Op, cmd: GetCmd, run: Option<usize>) {
        let procedure = self.new_proc();
        let record = self.out.procedures.len();
        let count = subjects.len() as u16;
        self.out.procedures.push(ProcedureRecord {
            procedure,
            owner,
            subjects: subjects.clone(),
            op: op as u8,
            run,
            reply: None,
        });
        self.flows.insert(
            procedure,
            Flow {
                owner,
                kind: FlowKind::Get { record, cmd, count },
                subs: BTreeMap::new(),
            },
        );
        self.start_resolve(owner, procedure, &subjects);
    }

    fn start_propose(&mut self, owner: NodeId, proposal: KbProposal, origin: Option<(usize, usize)>) {
        let procedure = self.new_proc();
        let record = self.out.proposals.len();
        let subject = proposal.target.clone().expect("submitted proposals have a target");
        self.out.proposals.push(ProposalRecord {
            node: owner,
            proposal,
            bank: None,
            procedure,
            applied: false,
            origin,
        });
        self.flows.insert(
            procedure,
            Flow {
                owner,
                kind: FlowKind::Propose {
                    record,
                    kms: self.topo.nodes_of(NodeKind::Kms),
                    replies: 0,
                    deadline: None,
                    decided: false,
                },
                subs: BTreeMap::new(),
            },
        );
        self.start_resolve(owner, procedure, &[subject]);
    }

    fn flow_packet(&mut self, p: Packet) {
        let procedure = p.procedure;
        let flow = self.flows.get_mut(&procedure).expect("caller checked");
        let sub = flow.subs.entry(p.sub).or_default();
        if sub.done.is_some() {
            return;
        }
        match p.kind {
            PacketKind::Result => sub.results.push(p.payload),
            PacketKind::Ack => sub.done = Some(Ok(())),
            PacketKind::Nak => sub.done = Some(Err(p.payload.first().copied().unwrap_or(0))),
            PacketKind::Endorse => sub.done = Some(Ok(())),
            _ => {}
        }
        let became_done = sub.done.is_some();
        match &mut flow.kind {
            FlowKind::Resolve { count, .. } => {
                let count = *count;
                if flow.all_done(count) {
                    self.resolved(procedure);
                }
            }
            FlowKind::Get { count, .. } => {
                let count = *count;
                if flow.all_done(count) {
                    self.get_done(procedure);
                }
            }
            FlowKind::Propose {
                record,
                kms,
                replies,
                decided,
                ..
            } => {
                let n = kms.len();
                let record = *record;
                if usize::from(p.sub) < n {
                    if !*decided && became_done {
                        *replies += 1;
                        if p.kind == PacketKind::Endorse {
                            let _ = self.out.proposals[record].proposal.endorse(p.src.to_wire());
                        }
                        if *replies == n {
                            self.decide(procedure);
                        }
                    }
                } else if became_done {
                    let sub = &flow.subs[&p.sub];
                    self.out.proposals[record].applied = matches!(sub.done, Some(Ok(())));
                    self.flows.remove(&procedure);
                    self.close_proposal(record);
                }
            }
        }
    }

    fn resolved(&mut self, procedure: u32) {
        let flow = self.flows.remove(&procedure).expect("resolution flow exists");
        let FlowKind::Resolve { parent, count } = flow.kind else {
            unreachable!("resolved() is only called for resolution flows")
        };
        let owner = flow.owner;
        let targets: Vec<Result<NodeId, u8>> = (0..count)
            .map(|i| {
                let s = &flow.subs[&i];
                match s.done {
                    Some(Ok(())) => s
                        .results
                        .first()
                        .filter(|r| r.len() == 2)
                        .and_then(|r| NodeId::from_wire(u16::from_be_bytes([r[0], r[1]])))
                        .ok_or(nak::BAD_COMMAND),
                    Some(Err(r)) => Err(r),
                    None => unreachable!("all sub-procedures are done"),
                }
            })
            .collect();
        let kind = self.flows.get(&parent).expect("parent flow exists").kind.clone();
        match kind {
            FlowKind::Get { cmd, .. } => {
                for (i, t) in targets.into_iter().enumerate() {
                    let i = i as u16;
                    match t {
                        Ok(bank) => {
                            let (op, args, burst) = match &cmd {
                                GetCmd::Echo(burst) => (Op::Echo, Vec::new(), burst.clone()),
                                GetCmd::Match { k, query } => (Op::Match, k.to_be_bytes().to_vec(), vec![query.clone()]),
                            };
                            let head = CmdPayload::new(op, burst.len() as u16, args);
                            self.command(owner, bank, parent, i, head.encode());
                            for d in burst {
                                self.send(owner, bank, PacketKind::Data, parent, i, d);
                            }
                        }
                        Err(r) => self.nak(owner, owner, parent, i, r),
                    }
                }
            }
            FlowKind::Propose { record, kms, .. } => match targets[0] {
                Ok(bank) => {
                    self.out.proposals[record].bank = Some(bank);
                    let p = &self.out.proposals[record].proposal;
                    let mut body = p.id.to_be_bytes().to_vec();
                    body.push(p.kind as u8);
                    body.extend_from_slice(&(p.payload().len() as u32).to_be_bytes());
                    body.extend_from_slice(&fnv1a(p.payload()).to_be_bytes());
                    let mut wait = self.timeout;
                    for (i, k) in kms.iter().enumerate() {
                        wait = wait.max(2 * self.latency(owner, *k) + 1);
                        self.send(owner, *k, PacketKind::Propose, parent, i as u16, body.clone());
                    }
                    if kms.is_empty() {
                        self.decide(parent);
                    } else {
                        let key = self.timer(self.now + wait, Ev::Deadline(parent));
                        if let Some(FlowKind::Propose { deadline, .. }) = self.flows.get_mut(&parent).map(|f| &mut f.kind) {
                            *deadline = Some(key);
                        }
                    }
                }
                Err(_) => {
                    let _ = self.out.proposals[record].proposal.reject();
                    self.flows.remove(&parent);
                    self.close_proposal(record);
                }
            },
            FlowKind::Resolve { .. } => unreachable!("resolutions have no resolution parent"),
        }
    }

    fn get_done(&mut self, procedure: u32) {
        let flow = self.flows.remove(&procedure).expect("query flow exists");
        let FlowKind::Get { record, count, cmd } = flow.kind else {
            unreachable!("get_done() is only called for query flows")
        };
        let k = match cmd {
            GetCmd::Match { k, .. } => Some(k),
            GetCmd::Echo(_) => None,
        };
        let groups: Vec<SubResult> = (0..count)
            .map(|i| {
                let s = &flow.subs[&i];
                SubResult {
                    sub: i,
                    outcome: match s.done {
                        Some(Err(r)) => Err(r),
                        _ => Ok(s.results.concat()),
                    },
                }
            })
            .collect();
        let Some(k) = k else {
            return;
        };
        let reply = merge_matches(&groups, k);
        let rec = &mut self.out.procedures[record];
        rec.reply = Some(reply.clone());
        if let Some(r) = rec.run {
            let node = self.out.runs[r].node;
            self.out.runs[r].state.deliver(reply);
            self.queue.insert((self.now + 1, 3, u64::from(node.to_wire())), Ev::Step(node));
        }
    }

    fn decide(&mut self, procedure: u32) {
        let Some(flow) = self.flows.get_mut(&procedure) else {
            return;
        };
        let FlowKind::Propose {
            record,
            kms,
            deadline,
            decided,
            ..
        } = &mut flow.kind
        else {
            return;
        };
        if *decided {
            return;
        }
        *decided = true;
        let (record, n) = (*record, kms.len());
        if let Some(key) = deadline.take() {
            self.queue.remove(&key);
        }
        let owner = flow.owner;
        let quorum = self.topo.quorum;
        let rec = &mut self.out.proposals[record];
        if n > 0 && rec.proposal.commit(quorum).is_ok() {
            let bank = rec.bank.expect("resolved before consensus");
            let endorsers: Vec<u16> = rec.proposal.endorsements().iter().copied().collect();
            let args = bank::encode_apply(rec.proposal.kind, rec.proposal.id, &endorsers);
            let chunks: Vec<Vec<u8>> = rec.proposal.payload().chunks(MAX_PAYLOAD).map(<[u8]>::to_vec).collect();
            let head = CmdPayload::new(Op::Apply, chunks.len() as u16, args);
            self.command(owner, bank, procedure, n as u16, head.encode());
            for c in chunks {
                self.send(owner, bank, PacketKind::Data, procedure, n as u16, c);
            }
        } else {
            let _ = rec.proposal.reject();
            self.flows.remove(&procedure);
            self.close_proposal(record);
        }
    }

    /// Copies a settled proposal back into the run that raised it.
    fn close_proposal(&mut self, record: usize) {
        let rec = &self.out.proposals[record];
        if let Some((r, i)) = rec.origin {
            self.out.runs[r].state.proposals[i] = rec.proposal.clone();
        }
    }
}

#[cfg(test)]
#[path = "sim_tests.rs"]
mod tests;
