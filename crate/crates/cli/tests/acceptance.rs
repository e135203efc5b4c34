//! End-to-end acceptance suite. Each criterion prints one PASS or FAIL line;
//! the test fails if any criterion does.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpu_core::asm::{assemble, disassemble, parse, Program};
use mpu_core::dataset::Dataset;
use mpu_core::exec::{
    collective_confidence, learn_from_trace, safecheck, LearnError, LearnParams, MpuState, NetReply, Offline,
    ProposalKind, ProposalStatus, Reg, Trace, TraceRecord, Verdict,
};
use mpu_core::fixed::Confidence;
use mpu_core::isa::*;
use mpu_core::object_store::{AttrValue, ObjectId, ObjectSpec};
use mpu_core::symptom::{distance, nearest_k, Schema, SignatureBank, SymptomVector};
use mpu_imn::sim::merge_matches;
use mpu_imn::{accumulate, run_events, NodeId, NodeKind, Outcome, PacketKind, Scenario, Topology};

type Check = Result<String, String>;

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn shipped_programs() -> Vec<(String, String)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(corpus().join("programs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "mpa"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read_to_string(&p).unwrap()))
        .collect()
}

fn clinic() -> Dataset {
    let mut d = Dataset::parse(&std::fs::read_to_string(corpus().join("data/clinic.ds")).unwrap()).unwrap();
    d.load(&std::fs::read_to_string(corpus().join("data/rules.ds")).unwrap()).unwrap();
    d
}

// ---------------------------------------------------------------- 1

fn field(rng: &mut ChaCha8Rng, kind: OperandKind) -> u16 {
    match kind {
        OperandKind::None => 0,
        OperandKind::Reg => rng.gen_range(0..REGISTER_COUNT as u16),
        OperandKind::Imm | OperandKind::Addr => rng.gen_range(0..=FIELD_MAX),
    }
}

fn random_instruction(rng: &mut ChaCha8Rng, info: &OpcodeInfo, mode: Mode) -> Instruction {
    let [ka, kb] = info.operands;
    let a = if mode.memory_form {
        let reg = if ka == OperandKind::Reg { rng.gen_range(0..REGISTER_COUNT as u16) } else { 0 };
        (reg << 2) | rng.gen_range(0..4)
    } else {
        field(rng, ka)
    };
    Instruction::new(info.code, mode, a, field(rng, kb))
}

fn modes_of(info: &OpcodeInfo) -> Vec<Mode> {
    let mut modes: Vec<Mode> = info.modes.iter().map(Mode::new).collect();
    if info.memory_form {
        modes.extend(info.modes.iter().map(Mode::memory));
    }
    modes
}

fn isa_round_trip() -> Check {
    let table = OpcodeTable::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0usize;
    for info in table.iter() {
        for mode in modes_of(info) {
            for _ in 0..10_000 {
                let i = random_instruction(&mut rng, info, mode);
                let word = table.encode(&i).map_err(|e| format!("{i:?}: {e}"))?;
                let back = table.decode(word).map_err(|e| format!("{word:08X}: {e}"))?;
                ensure(back == i, || format!("{i:?} decoded as {back:?}"))?;
                ensure(table.encode(&back) == Ok(word), || format!("{word:08X} re-encodes differently"))?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} instructions over {} opcodes", table.iter().count()))
}

// ---------------------------------------------------------------- 2

fn random_program(rng: &mut ChaCha8Rng) -> Program {
    let table = OpcodeTable::standard();
    let infos: Vec<&OpcodeInfo> = table.iter().collect();
    let n = rng.gen_range(0..24);
    let mut words = Vec::with_capacity(n);
    for _ in 0..n {
        let info = infos[rng.gen_range(0..infos.len())];
        let modes = modes_of(info);
        let mode = modes[rng.gen_range(0..modes.len())];
        let mut i = random_instruction(rng, info, mode);
        // Some words carry bits the assembly text cannot show.
        if rng.gen_bool(0.1) {
            i.operand_a = rng.gen_range(0..=FIELD_MAX);
            i.operand_b = rng.gen_range(0..=FIELD_MAX);
        }
        words.push(table.encode(&i).unwrap());
    }
    Program::from_words(words)
}

fn asm_round_trip_one(p: &Program) -> Result<(), String> {
    let table = OpcodeTable::standard();
    let text = disassemble(p, table).map_err(|e| e.to_string())?;
    let lines = parse(&text).map_err(|e| format!("{e:?}\n{text}"))?;
    let q = assemble(&lines, table).map_err(|e| format!("{e}\n{text}"))?;
    ensure(q.to_mpo() == p.to_mpo(), || format!("bytes differ after round trip:\n{text}"))
}

fn asm_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        asm_round_trip_one(&random_program(&mut rng))?;
    }
    let shipped = shipped_programs();
    for (name, text) in &shipped {
        let lines = parse(text).map_err(|e| format!("{name}: {e:?}"))?;
        let p = assemble(&lines, OpcodeTable::standard()).map_err(|e| format!("{name}: {e}"))?;
        asm_round_trip_one(&p).map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(format!("10000 fuzzed + {} shipped programs", shipped.len()))
}

// ---------------------------------------------------------------- 3

fn random_codes(rng: &mut ChaCha8Rng, widths: &[u8]) -> Vec<u64> {
    widths
        .iter()
        .map(|w| if *w == 64 { rng.gen() } else { rng.gen_range(0..1u64 << w) })
        .collect()
}

fn oracle_distance(x: &[u64], y: &[u64], weights: &[u32]) -> u64 {
    let mut d = 0u64;
    for ((a, b), w) in x.iter().zip(y).zip(weights) {
        let mut diff = a ^ b;
        let mut bits = 0u64;
        while diff != 0 {
            bits += diff & 1;
            diff >>= 1;
        }
        d += u64::from(*w) * bits;
    }
    d
}

fn hamming_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for size in [16usize, 128, 512] {
        let dims = rng.gen_range(1..=6);
        let widths: Vec<u8> = (0..dims).map(|_| rng.gen_range(1..=16)).collect();
        let weights: Vec<u32> = (0..dims).map(|_| rng.gen_range(1..=4)).collect();
        let schema = Schema::with_widths(&widths).unwrap();
        let mut bank = SignatureBank::new(schema.clone());
        bank.set_weights(weights.clone()).unwrap();
        let mut records: Vec<(u32, Vec<u64>)> = Vec::new();
        let mut ids = BTreeSet::new();
        while records.len() < size {
            let id = rng.gen_range(1..100_000u32);
            if ids.insert(id) {
                // Narrow codes so ties are common.
                let codes: Vec<u64> = random_codes(&mut rng, &widths).iter().map(|c| c & 0x0F).collect();
                bank.insert(id, schema.vector(codes.clone()).unwrap(), &format!("r{id}")).unwrap();
                records.push((id, codes));
            }
        }
        for _ in 0..100 {
            let q: Vec<u64> = random_codes(&mut rng, &widths).iter().map(|c| c & 0x0F).collect();
            let k = rng.gen_range(1..=size + 2);
            let mut expect: Vec<(u32, u64)> =
                records.iter().map(|(id, c)| (*id, oracle_distance(&q, c, &weights))).collect();
            expect.sort_by_key(|(id, d)| (*d, *id));
            expect.truncate(k);
            let qv = schema.vector(q.clone()).unwrap();
            let got = nearest_k(&bank, &qv, k).map_err(|e| e.to_string())?;
            ensure(got == expect, || format!("bank {size} query {q:?} k={k}: {got:?} vs {expect:?}"))?;
            ensure(bank.nearest_k(&qv, k).map_err(|e| e.to_string())? == expect, || "method disagrees".into())?;
        }
    }
    for _ in 0..10_000 {
        let dims = rng.gen_range(1..=5);
        let widths: Vec<u8> = (0..dims).map(|_| rng.gen_range(1..=64)).collect();
        let weights: Vec<u32> = (0..dims).map(|_| rng.gen_range(1..=5)).collect();
        let schema = Schema::with_widths(&widths).unwrap();
        let v: Vec<SymptomVector> = (0..3)
            .map(|_| {
                let mut c = random_codes(&mut rng, &widths);
                if rng.gen_bool(0.2) {
                    c = vec![0; dims];
                }
                schema.vector(c).unwrap()
            })
            .collect();
        let d = |a: usize, b: usize| distance(&v[a], &v[b], &weights).unwrap();
        ensure(d(0, 1) == d(1, 0), || "symmetry".into())?;
        ensure(d(0, 0) == 0, || "identity".into())?;
        ensure((d(0, 1) == 0) == (v[0] == v[1]), || "indiscernibles".into())?;
        ensure(d(0, 2) <= d(0, 1) + d(1, 2), || "triangle inequality".into())?;
    }
    Ok("3 banks x 100 queries, 10000 triples".into())
}

// ---------------------------------------------------------------- 4

#[derive(Debug, Clone)]
enum Val {
    Bool(bool),
    Int(i64),
}

#[derive(Debug, Clone)]
struct GenRule {
    id: String,
    hard: bool,
    attr: String,
    op: &'static str,
    value: Option<Val>,
    tag: Option<String>,
    min_cost: i64,
}

#[derive(Debug, Clone)]
struct GenProc {
    id: ObjectId,
    tags: Vec<String>,
    cost: Option<i64>,
}

impl GenRule {
    fn fires(&self, patient: &[(String, Val)], p: &GenProc) -> bool {
        let proc_ok = match &self.tag {
            Some(t) => p.tags.contains(t),
            None => p.cost.is_some_and(|c| c >= self.min_cost),
        };
        proc_ok && patient.iter().any(|(n, v)| n == &self.attr && self.patient_holds(v))
    }

    fn patient_holds(&self, v: &Val) -> bool {
        match (self.op, v, &self.value) {
            ("", Val::Bool(b), _) => *b,
            ("", Val::Int(_), _) => true,
            ("=", Val::Bool(a), Some(Val::Bool(b))) => a == b,
            ("!=", Val::Bool(a), Some(Val::Bool(b))) => a != b,
            ("=", Val::Int(a), Some(Val::Int(b))) => a == b,
            ("!=", Val::Int(a), Some(Val::Int(b))) => a != b,
            ("<", Val::Int(a), Some(Val::Int(b))) => a < b,
            ("<=", Val::Int(a), Some(Val::Int(b))) => a <= b,
            (">", Val::Int(a), Some(Val::Int(b))) => a > b,
            (">=", Val::Int(a), Some(Val::Int(b))) => a >= b,
            ("!=", _, _) => true,
            _ => false,
        }
    }

    fn line(&self) -> String {
        let pred = match &self.value {
            None => self.attr.clone(),
            Some(Val::Bool(b)) => format!("{}{}{}", self.attr, self.op, b),
            Some(Val::Int(i)) => format!("{}{}{}", self.attr, self.op, i),
        };
        let cond = match &self.tag {
            Some(t) => t.clone(),
            None => format!("cost>={}", self.min_cost),
        };
        format!("RULE {} {pred} {cond} {}\n", if self.hard { "hard" } else { "soft" }, self.id)
    }
}

struct SafetyCase {
    patient: Vec<(String, Val)>,
    procs: Vec<GenProc>,
    rules: Vec<GenRule>,
}

impl SafetyCase {
    fn generate(rng: &mut ChaCha8Rng) -> SafetyCase {
        let mut patient = Vec::new();
        for f in 0..3 {
            if rng.gen_bool(0.7) {
                patient.push((format!("flag{f}"), Val::Bool(rng.gen())));
            }
        }
        if rng.gen_bool(0.8) {
            patient.push(("age".to_string(), Val::Int(rng.gen_range(0..100))));
        }
        let n = rng.gen_range(1..=6);
        let procs = (0..n)
            .map(|i| GenProc {
                id: 10 + i,
                tags: (0..4).filter(|_| rng.gen_bool(0.4)).map(|t| format!("t{t}")).collect(),
                cost: rng.gen_bool(0.5).then(|| rng.gen_range(0..10)),
            })
            .collect();
        let rules = (0..rng.gen_range(0..=6))
            .map(|i| {
                let flag = rng.gen_bool(0.6);
                let (attr, op, value) = if flag {
                    let ops = ["", "=", "!="];
                    let op = ops[rng.gen_range(0..ops.len())];
                    let value = (!op.is_empty()).then(|| Val::Bool(rng.gen()));
                    (format!("flag{}", rng.gen_range(0..4)), op, value)
                } else {
                    let ops = ["", "=", "!=", "<", "<=", ">", ">="];
                    let op = ops[rng.gen_range(0..ops.len())];
                    let value = (!op.is_empty()).then(|| Val::Int(rng.gen_range(0..100)));
                    ("age".to_string(), op, value)
                };
                let tag = rng.gen_bool(0.8).then(|| format!("t{}", rng.gen_range(0..4)));
                GenRule {
                    id: format!("R{i}"),
                    hard: rng.gen(),
                    attr,
                    op,
                    value,
                    tag,
                    min_cost: rng.gen_range(0..10),
                }
            })
            .collect();
        SafetyCase { patient, procs, rules }
    }

    fn dataset_text(&self) -> String {
        let mut t = String::from("OBJ\t1\tpatient");
        for (n, v) in &self.patient {
            match v {
                Val::Bool(b) => t.push_str(&format!("\t{n}={b}")),
                Val::Int(i) => t.push_str(&format!("\t{n}={i}")),
            }
        }
        t.push('\n');
        for p in &self.procs {
            t.push_str(&format!("OBJ\t{}\tprocedure\tname=\"p{}\"", p.id, p.id));
            if !p.tags.is_empty() {
                t.push_str(&format!("\ttags=\"{}\"", p.tags.join("|")));
            }
            if let Some(c) = p.cost {
                t.push_str(&format!("\tcost={c}"));
            }
            t.push('\n');
        }
        for r in &self.rules {
            t.push_str(&r.line());
        }
        t
    }

    fn expected(&self, p: &GenProc) -> Verdict {
        let fired: Vec<&GenRule> = self.rules.iter().filter(|r| r.fires(&self.patient, p)).collect();
        let ids: Vec<String> = fired.iter().map(|r| r.id.clone()).collect();
        if fired.is_empty() {
            Verdict::Allow
        } else if fired.iter().any(|r| r.hard) {
            Verdict::Block(ids)
        } else {
            Verdict::Warn(ids)
        }
    }
}

fn safety_matrix() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut fired = 0usize;
    for case in 0..1000 {
        let c = SafetyCase::generate(&mut rng);
        let text = c.dataset_text();
        let d = Dataset::parse(&text).map_err(|e| format!("{e}\n{text}"))?;
        let ids: Vec<ObjectId> = c.procs.iter().map(|p| p.id).collect();
        let r = safecheck(&d.store, 1, &ids, &d.rules).map_err(|e| e.to_string())?;
        ensure(r.n() == c.procs.len() && r.m() == c.patient.len(), || format!("case {case}: dimensions"))?;
        ensure(r.matrix.len() == r.n() && r.matrix.iter().all(|row| row.len() == r.m()), || {
            format!("case {case}: matrix shape")
        })?;
        let names: Vec<String> = c.patient.iter().map(|(n, _)| n.clone()).collect();
        ensure(r.attributes == names, || format!("case {case}: columns {:?}", r.attributes))?;
        for (i, p) in c.procs.iter().enumerate() {
            let want = c.expected(p);
            ensure(r.verdicts[i] == want, || format!("case {case} proc {}: {:?} vs {want:?}\n{text}", p.id, r.verdicts[i]))?;
            for (j, name) in names.iter().enumerate() {
                let cell: Vec<String> = c
                    .rules
                    .iter()
                    .filter(|rule| &rule.attr == name && rule.fires(&c.patient, p))
                    .map(|rule| rule.id.clone())
                    .collect();
                ensure(r.matrix[i][j] == cell, || format!("case {case} cell ({i},{j})"))?;
            }
            fired += usize::from(want != Verdict::Allow);
        }
    }
    let program = mpu_cli::assemble_text("LOADO r1, 1\nOMFETCH r2, 10\nRXPLAN r1, r2\nHALT\n").unwrap();
    let mut blocked_total = 0usize;
    for case in 0..1000 {
        let c = SafetyCase::generate(&mut rng);
        let d = Dataset::parse(&c.dataset_text()).unwrap();
        let mut s = MpuState::new(program.clone(), d, false);
        s.run(100, &mut Offline).map_err(|e| e.to_string())?;
        ensure(s.fault.is_none() && s.schedules.len() == 1, || format!("run {case}: {:?}", s.fault))?;
        let plan = &s.schedules[0];
        for p in &c.procs {
            let blocked = c.expected(p).is_block();
            blocked_total += usize::from(blocked);
            ensure(!(blocked && plan.scheduled.contains(&p.id)), || format!("run {case}: {} scheduled", p.id))?;
            ensure(blocked == plan.blocked.contains(&p.id), || format!("run {case}: {} partition", p.id))?;
        }
    }
    Ok(format!("1000 triples ({fired} non-ALLOW rows), 1000 runs ({blocked_total} blocked)"))
}

// ---------------------------------------------------------------- 5

const MULTI_OBJECT: [u8; 11] = [GETATTR, SETATTR, KFILTER, MERGE, COMMON, OVERLAP, MATCH, DIAG, LINKP, LINKS, GRAFT];

fn fold_dataset(ids: &[ObjectId]) -> Dataset {
    let mut d = Dataset::parse("SCHEMA 2 d0:4 d1:4\nSIG 1 a 0x3 0x1\nSIG 2 b 0xC 0x8\n").unwrap();
    for id in ids {
        let v = i64::from(*id);
        let _ = d.store.put_object(
            ObjectSpec::new(*id, "patient")
                .with("d0", AttrValue::Integer(v % 16))
                .with(&format!("k{}", id % 5), AttrValue::Integer(v % 3))
                .with("d1", AttrValue::Integer((v / 3) % 16)),
        );
    }
    d
}

fn spmo_vs_folded(opcode: u8, ids: &[ObjectId], imm: u16) -> Result<(), String> {
    let table = OpcodeTable::standard();
    let info = table.get(opcode).unwrap();
    let binary = info.operands[1] == OperandKind::Reg;
    let b = if binary { 2 } else { imm };
    let multi_word = table.encode(&Instruction::new(opcode, Mode::new(ExecMode::Spmo), 1, b)).unwrap();
    let single_word = table.encode(&Instruction::new(opcode, Mode::SPSO, 1, b)).unwrap();
    let base = MpuState::new(Program::from_words(vec![multi_word, 0]), fold_dataset(ids), false);
    let set_reg = if binary { 2 } else { 1 };

    let mut m = base.clone();
    m.registers[1] = Reg::Object(ids[0]);
    m.registers[set_reg] = Reg::set(ids.to_vec());
    m.run(4, &mut Offline).map_err(|e| e.to_string())?;

    let mut f = base;
    f.program = Program::from_words(vec![single_word, 0]);
    f.registers[1] = Reg::Object(ids[0]);
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut work = Vec::new();
    let mut kept = Vec::new();
    for id in &sorted {
        f.pc = 0;
        f.halted = false;
        f.tick = 0;
        f.registers[set_reg] = Reg::Object(*id);
        f.step();
        ensure(f.fault.is_none(), || format!("folded fault {:?}", f.fault))?;
        let w = f.trace.last().unwrap().work.clone();
        if opcode == KFILTER && w[0].value == AttrValue::Bool(true) {
            kept.push(*id);
        }
        work.extend(w);
    }
    let tag = || format!("opcode {opcode:02X} over {ids:?}");
    ensure(m.fault.is_none(), || format!("{}: fault {:?}", tag(), m.fault))?;
    ensure(m.trace.records()[0].work == work, || format!("{}: work lists differ", tag()))?;
    ensure(m.store.iter().collect::<Vec<_>>() == f.store.iter().collect::<Vec<_>>(), || format!("{}: store", tag()))?;
    ensure(m.latch == f.latch && m.tree == f.tree, || format!("{}: latch or tree", tag()))?;
    ensure(m.diagnoses.len() == f.diagnoses.len(), || format!("{}: diagnoses", tag()))?;
    if opcode == KFILTER {
        ensure(m.registers[1] == Reg::Set(kept), || format!("{}: kept set", tag()))?;
    }
    Ok(())
}

fn vm_determinism() -> Check {
    let shipped = shipped_programs();
    for (name, text) in &shipped {
        let p = mpu_cli::assemble_text(text).map_err(|e| format!("{name}: {e:?}"))?;
        let hashes: Vec<u64> = (0..2)
            .map(|_| {
                let mut s = MpuState::new(p.clone(), clinic(), name.contains("macro"));
                let _ = s.run(10_000, &mut Offline);
                s.trace.hash()
            })
            .collect();
        ensure(hashes[0] == hashes[1], || format!("{name}: {:016x} vs {:016x}", hashes[0], hashes[1]))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.gen_range(1..6);
        let ids: Vec<ObjectId> = (0..n).map(|_| rng.gen_range(0..40)).collect();
        let op = MULTI_OBJECT[rng.gen_range(0..MULTI_OBJECT.len())];
        let imm = match op {
            MATCH => rng.gen_range(1..4),
            GRAFT => 0,
            _ => rng.gen_range(0..3),
        };
        spmo_vs_folded(op, &ids, imm)?;
    }
    Ok(format!("{} programs x 2 runs, 1000 folded sets", shipped.len()))
}

// ---------------------------------------------------------------- 6

fn confidence_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    ensure(collective_confidence(&[]) == Confidence::ONE, || "empty chain".into())?;
    let mut zeros = 0;
    for _ in 0..10_000 {
        let len = rng.gen_range(0..16);
        let chain: Vec<Confidence> = (0..len)
            .map(|_| {
                let u = match rng.gen_range(0..10) {
                    0 => 0,
                    1 => 10_000,
                    _ => rng.gen_range(0..=10_000),
                };
                Confidence::from_units(u).unwrap()
            })
            .collect();
        let c = collective_confidence(&chain);
        ensure(c >= Confidence::ZERO && c <= Confidence::ONE, || format!("{chain:?} out of range"))?;
        if let Some(min) = chain.iter().min() {
            ensure(c <= *min, || format!("{chain:?} -> {c} above min"))?;
        } else {
            ensure(c == Confidence::ONE, || "empty chain".into())?;
        }
        if chain.contains(&Confidence::ZERO) {
            zeros += 1;
            ensure(c == Confidence::ZERO, || format!("{chain:?} -> {c} with a zero"))?;
        }
    }
    Ok(format!("10000 chains ({zeros} with a zero)"))
}

// ---------------------------------------------------------------- 7

fn network_invariants(o: &Outcome) -> Result<(), String> {
    let s = o.stats;
    ensure(s.sent == s.delivered + s.dropped(), || format!("{s:?}"))?;
    ensure(s.sent as usize == o.transcript.entries.len(), || "transcript length".into())?;
    let logged_drops = o.transcript.entries.iter().filter(|e| e.drop.is_some()).count();
    ensure(logged_drops as u64 == s.dropped(), || "drops not all logged".into())?;
    let mut cmds: BTreeMap<(NodeId, u32, u16), usize> = BTreeMap::new();
    for e in &o.transcript.entries {
        if e.packet.kind == PacketKind::Cmd {
            *cmds.entry((e.packet.src, e.packet.procedure, e.packet.sub)).or_default() += 1;
        }
    }
    for ((src, procedure, sub), n) in cmds {
        let terminals = o
            .transcript
            .delivered()
            .filter(|p| p.dst == src && p.procedure == procedure && p.sub == sub && p.kind.is_terminal())
            .count();
        ensure(terminals == n, || format!("CMD {src} {procedure}/{sub}: {terminals} terminals for {n}"))?;
    }
    Ok(())
}

const FUZZ_BANK: &str = "SCHEMA 2 d0:4 d1:4\nSIG 1 a 0x1 0x2\nSIG 2 b 0x3 0x0\nSIG 3 c 0xF 0x7\n";
const FUZZ_WARD: &str = "SCHEMA 2 d0:4 d1:4\nOBJ\t5\tisolate\td0=1\td1=2\nOBJ\t41\tsubject\tcode=\"5|6.1\"\tk=2\n\
                         OBJ\t42\tsubject\tcode=\"6.1\"\n";

fn fuzz_topology(rng: &mut ChaCha8Rng) -> Topology {
    let mut l = || rng.gen_range(1..5);
    let text = format!(
        "NODE MPU 0 ward\nNODE MPU 1 ward\nNODE CP 0\nNODE BANK 0 bank\nNODE BANK 1 bank private\nNODE KMS 0\nNODE KMS 1\nNODE KMS 2\n\
         LINK MPU0 CP0 {}\nLINK MPU1 CP0 {}\nLINK CP0 BANK0 {}\nLINK BANK0 BANK1 {}\nLINK KMS0 CP0 {}\nLINK KMS1 MPU1 {}\nLINK KMS2 CP0 {}\n\
         DIR 5 BANK0\nDIR 6 BANK1\n",
        l(), l(), l(), l(), l(), l(), l()
    );
    Topology::parse(&text, &mut |name| Ok(if name == "ward" { FUZZ_WARD } else { FUZZ_BANK }.to_string())).unwrap()
}

fn fuzz_program(name: &str) -> Result<Program, String> {
    let text = match name {
        "netget" => "LOADO r1, 5\nNETGET r1, @41\nDIAG r1\nHALT\n",
        "netput" => "LOADO r1, 5\nNETPUT r1, @42\nHALT\n",
        "both" => "LOADO r1, 5\nNETGET r1, @42\nNETPUT r1, @41\nDIAG r1\nHALT\n",
        other => return Err(format!("no program {other}")),
    };
    mpu_cli::assemble_text(text).map_err(|e| e.join("; "))
}

fn fuzz_action(rng: &mut ChaCha8Rng, index: usize) -> String {
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.gen_range(0..xs.len())];
    let mpus = ["MPU0", "MPU1"];
    let subjects = ["5", "6.1", "7"];
    let nodes = ["MPU0", "MPU1", "CP0", "BANK0", "BANK1", "KMS0", "KMS1"];
    match rng.gen_range(0..9) {
        0 => format!("dispatch {} {} echo {}", pick(rng, &mpus), pick(rng, &subjects), "ab ".repeat(rng.gen_range(0..4))),
        1 => format!("dispatch {} {} match {} 1 2", pick(rng, &mpus), pick(rng, &subjects), rng.gen_range(0..4)),
        2 => format!("propose {} {} NEW_MACRO_OPCODE 01{:02x}", pick(rng, &mpus), pick(rng, &subjects), rng.gen::<u8>()),
        3 => format!("drop {} {}", pick(rng, &nodes), pick(rng, &nodes)),
        4 => format!("inject {} {} CMD {} 0 00000000", pick(rng, &nodes), pick(rng, &nodes), 50_000 + index),
        5 => format!("run {} {}", pick(rng, &mpus), pick(rng, &["netget", "netput", "both"])),
        6 => format!("policy KMS{} {}", rng.gen_range(0..3), pick(rng, &["reject_all", "endorse_all", "endorse_kind NEW_RELATION"])),
        7 => format!("config timeout {}", rng.gen_range(1..40)),
        _ => format!("dispatch {} 5 match 3 {} {}", pick(rng, &mpus), rng.gen_range(0..16), rng.gen_range(0..16)),
    }
}

fn network_conservation() -> Check {
    let net = corpus().join("net");
    let shipped = [
        ("regional.topo", "regional.scn"),
        ("two_bank.topo", "two_bank.scn"),
        ("two_bank.topo", "unknown_subject.scn"),
        ("two_bank.topo", "empty.scn"),
    ];
    for (topo, scn) in shipped {
        let t = mpu_cli::load_topology(&net.join(topo)).map_err(|e| format!("{topo}: {e:?}"))?;
        let s = mpu_cli::load_scenario(&net.join(scn)).map_err(|e| format!("{scn}: {e:?}"))?;
        let a = run_events(&t, &s, 0, 100_000).map_err(|e| format!("{scn}: {e}"))?;
        network_invariants(&a).map_err(|e| format!("{scn}: {e}"))?;
        let b = run_events(&t, &s, 0, 100_000).map_err(|e| e.to_string())?;
        ensure(a.transcript.hash() == b.transcript.hash(), || format!("{scn}: NETHASH differs"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut packets = 0u64;
    for case in 0..500 {
        let topo = fuzz_topology(&mut rng);
        let n = rng.gen_range(0..14);
        let text: String = (0..n)
            .map(|i| format!("EVENT {} {}\n", rng.gen_range(0..20), fuzz_action(&mut rng, i)))
            .collect();
        let script = Scenario::parse(&text, &mut fuzz_program).map_err(|e| format!("case {case}: {e}\n{text}"))?;
        let seed: u64 = rng.gen();
        let a = run_events(&topo, &script, seed, 100_000).map_err(|e| format!("case {case}: {e}\n{text}"))?;
        network_invariants(&a).map_err(|e| format!("case {case}: {e}\n{text}"))?;
        let b = run_events(&topo, &script, seed, 100_000).map_err(|e| e.to_string())?;
        ensure(a.transcript.render() == b.transcript.render(), || format!("case {case}: NETHASH differs\n{text}"))?;
        packets += a.stats.sent;
    }
    Ok(format!("{} shipped + 500 fuzzed scenarios, {packets} fuzzed packets", shipped.len()))
}

// ---------------------------------------------------------------- 8

fn consensus_gate() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bank = "SCHEMA 2 d0:4 d1:4\nSIG 1 a 0x1 0x2\nOBJ\t1\tstrain\tname=\"x\"\nOBJ\t2\tstrain\tname=\"y\"\n";
    let (mut committed, mut rejected) = (0, 0);
    for case in 0..200 {
        let k = rng.gen_range(1..=3);
        let text = format!(
            "NODE MPU 0\nNODE CP 0\nNODE BANK 0 bank\nNODE KMS 0\nNODE KMS 1\nNODE KMS 2\n\
             LINK MPU0 CP0 {}\nLINK CP0 BANK0 {}\nLINK KMS0 CP0 {}\nLINK KMS1 MPU0 {}\nLINK KMS2 CP0 {}\nDIR 5 BANK0\nQUORUM {k}\n",
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4)
        );
        let topo = Topology::parse(&text, &mut |_| Ok(bank.to_string())).unwrap();
        let mut script = String::new();
        for kms in 0..3 {
            let policy = match rng.gen_range(0..5) {
                0 => "endorse_all".to_string(),
                1 => "reject_all".to_string(),
                2 => "endorse_kind NEW_RELATION".to_string(),
                3 => "endorse_kind NEW_MACRO_OPCODE".to_string(),
                _ => format!("random 0.{}", rng.gen_range(1..10)),
            };
            script.push_str(&format!("EVENT 0 policy KMS{kms} {policy}\n"));
        }
        let proposal = match rng.gen_range(0..3) {
            0 => format!("NEW_MACRO_OPCODE {:02x}{:02x}", rng.gen::<u8>(), rng.gen::<u8>()),
            1 => "NEW_RELATION 00010002".to_string(),
            _ => {
                let sig: String = "SIG 9 fresh 0x5 0x6\n".bytes().map(|b| format!("{b:02x}")).collect();
                format!("OBJECT_UPDATE {sig}")
            }
        };
        script.push_str(&format!("EVENT 1 propose MPU0 5 {proposal}\n"));
        let scn = Scenario::parse(&script, &mut fuzz_program).unwrap();
        let o = run_events(&topo, &scn, rng.gen(), 100_000).map_err(|e| e.to_string())?;
        let before = mpu_imn::bank::BankState::new(Dataset::parse(bank).unwrap()).hash();
        let after = o.banks[&NodeId::new(NodeKind::Bank, 0)].hash();
        let rec = &o.proposals[0];
        let endorsements = o
            .transcript
            .delivered()
            .filter(|p| p.kind == PacketKind::Endorse && p.procedure == rec.procedure)
            .map(|p| p.src)
            .collect::<BTreeSet<_>>()
            .len();
        let changed = before != after;
        ensure(changed == (endorsements >= k), || {
            format!("case {case}: {endorsements} endorsements, K={k}, changed={changed}\n{script}")
        })?;
        match rec.proposal.status() {
            ProposalStatus::Committed => committed += 1,
            ProposalStatus::Rejected => {
                rejected += 1;
                ensure(!changed, || format!("case {case}: rejected proposal changed the bank"))?;
            }
            s => return Err(format!("case {case}: proposal left {s:?}")),
        }
    }
    Ok(format!("200 scenarios ({committed} committed, {rejected} rejected)"))
}

// ---------------------------------------------------------------- 9

fn learning_oracle(trace: &Trace, p: LearnParams) -> Vec<(ProposalKind, Vec<u8>)> {
    let mut pairs: Vec<((ObjectId, ObjectId), usize)> = Vec::new();
    for r in trace.records() {
        let mut ids = r.operands.clone();
        ids.sort_unstable();
        ids.dedup();
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                match pairs.iter_mut().find(|(k, _)| *k == (ids[i], ids[j])) {
                    Some((_, n)) => *n += 1,
                    None => pairs.push(((ids[i], ids[j]), 1)),
                }
            }
        }
    }
    let mut out: Vec<(ProposalKind, Vec<u8>)> = pairs
        .into_iter()
        .filter(|(_, n)| *n >= p.min_cooccur)
        .map(|((a, b), _)| (ProposalKind::NewRelation, vec![(a >> 8) as u8, a as u8, (b >> 8) as u8, b as u8]))
        .collect();
    let ops: Vec<u8> = trace.records().iter().map(|r| r.opcode).collect();
    let mut grams: Vec<(Vec<u8>, usize)> = Vec::new();
    if p.ngram_len > 0 && ops.len() >= p.ngram_len {
        for start in 0..=ops.len() - p.ngram_len {
            let g = ops[start..start + p.ngram_len].to_vec();
            match grams.iter_mut().find(|(x, _)| *x == g) {
                Some((_, n)) => *n += 1,
                None => grams.push((g, 1)),
            }
        }
    }
    out.extend(grams.into_iter().filter(|(_, n)| *n >= p.min_ngram_count).map(|(g, _)| (ProposalKind::NewMacroOpcode, g)));
    out.sort_by(|x, y| (x.0 as u8).cmp(&(y.0 as u8)).then_with(|| x.1.cmp(&y.1)));
    out
}

fn fuzz_trace(rng: &mut ChaCha8Rng, learning: bool) -> Trace {
    let ops = [MATCH, DIAG, LOADO, MERGE, CONF];
    let mut t = Trace::new(learning);
    for tick in 0..rng.gen_range(0..60) {
        let n = rng.gen_range(0..4);
        t.push(TraceRecord {
            tick,
            pc: tick as u32,
            word: 0,
            opcode: ops[rng.gen_range(0..ops.len())],
            mnemonic: "?",
            mode: None,
            operands: (0..n).map(|_| rng.gen_range(0..8)).collect(),
            result: 0,
            step_confidence: Confidence::ONE,
            confidence: Confidence::ONE,
            work: Vec::new(),
        });
    }
    t
}

fn compare_learning(trace: &Trace, p: LearnParams, what: &str) -> Result<usize, String> {
    let got = learn_from_trace(trace, p).map_err(|e| format!("{what}: {e}"))?;
    let want = learning_oracle(trace, p);
    ensure(got.len() == want.len(), || format!("{what}: {} proposals vs {}", got.len(), want.len()))?;
    for (i, (g, (kind, payload))) in got.iter().zip(&want).enumerate() {
        ensure(
            g.id == i as u32 + 1
                && g.kind == *kind
                && g.payload() == payload.as_slice()
                && g.status() == ProposalStatus::Pending
                && g.endorsements().is_empty(),
            || format!("{what}: proposal {i}: {g:?} vs {kind:?} {payload:?}"),
        )?;
    }
    Ok(got.len())
}

fn learning_extraction() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut total = 0;
    for case in 0..100 {
        let p = LearnParams {
            min_cooccur: rng.gen_range(1..5),
            ngram_len: rng.gen_range(1..4),
            min_ngram_count: rng.gen_range(1..5),
        };
        total += compare_learning(&fuzz_trace(&mut rng, true), p, &format!("trace {case}"))?;
        let open = fuzz_trace(&mut rng, false);
        ensure(learn_from_trace(&open, p) == Err(LearnError::LearningDisabled), || format!("trace {case}: open switch"))?;
    }
    for (name, text) in shipped_programs() {
        let program = mpu_cli::assemble_text(&text).unwrap();
        let mut closed = MpuState::new(program.clone(), clinic(), true);
        let _ = closed.run(10_000, &mut Offline);
        total += compare_learning(&closed.trace, LearnParams::default(), &name)?;
        let mut open = MpuState::new(program, clinic(), false);
        let _ = open.run(10_000, &mut Offline);
        ensure(open.proposals.is_empty(), || format!("{name}: proposals with the switch open"))?;
        ensure(learn_from_trace(&open.trace, LearnParams::default()) == Err(LearnError::LearningDisabled), || {
            format!("{name}: open switch")
        })?;
    }
    Ok(format!("100 fuzzed + 20 program traces, {total} proposals"))
}

// ---------------------------------------------------------------- 10

fn regional_scenario() -> Check {
    let net = corpus().join("net");
    let topo = mpu_cli::load_topology(&net.join("regional.topo")).map_err(|e| format!("{e:?}"))?;
    let scn = mpu_cli::load_scenario(&net.join("regional.scn")).map_err(|e| format!("{e:?}"))?;
    let o = run_events(&topo, &scn, 0, 100_000).map_err(|e| e.to_string())?;
    let mpu0 = NodeId::new(NodeKind::Mpu, 0);
    let proc = o
        .procedures
        .iter()
        .find(|p| p.owner == mpu0 && p.run.is_some())
        .ok_or("MPU0 issued no NETGET")?;
    let subs = accumulate(&o.transcript, proc.procedure).map_err(|e| e.to_string())?;
    let ward = &topo.nodes[&mpu0].dataset.as_ref().ok_or("MPU0 has no dataset")?;
    let k = match ward.store.object(41).map_err(|e| e.to_string())?.get("k") {
        Some(AttrValue::Integer(k)) => *k as u16,
        other => return Err(format!("subject 41 has k={other:?}")),
    };
    let remote = match merge_matches(&subs, k) {
        NetReply::Matches(m) => m,
        NetReply::Nak(r) => return Err(format!("NETGET NAK {r}")),
    };
    ensure(proc.reply == Some(NetReply::Matches(remote.clone())), || "VM saw a different reply".into())?;

    let bank_of = |i| topo.nodes[&NodeId::new(NodeKind::Bank, i)].dataset.as_ref().unwrap().bank.clone().unwrap();
    let (a, b) = (bank_of(0), bank_of(1));
    let merged = SignatureBank::merged([&a, &b]).map_err(|e| e.to_string())?;
    let isolate = ward.store.object(5).map_err(|e| e.to_string())?;
    let codes: Vec<u64> = merged
        .schema()
        .dims()
        .iter()
        .map(|d| match isolate.get(&d.name) {
            Some(AttrValue::Integer(v)) => *v as u64,
            _ => 0,
        })
        .collect();
    let local = nearest_k(&merged, &merged.schema().vector(codes).unwrap(), usize::from(k)).map_err(|e| e.to_string())?;
    let remote_pairs: Vec<(u32, u64)> = remote.iter().map(|m| (m.record_id, m.distance)).collect();
    ensure(remote_pairs == local, || format!("network {remote_pairs:?} vs local {local:?}"))?;
    for m in &remote {
        ensure(merged.get(m.record_id).is_some_and(|s| s.label == m.label), || format!("label of {}", m.record_id))?;
    }
    let run = &o.runs[proc.run.unwrap()];
    let diag = run.state.diagnoses.last().ok_or("no diagnosis")?;
    ensure(diag.remote && diag.record_id == local[0].0 && diag.distance == local[0].1, || {
        format!("diagnosis {diag:?} vs {:?}", local[0])
    })?;
    Ok(format!("k={k}, {} matches, top {} ({})", local.len(), diag.record_id, diag.label))
}

// ----------------------------------------------------------------

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("1 isa round trip", isa_round_trip),
        ("2 assembler round trip", asm_round_trip),
        ("3 hamming oracle", hamming_oracle),
        ("4 safety matrix", safety_matrix),
        ("5 vm determinism", vm_determinism),
        ("6 confidence algebra", confidence_algebra),
        ("7 network conservation", network_conservation),
        ("8 consensus gate", consensus_gate),
        ("9 learning extraction", learning_extraction),
        ("10 regional scenario", regional_scenario),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let start = std::time::Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.2}s]"),
            Err(e) => {
                println!("FAIL {name}: {e} [{secs:.2}s]");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
