use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::asm::assemble_source;
use crate::object_store::{Rule, Severity};

fn program(src: &str) -> Program {
    assemble_source(src, OpcodeTable::standard()).unwrap()
}

fn dataset() -> Dataset {
    Dataset::parse(
        "SCHEMA 2 fever:4 cough:4\n\
         SIG 1 influenza 0xF 0x3\n\
         SIG 2 cold 0x1 0xF\n\
         OBJ\t5\tpatient\tfever=15\tcough=2\tage=54\n\
         OBJ\t9\tpatient\tweight=80\tage=61\n\
         OBJ\t11\tpatient\tward=\"B2\"\tage=54\n\
         OBJ\t20\tsubject\tcode=\"616.9\"\n\
         OUTCOME 1 recovered\n\
         OUTCOME 2 relapsed\n",
    )
    .unwrap()
}

fn state(src: &str) -> MpuState {
    MpuState::new(program(src), dataset(), false)
}

#[test]
fn halt_traces_one_record() {
    let mut s = state("HALT");
    assert_eq!(s.step(), Step::Traced);
    assert!(s.halted);
    assert_eq!(s.trace.len(), 1);
    assert_eq!(s.step(), Step::Halted);
    assert_eq!(s.trace.len(), 1);
}

#[test]
fn loado_sets_register() {
    let mut s = state("LOADO r3, 5\nHALT");
    s.step();
    assert_eq!(s.registers[3], Reg::Object(5));
    assert_eq!(s.trace.records()[0].operands, vec![5]);
}

#[test]
fn loado_missing_object_faults() {
    let mut s = state("LOADO r3, 42\nHALT");
    s.step();
    assert!(s.halted);
    assert_eq!(s.fault, Some(Fault::UnknownObject(42)));
    assert_eq!(s.trace.records()[0].result, FAULT_BIT | 3);
}

#[test]
fn merge_spmo_takes_union() {
    let mut s = state("MERGE.spmo r1, r2\nHALT");
    s.registers[1] = Reg::Object(5);
    s.registers[2] = Reg::set(vec![9, 11, 5]);
    s.run(10, &mut Offline).unwrap();
    let names: BTreeSet<&str> = s.store.get(5).unwrap().attributes().iter().map(|a| a.name.as_str()).collect();
    // Union worked out by hand over objects 5, 9 and 11.
    let expected: BTreeSet<&str> = ["fever", "cough", "age", "weight", "ward"].into();
    assert_eq!(names, expected);
    assert_eq!(s.store.get(5).unwrap().get("age"), Some(&AttrValue::Integer(54)));
    assert!(s.store.history_consistent());
    let work = &s.trace.records()[0].work;
    assert_eq!(work.iter().map(|w| w.object).collect::<Vec<_>>(), vec![Some(5), Some(9), Some(11)]);
}

#[test]
fn run_counts_and_limits() {
    let mut s = state("HALT");
    assert_eq!(s.run(100, &mut Offline), Ok(1));
    let mut s = state("top: NOPO\nJUMP top");
    assert_eq!(s.run(100, &mut Offline), Err(ExecError::StepLimitExceeded(100)));
    assert_eq!(s.trace.len(), 100);
}

#[test]
fn demo_runs_twice_identically() {
    let src = "LOADO r1, 5\nLOADO r2, 9\nCOMMON r1, r2\nOVERLAP r1, r2\nMATCH r1, 2\nDIAG r1\n\
               CONF 900\nCONF 800\nOMFETCH r3, 5\nKFILTER.spmo r3, 2\nGETATTR r1, 0\nHALT";
    let hashes: Vec<u64> = (0..2)
        .map(|_| {
            let mut s = state(src);
            s.run(100, &mut Offline).unwrap();
            assert_eq!(s.trace.len(), 12);
            s.trace.hash()
        })
        .collect();
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn dispatch_ordering() {
    let t = OpcodeTable::standard();
    let getattr = t.get(GETATTR).unwrap();
    let items = exec_mode_dispatch(getattr, ExecMode::Spmo, &[Some(5), Some(9)]);
    assert_eq!(items.iter().map(|i| i.object).collect::<Vec<_>>(), vec![Some(5), Some(9)]);
    assert!(exec_mode_dispatch(getattr, ExecMode::Spmo, &[]).is_empty());
    let items = exec_mode_dispatch(getattr, ExecMode::Mpmo, &[Some(1), Some(2), Some(3)]);
    let hand: Vec<(Option<u16>, &str)> = vec![
        (Some(1), "fetch"),
        (Some(1), "read"),
        (Some(2), "fetch"),
        (Some(2), "read"),
        (Some(3), "fetch"),
        (Some(3), "read"),
    ];
    assert_eq!(items.iter().map(|i| (i.object, i.process)).collect::<Vec<_>>(), hand);
}

#[test]
fn spmo_getattr_order_and_empty_set() {
    let mut s = state("GETATTR.spmo r1, 0\nGETATTR.spmo r2, 0\nHALT");
    s.registers[1] = Reg::set(vec![9, 5]);
    s.registers[2] = Reg::Set(vec![]);
    s.run(10, &mut Offline).unwrap();
    let r = &s.trace.records()[0];
    let values: Vec<_> = r.work.iter().map(|w| w.value.clone()).collect();
    assert_eq!(values, vec![AttrValue::Integer(15), AttrValue::Integer(80)]);
    assert!(s.trace.records()[1].work.is_empty());
    assert_eq!(s.trace.len(), 3);
}

#[test]
fn mpmo_records_chain_times_objects() {
    let mut s = state("GETATTR.mpmo r1, 0\nHALT");
    s.registers[1] = Reg::set(vec![5, 9, 11]);
    s.run(10, &mut Offline).unwrap();
    assert_eq!(s.trace.records()[0].work.len(), 6);
}

#[test]
fn spso_on_multi_set_faults() {
    let mut s = state("GETATTR r1, 0\nHALT");
    s.registers[1] = Reg::set(vec![5, 9]);
    s.run(10, &mut Offline).unwrap();
    assert!(matches!(s.fault, Some(Fault::ObjectFault { reg: 1, .. })));
}

#[test]
fn decode_fault_halts_with_code() {
    let mut s = MpuState::new(Program::from_words(vec![0xFF00_0000]), dataset(), false);
    s.run(10, &mut Offline).unwrap();
    assert!(matches!(s.fault, Some(Fault::Decode(_))));
    assert_eq!(s.trace.records()[0].result, FAULT_BIT | 1);
    assert_eq!(s.trace.records()[0].mnemonic, "?");
}

#[test]
fn confidence_examples() {
    assert_eq!(collective_confidence(&[]), Confidence::ONE);
    let c = |s: &str| s.parse::<Confidence>().unwrap();
    assert_eq!(collective_confidence(&[c("0.9"), c("0.8")]), c("0.72"));
    assert_eq!(collective_confidence(&[c("0.9"), Confidence::ZERO, c("1")]), Confidence::ZERO);
    let mut s = state("CONF 900\nCONF 800\nHALT");
    s.run(10, &mut Offline).unwrap();
    assert_eq!(s.confidence.to_string(), "0.7200");
    assert_eq!(s.trace.records()[1].confidence.to_string(), "0.7200");
    let mut s = state("CONF 1001\nHALT");
    s.run(10, &mut Offline).unwrap();
    assert_eq!(s.fault, Some(Fault::ConfidenceOutOfRange(1001)));
}

#[test]
fn predlog_switch_semantics() {
    let mut s = state("PREDLOG 1, 1\nHALT");
    s.run(10, &mut Offline).unwrap();
    assert!(s.predictions.entries()[0].matched);
    assert!(s.proposals.is_empty());

    let mut s = state("PREDLOG 1, 2\nHALT");
    s.run(10, &mut Offline).unwrap();
    assert!(!s.predictions.entries()[0].matched);
    assert!(s.proposals.is_empty());
    assert_eq!(s.predictions.divergence_rate(), Confidence::ONE);

    let mut s = MpuState::new(program("PREDLOG 1, 2\nPREDLOG 2, 2\nHALT"), dataset(), true);
    s.run(10, &mut Offline).unwrap();
    assert_eq!(s.proposals.len(), 1);
    assert_eq!(s.proposals[0].status(), ProposalStatus::Pending);
    assert_eq!(s.proposals[0].kind, ProposalKind::ObjectUpdate);
    assert_eq!(s.predictions.divergence_rate().to_string(), "0.5000");

    let mut s = state("PREDLOG 1, 7\nHALT");
    s.run(10, &mut Offline).unwrap();
    assert_eq!(s.fault, Some(Fault::UnknownOutcomeCode(7)));
}

fn record(opcode: u8, operands: Vec<ObjectId>) -> TraceRecord {
    TraceRecord {
        tick: 0,
        pc: 0,
        word: u32::from(opcode) << 24,
        opcode,
        mnemonic: "",
        mode: None,
        operands,
        result: 0,
        step_confidence: Confidence::ONE,
        confidence: Confidence::ONE,
        work: vec![],
    }
}

#[test]
fn learning_examples() {
    let p = LearnParams {
        min_cooccur: 3,
        ngram_len: 2,
        min_ngram_count: 4,
    };
    assert_eq!(learn_from_trace(&Trace::new(true), p), Ok(vec![]));
    assert_eq!(learn_from_trace(&Trace::new(false), p), Err(LearnError::LearningDisabled));

    let mut t = Trace::new(true);
    for ops in [vec![5, 9], vec![9, 5, 2], vec![5, 9], vec![2]] {
        t.push(record(MERGE, ops));
    }
    let got = learn_from_trace(&t, LearnParams { min_ngram_count: 100, ..p }).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].kind, ProposalKind::NewRelation);
    assert_eq!(got[0].payload(), &[0, 5, 0, 9]);

    let mut t = Trace::new(true);
    for _ in 0..4 {
        t.push(record(MATCH, vec![]));
        t.push(record(DIAG, vec![]));
    }
    let got = learn_from_trace(&t, p).unwrap();
    // [DIAG, MATCH] occurs only 3 times between the pairs.
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].kind, ProposalKind::NewMacroOpcode);
    assert_eq!(got[0].payload(), &[MATCH, DIAG]);
}

#[test]
fn kfilter_examples() {
    let mut store = ObjectStore::new();
    for (id, n) in [(1u16, 3usize), (2, 1), (3, 5)] {
        let mut spec = ObjectSpec::new(id, "x");
        for i in 0..n {
            spec = spec.with(&format!("a{i}"), AttrValue::Integer(1));
        }
        store.put_object(spec).unwrap();
    }
    let scores = BTreeMap::new();
    let ids = [1, 2, 3];
    assert_eq!(kfilter(&store, &ids, &scores, 0).unwrap(), ids.to_vec());
    assert_eq!(kfilter(&store, &ids, &scores, 6).unwrap(), Vec::<u16>::new());
    assert_eq!(kfilter(&store, &ids, &scores, 3).unwrap(), vec![1, 3]);
    let weighted: BTreeMap<String, u32> = [("a0".to_string(), 10)].into();
    assert_eq!(kfilter(&store, &ids, &weighted, 10).unwrap(), ids.to_vec());
}

#[test]
fn diag_local_and_netget_nak() {
    let mut s = state("LOADO r1, 5\nDIAG r1\nHALT");
    s.run(10, &mut Offline).unwrap();
    let d = &s.diagnoses[0];
    // fever 15 vs 0xF: 0 bits; cough 2 vs 3: 1 bit. max distance 8.
    assert_eq!((d.record_id, d.distance, d.label.as_str()), (1, 1, "influenza"));
    assert_eq!(d.confidence.to_string(), "0.8750");
    assert_eq!(s.confidence.to_string(), "0.8750");

    let mut s = state("LOADO r1, 5\nNETGET r1, @20\nDIAG r1\nHALT");
    s.step();
    let Step::NeedsNet(req) = s.step() else {
        panic!("NETGET must block");
    };
    assert_eq!(req.subjects, vec!["616.9".to_string()]);
    assert_eq!(req.k, 5);
    assert_eq!(s.trace.len(), 1);
    s.deliver(NetReply::Nak(nak::NO_SUBJECT));
    assert_eq!(s.step(), Step::Traced);
    assert_eq!(s.trace.records()[1].result, NAK_BIT | 1);
    s.run(10, &mut Offline).unwrap();
    assert!(!s.diagnoses[0].remote);
}

#[test]
fn diag_prefers_remote_results() {
    let mut s = state("LOADO r1, 5\nNETGET r1, @20\nDIAG r1\nHALT");
    struct Port;
    impl NetPort for Port {
        fn request(&mut self, _: &NetRequest) -> NetReply {
            NetReply::Matches(vec![
                RemoteMatch {
                    record_id: 77,
                    distance: 2,
                    label: "strep".into(),
                    max_distance: 8,
                },
                RemoteMatch {
                    record_id: 3,
                    distance: 2,
                    label: "staph".into(),
                    max_distance: 8,
                },
            ])
        }
    }
    s.run(10, &mut Port).unwrap();
    let d = &s.diagnoses[0];
    assert!(d.remote);
    assert_eq!((d.record_id, d.label.as_str()), (3, "staph"));
    assert_eq!(d.confidence.to_string(), "0.7500");
}

#[test]
fn safecheck_and_rxplan_exclude_blocked() {
    let mut d = dataset();
    d.load(
        "OBJ\t30\tpatient\tdiabetes=true\n\
         OBJ\t31\tprocedure\ttags=sugar_load\n\
         OBJ\t32\tprocedure\ttags=saline\n\
         RULE hard diabetes=true sugar_load R1\n",
    )
    .unwrap();
    d.store
        .put_object(ObjectSpec::new(40, CLUSTER_CLASS).with(MEMBERS_ATTRIBUTE, AttrValue::Code("31|32".into())))
        .unwrap();
    let p = program("LOADO r1, 30\nOMFETCH r2, 40\nSAFECHK r1, r2\nRXPLAN r1, r2\nHALT");
    let mut s = MpuState::new(p, d, false);
    s.run(10, &mut Offline).unwrap();
    assert_eq!(s.fault, None);
    assert_eq!(s.safety[0].verdicts, vec![Verdict::Block(vec!["R1".into()]), Verdict::Allow]);
    assert_eq!(s.schedules[0].scheduled, vec![32]);
    assert_eq!(s.schedules[0].blocked, vec![31]);
    assert_eq!(s.confidence.to_string(), "0.9405");
}

#[test]
fn rules_loaded_through_state() {
    let mut s = state("HALT");
    s.rules = RuleSet::new(vec![Rule::new("R", Severity::Soft, "age>50", "x").unwrap()]);
    assert!(!s.rules.is_empty());
}

#[test]
fn omstore_graft_prune() {
    let mut s = state("OMFETCH r1, 5\nOMSTORE r1, @100\nLOADO r2, @100\nGRAFT r2, 0\nPRUNE 1\nHALT");
    s.run(10, &mut Offline).unwrap();
    assert_eq!(s.fault, None);
    assert_eq!(s.store.get(100).unwrap().get(MEMBERS_ATTRIBUTE), Some(&AttrValue::Code("5|9|11".into())));
    assert_eq!(s.tree.len(), 1);
    s.tree.validate().unwrap();
}

#[test]
fn netput_creates_targeted_proposal() {
    let mut s = state("LOADO r1, 9\nNETPUT r1, @20\nLINKP r1, r1\nHALT");
    s.run(10, &mut Offline).unwrap();
    assert_eq!(s.proposals.len(), 1);
    assert_eq!(s.proposals[0].target.as_deref(), Some("616.9"));
    assert!(s.proposals[0].payload().starts_with(b"OBJ\t9\tpatient"));
}

#[test]
fn ran_off_end_halts() {
    let mut s = state("NOPO");
    assert_eq!(s.run(10, &mut Offline), Ok(1));
    assert_eq!(s.fault, Some(Fault::PcOutOfRange(1)));
}

#[test]
fn trace_text_ends_with_hash() {
    let mut s = state("LOADO r1, 5\nHALT");
    s.run(10, &mut Offline).unwrap();
    let text = s.trace.render();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "0\t0\t01000405\t01\tLOADO\tspso\t5\t00000005\t1.0000");
    assert_eq!(lines[2], format!("TRACEHASH {:016x}", s.trace.hash()));
}

/// Registers and store after a single-object run of `opcode` over each
/// element in turn, against one multi-object run over the whole set.
fn spmo_vs_folded(opcode: u8, ids: &[ObjectId], imm: u16) -> Result<(), TestCaseError> {
    let info = OpcodeTable::standard().get(opcode).unwrap();
    let binary = info.operands[1] == OperandKind::Reg;
    let b = if binary { 2 } else { imm };
    let multi = MpuState::new(
        Program::from_words(vec![
            encode(&Instruction::new(opcode, Mode::new(ExecMode::Spmo), 1, b)).unwrap(),
            0,
        ]),
        fuzz_dataset(ids),
        false,
    );
    let single_word = encode(&Instruction::new(opcode, Mode::SPSO, 1, b)).unwrap();
    let mut m = multi.clone();
    let set_reg = if binary { 2 } else { 1 };
    m.registers[1] = Reg::Object(ids[0]);
    m.registers[set_reg] = Reg::set(ids.to_vec());
    m.run(4, &mut Offline).unwrap();

    let mut f = multi;
    f.program = Program::from_words(vec![single_word, 0]);
    f.registers[1] = Reg::Object(ids[0]);
    let mut work = Vec::new();
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut kept = Vec::new();
    for id in &sorted {
        f.pc = 0;
        f.halted = false;
        f.tick = 0;
        if binary {
            f.registers[2] = Reg::Object(*id);
        } else {
            f.registers[1] = Reg::Object(*id);
        }
        f.step();
        prop_assert_eq!(&f.fault, &None);
        let w = f.trace.last().unwrap().work.clone();
        if opcode == KFILTER && w[0].value == AttrValue::Bool(true) {
            kept.push(*id);
        }
        work.extend(w);
    }
    prop_assert_eq!(&m.fault, &None);
    prop_assert_eq!(&m.trace.records()[0].work, &work);
    prop_assert_eq!(m.store.iter().collect::<Vec<_>>(), f.store.iter().collect::<Vec<_>>());
    prop_assert_eq!(&m.latch, &f.latch);
    prop_assert_eq!(&m.tree, &f.tree);
    prop_assert_eq!(&m.diagnoses.len(), &f.diagnoses.len());
    if opcode == KFILTER {
        prop_assert_eq!(&m.registers[1], &Reg::Set(kept));
    }
    Ok(())
}

fn fuzz_dataset(ids: &[ObjectId]) -> Dataset {
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

proptest! {
    #[test]
    fn spmo_equals_folded_spso(
        ids in proptest::collection::vec(0u16..40, 1..6),
        op in prop::sample::select(vec![GETATTR, SETATTR, KFILTER, MERGE, COMMON, OVERLAP, MATCH, DIAG, LINKP, LINKS, GRAFT]),
        imm in 0u16..3,
    ) {
        let imm = match op { MATCH => imm + 1, GRAFT => 0, _ => imm };
        spmo_vs_folded(op, &ids, imm)?;
    }

    #[test]
    fn collective_bounded_by_min(units in proptest::collection::vec(0u32..=10_000, 0..12)) {
        let steps: Vec<Confidence> = units.iter().map(|u| Confidence::from_units(*u).unwrap()).collect();
        let c = collective_confidence(&steps);
        prop_assert!(c <= Confidence::ONE);
        if let Some(min) = steps.iter().min() {
            prop_assert!(c <= *min);
        }
        prop_assert_eq!(c == Confidence::ONE, steps.iter().all(|s| *s == Confidence::ONE));
    }
}
