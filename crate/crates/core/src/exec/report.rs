//! Plain-text run report.

use std::fmt::Write as _;

use super::learn::LearnError;
use super::proposal::KbProposal;
use super::MpuState;
use crate::hash;

fn proposal_line(out: &mut String, p: &KbProposal) {
    let _ = writeln!(
        out,
        "proposal {} {} {} target={} {}",
        p.id,
        p.kind,
        p.status().name(),
        p.target.as_deref().unwrap_or("-"),
        p.describe_payload()
    );
}

/// Report text ending in a `REPORTHASH` line. `learned` is the outcome of
/// learning extraction when it was requested.
pub fn render(state: &MpuState, learned: Option<&Result<Vec<KbProposal>, LearnError>>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "steps {}", state.trace.len());
    let _ = writeln!(out, "halted {}", state.halted);
    match &state.fault {
        Some(f) => {
            let _ = writeln!(out, "fault {} {} {}", f.code(), f.name(), f);
        }
        None => out.push_str("fault -\n"),
    }
    let _ = writeln!(out, "confidence {}", state.confidence);
    let _ = writeln!(out, "tracehash {:016x}", state.trace.hash());
    for r in &state.safety {
        let verdicts: Vec<String> = r
            .procedures
            .iter()
            .zip(&r.verdicts)
            .map(|(p, v)| format!("{p}:{v}"))
            .collect();
        let _ = writeln!(
            out,
            "safety patient={} matrix={}x{}{} {}",
            r.patient,
            r.n(),
            r.m(),
            if r.no_rules { " no-rules" } else { "" },
            verdicts.join(" ")
        );
    }
    let ids = |v: &[u16]| {
        if v.is_empty() {
            "-".to_string()
        } else {
            v.iter().map(u16::to_string).collect::<Vec<_>>().join(",")
        }
    };
    for s in &state.schedules {
        let _ = writeln!(
            out,
            "schedule patient={} scheduled={} blocked={}",
            s.patient,
            ids(&s.scheduled),
            ids(&s.blocked)
        );
    }
    for d in &state.diagnoses {
        let _ = writeln!(
            out,
            "diagnosis object={} record={} label={} distance={} confidence={} source={}",
            d.object,
            d.record_id,
            d.label,
            d.distance,
            d.confidence,
            if d.remote { "remote" } else { "local" }
        );
    }
    let _ = writeln!(
        out,
        "divergence {} entries={} mismatches={}",
        state.predictions.divergence_rate(),
        state.predictions.entries().len(),
        state.predictions.mismatches()
    );
    for p in &state.proposals {
        proposal_line(&mut out, p);
    }
    match learned {
        None => {}
        Some(Err(e)) => {
            let _ = writeln!(out, "learning error {e}");
        }
        Some(Ok(list)) => {
            let _ = writeln!(out, "learned {}", list.len());
            for p in list {
                proposal_line(&mut out, p);
            }
        }
    }
    hash::seal(&mut out, "REPORTHASH");
    out
}
