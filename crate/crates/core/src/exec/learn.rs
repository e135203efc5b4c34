//! Learning mode: mining a closed-switch trace into proposals.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::proposal::{KbProposal, ProposalKind};
use super::trace::Trace;
use crate::object_store::ObjectId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LearnParams {
    pub min_cooccur: usize,
    pub ngram_len: usize,
    pub min_ngram_count: usize,
}

impl Default for LearnParams {
    fn default() -> Self {
        LearnParams {
            min_cooccur: 3,
            ngram_len: 2,
            min_ngram_count: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LearnError {
    #[error("learning disabled: switch S-1 was open during the run")]
    LearningDisabled,
}

/// Relation proposals for object pairs seen together often enough, then
/// macro-opcode proposals for frequent opcode n-grams. Sorted by kind and
/// payload bytes; ids count up from 1 in that order.
pub fn learn_from_trace(trace: &Trace, params: LearnParams) -> Result<Vec<KbProposal>, LearnError> {
    if !trace.learning {
        return Err(LearnError::LearningDisabled);
    }
    let mut pairs: BTreeMap<(ObjectId, ObjectId), usize> = BTreeMap::new();
    for r in trace.records() {
        let ids: BTreeSet<ObjectId> = r.operands.iter().copied().collect();
        let ids: Vec<ObjectId> = ids.into_iter().collect();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                *pairs.entry((*a, *b)).or_default() += 1;
            }
        }
    }
    let mut found: Vec<(ProposalKind, Vec<u8>)> = pairs
        .into_iter()
        .filter(|(_, n)| *n >= params.min_cooccur.max(1))
        .map(|((a, b), _)| {
            let mut payload = a.to_be_bytes().to_vec();
            payload.extend_from_slice(&b.to_be_bytes());
            (ProposalKind::NewRelation, payload)
        })
        .collect();

    if params.ngram_len > 0 {
        let ops: Vec<u8> = trace.records().iter().map(|r| r.opcode).collect();
        let mut grams: BTreeMap<&[u8], usize> = BTreeMap::new();
        for w in ops.windows(params.ngram_len) {
            *grams.entry(w).or_default() += 1;
        }
        found.extend(
            grams
                .into_iter()
                .filter(|(_, n)| *n >= params.min_ngram_count.max(1))
                .map(|(g, _)| (ProposalKind::NewMacroOpcode, g.to_vec())),
        );
    }
    found.sort();
    Ok(found
        .into_iter()
        .enumerate()
        .map(|(i, (kind, payload))| KbProposal::new(i as u32 + 1, kind, None, payload))
        .collect())
}
