//! Multidimensional Hamming matching of symptom and strain signatures.
//!
//! A signature is a fixed number of dimensions, each a code of declared bit
//! width. Distance is the per-dimension popcount of the XOR, weighted and
//! summed. This is one literal reading of "multidimensional Hamming codes";
//! other constructions would slot in behind [`distance`].

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use thiserror::Error;

use crate::hash::fnv1a;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MatchError {
    #[error("vectors use different schemas")]
    SchemaMismatch,
    #[error("signature bank is empty")]
    EmptyBank,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("dimension {dim}: code {code:#x} does not fit {width} bits")]
    CodeOutOfRange { dim: usize, code: u64, width: u8 },
    #[error("expected {expected} dimensions, got {got}")]
    WrongDimensionCount { expected: usize, got: usize },
    #[error("bad schema: {0}")]
    BadSchema(String),
    #[error("duplicate record id {0}")]
    DuplicateRecord(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Dimension {
    pub name: String,
    /// 1..=64 bits.
    pub width: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Schema {
    dims: Vec<Dimension>,
    id: u32,
}

impl Schema {
    pub fn new(dims: Vec<Dimension>) -> Result<Schema, MatchError> {
        if dims.is_empty() {
            return Err(MatchError::BadSchema("at least one dimension required".into()));
        }
        if let Some(d) = dims.iter().find(|d| d.width == 0 || d.width > 64) {
            return Err(MatchError::BadSchema(format!("width {} out of 1..=64", d.width)));
        }
        for (i, d) in dims.iter().enumerate() {
            if dims[..i].iter().any(|e| e.name == d.name) {
                return Err(MatchError::BadSchema(format!("duplicate dimension `{}`", d.name)));
            }
        }
        let mut canon = dims.len().to_string();
        for d in &dims {
            canon.push_str(&format!(" {}:{}", d.name, d.width));
        }
        let id = fnv1a(canon.as_bytes()) as u32;
        Ok(Schema { dims, id })
    }

    /// Dimensions named `d0`, `d1`, ...
    pub fn with_widths(widths: &[u8]) -> Result<Schema, MatchError> {
        Schema::new(
            widths
                .iter()
                .enumerate()
                .map(|(i, w)| Dimension {
                    name: format!("d{i}"),
                    width: *w,
                })
                .collect(),
        )
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn vector(&self, codes: Vec<u64>) -> Result<SymptomVector, MatchError> {
        if codes.len() != self.dims.len() {
            return Err(MatchError::WrongDimensionCount {
                expected: self.dims.len(),
                got: codes.len(),
            });
        }
        for (dim, (c, d)) in codes.iter().zip(&self.dims).enumerate() {
            if d.width < 64 && *c >> d.width != 0 {
                return Err(MatchError::CodeOutOfRange {
                    dim,
                    code: *c,
                    width: d.width,
                });
            }
        }
        Ok(SymptomVector {
            schema_id: self.id,
            codes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SymptomVector {
    schema_id: u32,
    codes: Vec<u64>,
}

impl SymptomVector {
    pub fn schema_id(&self) -> u32 {
        self.schema_id
    }

    pub fn codes(&self) -> &[u64] {
        &self.codes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub record_id: u32,
    pub vector: SymptomVector,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureBank {
    schema: Schema,
    entries: Vec<Signature>,
    weights: Vec<u32>,
}

impl SignatureBank {
    pub fn new(schema: Schema) -> SignatureBank {
        let weights = vec![1; schema.len()];
        SignatureBank {
            schema,
            entries: Vec::new(),
            weights,
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn entries(&self) -> &[Signature] {
        &self.entries
    }

    pub fn weights(&self) -> &[u32] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_weights(&mut self, weights: Vec<u32>) -> Result<(), MatchError> {
        if weights.len() != self.schema.len() {
            return Err(MatchError::WrongDimensionCount {
                expected: self.schema.len(),
                got: weights.len(),
            });
        }
        self.weights = weights;
        Ok(())
    }

    pub fn insert(&mut self, record_id: u32, vector: SymptomVector, label: &str) -> Result<(), MatchError> {
        if vector.schema_id != self.schema.id {
            return Err(MatchError::SchemaMismatch);
        }
        if self.entries.iter().any(|e| e.record_id == record_id) {
            return Err(MatchError::DuplicateRecord(record_id));
        }
        self.entries.push(Signature {
            record_id,
            vector,
            label: label.to_string(),
        });
        Ok(())
    }

    pub fn get(&self, record_id: u32) -> Option<&Signature> {
        self.entries.iter().find(|e| e.record_id == record_id)
    }

    /// Largest possible weighted distance under this bank's schema.
    pub fn max_distance(&self) -> u64 {
        self.schema
            .dims
            .iter()
            .zip(&self.weights)
            .map(|(d, w)| u64::from(d.width) * u64::from(*w))
            .sum()
    }

    /// Union of several banks sharing one schema and weights.
    pub fn merged<'a>(banks: impl IntoIterator<Item = &'a SignatureBank>) -> Result<SignatureBank, MatchError> {
        let mut iter = banks.into_iter();
        let first = iter.next().ok_or(MatchError::EmptyBank)?;
        let mut out = first.clone();
        for b in iter {
            if b.schema != out.schema || b.weights != out.weights {
                return Err(MatchError::SchemaMismatch);
            }
            for e in &b.entries {
                out.insert(e.record_id, e.vector.clone(), &e.label)?;
            }
        }
        Ok(out)
    }

    pub fn nearest_k(&self, query: &SymptomVector, k: usize) -> Result<Vec<(u32, u64)>, MatchError> {
        nearest_k(self, query, k)
    }
}

fn check(x: &SymptomVector, y: &SymptomVector) -> Result<(), MatchError> {
    if x.schema_id != y.schema_id || x.codes.len() != y.codes.len() {
        return Err(MatchError::SchemaMismatch);
    }
    Ok(())
}

/// Sum over dimensions of `weight * popcount(x XOR y)`.
pub fn distance(x: &SymptomVector, y: &SymptomVector, weights: &[u32]) -> Result<u64, MatchError> {
    check(x, y)?;
    if weights.len() != x.codes.len() {
        return Err(MatchError::WrongDimensionCount {
            expected: x.codes.len(),
            got: weights.len(),
        });
    }
    Ok(x.codes
        .iter()
        .zip(&y.codes)
        .zip(weights)
        .map(|((a, b), w)| u64::from((a ^ b).count_ones()) * u64::from(*w))
        .sum())
}

/// Up to `k` records ordered by (distance, record_id).
pub fn nearest_k(bank: &SignatureBank, query: &SymptomVector, k: usize) -> Result<Vec<(u32, u64)>, MatchError> {
    if k == 0 {
        return Err(MatchError::InvalidK);
    }
    if bank.is_empty() {
        return Err(MatchError::EmptyBank);
    }
    if query.schema_id != bank.schema.id {
        return Err(MatchError::SchemaMismatch);
    }
    // Max-heap of the best k seen so far; the top is the current worst.
    let mut heap: BinaryHeap<(u64, u32)> = BinaryHeap::with_capacity(k + 1);
    for e in &bank.entries {
        let d = distance(&e.vector, query, &bank.weights)?;
        if heap.len() < k {
            heap.push((d, e.record_id));
        } else if let Some(&worst) = heap.peek() {
            if (d, e.record_id) < worst {
                heap.pop();
                heap.push((d, e.record_id));
            }
        }
    }
    let mut out: Vec<Reverse<(u64, u32)>> = heap.into_iter().map(Reverse).collect();
    out.sort_unstable_by(|a, b| b.cmp(a));
    Ok(out.into_iter().map(|Reverse((d, id))| (id, d)).collect())
}

/// Ascending differing bit positions per dimension.
pub fn delta_profile(x: &SymptomVector, y: &SymptomVector) -> Result<Vec<Vec<u32>>, MatchError> {
    check(x, y)?;
    Ok(x.codes
        .iter()
        .zip(&y.codes)
        .map(|(a, b)| {
            let mut diff = a ^ b;
            let mut bits = Vec::with_capacity(diff.count_ones() as usize);
            while diff != 0 {
                let bit = diff.trailing_zeros();
                bits.push(bit);
                diff &= diff - 1;
            }
            bits
        })
        .collect())
}

/// Distinct labels among a result list, in result order.
pub fn labels_of<'a>(bank: &'a SignatureBank, results: &[(u32, u64)]) -> Vec<&'a str> {
    let mut seen = BTreeSet::new();
    results
        .iter()
        .filter_map(|(id, _)| bank.get(*id))
        .map(|s| s.label.as_str())
        .filter(|l| seen.insert(*l))
        .collect()
}
