use std::collections::BTreeSet;

use super::rules::RuleSet;
use super::value::AttrValue;
use super::{ObjectId, ObjectStore, RelationKind, StoreError};
use crate::fixed::Decimal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Marker {
    Common,
    Conflict,
    Overlap,
    Absent,
}

impl Marker {
    pub fn name(self) -> &'static str {
        match self {
            Marker::Common => "COMMON",
            Marker::Conflict => "CONFLICT",
            Marker::Overlap => "OVERLAP",
            Marker::Absent => "ABSENT",
        }
    }
}

/// A cell keeps the object's value alongside any classification marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub value: AttrValue,
    pub marker: Option<Marker>,
}

impl Cell {
    pub fn present(&self) -> bool {
        self.marker != Some(Marker::Absent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeMatrix {
    pub rows: Vec<ObjectId>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<Cell>>,
    /// Tolerance the markers were computed with.
    pub tolerance: Decimal,
}

impl AttributeMatrix {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn m(&self) -> usize {
        self.cols.len()
    }

    pub fn cell(&self, row: usize, col: usize) -> &Cell {
        &self.cells[row][col]
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.cols.iter().position(|c| c == name)
    }

    pub fn markers(&self) -> Vec<Vec<Option<Marker>>> {
        self.cells
            .iter()
            .map(|r| r.iter().map(|c| c.marker).collect())
            .collect()
    }
}

/// Rows are the given objects in order; columns are the ordered union of
/// their attribute names (first appearance wins).
pub fn build_matrix(store: &ObjectStore, ids: &[ObjectId]) -> Result<AttributeMatrix, StoreError> {
    let objects = ids
        .iter()
        .map(|id| store.object(*id))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cols: Vec<String> = Vec::new();
    for o in &objects {
        for a in o.attributes() {
            if !cols.contains(&a.name) {
                cols.push(a.name.clone());
            }
        }
    }
    let cells = objects
        .iter()
        .map(|o| {
            cols.iter()
                .map(|c| match o.get(c) {
                    Some(v) if !v.is_absent() => Cell {
                        value: v.clone(),
                        marker: None,
                    },
                    _ => Cell {
                        value: AttrValue::Absent,
                        marker: Some(Marker::Absent),
                    },
                })
                .collect()
        })
        .collect();
    Ok(AttributeMatrix {
        rows: ids.to_vec(),
        cols,
        cells,
        tolerance: Decimal::integer(0),
    })
}

/// Marks cells per column:
///
/// * every row present and all values equal: all cells COMMON;
/// * otherwise a present cell equal to some other row's value is COMMON;
/// * a remaining present cell in a column not present in every row is OVERLAP;
/// * a cell satisfying one side of a rule while a different cell satisfies
///   the other side is CONFLICT, overriding the above.
pub fn classify_cells(matrix: &AttributeMatrix, tolerance: Decimal, rules: &RuleSet) -> AttributeMatrix {
    let mut out = matrix.clone();
    out.tolerance = tolerance;
    let n = out.n();
    for row in out.cells.iter_mut() {
        for cell in row.iter_mut() {
            if cell.marker != Some(Marker::Absent) {
                cell.marker = None;
            }
        }
    }
    for j in 0..out.m() {
        let present: Vec<usize> = (0..n).filter(|&i| matrix.cells[i][j].present()).collect();
        let value = |i: usize| &matrix.cells[i][j].value;
        let all_present = present.len() == n;
        let all_equal = present
            .iter()
            .all(|&i| present.iter().all(|&k| value(i).matches(value(k), tolerance)));
        for &i in &present {
            let marker = if all_present && all_equal {
                Some(Marker::Common)
            } else if present
                .iter()
                .any(|&k| k != i && value(i).matches(value(k), tolerance))
            {
                Some(Marker::Common)
            } else if !all_present {
                Some(Marker::Overlap)
            } else {
                None
            };
            out.cells[i][j].marker = marker;
        }
    }

    let coords: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..out.m()).map(move |j| (i, j))).collect();
    let mut conflicts = BTreeSet::new();
    for rule in rules.iter() {
        let lhs: Vec<(usize, usize)> = coords
            .iter()
            .copied()
            .filter(|&(i, j)| {
                let c = &matrix.cells[i][j];
                c.present() && rule.attribute.attribute == matrix.cols[j] && rule.attribute.holds(&c.value)
            })
            .collect();
        let rhs: Vec<(usize, usize)> = coords
            .iter()
            .copied()
            .filter(|&(i, j)| {
                let c = &matrix.cells[i][j];
                c.present() && rule.against.holds_on_cell(&matrix.cols[j], &c.value)
            })
            .collect();
        for &l in &lhs {
            if rhs.iter().any(|&r| r != l) {
                conflicts.insert(l);
            }
        }
        for &r in &rhs {
            if lhs.iter().any(|&l| l != r) {
                conflicts.insert(r);
            }
        }
    }
    for (i, j) in conflicts {
        out.cells[i][j].marker = Some(Marker::Conflict);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Thresholds {
    pub primary_min_common: usize,
    pub secondary_min_overlap: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            primary_min_common: 2,
            secondary_min_overlap: 1,
        }
    }
}

/// Undirected edge, lower id first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationEdge {
    pub a: ObjectId,
    pub b: ObjectId,
    pub kind: RelationKind,
}

/// Shared-column counts for one pair of rows: (COMMON-shared, OVERLAP-shared).
///
/// COMMON-shared: both cells COMMON with equal values. OVERLAP-shared: both
/// cells present, neither CONFLICT, and not COMMON-shared.
pub fn pair_counts(matrix: &AttributeMatrix, i: usize, k: usize) -> (usize, usize) {
    let mut common = 0;
    let mut overlap = 0;
    for j in 0..matrix.m() {
        let (x, y) = (&matrix.cells[i][j], &matrix.cells[k][j]);
        if !x.present() || !y.present() {
            continue;
        }
        if x.marker == Some(Marker::Conflict) || y.marker == Some(Marker::Conflict) {
            continue;
        }
        if x.marker == Some(Marker::Common)
            && y.marker == Some(Marker::Common)
            && x.value.matches(&y.value, matrix.tolerance)
        {
            common += 1;
        } else {
            overlap += 1;
        }
    }
    (common, overlap)
}

/// A pair with at least `primary_min_common` (and at least one) COMMON-shared
/// columns gets a PRIMARY edge; failing that, `secondary_min_overlap` (and at
/// least one) OVERLAP-shared columns give a SECONDARY edge.
pub fn derive_relations(matrix: &AttributeMatrix, thresholds: Thresholds) -> Vec<RelationEdge> {
    let mut edges = Vec::new();
    let n = matrix.n();
    for i in 0..n {
        for k in i + 1..n {
            let (a, b) = (matrix.rows[i], matrix.rows[k]);
            if a == b {
                continue;
            }
            let (c, o) = pair_counts(matrix, i, k);
            let kind = if c >= thresholds.primary_min_common.max(1) {
                Some(RelationKind::Primary)
            } else if o >= thresholds.secondary_min_overlap.max(1) {
                Some(RelationKind::Secondary)
            } else {
                None
            };
            if let Some(kind) = kind {
                edges.push(RelationEdge {
                    a: a.min(b),
                    b: a.max(b),
                    kind,
                });
            }
        }
    }
    edges.sort();
    edges.dedup_by(|x, y| x.a == y.a && x.b == y.b);
    edges
}
