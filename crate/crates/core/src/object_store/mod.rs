//! Addressed store of object operands with versioned attribute histories,
//! relationship edges, the n x m attribute matrix and knowledge trees.

mod matrix;
mod rules;
mod tree;
mod value;

use std::collections::BTreeMap;

use thiserror::Error;

pub use matrix::{
    build_matrix, classify_cells, derive_relations, pair_counts, AttributeMatrix, Cell, Marker, RelationEdge,
    Thresholds,
};
pub use rules::{has_tag, CmpOp, Condition, Predicate, Rule, RuleSet, Severity, TAGS_ATTRIBUTE};
pub use tree::{KnowledgeTree, Level, NodeKind, Subtree, TreeEdit, TreeError, TreeNodeId};
pub use value::{AttrValue, Attribute, BadValue};

use crate::isa::MEMORY_WORDS;

/// 12-bit object-memory address.
pub type ObjectId = u16;

/// Attributes allowed per object.
pub const M_MAX: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("object store full ({0} entries)")]
    StoreFull(usize),
    #[error("bad attribute: {0}")]
    BadAttribute(String),
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("address {0} outside object memory")]
    BadAddress(u32),
    #[error("object {id} is a `{existing}`, not a `{given}`")]
    ClassMismatch {
        id: ObjectId,
        existing: String,
        given: String,
    },
}

pub(crate) fn valid_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == ':')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationKind {
    Primary,
    Secondary,
}

impl RelationKind {
    pub fn name(self) -> &'static str {
        match self {
            RelationKind::Primary => "PRIMARY",
            RelationKind::Secondary => "SECONDARY",
        }
    }

    pub fn parse(s: &str) -> Option<RelationKind> {
        match s {
            "PRIMARY" => Some(RelationKind::Primary),
            "SECONDARY" => Some(RelationKind::Secondary),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Relation {
    pub target: ObjectId,
    pub kind: RelationKind,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttrChange {
    pub index: usize,
    pub old: AttrValue,
    pub new: AttrValue,
}

/// One put of an object. Version 0 is the creation snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    pub version: u64,
    pub tick: u64,
    pub changes: Vec<AttrChange>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MedicalObject {
    pub id: ObjectId,
    pub class_tag: String,
    attributes: Vec<Attribute>,
    initial: Vec<Attribute>,
    history: Vec<HistoryEntry>,
    relations: Vec<Relation>,
}

impl MedicalObject {
    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn version(&self) -> u64 {
        self.history.last().map_or(0, |h| h.version)
    }

    pub fn get(&self, name: &str) -> Option<&AttrValue> {
        self.attributes.iter().find(|a| a.name == name).map(|a| &a.value)
    }

    /// Attribute vector rebuilt from the creation snapshot and the history.
    pub fn replay(&self) -> Vec<Attribute> {
        let mut attrs = self.initial.clone();
        for entry in self.history.iter().skip(1) {
            for ch in &entry.changes {
                if ch.index == attrs.len() {
                    // Name is recovered from the current vector; positions never move.
                    attrs.push(Attribute::new(self.attributes[ch.index].name.clone(), ch.new.clone()));
                } else {
                    attrs[ch.index].value = ch.new.clone();
                }
            }
        }
        attrs
    }

    pub fn history_consistent(&self) -> bool {
        let versions_increase = self.history.windows(2).all(|w| w[0].version < w[1].version);
        versions_increase && self.history.first().map(|h| h.version) == Some(0) && self.replay() == self.attributes
    }
}

/// What a caller hands to [`ObjectStore::put_object`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectSpec {
    pub id: ObjectId,
    pub class_tag: String,
    pub attributes: Vec<Attribute>,
}

impl ObjectSpec {
    pub fn new(id: ObjectId, class_tag: impl Into<String>) -> ObjectSpec {
        ObjectSpec {
            id,
            class_tag: class_tag.into(),
            attributes: Vec::new(),
        }
    }

    pub fn with(mut self, name: &str, value: AttrValue) -> ObjectSpec {
        self.attributes.push(Attribute::new(name, value));
        self
    }

    pub fn from_object(obj: &MedicalObject) -> ObjectSpec {
        ObjectSpec {
            id: obj.id,
            class_tag: obj.class_tag.clone(),
            attributes: obj.attributes.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ObjectStore {
    objects: BTreeMap<ObjectId, MedicalObject>,
    /// Timestamp stamped on history entries.
    pub tick: u64,
}

impl ObjectStore {
    pub fn new() -> ObjectStore {
        ObjectStore::default()
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn get(&self, id: ObjectId) -> Option<&MedicalObject> {
        self.objects.get(&id)
    }

    pub fn object(&self, id: ObjectId) -> Result<&MedicalObject, StoreError> {
        self.get(id).ok_or(StoreError::UnknownObject(id))
    }

    pub fn contains(&self, id: ObjectId) -> bool {
        self.objects.contains_key(&id)
    }

    /// Objects in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &MedicalObject> {
        self.objects.values()
    }

    pub fn ids_of_class(&self, class: &str) -> Vec<ObjectId> {
        self.iter().filter(|o| o.class_tag == class).map(|o| o.id).collect()
    }

    fn check_spec(spec: &ObjectSpec) -> Result<(), StoreError> {
        if usize::from(spec.id) >= MEMORY_WORDS {
            return Err(StoreError::BadAddress(u32::from(spec.id)));
        }
        if !valid_name(&spec.class_tag) {
            return Err(StoreError::BadAttribute(format!("bad class tag `{}`", spec.class_tag)));
        }
        if spec.attributes.len() > M_MAX {
            return Err(StoreError::BadAttribute(format!(
                "{} attributes exceeds the limit of {M_MAX}",
                spec.attributes.len()
            )));
        }
        for (i, a) in spec.attributes.iter().enumerate() {
            if !valid_name(&a.name) {
                return Err(StoreError::BadAttribute(format!("bad attribute name `{}`", a.name)));
            }
            if spec.attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(StoreError::BadAttribute(format!("duplicate attribute `{}`", a.name)));
            }
        }
        Ok(())
    }

    /// Inserts a new object or updates an existing one. An update appends
    /// exactly one history entry listing every changed attribute; attributes
    /// missing from the spec become `Absent`, new ones are appended.
    pub fn put_object(&mut self, spec: ObjectSpec) -> Result<ObjectId, StoreError> {
        Self::check_spec(&spec)?;
        let tick = self.tick;
        match self.objects.get_mut(&spec.id) {
            None => {
                self.objects.insert(
                    spec.id,
                    MedicalObject {
                        id: spec.id,
                        class_tag: spec.class_tag,
                        initial: spec.attributes.clone(),
                        attributes: spec.attributes,
                        history: vec![HistoryEntry {
                            version: 0,
                            tick,
                            changes: vec![],
                        }],
                        relations: vec![],
                    },
                );
            }
            Some(obj) => {
                if obj.class_tag != spec.class_tag {
                    return Err(StoreError::ClassMismatch {
                        id: spec.id,
                        existing: obj.class_tag.clone(),
                        given: spec.class_tag,
                    });
                }
                let mut next = obj.attributes.clone();
                for a in next.iter_mut() {
                    if !spec.attributes.iter().any(|s| s.name == a.name) {
                        a.value = AttrValue::Absent;
                    }
                }
                for s in &spec.attributes {
                    match next.iter_mut().find(|a| a.name == s.name) {
                        Some(a) => a.value = s.value.clone(),
                        None => next.push(s.clone()),
                    }
                }
                if next.len() > M_MAX {
                    return Err(StoreError::BadAttribute(format!(
                        "update would hold {} attributes, limit is {M_MAX}",
                        next.len()
                    )));
                }
                let changes = diff(&obj.attributes, &next);
                let version = obj.version() + 1;
                obj.attributes = next;
                obj.history.push(HistoryEntry { version, tick, changes });
            }
        }
        Ok(spec.id)
    }

    /// Puts at the lowest free address.
    pub fn allocate(&mut self, class_tag: &str, attributes: Vec<Attribute>) -> Result<ObjectId, StoreError> {
        let id = (0..MEMORY_WORDS as u16)
            .find(|i| !self.objects.contains_key(i))
            .ok_or(StoreError::StoreFull(MEMORY_WORDS))?;
        self.put_object(ObjectSpec {
            id,
            class_tag: class_tag.to_string(),
            attributes,
        })
    }

    /// Sets (or appends) one attribute as a single versioned update.
    pub fn set_attribute(&mut self, id: ObjectId, name: &str, value: AttrValue) -> Result<(), StoreError> {
        let obj = self.object(id)?;
        let mut spec = ObjectSpec::from_object(obj);
        // Keep absent attributes in place rather than dropping them.
        match spec.attributes.iter_mut().find(|a| a.name == name) {
            Some(a) => a.value = value,
            None => spec.attributes.push(Attribute::new(name, value)),
        }
        self.put_object(spec).map(|_| ())
    }

    /// Adds a relation edge; both ends must exist. Repeats are ignored.
    pub fn add_relation(
        &mut self,
        from: ObjectId,
        to: ObjectId,
        kind: RelationKind,
        label: &str,
    ) -> Result<bool, StoreError> {
        self.object(to)?;
        let obj = self.objects.get_mut(&from).ok_or(StoreError::UnknownObject(from))?;
        let rel = Relation {
            target: to,
            kind,
            label: label.to_string(),
        };
        if obj.relations.contains(&rel) {
            return Ok(false);
        }
        obj.relations.push(rel);
        Ok(true)
    }

    pub fn history_consistent(&self) -> bool {
        self.objects.values().all(MedicalObject::history_consistent)
    }
}

fn diff(old: &[Attribute], new: &[Attribute]) -> Vec<AttrChange> {
    new.iter()
        .enumerate()
        .filter_map(|(index, a)| {
            let prev = old.get(index).map_or(AttrValue::Absent, |o| o.value.clone());
            let appended = index >= old.len();
            (appended || prev != a.value).then(|| AttrChange {
                index,
                old: prev,
                new: a.value.clone(),
            })
        })
        .collect()
}
