//! Knowledge trees: data leaves under object twigs under cluster branches.
//!
//! Edits never modify the receiver; each returns a new tree.

use std::collections::BTreeMap;

use thiserror::Error;

use super::ObjectId;

pub type TreeNodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Leaf = 0,
    Twig = 1,
    Branch = 2,
    Root = 3,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Root,
    /// Object cluster.
    Branch(String),
    /// One object.
    Twig(ObjectId),
    /// One data value, typically `name=value`.
    Leaf(String),
}

impl NodeKind {
    pub fn level(&self) -> Level {
        match self {
            NodeKind::Root => Level::Root,
            NodeKind::Branch(_) => Level::Branch,
            NodeKind::Twig(_) => Level::Twig,
            NodeKind::Leaf(_) => Level::Leaf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub kind: NodeKind,
    pub parent: Option<TreeNodeId>,
}

/// Detached subtree handed to a graft.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subtree {
    pub kind: NodeKind,
    pub children: Vec<Subtree>,
}

impl Subtree {
    pub fn leaf(data: impl Into<String>) -> Subtree {
        Subtree {
            kind: NodeKind::Leaf(data.into()),
            children: vec![],
        }
    }

    pub fn twig(id: ObjectId, leaves: Vec<Subtree>) -> Subtree {
        Subtree {
            kind: NodeKind::Twig(id),
            children: leaves,
        }
    }

    pub fn branch(label: impl Into<String>, children: Vec<Subtree>) -> Subtree {
        Subtree {
            kind: NodeKind::Branch(label.into()),
            children,
        }
    }

    fn size(&self) -> usize {
        1 + self.children.iter().map(Subtree::size).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeEdit {
    Prune(TreeNodeId),
    Graft(Subtree, TreeNodeId),
    Reshape(TreeNodeId, TreeNodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("level violation: {0}")]
    LevelViolation(String),
    #[error("unknown tree node {0}")]
    UnknownNode(TreeNodeId),
    #[error("moving node {node} under {parent} would create a cycle")]
    WouldCreateCycle { node: TreeNodeId, parent: TreeNodeId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeTree {
    nodes: BTreeMap<TreeNodeId, Node>,
    next_id: TreeNodeId,
}

impl Default for KnowledgeTree {
    fn default() -> Self {
        KnowledgeTree::new()
    }
}

impl KnowledgeTree {
    pub const ROOT: TreeNodeId = 0;

    pub fn new() -> KnowledgeTree {
        let mut nodes = BTreeMap::new();
        nodes.insert(
            Self::ROOT,
            Node {
                kind: NodeKind::Root,
                parent: None,
            },
        );
        KnowledgeTree { nodes, next_id: 1 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, id: TreeNodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (TreeNodeId, &Node)> {
        self.nodes.iter().map(|(k, v)| (*k, v))
    }

    /// (child, parent) pairs, sorted.
    pub fn edges(&self) -> Vec<(TreeNodeId, TreeNodeId)> {
        self.nodes
            .iter()
            .filter_map(|(id, n)| n.parent.map(|p| (*id, p)))
            .collect()
    }

    pub fn children(&self, id: TreeNodeId) -> Vec<TreeNodeId> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.parent == Some(id))
            .map(|(k, _)| *k)
            .collect()
    }

    /// Node and all of its descendants.
    pub fn descendants(&self, id: TreeNodeId) -> Vec<TreeNodeId> {
        let mut out = vec![id];
        let mut i = 0;
        while i < out.len() {
            out.extend(self.children(out[i]));
            i += 1;
        }
        out.sort_unstable();
        out
    }

    pub fn apply(&self, edit: &TreeEdit) -> Result<KnowledgeTree, TreeError> {
        match edit {
            TreeEdit::Prune(node) => self.prune(*node),
            TreeEdit::Graft(sub, parent) => self.graft(sub, *parent).map(|(t, _)| t),
            TreeEdit::Reshape(node, parent) => self.reshape(*node, *parent),
        }
    }

    pub fn prune(&self, node: TreeNodeId) -> Result<KnowledgeTree, TreeError> {
        if !self.nodes.contains_key(&node) {
            return Err(TreeError::UnknownNode(node));
        }
        if node == Self::ROOT {
            return Err(TreeError::LevelViolation("the root cannot be pruned".into()));
        }
        let mut out = self.clone();
        for id in self.descendants(node) {
            out.nodes.remove(&id);
        }
        Ok(out)
    }

    /// Returns the new tree and the id given to the subtree's top node.
    pub fn graft(&self, sub: &Subtree, parent: TreeNodeId) -> Result<(KnowledgeTree, TreeNodeId), TreeError> {
        let p = self.nodes.get(&parent).ok_or(TreeError::UnknownNode(parent))?;
        check_levels(sub, p.kind.level())?;
        if sub.kind == NodeKind::Root {
            return Err(TreeError::LevelViolation("a root cannot be grafted".into()));
        }
        let mut out = self.clone();
        let top = out.next_id;
        out.insert(sub, parent);
        debug_assert_eq!(out.len(), self.len() + sub.size());
        Ok((out, top))
    }

    fn insert(&mut self, sub: &Subtree, parent: TreeNodeId) {
        let id = self.next_id;
        self.next_id += 1;
        self.nodes.insert(
            id,
            Node {
                kind: sub.kind.clone(),
                parent: Some(parent),
            },
        );
        for c in &sub.children {
            self.insert(c, id);
        }
    }

    pub fn reshape(&self, node: TreeNodeId, new_parent: TreeNodeId) -> Result<KnowledgeTree, TreeError> {
        let n = self.nodes.get(&node).ok_or(TreeError::UnknownNode(node))?;
        let p = self.nodes.get(&new_parent).ok_or(TreeError::UnknownNode(new_parent))?;
        if node == Self::ROOT {
            return Err(TreeError::LevelViolation("the root cannot move".into()));
        }
        if self.descendants(node).contains(&new_parent) {
            return Err(TreeError::WouldCreateCycle {
                node,
                parent: new_parent,
            });
        }
        if p.kind.level() <= n.kind.level() {
            return Err(TreeError::LevelViolation(format!(
                "{:?} cannot sit under {:?}",
                n.kind.level(),
                p.kind.level()
            )));
        }
        let mut out = self.clone();
        out.nodes.get_mut(&node).unwrap().parent = Some(new_parent);
        Ok(out)
    }

    /// Single root, every parent exists, levels strictly decrease downward,
    /// no cycles.
    pub fn validate(&self) -> Result<(), TreeError> {
        let roots: Vec<_> = self.nodes.iter().filter(|(_, n)| n.parent.is_none()).collect();
        if roots.len() != 1 || *roots[0].0 != Self::ROOT || roots[0].1.kind != NodeKind::Root {
            return Err(TreeError::LevelViolation("tree must have exactly one root".into()));
        }
        for (id, n) in &self.nodes {
            if let Some(p) = n.parent {
                let parent = self.nodes.get(&p).ok_or(TreeError::UnknownNode(p))?;
                if parent.kind.level() <= n.kind.level() {
                    return Err(TreeError::LevelViolation(format!("node {id} under node {p}")));
                }
            } else if n.kind != NodeKind::Root {
                return Err(TreeError::LevelViolation(format!("orphan node {id}")));
            }
            // Walking up must reach the root within len() steps.
            let mut cur = *id;
            let mut steps = 0;
            while let Some(p) = self.nodes[&cur].parent {
                cur = p;
                steps += 1;
                if steps > self.nodes.len() {
                    return Err(TreeError::WouldCreateCycle { node: *id, parent: p });
                }
            }
        }
        Ok(())
    }
}

fn check_levels(sub: &Subtree, parent_level: Level) -> Result<(), TreeError> {
    let level = sub.kind.level();
    if level >= parent_level {
        return Err(TreeError::LevelViolation(format!(
            "{level:?} cannot sit under {parent_level:?}"
        )));
    }
    sub.children.iter().try_for_each(|c| check_levels(c, level))
}
