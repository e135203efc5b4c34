//! Network layout: nodes, links, the control-point directory and quorum.
//!
//! ```text
//! NODE MPU 0 patients.ds
//! NODE BANK 0 strains.ds
//! NODE BANK 1 records.ds private
//! NODE CP 0
//! NODE KMS 0
//! LINK MPU0 CP0 1
//! DIR 579.1 BANK0
//! QUORUM 1
//! ```

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use thiserror::Error;

use mpu_core::dataset::Dataset;

use crate::packet::{NodeId, NodeKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("topology needs exactly one control point, found {0}")]
    ControlPoints(usize),
    #[error("{0} is not reachable from {1}")]
    Disconnected(NodeId, NodeId),
    #[error("quorum {k} outside 1..={n}")]
    BadQuorum { k: usize, n: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no bank serves subject `{0}`")]
pub struct NoSuchSubject(pub String);

/// Digits and dots, starting with a digit.
pub fn valid_subject(s: &str) -> bool {
    s.starts_with(|c: char| c.is_ascii_digit()) && s.chars().all(|c| c.is_ascii_digit() || c == '.')
}

/// Longest directory key that prefixes `subject`.
pub fn resolve(directory: &BTreeMap<String, NodeId>, subject: &str) -> Result<NodeId, NoSuchSubject> {
    directory
        .iter()
        .filter(|(k, _)| subject.starts_with(k.as_str()))
        .max_by_key(|(k, _)| k.len())
        .map(|(_, v)| *v)
        .ok_or_else(|| NoSuchSubject(subject.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub dataset: Option<Dataset>,
    /// Accepts packets only from MPU and KMS nodes.
    pub private: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub a: NodeId,
    pub b: NodeId,
    pub latency: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub nodes: BTreeMap<NodeId, NodeSpec>,
    pub links: Vec<Link>,
    pub directory: BTreeMap<String, NodeId>,
    pub quorum: usize,
}

/// One hop of a route: the directed link entered and its latency.
pub type Hop = (NodeId, NodeId, u64);

impl Topology {
    /// Parses a topology. `load` returns the text of a dataset file named
    /// on a `NODE` line.
    pub fn parse(text: &str, load: &mut dyn FnMut(&str) -> Result<String, String>) -> Result<Topology, TopologyError> {
        let mut nodes = BTreeMap::new();
        let mut links: Vec<Link> = Vec::new();
        let mut directory = BTreeMap::new();
        let mut quorum = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| TopologyError::Syntax { line, message };
            let toks: Vec<&str> = raw.split_whitespace().collect();
            match toks.as_slice() {
                [] => {}
                [first, ..] if first.starts_with('#') => {}
                ["NODE", kind, index, rest @ ..] => {
                    let kind = NodeKind::parse(kind).ok_or_else(|| err(format!("bad node kind `{kind}`")))?;
                    let index: u8 = index.parse().map_err(|_| err(format!("bad node index `{index}`")))?;
                    let id = NodeId::new(kind, index);
                    let mut spec = NodeSpec {
                        id,
                        dataset: None,
                        private: false,
                    };
                    for opt in rest {
                        if *opt == "private" {
                            spec.private = true;
                        } else if spec.dataset.is_none() {
                            let text = load(opt).map_err(|e| err(format!("{opt}: {e}")))?;
                            spec.dataset = Some(Dataset::parse(&text).map_err(|e| err(format!("{opt}: {e}")))?);
                        } else {
                            return Err(err(format!("unexpected `{opt}`")));
                        }
                    }
                    if nodes.insert(id, spec).is_some() {
                        return Err(err(format!("duplicate node {id}")));
                    }
                }
                ["LINK", a, b, latency] => {
                    let a: NodeId = a.parse().map_err(err)?;
                    let b: NodeId = b.parse().map_err(err)?;
                    let latency: u64 = latency
                        .parse()
                        .ok()
                        .filter(|l| *l >= 1)
                        .ok_or_else(|| err(format!("latency `{latency}` must be an integer >= 1")))?;
                    for n in [a, b] {
                        if !nodes.contains_key(&n) {
                            return Err(err(format!("unknown node {n}")));
                        }
                    }
                    if a == b {
                        return Err(err("self link".into()));
                    }
                    if links.iter().any(|l| (l.a, l.b) == (a, b) || (l.a, l.b) == (b, a)) {
                        return Err(err(format!("duplicate link {a}-{b}")));
                    }
                    links.push(Link { a, b, latency });
                }
                ["DIR", subject, bank] => {
                    if !valid_subject(subject) {
                        return Err(err(format!("bad subject identifier `{subject}`")));
                    }
                    let bank: NodeId = bank.parse().map_err(err)?;
                    if bank.kind != NodeKind::Bank || !nodes.contains_key(&bank) {
                        return Err(err(format!("{bank} is not a known bank")));
                    }
                    if directory.insert(subject.to_string(), bank).is_some() {
                        return Err(err(format!("duplicate directory key `{subject}`")));
                    }
                }
                ["QUORUM", k] => {
                    let k: usize = k.parse().map_err(|_| err(format!("bad quorum `{k}`")))?;
                    quorum = Some(k);
                }
                _ => return Err(err(format!("malformed record `{}`", raw.trim()))),
            }
        }
        let cps = nodes.keys().filter(|n| n.kind == NodeKind::ControlPoint).count();
        if cps != 1 {
            return Err(TopologyError::ControlPoints(cps));
        }
        let n = nodes.keys().filter(|n| n.kind == NodeKind::Kms).count();
        let quorum = quorum.unwrap_or(n / 2 + 1);
        if n > 0 && !(1..=n).contains(&quorum) {
            return Err(TopologyError::BadQuorum { k: quorum, n });
        }
        let topo = Topology {
            nodes,
            links,
            directory,
            quorum,
        };
        let first = *topo.nodes.keys().next().expect("a control point exists");
        let reach = topo.reachable(first);
        if let Some(lost) = topo.nodes.keys().find(|n| !reach.contains(n)) {
            return Err(TopologyError::Disconnected(*lost, first));
        }
        Ok(topo)
    }

    pub fn control_point(&self) -> NodeId {
        *self
            .nodes
            .keys()
            .find(|n| n.kind == NodeKind::ControlPoint)
            .expect("validated at parse time")
    }

    pub fn nodes_of(&self, kind: NodeKind) -> Vec<NodeId> {
        self.nodes.keys().copied().filter(|n| n.kind == kind).collect()
    }

    fn neighbours(&self, n: NodeId) -> Vec<(NodeId, u64)> {
        let mut out: Vec<(NodeId, u64)> = self
            .links
            .iter()
            .filter_map(|l| {
                if l.a == n {
                    Some((l.b, l.latency))
                } else if l.b == n {
                    Some((l.a, l.latency))
                } else {
                    None
                }
            })
            .collect();
        out.sort();
        out
    }

    fn reachable(&self, from: NodeId) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::from([from]);
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            for (m, _) in self.neighbours(n) {
                if seen.insert(m) {
                    stack.push(m);
                }
            }
        }
        seen
    }

    /// Cheapest route by total latency, then hop count, then the node
    /// sequence. Empty when `from == to`; `None` when unreachable.
    pub fn route(&self, from: NodeId, to: NodeId) -> Option<Vec<Hop>> {
        type Key = (u64, usize, Vec<NodeId>);
        let mut best: BTreeMap<NodeId, Key> = BTreeMap::new();
        let mut heap: BinaryHeap<Reverse<Key>> = BinaryHeap::new();
        heap.push(Reverse((0, 0, vec![from])));
        while let Some(Reverse((dist, hops, path))) = heap.pop() {
            let here = *path.last().expect("paths are never empty");
            if best.contains_key(&here) {
                continue;
            }
            best.insert(here, (dist, hops, path.clone()));
            if here == to {
                break;
            }
            for (next, lat) in self.neighbours(here) {
                if !best.contains_key(&next) {
                    let mut p = path.clone();
                    p.push(next);
                    heap.push(Reverse((dist + lat, hops + 1, p)));
                }
            }
        }
        let (_, _, path) = best.remove(&to)?;
        Some(
            path.windows(2)
                .map(|w| {
                    let lat = self
                        .links
                        .iter()
                        .find(|l| (l.a, l.b) == (w[0], w[1]) || (l.a, l.b) == (w[1], w[0]))
                        .map(|l| l.latency)
                        .expect("route follows links");
                    (w[0], w[1], lat)
                })
                .collect(),
        )
    }

    pub fn path_latency(&self, from: NodeId, to: NodeId) -> Option<u64> {
        self.route(from, to).map(|r| r.iter().map(|h| h.2).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_files(_: &str) -> Result<String, String> {
        Err("no files in this test".into())
    }

    fn dir(pairs: &[(&str, &str)]) -> BTreeMap<String, NodeId> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.parse().unwrap())).collect()
    }

    #[test]
    fn resolve_examples() {
        let d = dir(&[("53", "BANK1")]);
        assert_eq!(resolve(&d, "537").unwrap().to_string(), "BANK1");
        let d = dir(&[("53", "BANK1"), ("537", "BANK2")]);
        assert_eq!(resolve(&d, "537.1").unwrap().to_string(), "BANK2");
        assert_eq!(resolve(&d, "9"), Err(NoSuchSubject("9".into())));
    }

    #[test]
    fn longest_prefix_against_oracle() {
        let d = dir(&[("5", "BANK0"), ("53", "BANK1"), ("537", "BANK2"), ("537.12", "BANK3"), ("6", "BANK4")]);
        for q in ["5", "50", "53", "537", "537.1", "537.12", "537.123", "6.1", "7", "4"] {
            // Oracle: try every key, keep the longest that matches.
            let mut want: Option<(&String, &NodeId)> = None;
            for (k, v) in &d {
                if q.len() >= k.len() && &q[..k.len()] == k && want.map_or(true, |(w, _)| k.len() > w.len()) {
                    want = Some((k, v));
                }
            }
            assert_eq!(resolve(&d, q).ok(), want.map(|(_, v)| *v), "{q}");
        }
    }

    const TOPO: &str = "\
NODE MPU 0
NODE CP 0
NODE BANK 0
NODE BANK 1
NODE KMS 0
LINK MPU0 CP0 1
LINK CP0 BANK0 2
LINK MPU0 BANK1 5
LINK BANK0 BANK1 1
LINK KMS0 CP0 1
DIR 53 BANK0
QUORUM 1
";

    #[test]
    fn parse_and_route() {
        let t = Topology::parse(TOPO, &mut no_files).unwrap();
        assert_eq!(t.control_point().to_string(), "CP0");
        let m: NodeId = "MPU0".parse().unwrap();
        let b1: NodeId = "BANK1".parse().unwrap();
        // Direct link costs 5; MPU0-CP0-BANK0-BANK1 costs 4.
        let r = t.route(m, b1).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(t.path_latency(m, b1), Some(4));
        assert_eq!(t.route(m, m), Some(vec![]));
    }

    #[test]
    fn validation() {
        assert!(matches!(
            Topology::parse("NODE MPU 0\n", &mut no_files),
            Err(TopologyError::ControlPoints(0))
        ));
        assert!(matches!(
            Topology::parse("NODE CP 0\nNODE MPU 0\n", &mut no_files),
            Err(TopologyError::Disconnected(..))
        ));
        assert!(matches!(
            Topology::parse("NODE CP 0\nNODE KMS 0\nLINK CP0 KMS0 1\nQUORUM 2\n", &mut no_files),
            Err(TopologyError::BadQuorum { k: 2, n: 1 })
        ));
        assert!(matches!(
            Topology::parse("NODE CP 0\nNODE MPU 0\nLINK CP0 MPU0 0\n", &mut no_files),
            Err(TopologyError::Syntax { line: 3, .. })
        ));
        assert!(matches!(
            Topology::parse("NODE CP 0\nDIR 5x CP0\n", &mut no_files),
            Err(TopologyError::Syntax { line: 2, .. })
        ));
    }
}
