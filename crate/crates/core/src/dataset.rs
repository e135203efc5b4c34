//! Line-oriented dataset files: objects, signatures, rules and tables.
//!
//! ```text
//! SCHEMA 3 fever:4 cough:4 rash:8
//! WEIGHTS 2 1 1
//! SIG 101 influenza 0xF 0x3 0x00
//! OBJ	5	patient	age=54	diabetes=true
//! REL 5 9 PRIMARY same_ward
//! RULE hard diabetes=true sugar_load R1
//! OUTCOME 1 recovered
//! SCORE diabetes 3
//! ```
//!
//! `OBJ` fields are tab-separated; every other record is split on
//! whitespace. Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::object_store::{
    AttrValue, Attribute, MedicalObject, ObjectId, ObjectSpec, ObjectStore, RelationKind, Rule, RuleSet, Severity,
};
use crate::symptom::{Dimension, Schema, SignatureBank};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct DatasetError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub store: ObjectStore,
    pub bank: Option<SignatureBank>,
    pub rules: RuleSet,
    /// Closed 8-bit outcome table.
    pub outcomes: BTreeMap<u8, String>,
    /// Attribute-presence weights used by knowledge filtering.
    pub scores: BTreeMap<String, u32>,
}

fn parse_u64(tok: &str) -> Option<u64> {
    match tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => tok.parse().ok(),
    }
}

fn parse_hex(tok: &str) -> Option<u64> {
    let hex = tok
        .strip_prefix("0x")
        .or_else(|| tok.strip_prefix("0X"))
        .unwrap_or(tok);
    u64::from_str_radix(hex, 16).ok()
}

impl Dataset {
    pub fn new() -> Dataset {
        Dataset::default()
    }

    pub fn parse(text: &str) -> Result<Dataset, DatasetError> {
        let mut d = Dataset::new();
        d.load(text)?;
        Ok(d)
    }

    /// Adds the records of `text` to this dataset.
    pub fn load(&mut self, text: &str) -> Result<(), DatasetError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            self.record(raw.trim_end_matches('\r'))
                .map_err(|message| DatasetError { line, message })?;
        }
        Ok(())
    }

    fn record(&mut self, raw: &str) -> Result<(), String> {
        let kind = raw.split_whitespace().next().unwrap_or_default();
        if kind == "OBJ" {
            return self.obj(raw);
        }
        let toks: Vec<&str> = raw.split_whitespace().collect();
        let args = &toks[1..];
        match kind {
            "SCHEMA" => self.schema(args),
            "WEIGHTS" => self.weights(args),
            "SIG" => self.sig(args),
            "REL" => self.rel(args),
            "RULE" => self.rule(args),
            "OUTCOME" => self.outcome(args),
            "SCORE" => self.score(args),
            other => Err(format!("unknown record kind `{other}`")),
        }
    }

    fn schema(&mut self, args: &[&str]) -> Result<(), String> {
        if self.bank.is_some() {
            return Err("SCHEMA given twice".into());
        }
        let (count, rest) = args.split_first().ok_or("SCHEMA needs a dimension count")?;
        let count: usize = count.parse().map_err(|_| format!("bad dimension count `{count}`"))?;
        if rest.len() != count {
            return Err(format!("SCHEMA declares {count} dimensions but lists {}", rest.len()));
        }
        let mut dims = Vec::with_capacity(count);
        for (i, tok) in rest.iter().enumerate() {
            let (name, width) = match tok.split_once(':') {
                Some((n, w)) => (n.to_string(), w),
                None => (format!("d{i}"), *tok),
            };
            let width: u8 = width.parse().map_err(|_| format!("bad width `{tok}`"))?;
            dims.push(Dimension { name, width });
        }
        let schema = Schema::new(dims).map_err(|e| e.to_string())?;
        self.bank = Some(SignatureBank::new(schema));
        Ok(())
    }

    fn weights(&mut self, args: &[&str]) -> Result<(), String> {
        let bank = self.bank.as_mut().ok_or("WEIGHTS before SCHEMA")?;
        let w = args
            .iter()
            .map(|t| t.parse::<u32>().map_err(|_| format!("bad weight `{t}`")))
            .collect::<Result<Vec<_>, _>>()?;
        bank.set_weights(w).map_err(|e| e.to_string())
    }

    fn sig(&mut self, args: &[&str]) -> Result<(), String> {
        let bank = self.bank.as_mut().ok_or("SIG before SCHEMA")?;
        let [id, label, codes @ ..] = args else {
            return Err("SIG needs a record id, a label and codes".into());
        };
        let id: u32 = id.parse().map_err(|_| format!("bad record id `{id}`"))?;
        let codes = codes
            .iter()
            .map(|t| parse_hex(t).ok_or_else(|| format!("bad hex code `{t}`")))
            .collect::<Result<Vec<_>, _>>()?;
        let v = bank.schema().vector(codes).map_err(|e| e.to_string())?;
        bank.insert(id, v, label).map_err(|e| e.to_string())
    }

    fn obj(&mut self, raw: &str) -> Result<(), String> {
        let fields: Vec<&str> = raw.split('\t').collect();
        let [_, id, class, attrs @ ..] = fields.as_slice() else {
            return Err("OBJ needs tab-separated id and class".into());
        };
        let id: ObjectId = id.trim().parse().map_err(|_| format!("bad object id `{id}`"))?;
        if self.store.contains(id) {
            return Err(format!("duplicate object id {id}"));
        }
        let mut spec = ObjectSpec::new(id, class.trim());
        for a in attrs {
            if a.is_empty() {
                continue;
            }
            let (name, value) = a.split_once('=').ok_or_else(|| format!("expected name=value, got `{a}`"))?;
            let value: AttrValue = value.parse().map_err(|e| format!("{e}"))?;
            spec.attributes.push(Attribute::new(name, value));
        }
        self.store.put_object(spec).map(|_| ()).map_err(|e| e.to_string())
    }

    fn rel(&mut self, args: &[&str]) -> Result<(), String> {
        let [a, b, kind, label] = args else {
            return Err("REL needs: from to PRIMARY|SECONDARY label".into());
        };
        let a: ObjectId = a.parse().map_err(|_| format!("bad object id `{a}`"))?;
        let b: ObjectId = b.parse().map_err(|_| format!("bad object id `{b}`"))?;
        let kind = RelationKind::parse(kind).ok_or_else(|| format!("bad relation kind `{kind}`"))?;
        match self.store.add_relation(a, b, kind, label) {
            Ok(true) => Ok(()),
            Ok(false) => Err("duplicate relation".into()),
            Err(e) => Err(e.to_string()),
        }
    }

    fn rule(&mut self, args: &[&str]) -> Result<(), String> {
        let [sev, pred, against, id] = args else {
            return Err("RULE needs: hard|soft predicate tag id".into());
        };
        let severity = match *sev {
            "hard" => Severity::Hard,
            "soft" => Severity::Soft,
            s => return Err(format!("bad severity `{s}`")),
        };
        if self.rules.iter().any(|r| r.id == *id) {
            return Err(format!("duplicate rule id `{id}`"));
        }
        let rule = Rule::new(id, severity, pred, against)?;
        self.rules.rules.push(rule);
        Ok(())
    }

    fn outcome(&mut self, args: &[&str]) -> Result<(), String> {
        let [code, name] = args else {
            return Err("OUTCOME needs: code name".into());
        };
        let c = parse_u64(code)
            .and_then(|c| u8::try_from(c).ok())
            .ok_or_else(|| format!("outcome code `{code}` is not 0..=255"))?;
        if self.outcomes.insert(c, name.to_string()).is_some() {
            return Err(format!("duplicate outcome code {c}"));
        }
        Ok(())
    }

    fn score(&mut self, args: &[&str]) -> Result<(), String> {
        let [name, weight] = args else {
            return Err("SCORE needs: attribute weight".into());
        };
        let w: u32 = weight.parse().map_err(|_| format!("bad weight `{weight}`"))?;
        if self.scores.insert(name.to_string(), w).is_some() {
            return Err(format!("duplicate score for `{name}`"));
        }
        Ok(())
    }

    /// Canonical text form; `Dataset::parse(&d.dump())` reproduces `d`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        if let Some(bank) = &self.bank {
            let s = bank.schema();
            let dims: Vec<String> = s.dims().iter().map(|d| format!("{}:{}", d.name, d.width)).collect();
            let _ = writeln!(out, "SCHEMA {} {}", s.len(), dims.join(" "));
            if bank.weights().iter().any(|w| *w != 1) {
                let w: Vec<String> = bank.weights().iter().map(u32::to_string).collect();
                let _ = writeln!(out, "WEIGHTS {}", w.join(" "));
            }
            for e in bank.entries() {
                let codes: Vec<String> = e.vector.codes().iter().map(|c| format!("0x{c:X}")).collect();
                let _ = writeln!(out, "SIG {} {} {}", e.record_id, e.label, codes.join(" "));
            }
        }
        for o in self.store.iter() {
            out.push_str(&obj_line(o));
            out.push('\n');
        }
        for o in self.store.iter() {
            for r in o.relations() {
                let _ = writeln!(out, "REL {} {} {} {}", o.id, r.target, r.kind.name(), r.label);
            }
        }
        for r in self.rules.iter() {
            let sev = match r.severity {
                Severity::Hard => "hard",
                Severity::Soft => "soft",
            };
            let _ = writeln!(out, "RULE {sev} {} {} {}", r.attribute, r.against, r.id);
        }
        for (c, name) in &self.outcomes {
            let _ = writeln!(out, "OUTCOME {c} {name}");
        }
        for (name, w) in &self.scores {
            let _ = writeln!(out, "SCORE {name} {w}");
        }
        out
    }
}

/// The `OBJ` record for one object's current attributes.
pub fn obj_line(o: &MedicalObject) -> String {
    let mut line = format!("OBJ\t{}\t{}", o.id, o.class_tag);
    for a in o.attributes() {
        let _ = write!(line, "\t{}={}", a.name, a.value);
    }
    line
}

/// Parses a single `OBJ` record into an object spec.
pub fn parse_obj_line(line: &str) -> Result<ObjectSpec, String> {
    let mut d = Dataset::new();
    if !line.starts_with("OBJ\t") {
        return Err("not an OBJ record".into());
    }
    d.obj(line)?;
    let o = d.store.iter().next().ok_or("empty OBJ record")?;
    Ok(ObjectSpec::from_object(o))
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump())
    }
}
