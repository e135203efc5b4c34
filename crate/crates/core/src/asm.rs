//! Assembly language for MPU programs.
//!
//! ```text
//! start:  LOADO r3, 42        ; register form
//!         OMFETCH r1, @2048   ; `@` selects memory form (12-bit address)
//!         MERGE.spmo r1, r2
//!         JUMP start
//! ```
//!
//! Labels denote word indices; program space and object memory share one
//! address range. Assembly is two-pass so labels may be used before they are
//! defined.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::isa::{
    ExecMode, Instruction, IsaError, Mode, OpcodeTable, OperandKind, ADDRESS_MAX, FIELD_MAX, MEMORY_WORDS,
    REGISTER_COUNT,
};

/// Raw-word directive, used by the disassembler for words whose operand
/// fields cannot be spelled in instruction syntax.
pub const WORD_DIRECTIVE: &str = ".WORD";

const MPO_MAGIC: &[u8; 4] = b"MPU1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Imm(u32),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operand {
    Reg(u8),
    /// An immediate or label; `memory` is set by the `@` prefix.
    Value { value: Value, memory: bool },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceLine {
    /// 1-based line number in the source text.
    pub line: usize,
    pub label: Option<String>,
    /// Upper-cased; `None` for a label-only line.
    pub mnemonic: Option<String>,
    pub mode_suffix: Option<ExecMode>,
    pub operands: Vec<Operand>,
    pub comment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {message}")]
pub struct SyntaxError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("program has {0} words, limit is 4096")]
    ProgramTooLarge(usize),
    #[error("line {line}: {message}")]
    BadOperand { line: usize, message: String },
    #[error("line {line}: {source}")]
    Isa { line: usize, source: IsaError },
}

impl AsmError {
    pub fn line(&self) -> Option<usize> {
        match self {
            AsmError::Syntax(e) => Some(e.line),
            AsmError::UnknownMnemonic { line, .. }
            | AsmError::UndefinedLabel { line, .. }
            | AsmError::DuplicateLabel { line, .. }
            | AsmError::BadOperand { line, .. }
            | AsmError::Isa { line, .. } => Some(*line),
            AsmError::ProgramTooLarge(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MpoError {
    #[error("missing MPU1 magic")]
    BadMagic,
    #[error("file truncated")]
    Truncated,
    #[error("{0} trailing bytes after the last word")]
    TrailingBytes(usize),
    #[error("program has {0} words, limit is 4096")]
    TooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program {
    pub words: Vec<u32>,
    pub symbols: BTreeMap<String, u16>,
    /// Source line for each word; empty when loaded from binary.
    pub source_map: Vec<usize>,
}

impl Program {
    pub fn from_words(words: Vec<u32>) -> Program {
        Program {
            words,
            ..Program::default()
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// `MPU1`, big-endian word count, big-endian words.
    pub fn to_mpo(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.words.len());
        out.extend_from_slice(MPO_MAGIC);
        out.extend_from_slice(&(self.words.len() as u32).to_be_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_be_bytes());
        }
        out
    }

    pub fn from_mpo(bytes: &[u8]) -> Result<Program, MpoError> {
        if bytes.len() < 4 || &bytes[..4] != MPO_MAGIC {
            return Err(MpoError::BadMagic);
        }
        let count = bytes
            .get(4..8)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()) as usize)
            .ok_or(MpoError::Truncated)?;
        if count > MEMORY_WORDS {
            return Err(MpoError::TooLarge(count));
        }
        let body = &bytes[8..];
        if body.len() < count * 4 {
            return Err(MpoError::Truncated);
        }
        if body.len() > count * 4 {
            return Err(MpoError::TrailingBytes(body.len() - count * 4));
        }
        let words = body
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Program::from_words(words))
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_number(s: &str) -> Option<u32> {
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        if hex.is_empty() {
            return None;
        }
        u32::from_str_radix(hex, 16).ok()
    } else if !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) {
        s.parse().ok()
    } else {
        None
    }
}

/// Byte offset of `sub` (a slice of `line`) as a 1-based column.
fn column_of(line: &str, sub: &str) -> usize {
    sub.as_ptr() as usize - line.as_ptr() as usize + 1
}

fn parse_operand(raw: &str, line_no: usize, column: usize) -> Result<Operand, SyntaxError> {
    let err = |message: String| SyntaxError {
        line: line_no,
        column,
        message,
    };
    let (memory, body) = match raw.strip_prefix('@') {
        Some(rest) => (true, rest),
        None => (false, raw),
    };
    if body.is_empty() {
        return Err(err("empty operand".into()));
    }
    let lower = body.to_ascii_lowercase();
    if let Some(idx) = lower.strip_prefix('r') {
        if !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()) {
            if memory {
                return Err(err(format!("register `{body}` cannot take `@`")));
            }
            return match idx.parse::<usize>() {
                Ok(n) if n < REGISTER_COUNT => Ok(Operand::Reg(n as u8)),
                _ => Err(err(format!("bad register index `{body}`"))),
            };
        }
    }
    if body.as_bytes()[0].is_ascii_digit() {
        return parse_number(body)
            .map(|v| Operand::Value {
                value: Value::Imm(v),
                memory,
            })
            .ok_or_else(|| err(format!("malformed number `{body}`")));
    }
    if is_ident(body) {
        return Ok(Operand::Value {
            value: Value::Label(body.to_string()),
            memory,
        });
    }
    Err(err(format!("malformed operand `{body}`")))
}

fn parse_line(raw: &str, line_no: usize) -> Result<Option<SourceLine>, SyntaxError> {
    let (code, comment) = match raw.find(';') {
        Some(i) => (&raw[..i], Some(raw[i + 1..].trim().to_string())),
        None => (raw, None),
    };
    let mut rest = code.trim();
    if rest.is_empty() {
        return Ok(None);
    }
    let err_at = |sub: &str, message: String| SyntaxError {
        line: line_no,
        column: column_of(raw, sub),
        message,
    };

    let mut label = None;
    if let Some(colon) = rest.find(':') {
        let candidate = rest[..colon].trim();
        if !is_ident(candidate) {
            return Err(err_at(rest, format!("malformed label `{candidate}`")));
        }
        label = Some(candidate.to_string());
        rest = rest[colon + 1..].trim_start();
        if rest.contains(':') {
            return Err(err_at(rest, "more than one label on a line".into()));
        }
    }
    if rest.is_empty() {
        return Ok(Some(SourceLine {
            line: line_no,
            label,
            mnemonic: None,
            mode_suffix: None,
            operands: vec![],
            comment,
        }));
    }

    let split = rest.find(char::is_whitespace).unwrap_or(rest.len());
    let (head, tail) = rest.split_at(split);
    let (mnemonic, mode_suffix) = if head.eq_ignore_ascii_case(WORD_DIRECTIVE) {
        (WORD_DIRECTIVE.to_string(), None)
    } else {
        let (name, suffix) = match head.split_once('.') {
            Some((n, s)) => (n, Some(s)),
            None => (head, None),
        };
        if !is_ident(name) {
            return Err(err_at(head, format!("malformed mnemonic `{head}`")));
        }
        let mode = match suffix {
            None => None,
            Some(s) => Some(
                ExecMode::from_suffix(s).ok_or_else(|| err_at(head, format!("unknown mode suffix `.{s}`")))?,
            ),
        };
        (name.to_ascii_uppercase(), mode)
    };

    let mut operands = Vec::new();
    let tail_trimmed = tail.trim();
    if !tail_trimmed.is_empty() {
        let pieces: Vec<&str> = tail_trimmed.split(',').collect();
        if pieces.len() > 2 {
            return Err(err_at(
                tail_trimmed,
                format!("too many operands ({}), at most 2 allowed", pieces.len()),
            ));
        }
        for piece in pieces {
            let p = piece.trim();
            let sub = if p.is_empty() { piece } else { p };
            if p.contains(char::is_whitespace) {
                return Err(err_at(sub, format!("malformed operand `{p}`")));
            }
            operands.push(parse_operand(p, line_no, column_of(raw, sub))?);
        }
    }

    Ok(Some(SourceLine {
        line: line_no,
        label,
        mnemonic: Some(mnemonic),
        mode_suffix,
        operands,
        comment,
    }))
}

/// Parses source text, collecting every syntax error.
pub fn parse(text: &str) -> Result<Vec<SourceLine>, Vec<SyntaxError>> {
    let mut lines = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        match parse_line(raw, i + 1) {
            Ok(Some(l)) => lines.push(l),
            Ok(None) => {}
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok(lines)
    } else {
        Err(errors)
    }
}

fn encode_line(
    line: &SourceLine,
    mnemonic: &str,
    table: &OpcodeTable,
    symbols: &BTreeMap<String, u16>,
) -> Result<u32, AsmError> {
    let ln = line.line;
    let bad = |message: String| AsmError::BadOperand { line: ln, message };
    let resolve = |value: &Value| -> Result<u32, AsmError> {
        match value {
            Value::Imm(v) => Ok(*v),
            Value::Label(name) => symbols
                .get(name)
                .map(|v| u32::from(*v))
                .ok_or_else(|| AsmError::UndefinedLabel {
                    line: ln,
                    label: name.clone(),
                }),
        }
    };

    if mnemonic == WORD_DIRECTIVE {
        let [Operand::Value { value, memory: false }] = line.operands.as_slice() else {
            return Err(bad(".WORD takes one plain value".into()));
        };
        let word = resolve(value)?;
        table.decode(word).map_err(|source| AsmError::Isa { line: ln, source })?;
        return Ok(word);
    }

    let info = table
        .by_mnemonic(mnemonic)
        .ok_or_else(|| AsmError::UnknownMnemonic {
            line: ln,
            mnemonic: mnemonic.to_string(),
        })?;
    let kinds: Vec<(usize, OperandKind)> = info
        .operands
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, k)| *k != OperandKind::None)
        .collect();
    if kinds.len() != line.operands.len() {
        return Err(bad(format!(
            "{} takes {} operand(s), got {}",
            info.mnemonic,
            kinds.len(),
            line.operands.len()
        )));
    }

    let mut fields = [0u32; 2];
    let mut memory_address = None;
    for ((slot, kind), operand) in kinds.iter().zip(&line.operands) {
        match (kind, operand) {
            (OperandKind::Reg, Operand::Reg(r)) => fields[*slot] = u32::from(*r),
            (OperandKind::Imm | OperandKind::Addr, Operand::Value { value, memory }) => {
                let v = resolve(value)?;
                if *memory {
                    if *kind != OperandKind::Addr || !info.memory_form {
                        return Err(bad(format!("{} has no memory form", info.mnemonic)));
                    }
                    if v > u32::from(ADDRESS_MAX) {
                        return Err(bad(format!("address {v} exceeds 4095")));
                    }
                    memory_address = Some(v as u16);
                } else {
                    if v > u32::from(FIELD_MAX) {
                        return Err(bad(format!("value {v} exceeds 1023; use `@` for wide addresses")));
                    }
                    fields[*slot] = v;
                }
            }
            (OperandKind::Reg, _) => return Err(bad("expected a register".into())),
            _ => return Err(bad("expected a value, got a register".into())),
        }
    }

    let exec = line.mode_suffix.unwrap_or(ExecMode::Spso);
    let (mode, a, b) = match memory_address {
        Some(addr) => {
            let (a, b) = Instruction::memory_operands(fields[0] as u16, addr);
            (Mode::memory(exec), a, b)
        }
        None => (Mode::new(exec), fields[0] as u16, fields[1] as u16),
    };
    table
        .encode(&Instruction::new(info.code, mode, a, b))
        .map_err(|source| AsmError::Isa { line: ln, source })
}

/// Two-pass assembly: collect labels, then encode.
pub fn assemble(lines: &[SourceLine], table: &OpcodeTable) -> Result<Program, AsmError> {
    let mut symbols = BTreeMap::new();
    let mut index = 0usize;
    for line in lines {
        if let Some(label) = &line.label {
            if symbols.insert(label.clone(), index as u16).is_some() {
                return Err(AsmError::DuplicateLabel {
                    line: line.line,
                    label: label.clone(),
                });
            }
        }
        if line.mnemonic.is_some() {
            index += 1;
        }
    }
    if index > MEMORY_WORDS {
        return Err(AsmError::ProgramTooLarge(index));
    }

    let mut words = Vec::with_capacity(index);
    let mut source_map = Vec::with_capacity(index);
    for line in lines {
        if let Some(m) = &line.mnemonic {
            words.push(encode_line(line, m, table, &symbols)?);
            source_map.push(line.line);
        }
    }
    // Labels trailing the last instruction point one past the end.
    symbols.retain(|_, v| (*v as usize) < words.len());
    Ok(Program {
        words,
        symbols,
        source_map,
    })
}

/// Parse and assemble, collecting all syntax errors or the first
/// assembly error.
pub fn assemble_source(text: &str, table: &OpcodeTable) -> Result<Program, Vec<AsmError>> {
    let lines = parse(text).map_err(|errs| errs.into_iter().map(AsmError::from).collect::<Vec<_>>())?;
    assemble(&lines, table).map_err(|e| vec![e])
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("word {index} (0x{word:08X}): {source}")]
pub struct DisasmError {
    pub index: usize,
    pub word: u32,
    pub source: IsaError,
}

/// Formats one decoded instruction in canonical form.
pub fn format_instruction(instr: &Instruction, table: &OpcodeTable) -> Option<String> {
    let info = table.get(instr.opcode)?;
    if !instr.is_canonical(table) {
        return None;
    }
    let mut s = String::from(info.mnemonic);
    if instr.mode.exec != ExecMode::Spso {
        s.push('.');
        s.push_str(instr.mode.exec.suffix());
    }
    let mut ops = Vec::new();
    for (slot, kind) in info.operands.iter().enumerate() {
        match kind {
            OperandKind::None => {}
            OperandKind::Reg => {
                let r = if slot == 0 { instr.reg_a() } else { instr.reg_b() };
                ops.push(format!("r{r}"));
            }
            OperandKind::Addr if instr.mode.memory_form => ops.push(format!("@{}", instr.address())),
            OperandKind::Imm | OperandKind::Addr => {
                let v = if slot == 0 { instr.operand_a } else { instr.operand_b };
                ops.push(v.to_string());
            }
        }
    }
    if !ops.is_empty() {
        s.push(' ');
        s.push_str(&ops.join(", "));
    }
    Some(s)
}

pub fn disassemble(program: &Program, table: &OpcodeTable) -> Result<String, DisasmError> {
    let mut out = String::new();
    for (index, &word) in program.words.iter().enumerate() {
        let instr = table.decode(word).map_err(|source| DisasmError { index, word, source })?;
        match format_instruction(&instr, table) {
            Some(text) => out.push_str(&text),
            None => out.push_str(&format!("{WORD_DIRECTIVE} 0x{word:08X}")),
        }
        out.push('\n');
    }
    Ok(out)
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "r{r}"),
            Operand::Value { value, memory } => {
                if *memory {
                    f.write_str("@")?;
                }
                match value {
                    Value::Imm(v) => write!(f, "{v}"),
                    Value::Label(l) => f.write_str(l),
                }
            }
        }
    }
}
