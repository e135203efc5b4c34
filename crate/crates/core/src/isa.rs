//! Instruction-set architecture of the MPU.
//!
//! One instruction is a 32-bit word:
//!
//! ```text
//!  31      24 23  20 19        10 9          0
//! +----------+------+------------+------------+
//! |  opcode  | mode | operand_a  | operand_b  |
//! +----------+------+------------+------------+
//! ```
//!
//! The 4-bit mode field carries the execution mode in bits 0..=1 and the
//! memory-form flag in bit 2. Bit 3 is reserved and must be zero. In memory
//! form the low two bits of `operand_a` extend `operand_b` to a 12-bit
//! object-memory address, and the register index (if any) moves to bits 2..=5
//! of `operand_a`.
//!
//! The opcode table is a proposal: nothing outside this crate prescribes the
//! concrete codes, only the six instruction classes and the four execution
//! modes.

use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

/// Number of addressable object-memory (and program) words.
pub const MEMORY_WORDS: usize = 4096;
/// Number of object registers.
pub const REGISTER_COUNT: usize = 16;
/// Widest value an operand field holds.
pub const FIELD_MAX: u16 = 0x3FF;
/// Widest memory-form address.
pub const ADDRESS_MAX: u16 = 0xFFF;

pub const HALT: u8 = 0x00;
pub const LOADO: u8 = 0x01;
pub const STOREO: u8 = 0x02;
pub const GETATTR: u8 = 0x03;
pub const SETATTR: u8 = 0x04;
pub const KFILTER: u8 = 0x05;
pub const NOPO: u8 = 0x06;
pub const MERGE: u8 = 0x20;
pub const COMMON: u8 = 0x21;
pub const OVERLAP: u8 = 0x22;
pub const MATCH: u8 = 0x23;
pub const OMFETCH: u8 = 0x40;
pub const OMSTORE: u8 = 0x41;
pub const JUMP: u8 = 0x42;
pub const NETGET: u8 = 0x60;
pub const NETPUT: u8 = 0x61;
pub const LINKP: u8 = 0x80;
pub const LINKS: u8 = 0x81;
pub const PRUNE: u8 = 0x82;
pub const GRAFT: u8 = 0x83;
pub const DIAG: u8 = 0xA0;
pub const RXPLAN: u8 = 0xA1;
pub const SAFECHK: u8 = 0xA2;
pub const CONF: u8 = 0xA3;
pub const PREDLOG: u8 = 0xA4;
/// Reserved; never defined so erased memory fails to decode.
pub const ILLEGAL: u8 = 0xFF;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IsaError {
    #[error("undefined opcode 0x{0:02X}")]
    UndefinedOpcode(u8),
    #[error("mode 0x{mode:X} not allowed for opcode 0x{opcode:02X}")]
    ModeNotAllowed { opcode: u8, mode: u8 },
    #[error("operand value {value} does not fit its field")]
    OperandOverflow { value: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InstructionClass {
    SingleObject,
    MultiObject,
    ObjectMemory,
    InternalExternal,
    ObjectRelationship,
    Medical,
}

impl InstructionClass {
    pub const ALL: [InstructionClass; 6] = [
        InstructionClass::SingleObject,
        InstructionClass::MultiObject,
        InstructionClass::ObjectMemory,
        InstructionClass::InternalExternal,
        InstructionClass::ObjectRelationship,
        InstructionClass::Medical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InstructionClass::SingleObject => "SINGLE_OBJECT",
            InstructionClass::MultiObject => "MULTI_OBJECT",
            InstructionClass::ObjectMemory => "OBJECT_MEMORY",
            InstructionClass::InternalExternal => "INTERNAL_EXTERNAL",
            InstructionClass::ObjectRelationship => "OBJECT_RELATIONSHIP",
            InstructionClass::Medical => "MEDICAL",
        }
    }
}

/// Single/multiple process by single/multiple object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExecMode {
    Spso = 0,
    Spmo = 1,
    Mpso = 2,
    Mpmo = 3,
}

impl ExecMode {
    pub const ALL: [ExecMode; 4] = [ExecMode::Spso, ExecMode::Spmo, ExecMode::Mpso, ExecMode::Mpmo];

    pub fn from_bits(bits: u8) -> ExecMode {
        match bits & 0b11 {
            0 => ExecMode::Spso,
            1 => ExecMode::Spmo,
            2 => ExecMode::Mpso,
            _ => ExecMode::Mpmo,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            ExecMode::Spso => "spso",
            ExecMode::Spmo => "spmo",
            ExecMode::Mpso => "mpso",
            ExecMode::Mpmo => "mpmo",
        }
    }

    pub fn from_suffix(s: &str) -> Option<ExecMode> {
        ExecMode::ALL
            .into_iter()
            .find(|m| m.suffix().eq_ignore_ascii_case(s))
    }

    /// True for the modes that fold over an object set.
    pub fn multi_object(self) -> bool {
        matches!(self, ExecMode::Spmo | ExecMode::Mpmo)
    }

    /// True for the modes that expand the opcode's sub-process chain.
    pub fn multi_process(self) -> bool {
        matches!(self, ExecMode::Mpso | ExecMode::Mpmo)
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.suffix())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModeSet(u8);

impl ModeSet {
    pub const SPSO: ModeSet = ModeSet(1);
    pub const ALL: ModeSet = ModeSet(0b1111);
    pub const SINGLE_PROCESS: ModeSet = ModeSet(0b0011);

    pub fn contains(self, mode: ExecMode) -> bool {
        self.0 & (1 << mode as u8) != 0
    }

    pub fn iter(self) -> impl Iterator<Item = ExecMode> {
        ExecMode::ALL.into_iter().filter(move |m| self.contains(*m))
    }
}

/// Contents of the 4-bit mode field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mode {
    pub exec: ExecMode,
    pub memory_form: bool,
}

impl Mode {
    pub const SPSO: Mode = Mode {
        exec: ExecMode::Spso,
        memory_form: false,
    };

    pub fn new(exec: ExecMode) -> Mode {
        Mode {
            exec,
            memory_form: false,
        }
    }

    pub fn memory(exec: ExecMode) -> Mode {
        Mode {
            exec,
            memory_form: true,
        }
    }

    pub fn bits(self) -> u8 {
        self.exec as u8 | (u8::from(self.memory_form) << 2)
    }
}

impl Default for Mode {
    fn default() -> Self {
        Mode::SPSO
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.exec.suffix())?;
        if self.memory_form {
            f.write_str("+m")?;
        }
        Ok(())
    }
}

/// What an operand field means to the assembler and the VM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperandKind {
    /// Field unused, must be zero.
    None,
    /// Object register r0..r15.
    Reg,
    /// 10-bit immediate.
    Imm,
    /// Object-memory address; 12 bits in memory form.
    Addr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpcodeInfo {
    pub code: u8,
    pub mnemonic: &'static str,
    pub class: InstructionClass,
    pub operands: [OperandKind; 2],
    pub modes: ModeSet,
    /// Whether the memory-form flag may be set.
    pub memory_form: bool,
    /// Sub-process chain expanded by the multi-process modes.
    pub chain: &'static [&'static str],
    /// Step confidence in units of 10^-4, for opcodes that do not compute one.
    pub base_confidence: u16,
}

impl OpcodeInfo {
    pub fn arity(&self) -> usize {
        self.operands
            .iter()
            .filter(|k| **k != OperandKind::None)
            .count()
    }

    pub fn allows(&self, mode: Mode) -> bool {
        self.modes.contains(mode.exec) && (!mode.memory_form || self.memory_form)
    }
}

/// Immutable map from opcode to its metadata.
#[derive(Debug, Clone)]
pub struct OpcodeTable {
    entries: Vec<OpcodeInfo>,
    index: [Option<u8>; 256],
}

macro_rules! op {
    ($code:expr, $mn:literal, $class:ident, [$a:ident, $b:ident], $modes:expr, $mem:expr, $chain:expr, $conf:expr) => {
        OpcodeInfo {
            code: $code,
            mnemonic: $mn,
            class: InstructionClass::$class,
            operands: [OperandKind::$a, OperandKind::$b],
            modes: $modes,
            memory_form: $mem,
            chain: $chain,
            base_confidence: $conf,
        }
    };
}

impl OpcodeTable {
    pub fn new(entries: Vec<OpcodeInfo>) -> OpcodeTable {
        let mut index = [None; 256];
        for (i, e) in entries.iter().enumerate() {
            assert!(index[e.code as usize].is_none(), "duplicate code {:#x}", e.code);
            assert!(e.code != ILLEGAL, "0xFF is reserved");
            assert!(
                entries.iter().filter(|o| o.mnemonic == e.mnemonic).count() == 1,
                "duplicate mnemonic {}",
                e.mnemonic
            );
            index[e.code as usize] = Some(i as u8);
        }
        OpcodeTable { entries, index }
    }

    /// The shipped table, built once and shared.
    pub fn standard() -> &'static OpcodeTable {
        static TABLE: OnceLock<OpcodeTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            use ModeSet as M;
            OpcodeTable::new(vec![
                op!(HALT, "HALT", SingleObject, [None, None], M::SPSO, false, &["halt"], 10000),
                op!(LOADO, "LOADO", SingleObject, [Reg, Addr], M::SPSO, true, &["fetch"], 10000),
                op!(STOREO, "STOREO", SingleObject, [Reg, Addr], M::SPSO, true, &["copy"], 10000),
                op!(GETATTR, "GETATTR", SingleObject, [Reg, Imm], M::ALL, false, &["fetch", "read"], 10000),
                op!(SETATTR, "SETATTR", SingleObject, [Reg, Imm], M::ALL, false, &["fetch", "write"], 10000),
                op!(KFILTER, "KFILTER", SingleObject, [Reg, Imm], M::ALL, false, &["score", "select"], 10000),
                op!(NOPO, "NOPO", SingleObject, [None, None], M::SPSO, false, &["nop"], 10000),
                op!(MERGE, "MERGE", MultiObject, [Reg, Reg], M::ALL, false, &["union", "commit"], 10000),
                op!(COMMON, "COMMON", MultiObject, [Reg, Reg], M::ALL, false, &["classify", "count"], 10000),
                op!(OVERLAP, "OVERLAP", MultiObject, [Reg, Reg], M::ALL, false, &["classify", "count"], 10000),
                op!(MATCH, "MATCH", MultiObject, [Reg, Imm], M::ALL, false, &["encode", "scan"], 10000),
                op!(OMFETCH, "OMFETCH", ObjectMemory, [Reg, Addr], M::SPSO, true, &["fetch"], 10000),
                op!(OMSTORE, "OMSTORE", ObjectMemory, [Reg, Addr], M::SPSO, true, &["store"], 10000),
                op!(JUMP, "JUMP", ObjectMemory, [None, Addr], M::SPSO, true, &["jump"], 10000),
                op!(NETGET, "NETGET", InternalExternal, [Reg, Addr], M::SPSO, true, &["request"], 10000),
                op!(NETPUT, "NETPUT", InternalExternal, [Reg, Addr], M::SPSO, true, &["request"], 10000),
                op!(LINKP, "LINKP", ObjectRelationship, [Reg, Reg], M::SINGLE_PROCESS, false, &["link"], 10000),
                op!(LINKS, "LINKS", ObjectRelationship, [Reg, Reg], M::SINGLE_PROCESS, false, &["link"], 10000),
                op!(PRUNE, "PRUNE", ObjectRelationship, [None, Imm], M::SPSO, false, &["prune"], 10000),
                op!(GRAFT, "GRAFT", ObjectRelationship, [Reg, Imm], M::SINGLE_PROCESS, false, &["graft"], 10000),
                op!(DIAG, "DIAG", Medical, [Reg, None], M::ALL, false, &["encode", "scan", "select"], 10000),
                op!(RXPLAN, "RXPLAN", Medical, [Reg, Reg], M::SPSO, false, &["check", "schedule"], 9500),
                op!(SAFECHK, "SAFECHK", Medical, [Reg, Reg], M::SPSO, false, &["check"], 9900),
                op!(CONF, "CONF", Medical, [None, Imm], M::SPSO, false, &["confidence"], 10000),
                op!(PREDLOG, "PREDLOG", Medical, [Imm, Imm], M::SPSO, false, &["log"], 10000),
            ])
        })
    }

    pub fn get(&self, code: u8) -> Option<&OpcodeInfo> {
        self.index[code as usize].map(|i| &self.entries[i as usize])
    }

    pub fn lookup(&self, code: u8) -> Result<&OpcodeInfo, IsaError> {
        self.get(code).ok_or(IsaError::UndefinedOpcode(code))
    }

    /// Case-insensitive mnemonic lookup.
    pub fn by_mnemonic(&self, mnemonic: &str) -> Option<&OpcodeInfo> {
        self.entries
            .iter()
            .find(|e| e.mnemonic.eq_ignore_ascii_case(mnemonic))
    }

    pub fn class_of(&self, code: u8) -> Result<InstructionClass, IsaError> {
        self.lookup(code).map(|e| e.class)
    }

    pub fn iter(&self) -> impl Iterator<Item = &OpcodeInfo> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encode(&self, instr: &Instruction) -> Result<u32, IsaError> {
        let info = self.lookup(instr.opcode)?;
        if !info.allows(instr.mode) {
            return Err(IsaError::ModeNotAllowed {
                opcode: instr.opcode,
                mode: instr.mode.bits(),
            });
        }
        for v in [instr.operand_a, instr.operand_b] {
            if v > FIELD_MAX {
                return Err(IsaError::OperandOverflow { value: v });
            }
        }
        Ok(u32::from(instr.opcode) << 24
            | u32::from(instr.mode.bits()) << 20
            | u32::from(instr.operand_a) << 10
            | u32::from(instr.operand_b))
    }

    pub fn decode(&self, word: u32) -> Result<Instruction, IsaError> {
        let opcode = (word >> 24) as u8;
        let mode_bits = ((word >> 20) & 0xF) as u8;
        let info = self.lookup(opcode)?;
        let mode = Mode {
            exec: ExecMode::from_bits(mode_bits),
            memory_form: mode_bits & 0b100 != 0,
        };
        if mode_bits & 0b1000 != 0 || !info.allows(mode) {
            return Err(IsaError::ModeNotAllowed {
                opcode,
                mode: mode_bits,
            });
        }
        Ok(Instruction {
            opcode,
            mode,
            operand_a: ((word >> 10) & 0x3FF) as u16,
            operand_b: (word & 0x3FF) as u16,
        })
    }

    /// Plain-text reference card listing every opcode.
    pub fn card(&self) -> String {
        let mut out = String::new();
        out.push_str("MPU ISA reference card\n");
        out.push_str("word: opcode[31:24] mode[23:20] operand_a[19:10] operand_b[9:0]\n");
        out.push_str("mode: exec[1:0] (0 spso, 1 spmo, 2 mpso, 3 mpmo), memory-form[2], reserved[3]\n");
        out.push_str("memory form: address = (operand_a & 3) << 10 | operand_b, register = operand_a >> 2\n\n");
        for class in InstructionClass::ALL {
            out.push_str(class.name());
            out.push('\n');
            for e in self.entries.iter().filter(|e| e.class == class) {
                let operands: Vec<&str> = e
                    .operands
                    .iter()
                    .filter_map(|k| match k {
                        OperandKind::None => None,
                        OperandKind::Reg => Some("reg"),
                        OperandKind::Imm => Some("imm"),
                        OperandKind::Addr => Some("addr"),
                    })
                    .collect();
                let modes: Vec<&str> = e.modes.iter().map(ExecMode::suffix).collect();
                out.push_str(&format!(
                    "  0x{:02X} {:<8} {:<10} modes={}{} chain={}\n",
                    e.code,
                    e.mnemonic,
                    if operands.is_empty() {
                        "-".to_string()
                    } else {
                        operands.join(",")
                    },
                    modes.join("|"),
                    if e.memory_form { " +m" } else { "" },
                    e.chain.join(">"),
                ));
            }
        }
        out.push_str("\nreserved: 0x00 HALT (zeroed memory halts), 0xFF ILLEGAL (never defined)\n");
        out
    }
}

/// One decoded instruction word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub opcode: u8,
    pub mode: Mode,
    pub operand_a: u16,
    pub operand_b: u16,
}

impl Instruction {
    pub fn new(opcode: u8, mode: Mode, operand_a: u16, operand_b: u16) -> Instruction {
        Instruction {
            opcode,
            mode,
            operand_a,
            operand_b,
        }
    }

    /// Register index held in operand_a, accounting for memory form.
    pub fn reg_a(&self) -> usize {
        if self.mode.memory_form {
            (self.operand_a >> 2) as usize
        } else {
            self.operand_a as usize
        }
    }

    pub fn reg_b(&self) -> usize {
        self.operand_b as usize
    }

    /// Address carried by operand_b; 12 bits when in memory form.
    pub fn address(&self) -> u16 {
        if self.mode.memory_form {
            ((self.operand_a & 0b11) << 10) | self.operand_b
        } else {
            self.operand_b
        }
    }

    /// Builds a memory-form operand pair from a register index and a 12-bit address.
    pub fn memory_operands(reg: u16, address: u16) -> (u16, u16) {
        ((reg << 2) | (address >> 10), address & FIELD_MAX)
    }

    /// True when no information in the fields would be lost by printing the
    /// instruction in assembly form.
    pub fn is_canonical(&self, table: &OpcodeTable) -> bool {
        let Some(info) = table.get(self.opcode) else {
            return false;
        };
        let [ka, kb] = info.operands;
        let a_ok = if self.mode.memory_form {
            let reg = self.operand_a >> 2;
            match ka {
                OperandKind::Reg => reg < REGISTER_COUNT as u16,
                _ => reg == 0,
            }
        } else {
            match ka {
                OperandKind::None => self.operand_a == 0,
                OperandKind::Reg => self.operand_a < REGISTER_COUNT as u16,
                OperandKind::Imm | OperandKind::Addr => true,
            }
        };
        let b_ok = match kb {
            OperandKind::None => self.operand_b == 0,
            OperandKind::Reg => self.operand_b < REGISTER_COUNT as u16,
            OperandKind::Imm | OperandKind::Addr => true,
        };
        a_ok && b_ok
    }
}

pub fn encode(instr: &Instruction) -> Result<u32, IsaError> {
    OpcodeTable::standard().encode(instr)
}

pub fn decode(word: u32) -> Result<Instruction, IsaError> {
    OpcodeTable::standard().decode(word)
}

pub fn class_of(opcode: u8) -> Result<InstructionClass, IsaError> {
    OpcodeTable::standard().class_of(opcode)
}
