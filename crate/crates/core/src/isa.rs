//! Instruction set of the taint VM.
//!
//! The opcode classes line up with the instruction categories a taint
//! tracker cares about: data movement, binary arithmetic, unary
//! arithmetic, control transfer, and intrinsic library calls
//! (copy/set/alloc/format/input) that are handled as single events
//! instead of being traced through their bodies.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of architectural registers that carry a taint tag.
pub const NUM_REGS: usize = 10;

/// A register id: `r0`..`r7`, `fp` (8) or `sp` (9).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(u8);

impl Reg {
    pub const FP: Reg = Reg(8);
    pub const SP: Reg = Reg(9);

    pub fn new(index: u8) -> Option<Reg> {
        (usize::from(index) < NUM_REGS).then_some(Reg(index))
    }

    /// General-purpose register `rN`. Panics if `n > 7`.
    pub fn gp(n: u8) -> Reg {
        assert!(n < 8, "r{n} is not a general-purpose register");
        Reg(n)
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn all() -> impl Iterator<Item = Reg> {
        (0..NUM_REGS as u8).map(Reg)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            8 => f.write_str("fp"),
            9 => f.write_str("sp"),
            n => write!(f, "r{n}"),
        }
    }
}

impl FromStr for Reg {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fp" => Ok(Reg::FP),
            "sp" => Ok(Reg::SP),
            _ => {
                let n: u8 = s.strip_prefix('r').ok_or(())?.parse().map_err(|_| ())?;
                if n < 8 && s.len() == 2 {
                    Ok(Reg(n))
                } else {
                    Err(())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Opcode {
    Mov,
    Load,
    Store,
    Push,
    Pop,
    Add,
    Sub,
    Xor,
    Inc,
    Dec,
    Cmp,
    Jmp,
    Jz,
    Jnz,
    Call,
    Ret,
    Syscall,
    Memcpy,
    Strcpy,
    Memset,
    Malloc,
    Free,
    Printf,
    Readinput,
    Halt,
}

impl Opcode {
    pub const ALL: [Opcode; 25] = [
        Opcode::Mov,
        Opcode::Load,
        Opcode::Store,
        Opcode::Push,
        Opcode::Pop,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Xor,
        Opcode::Inc,
        Opcode::Dec,
        Opcode::Cmp,
        Opcode::Jmp,
        Opcode::Jz,
        Opcode::Jnz,
        Opcode::Call,
        Opcode::Ret,
        Opcode::Syscall,
        Opcode::Memcpy,
        Opcode::Strcpy,
        Opcode::Memset,
        Opcode::Malloc,
        Opcode::Free,
        Opcode::Printf,
        Opcode::Readinput,
        Opcode::Halt,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Mov => "MOV",
            Opcode::Load => "LOAD",
            Opcode::Store => "STORE",
            Opcode::Push => "PUSH",
            Opcode::Pop => "POP",
            Opcode::Add => "ADD",
            Opcode::Sub => "SUB",
            Opcode::Xor => "XOR",
            Opcode::Inc => "INC",
            Opcode::Dec => "DEC",
            Opcode::Cmp => "CMP",
            Opcode::Jmp => "JMP",
            Opcode::Jz => "JZ",
            Opcode::Jnz => "JNZ",
            Opcode::Call => "CALL",
            Opcode::Ret => "RET",
            Opcode::Syscall => "SYSCALL",
            Opcode::Memcpy => "MEMCPY",
            Opcode::Strcpy => "STRCPY",
            Opcode::Memset => "MEMSET",
            Opcode::Malloc => "MALLOC",
            Opcode::Free => "FREE",
            Opcode::Printf => "PRINTF",
            Opcode::Readinput => "READINPUT",
            Opcode::Halt => "HALT",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        let upper = s.to_ascii_uppercase();
        Opcode::ALL.into_iter().find(|op| op.mnemonic() == upper)
    }

    /// Operand shapes accepted by this opcode, one entry per position.
    /// Positions past `required` are optional.
    pub fn signature(self) -> Signature {
        use OperandKinds as K;
        const REG: K = K::REG;
        const RI: K = K::REG.union(K::IMM);
        const RIM: K = K::REG.union(K::IMM).union(K::MEM);
        const IMM: K = K::IMM;
        const MEM: K = K::MEM;
        let (required, kinds): (usize, &'static [K]) = match self {
            Opcode::Mov => (2, &[REG, RI]),
            Opcode::Load => (2, &[REG, MEM]),
            Opcode::Store => (2, &[MEM, RI]),
            Opcode::Push => (1, &[RI]),
            Opcode::Pop => (1, &[REG]),
            Opcode::Add | Opcode::Sub | Opcode::Xor | Opcode::Cmp => (2, &[REG, RIM]),
            Opcode::Inc | Opcode::Dec => (1, &[REG]),
            Opcode::Jmp | Opcode::Call => (1, &[RIM]),
            Opcode::Jz | Opcode::Jnz => (1, &[IMM]),
            Opcode::Ret | Opcode::Syscall | Opcode::Halt => (0, &[]),
            Opcode::Memcpy | Opcode::Memset => (3, &[RI, RI, RI]),
            Opcode::Strcpy => (2, &[RI, RI]),
            Opcode::Malloc => (2, &[REG, RI]),
            Opcode::Free => (1, &[RI]),
            Opcode::Printf => (1, &[RI, RI]),
            Opcode::Readinput => (3, &[RI, RI, IMM]),
        };
        Signature { required, kinds }
    }

    /// Whether a `.b` (one byte) width suffix is accepted.
    pub fn takes_width(self) -> bool {
        matches!(self, Opcode::Load | Opcode::Store)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// Bit set of operand kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OperandKinds(u8);

impl OperandKinds {
    pub const REG: OperandKinds = OperandKinds(1);
    pub const IMM: OperandKinds = OperandKinds(2);
    pub const MEM: OperandKinds = OperandKinds(4);

    pub const fn union(self, other: OperandKinds) -> OperandKinds {
        OperandKinds(self.0 | other.0)
    }

    pub fn accepts(self, operand: &Operand) -> bool {
        let bit = match operand {
            Operand::Reg(_) => Self::REG,
            Operand::Imm(_) => Self::IMM,
            Operand::Mem(_) => Self::MEM,
        };
        self.0 & bit.0 != 0
    }

    pub fn describe(self) -> String {
        let mut parts = Vec::new();
        if self.0 & Self::REG.0 != 0 {
            parts.push("register");
        }
        if self.0 & Self::IMM.0 != 0 {
            parts.push("immediate");
        }
        if self.0 & Self::MEM.0 != 0 {
            parts.push("memory");
        }
        parts.join(" or ")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Signature {
    pub required: usize,
    pub kinds: &'static [OperandKinds],
}

impl Signature {
    pub fn check(&self, operands: &[Operand]) -> Result<(), String> {
        if operands.len() < self.required || operands.len() > self.kinds.len() {
            return Err(if self.required == self.kinds.len() {
                format!("expected {} operand(s), found {}", self.required, operands.len())
            } else {
                format!("expected {} to {} operands, found {}", self.required, self.kinds.len(), operands.len())
            });
        }
        for (i, (operand, kinds)) in operands.iter().zip(self.kinds).enumerate() {
            if !kinds.accepts(operand) {
                return Err(format!("operand {} must be {}", i + 1, kinds.describe()));
            }
        }
        Ok(())
    }
}

/// Memory operand: `disp + base + index*scale`.
///
/// `[0x1000]` is a direct address, `[fp-8]` is fp-relative, `[r1+4]` is
/// register-indirect with displacement, and `[0x2000+r3*4]` carries an
/// index register (the array-lookup form that propagates index taint).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemOperand {
    pub base: Option<Reg>,
    pub index: Option<Reg>,
    pub scale: u8,
    pub disp: i32,
}

impl MemOperand {
    pub fn direct(addr: u32) -> Self {
        MemOperand { base: None, index: None, scale: 1, disp: addr as i32 }
    }

    pub fn fp_rel(offset: i32) -> Self {
        MemOperand { base: Some(Reg::FP), index: None, scale: 1, disp: offset }
    }

    pub fn based(base: Reg, disp: i32) -> Self {
        MemOperand { base: Some(base), index: None, scale: 1, disp }
    }

    pub fn indexed(disp: u32, index: Reg, scale: u8) -> Self {
        MemOperand { base: None, index: Some(index), scale, disp: disp as i32 }
    }
}

impl fmt::Display for MemOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        let mut first = true;
        if let Some(base) = self.base {
            write!(f, "{base}")?;
            first = false;
        }
        if let Some(index) = self.index {
            if !first {
                f.write_str("+")?;
            }
            write!(f, "{index}")?;
            if self.scale != 1 {
                write!(f, "*{}", self.scale)?;
            }
            first = false;
        }
        if first {
            write!(f, "{:#010x}", self.disp as u32)?;
        } else if self.disp < 0 {
            write!(f, "-{}", self.disp.unsigned_abs())?;
        } else if self.disp > 0 {
            write!(f, "+{}", self.disp)?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Imm(u32),
    Mem(MemOperand),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(v) => write!(f, "{v:#x}"),
            Operand::Mem(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub opcode: Opcode,
    /// Access width in bytes for LOAD/STORE (1 or 4); 4 elsewhere.
    pub width: u8,
    pub operands: Vec<Operand>,
}

impl Instruction {
    /// Builds an instruction, validating the operand shapes.
    pub fn new(opcode: Opcode, operands: Vec<Operand>) -> Result<Self, String> {
        opcode.signature().check(&operands)?;
        Ok(Instruction { opcode, width: 4, operands })
    }

    pub fn with_width(mut self, width: u8) -> Result<Self, String> {
        if width != 4 && !(width == 1 && self.opcode.takes_width()) {
            return Err(format!("{} does not take a {width}-byte width", self.opcode));
        }
        self.width = width;
        Ok(self)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.opcode.mnemonic())?;
        if self.width == 1 {
            f.write_str(".b")?;
        }
        for (i, op) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

/// Where a READINPUT line comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Stdin,
    Argv,
    Env,
    Net,
    File,
}

impl SourceKind {
    pub const ALL: [SourceKind; 5] =
        [SourceKind::Stdin, SourceKind::Argv, SourceKind::Env, SourceKind::Net, SourceKind::File];

    pub fn name(self) -> &'static str {
        match self {
            SourceKind::Stdin => "stdin",
            SourceKind::Argv => "argv",
            SourceKind::Env => "env",
            SourceKind::Net => "net",
            SourceKind::File => "file",
        }
    }

    pub fn from_name(s: &str) -> Option<SourceKind> {
        SourceKind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<SourceKind> {
        SourceKind::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
