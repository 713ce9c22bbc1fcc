//! Assembler for the VM's textual program format.
//!
//! ```text
//! ; comment to end of line
//! entry main                      ; optional, defaults to `main`
//! rodata 0x00000100 "%s\n"        ; NUL-terminated string in read-only data
//! data   0x00001000 "hello"       ; NUL-terminated string in globals
//! data   0x00001010 word 0x1234   ; little-endian 32-bit word in globals
//!
//! fn main {
//!     MOV r1, 0x1000
//! loop:
//!     LOAD.b r2, [r1+0]
//!     CMP r2, 0
//!     JNZ loop
//!     CALL helper
//!     HALT
//! }
//! ```
//!
//! Instructions are whitespace separated (newlines are not significant);
//! operands are separated by commas, so `fn main { MOV r0, 0 HALT }` is a
//! valid program. Labels are local to their function. A bare identifier
//! operand of a branch resolves to a label of the enclosing function, then
//! to a function name; `@name` yields the same code address as an
//! immediate. The third READINPUT operand is a source keyword
//! (`stdin`, `argv`, `env`, `net`, `file`).

use std::collections::HashMap;

use thiserror::Error;

use crate::isa::{Instruction, MemOperand, Opcode, Operand, Reg, SourceKind};
use crate::layout::{Layout, GLOBALS_BASE, HEAP_BASE};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    /// Index of the first instruction.
    pub entry: u32,
    /// One past the last instruction.
    pub end: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSegment {
    pub addr: u32,
    pub bytes: Vec<u8>,
    pub read_only: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub functions: Vec<Function>,
    pub instructions: Vec<Instruction>,
    pub data: Vec<DataSegment>,
    pub entry: String,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    /// Function whose entry point is exactly `pc`.
    pub fn function_at_entry(&self, pc: u32) -> Option<usize> {
        self.functions.iter().position(|f| f.entry == pc)
    }

    /// Builds a single-function program without going through text.
    pub fn from_instructions(name: &str, instructions: Vec<Instruction>) -> Program {
        Program {
            functions: vec![Function { name: name.to_string(), entry: 0, end: instructions.len() as u32 }],
            instructions,
            data: Vec::new(),
            entry: name.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{col}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub col: usize,
    pub kind: AsmErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("duplicate function `{0}`")]
    DuplicateFunction(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("{0}: {1}")]
    BadOperands(String, String),
    #[error("data segment at {0:#010x} ({1} bytes) is outside its region")]
    DataOutOfRange(u32, usize),
    #[error("entry function `{0}` is not defined")]
    MissingEntry(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(i64),
    Str(Vec<u8>),
    At(String),
    Punct(char),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn err<T>(line: usize, col: usize, kind: AsmErrorKind) -> Result<T, AsmError> {
    Err(AsmError { line, col, kind })
}

fn syntax<T>(line: usize, col: usize, msg: impl Into<String>) -> Result<T, AsmError> {
    err(line, col, AsmErrorKind::Syntax(msg.into()))
}

fn tokenize(src: &str) -> Result<Vec<Token>, AsmError> {
    let mut tokens = Vec::new();
    for (lineno, line) in src.lines().enumerate() {
        let line_no = lineno + 1;
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            if c == ';' {
                break;
            }
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c.is_ascii_alphabetic() || c == '_' || c == '@' {
                let start = if c == '@' { i + 1 } else { i };
                let mut j = start;
                while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_' || chars[j] == '.') {
                    j += 1;
                }
                let word: String = chars[start..j].iter().collect();
                if word.is_empty() {
                    return syntax(line_no, col, "expected a name after `@`");
                }
                let tok = if c == '@' { Tok::At(word) } else { Tok::Ident(word) };
                tokens.push(Token { tok, line: line_no, col });
                i = j;
                continue;
            }
            if c.is_ascii_digit() {
                let mut j = i;
                while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
                    j += 1;
                }
                let text: String = chars[i..j].iter().filter(|&&c| c != '_').collect();
                let value = if let Some(hex) = text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
                    i64::from_str_radix(hex, 16)
                } else {
                    text.parse::<i64>()
                };
                match value {
                    Ok(v) => tokens.push(Token { tok: Tok::Number(v), line: line_no, col }),
                    Err(_) => return syntax(line_no, col, format!("bad number `{text}`")),
                }
                i = j;
                continue;
            }
            if c == '"' {
                let mut bytes = Vec::new();
                let mut j = i + 1;
                loop {
                    let Some(&ch) = chars.get(j) else {
                        return syntax(line_no, col, "unterminated string");
                    };
                    j += 1;
                    match ch {
                        '"' => break,
                        '\\' => {
                            let Some(&esc) = chars.get(j) else {
                                return syntax(line_no, col, "unterminated escape");
                            };
                            j += 1;
                            match esc {
                                'n' => bytes.push(b'\n'),
                                't' => bytes.push(b'\t'),
                                '0' => bytes.push(0),
                                '\\' => bytes.push(b'\\'),
                                '"' => bytes.push(b'"'),
                                'x' => {
                                    let hex: String = chars.get(j..j + 2).unwrap_or(&[]).iter().collect();
                                    let Ok(b) = u8::from_str_radix(&hex, 16) else {
                                        return syntax(line_no, j, "bad \\x escape");
                                    };
                                    bytes.push(b);
                                    j += 2;
                                }
                                other => return syntax(line_no, j, format!("unknown escape `\\{other}`")),
                            }
                        }
                        other => {
                            let mut buf = [0u8; 4];
                            bytes.extend_from_slice(other.encode_utf8(&mut buf).as_bytes());
                        }
                    }
                }
                tokens.push(Token { tok: Tok::Str(bytes), line: line_no, col });
                i = j;
                continue;
            }
            if "{}[],:+-*".contains(c) {
                tokens.push(Token { tok: Tok::Punct(c), line: line_no, col });
                i += 1;
                continue;
            }
            return syntax(line_no, col, format!("unexpected character `{c}`"));
        }
    }
    Ok(tokens)
}

/// Operand whose value needs the label table.
#[derive(Debug, Clone)]
enum RawOperand {
    Ready(Operand),
    CodeRef { name: String, line: usize, col: usize },
}

struct PendingInstr {
    opcode: Opcode,
    width: u8,
    operands: Vec<RawOperand>,
    function: usize,
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn eof_pos(&self) -> (usize, usize) {
        self.tokens.last().map(|t| (t.line, t.col)).unwrap_or((1, 1))
    }

    fn expect_punct(&mut self, p: char) -> Result<Token, AsmError> {
        match self.next() {
            Some(t) if t.tok == Tok::Punct(p) => Ok(t),
            Some(t) => syntax(t.line, t.col, format!("expected `{p}`")),
            None => {
                let (l, c) = self.eof_pos();
                syntax(l, c, format!("expected `{p}` before end of input"))
            }
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<(String, usize, usize), AsmError> {
        match self.next() {
            Some(Token { tok: Tok::Ident(s), line, col }) => Ok((s, line, col)),
            Some(t) => syntax(t.line, t.col, format!("expected {what}")),
            None => {
                let (l, c) = self.eof_pos();
                syntax(l, c, format!("expected {what} before end of input"))
            }
        }
    }

    fn expect_number(&mut self, what: &str) -> Result<(i64, usize, usize), AsmError> {
        let negative = matches!(self.peek(), Some(Token { tok: Tok::Punct('-'), .. }));
        if negative {
            self.pos += 1;
        }
        match self.next() {
            Some(Token { tok: Tok::Number(n), line, col }) => Ok((if negative { -n } else { n }, line, col)),
            Some(t) => syntax(t.line, t.col, format!("expected {what}")),
            None => {
                let (l, c) = self.eof_pos();
                syntax(l, c, format!("expected {what} before end of input"))
            }
        }
    }
}

fn to_u32(value: i64, line: usize, col: usize) -> Result<u32, AsmError> {
    if (-(1i64 << 31)..(1i64 << 32)).contains(&value) {
        Ok(value as u32)
    } else {
        syntax(line, col, format!("value {value} does not fit in 32 bits"))
    }
}

fn parse_mem(p: &mut Parser, open: &Token) -> Result<MemOperand, AsmError> {
    let mut base = None;
    let mut index = None;
    let mut scale = 1u8;
    let mut disp: i64 = 0;
    let mut sign = 1i64;
    let mut expect_term = true;
    loop {
        let Some(t) = p.next() else {
            return syntax(open.line, open.col, "unterminated memory operand");
        };
        match (&t.tok, expect_term) {
            (Tok::Punct(']'), false) => break,
            (Tok::Punct('+'), false) => {
                sign = 1;
                expect_term = true;
            }
            (Tok::Punct('-'), false) => {
                sign = -1;
                expect_term = true;
            }
            (Tok::Number(n), true) => {
                disp += sign * n;
                expect_term = false;
            }
            (Tok::Ident(name), true) => {
                let Ok(reg) = name.parse::<Reg>() else {
                    return syntax(t.line, t.col, format!("`{name}` is not a register"));
                };
                if sign < 0 {
                    return syntax(t.line, t.col, "registers cannot be subtracted");
                }
                let scaled = matches!(p.peek(), Some(Token { tok: Tok::Punct('*'), .. }));
                if scaled {
                    p.pos += 1;
                    let (s, l, c) = p.expect_number("a scale")?;
                    if ![1, 2, 4, 8].contains(&s) {
                        return syntax(l, c, "scale must be 1, 2, 4 or 8");
                    }
                    scale = s as u8;
                }
                if !scaled && base.is_none() {
                    base = Some(reg);
                } else if index.is_none() {
                    index = Some(reg);
                } else {
                    return syntax(t.line, t.col, "too many registers in memory operand");
                }
                expect_term = false;
            }
            _ => return syntax(t.line, t.col, "malformed memory operand"),
        }
    }
    if expect_term {
        return syntax(open.line, open.col, "empty memory operand");
    }
    let disp = if base.is_none() && index.is_none() {
        to_u32(disp, open.line, open.col)? as i32
    } else {
        i32::try_from(disp).or_else(|_| to_u32(disp, open.line, open.col).map(|v| v as i32))?
    };
    Ok(MemOperand { base, index, scale, disp })
}

fn parse_operand(p: &mut Parser, opcode: Opcode, position: usize) -> Result<RawOperand, AsmError> {
    let Some(t) = p.peek().cloned() else {
        let (l, c) = p.eof_pos();
        return syntax(l, c, "expected an operand");
    };
    match t.tok {
        Tok::Punct('[') => {
            p.pos += 1;
            Ok(RawOperand::Ready(Operand::Mem(parse_mem(p, &t)?)))
        }
        Tok::Number(_) | Tok::Punct('-') => {
            let (n, l, c) = p.expect_number("a number")?;
            Ok(RawOperand::Ready(Operand::Imm(to_u32(n, l, c)?)))
        }
        Tok::At(name) => {
            p.pos += 1;
            Ok(RawOperand::CodeRef { name, line: t.line, col: t.col })
        }
        Tok::Ident(name) => {
            p.pos += 1;
            if let Ok(reg) = name.parse::<Reg>() {
                return Ok(RawOperand::Ready(Operand::Reg(reg)));
            }
            if opcode == Opcode::Readinput && position == 2 {
                return match SourceKind::from_name(&name) {
                    Some(kind) => Ok(RawOperand::Ready(Operand::Imm(kind.code()))),
                    None => syntax(t.line, t.col, format!("unknown input source `{name}`")),
                };
            }
            if matches!(opcode, Opcode::Jmp | Opcode::Jz | Opcode::Jnz | Opcode::Call) {
                return Ok(RawOperand::CodeRef { name, line: t.line, col: t.col });
            }
            syntax(t.line, t.col, format!("unexpected identifier `{name}`"))
        }
        _ => syntax(t.line, t.col, "expected an operand"),
    }
}

/// Assembles program text. Same text always yields the same program.
pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut p = Parser { tokens: tokenize(source)?, pos: 0 };
    let layout = Layout::default();
    let mut functions: Vec<Function> = Vec::new();
    let mut labels: Vec<HashMap<String, u32>> = Vec::new();
    let mut pending: Vec<PendingInstr> = Vec::new();
    let mut data = Vec::new();
    let mut entry: Option<(String, usize, usize)> = None;

    while let Some(t) = p.next() {
        let Tok::Ident(word) = &t.tok else {
            return syntax(t.line, t.col, "expected `fn`, `data`, `rodata` or `entry`");
        };
        match word.as_str() {
            "entry" => {
                entry = Some(p.expect_ident("a function name")?);
            }
            "data" | "rodata" => {
                let read_only = word == "rodata";
                let (addr, l, c) = p.expect_number("an address")?;
                let addr = to_u32(addr, l, c)?;
                let bytes = match p.next() {
                    Some(Token { tok: Tok::Str(mut s), .. }) => {
                        s.push(0);
                        s
                    }
                    Some(Token { tok: Tok::Ident(kw), line, col }) if kw == "word" && !read_only => {
                        let (v, l2, c2) = p.expect_number("a word value")?;
                        let _ = (line, col);
                        to_u32(v, l2, c2)?.to_le_bytes().to_vec()
                    }
                    Some(other) => return syntax(other.line, other.col, "expected a string or `word`"),
                    None => return syntax(l, c, "expected data contents"),
                };
                let end = u64::from(addr) + bytes.len() as u64;
                let fits = if read_only {
                    end <= u64::from(GLOBALS_BASE)
                } else {
                    addr >= GLOBALS_BASE && end <= u64::from(HEAP_BASE) && layout.in_bounds(addr, bytes.len() as u32)
                };
                if !fits {
                    return err(t.line, t.col, AsmErrorKind::DataOutOfRange(addr, bytes.len()));
                }
                data.push(DataSegment { addr, bytes, read_only });
            }
            "fn" => {
                let (name, l, c) = p.expect_ident("a function name")?;
                if functions.iter().any(|f| f.name == name) {
                    return err(l, c, AsmErrorKind::DuplicateFunction(name));
                }
                p.expect_punct('{')?;
                let fn_index = functions.len();
                let entry_pc = pending.len() as u32;
                let mut local_labels = HashMap::new();
                loop {
                    let Some(t) = p.next() else {
                        let (l, c) = p.eof_pos();
                        return syntax(l, c, format!("missing `}}` for function `{name}`"));
                    };
                    match t.tok {
                        Tok::Punct('}') => break,
                        Tok::Ident(word) => {
                            if matches!(p.peek(), Some(Token { tok: Tok::Punct(':'), .. })) {
                                p.pos += 1;
                                if local_labels.insert(word.clone(), pending.len() as u32).is_some() {
                                    return err(t.line, t.col, AsmErrorKind::DuplicateLabel(word));
                                }
                                continue;
                            }
                            let (mnemonic, width) = match word.split_once('.') {
                                Some((m, "b")) | Some((m, "B")) => (m, 1u8),
                                Some(_) => return err(t.line, t.col, AsmErrorKind::UnknownMnemonic(word.clone())),
                                None => (word.as_str(), 4u8),
                            };
                            let Some(opcode) = Opcode::from_mnemonic(mnemonic) else {
                                return err(t.line, t.col, AsmErrorKind::UnknownMnemonic(word.clone()));
                            };
                            if width == 1 && !opcode.takes_width() {
                                return err(
                                    t.line,
                                    t.col,
                                    AsmErrorKind::BadOperands(word.clone(), "no byte-width form".into()),
                                );
                            }
                            let sig = opcode.signature();
                            let mut operands = Vec::new();
                            if !sig.kinds.is_empty() && starts_operand(p.peek(), opcode) {
                                operands.push(parse_operand(&mut p, opcode, 0)?);
                                while matches!(p.peek(), Some(Token { tok: Tok::Punct(','), .. })) {
                                    p.pos += 1;
                                    let pos = operands.len();
                                    operands.push(parse_operand(&mut p, opcode, pos)?);
                                }
                            }
                            // Shape check with code refs standing in as immediates.
                            let shaped: Vec<Operand> = operands
                                .iter()
                                .map(|o| match o {
                                    RawOperand::Ready(op) => *op,
                                    RawOperand::CodeRef { .. } => Operand::Imm(0),
                                })
                                .collect();
                            if let Err(msg) = sig.check(&shaped) {
                                return err(t.line, t.col, AsmErrorKind::BadOperands(opcode.to_string(), msg));
                            }
                            pending.push(PendingInstr { opcode, width, operands, function: fn_index });
                        }
                        _ => return syntax(t.line, t.col, "expected an instruction or label"),
                    }
                }
                functions.push(Function { name, entry: entry_pc, end: pending.len() as u32 });
                labels.push(local_labels);
            }
            other => return syntax(t.line, t.col, format!("unexpected `{other}` at top level")),
        }
    }

    let fn_entries: HashMap<&str, u32> = functions.iter().map(|f| (f.name.as_str(), f.entry)).collect();
    let mut instructions = Vec::with_capacity(pending.len());
    for instr in pending {
        let mut operands = Vec::with_capacity(instr.operands.len());
        for raw in instr.operands {
            operands.push(match raw {
                RawOperand::Ready(op) => op,
                RawOperand::CodeRef { name, line, col } => {
                    let target =
                        labels[instr.function].get(&name).copied().or_else(|| fn_entries.get(name.as_str()).copied());
                    match target {
                        Some(pc) => Operand::Imm(pc),
                        None => return err(line, col, AsmErrorKind::UndefinedLabel(name)),
                    }
                }
            });
        }
        instructions.push(Instruction { opcode: instr.opcode, width: instr.width, operands });
    }

    let entry_name = match entry {
        Some((name, l, c)) => {
            if !fn_entries.contains_key(name.as_str()) {
                return err(l, c, AsmErrorKind::MissingEntry(name));
            }
            name
        }
        None => {
            if !fn_entries.contains_key("main") {
                let (l, c) = p.eof_pos();
                return err(l, c, AsmErrorKind::MissingEntry("main".into()));
            }
            "main".to_string()
        }
    };

    Ok(Program { functions, instructions, data, entry: entry_name })
}

/// Whether the next token begins an operand for `opcode` (as opposed to
/// the next instruction or the closing brace).
fn starts_operand(tok: Option<&Token>, opcode: Opcode) -> bool {
    match tok.map(|t| &t.tok) {
        Some(Tok::Punct('[')) | Some(Tok::Number(_)) | Some(Tok::Punct('-')) | Some(Tok::At(_)) => true,
        Some(Tok::Ident(name)) => {
            if name.parse::<Reg>().is_ok() {
                return true;
            }
            // A mnemonic starts the next instruction; anything else is a
            // branch target name.
            let mnemonic = name.split('.').next().unwrap_or(name);
            Opcode::from_mnemonic(mnemonic).is_none()
                && matches!(opcode, Opcode::Jmp | Opcode::Jz | Opcode::Jnz | Opcode::Call)
        }
        _ => false,
    }
}
