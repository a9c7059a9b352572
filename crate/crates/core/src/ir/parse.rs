//! Text format:
//!
//! ```text
//! global g4096 size 8
//! fn main {
//!   L1: mov r0, g4096
//!   L2: mov [r0+8], 1
//!       halt
//! }
//! ```
//!
//! Comments start with `;` or `//`. `gN` is the immediate N written in
//! global notation, `[gN]` is memory at global address N. Unlabeled
//! instructions receive the label `_K` where K is their index.

use std::fmt;

use super::{
    ptwrite_label, Function, Global, Instruction, Op, Operand, Program, Register, ValidationError, PTW_LABEL_PREFIX,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.col, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseErrorKind {
    #[error("{0}")]
    Syntax(String),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(i64),
    Punct(char),
    Newline,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> ParseError {
    ParseError {
        line,
        col,
        kind: ParseErrorKind::Syntax(msg.into()),
    }
}

fn parse_number(text: &str) -> Option<i64> {
    if let Some(hex) = text.strip_prefix("0x") {
        u64::from_str_radix(hex, 16).ok().map(|v| v as i64)
    } else {
        text.parse::<i64>().ok()
    }
}

fn tokenize(src: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    for (ln, line) in src.lines().enumerate() {
        let line_no = ln + 1;
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            if c.is_whitespace() {
                i += 1;
            } else if c == ';' || (c == '/' && chars.get(i + 1) == Some(&'/')) {
                break;
            } else if c.is_ascii_digit() {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let v =
                    parse_number(&text).ok_or_else(|| syntax(line_no, col, format!("malformed number `{text}`")))?;
                out.push(Token {
                    tok: Tok::Num(v),
                    line: line_no,
                    col,
                });
            } else if c.is_ascii_alphabetic() || c == '_' || c == '.' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Ident(chars[start..i].iter().collect()),
                    line: line_no,
                    col,
                });
            } else if "{}[],:+-@#".contains(c) {
                out.push(Token {
                    tok: Tok::Punct(c),
                    line: line_no,
                    col,
                });
                i += 1;
            } else {
                return Err(syntax(line_no, col, format!("unexpected character `{c}`")));
            }
        }
        out.push(Token {
            tok: Tok::Newline,
            line: line_no,
            col: chars.len() + 1,
        });
    }
    Ok(out)
}

/// `gN` → N.
fn global_ident(s: &str) -> Option<u64> {
    let digits = s.strip_prefix('g')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn here(&self) -> (usize, usize) {
        match self.peek().or(self.toks.last()) {
            Some(t) => (t.line, t.col),
            None => (1, 1),
        }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        let (l, c) = self.here();
        Err(syntax(l, c, msg))
    }

    fn skip_newlines(&mut self) {
        while matches!(self.peek(), Some(Token { tok: Tok::Newline, .. })) {
            self.pos += 1;
        }
    }

    fn is_punct(&self, c: char) -> bool {
        matches!(self.peek(), Some(Token { tok: Tok::Punct(p), .. }) if *p == c)
    }

    fn expect_punct(&mut self, c: char) -> Result<(), ParseError> {
        if self.is_punct(c) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected `{c}`"))
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek() {
            Some(Token { tok: Tok::Ident(s), .. }) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.err("expected identifier"),
        }
    }

    fn number(&mut self) -> Result<i64, ParseError> {
        let neg = if self.is_punct('-') {
            self.pos += 1;
            true
        } else {
            false
        };
        match self.peek() {
            Some(Token { tok: Tok::Num(v), .. }) => {
                let v = *v;
                self.pos += 1;
                Ok(if neg { v.wrapping_neg() } else { v })
            }
            _ => self.err("expected number"),
        }
    }

    fn register(&mut self) -> Result<Register, ParseError> {
        let (l, c) = self.here();
        let name = self.ident()?;
        name.parse()
            .map_err(|_| syntax(l, c, format!("expected register, found `{name}`")))
    }

    fn operand(&mut self) -> Result<Operand, ParseError> {
        let (l, c) = self.here();
        if self.is_punct('[') {
            self.pos += 1;
            let base = self.ident()?;
            let mut disp = 0i64;
            if self.is_punct('+') {
                self.pos += 1;
                disp = self.number()?;
            } else if self.is_punct('-') {
                disp = self.number()?;
            }
            self.expect_punct(']')?;
            if let Some(addr) = global_ident(&base) {
                return Ok(Operand::Abs(addr.wrapping_add(disp as u64)));
            }
            let base: Register = base
                .parse()
                .map_err(|_| syntax(l, c, format!("malformed operand: bad base `{base}`")))?;
            return Ok(Operand::Mem { base, disp });
        }
        if self.is_punct('-') || matches!(self.peek(), Some(Token { tok: Tok::Num(_), .. })) {
            return Ok(Operand::Imm(self.number()?));
        }
        let name = self.ident()?;
        if let Some(addr) = global_ident(&name) {
            return Ok(Operand::Imm(addr as i64));
        }
        name.parse()
            .map(Operand::Reg)
            .map_err(|_| syntax(l, c, format!("malformed operand `{name}`")))
    }

    fn at_line_end(&self) -> bool {
        matches!(self.peek(), None | Some(Token { tok: Tok::Newline, .. })) || self.is_punct('}')
    }

    fn end_of_instruction(&mut self) -> Result<(), ParseError> {
        if self.at_line_end() {
            Ok(())
        } else {
            self.err("trailing tokens after instruction")
        }
    }

    fn comma(&mut self) -> Result<(), ParseError> {
        self.expect_punct(',')
    }

    fn instruction(&mut self, mnemonic: &str) -> Result<Op, ParseError> {
        let op = match mnemonic {
            "mov" => {
                let dst = self.operand()?;
                self.comma()?;
                let src = self.operand()?;
                Op::Mov { dst, src }
            }
            "add" | "sub" => {
                let dst = self.register()?;
                self.comma()?;
                let src = self.operand()?;
                if mnemonic == "add" {
                    Op::Add { dst, src }
                } else {
                    Op::Sub { dst, src }
                }
            }
            "cmp" => {
                let a = self.operand()?;
                self.comma()?;
                let b = self.operand()?;
                Op::Cmp { a, b }
            }
            "jmp" => Op::Jmp { target: self.ident()? },
            "je" => Op::Je { target: self.ident()? },
            "jne" => Op::Jne { target: self.ident()? },
            "call" => Op::Call { func: self.ident()? },
            "ret" => Op::Ret,
            "halt" => Op::Halt,
            "alloc" => {
                let dst = self.register()?;
                self.comma()?;
                self.expect_punct('@')?;
                let site = self.ident()?;
                let size = if self.is_punct(',') {
                    self.pos += 1;
                    let n = self.number()?;
                    if n <= 0 {
                        return self.err("allocation size must be positive");
                    }
                    n as u64
                } else {
                    DEFAULT_ALLOC_SIZE
                };
                Op::Alloc { dst, site, size }
            }
            "lock" => Op::Lock { lock: self.operand()? },
            "unlock" => Op::Unlock { lock: self.operand()? },
            "join" => Op::Join {
                handle: self.operand()?,
            },
            "spawn" => {
                let func = self.ident()?;
                self.comma()?;
                let dst = self.register()?;
                Op::Spawn { func, dst }
            }
            "ptwrite" => {
                let src = if self.is_punct('#') {
                    None
                } else {
                    let r = self.register()?;
                    self.comma()?;
                    Some(r)
                };
                self.expect_punct('#')?;
                let id = self.number()?;
                let id = u32::try_from(id).or_else(|_| self.err("ptwrite id out of range"))?;
                Op::Ptwrite { src, id }
            }
            other => return self.err(format!("unknown mnemonic `{other}`")),
        };
        self.end_of_instruction()?;
        Ok(op)
    }
}

pub const DEFAULT_ALLOC_SIZE: u64 = 64;

/// Parses and validates a program.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut p = Parser {
        toks: tokenize(text)?,
        pos: 0,
    };
    let mut globals = Vec::new();
    let mut functions = Vec::new();
    // (line, col) of every instruction, for validation diagnostics.
    let mut positions: Vec<Vec<(usize, usize)>> = Vec::new();
    loop {
        p.skip_newlines();
        let Some(tok) = p.peek().cloned() else { break };
        match &tok.tok {
            Tok::Ident(kw) if kw == "global" => {
                p.pos += 1;
                let (l, c) = p.here();
                let name = p.ident()?;
                let addr = global_ident(&name).ok_or_else(|| syntax(l, c, "expected global `gN`"))?;
                if p.ident()? != "size" {
                    return p.err("expected `size`");
                }
                let size = p.number()?;
                if size <= 0 {
                    return p.err("global size must be positive");
                }
                globals.push(Global {
                    addr,
                    size: size as u64,
                });
                p.end_of_instruction()?;
            }
            Tok::Ident(kw) if kw == "fn" => {
                p.pos += 1;
                let name = p.ident()?;
                if name.contains('.') {
                    return p.err("function names may not contain `.`");
                }
                p.expect_punct('{')?;
                let mut instrs = Vec::new();
                let mut pos = Vec::new();
                loop {
                    p.skip_newlines();
                    if p.is_punct('}') {
                        p.pos += 1;
                        break;
                    }
                    let Some(first) = p.peek().cloned() else {
                        return p.err(format!("unterminated function `{name}`"));
                    };
                    let mut word = p.ident()?;
                    let mut label = None;
                    if p.is_punct(':') {
                        p.pos += 1;
                        if word.starts_with(PTW_LABEL_PREFIX) {
                            return Err(syntax(
                                first.line,
                                first.col,
                                format!("label prefix `{PTW_LABEL_PREFIX}` is reserved"),
                            ));
                        }
                        label = Some(word);
                        p.skip_newlines();
                        word = p.ident()?;
                    }
                    let op = p.instruction(&word)?;
                    let label = match (&op, label) {
                        (Op::Ptwrite { .. }, Some(_)) => {
                            return Err(syntax(first.line, first.col, "ptwrite takes no label"))
                        }
                        (Op::Ptwrite { id, .. }, None) => ptwrite_label(*id),
                        (_, Some(l)) => l,
                        (_, None) => format!("_{}", instrs.len()),
                    };
                    instrs.push(Instruction { label, op });
                    pos.push((first.line, first.col));
                }
                functions.push(Function { name, instrs });
                positions.push(pos);
            }
            _ => return p.err("expected `global` or `fn`"),
        }
        if let Some(Token { tok: Tok::Punct(_), .. }) = p.peek() {
            return p.err("unexpected token");
        }
    }
    Program::new(globals, functions).map_err(|(loc, e)| {
        let (line, col) = loc.map(|(f, i)| positions[f][i]).unwrap_or((1, 1));
        ParseError {
            line,
            col,
            kind: ParseErrorKind::Invalid(e),
        }
    })
}
