//! Opcode table, decoder and encoder.
//!
//! Register operands are one byte: `0..=7` name `r0`..`r7`, `8` names `sp`.
//! Base registers of memory operands may additionally be `9`, which reads as
//! the address of the next instruction (pc-relative addressing).

use std::fmt;

pub const OP_NOP: u8 = 0x00;
pub const OP_HALT: u8 = 0x01;
pub const OP_MOVI: u8 = 0x10;
pub const OP_MOV: u8 = 0x11;
pub const OP_ADD: u8 = 0x12;
pub const OP_SUB: u8 = 0x13;
pub const OP_XOR: u8 = 0x14;
pub const OP_CMP: u8 = 0x15;
pub const OP_CMPI: u8 = 0x16;
pub const OP_JMP: u8 = 0x20;
pub const OP_JZ: u8 = 0x21;
pub const OP_JNZ: u8 = 0x22;
pub const OP_CALL: u8 = 0x30;
pub const OP_RET: u8 = 0x31;
pub const OP_PUSH: u8 = 0x40;
pub const OP_POP: u8 = 0x41;
pub const OP_LOAD: u8 = 0x50;
pub const OP_STORE: u8 = 0x51;
pub const OP_LEA: u8 = 0x52;
pub const OP_SYS: u8 = 0x60;

/// Longest encoding (MOVI).
pub const MAX_INSN_LEN: usize = 10;

pub const SYS_EXIT: u8 = 0;
pub const SYS_WRITE: u8 = 1;
pub const SYS_READ: u8 = 2;
pub const SYS_RECV_WAIT: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(u8);

impl Reg {
    pub const SP: Reg = Reg(8);
    pub const PC: Reg = Reg(9);

    pub fn gp(index: u8) -> Option<Reg> {
        (index < 8).then_some(Reg(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    fn data(byte: u8) -> Option<Reg> {
        (byte <= 8).then_some(Reg(byte))
    }

    fn base(byte: u8) -> Option<Reg> {
        (byte <= 9).then_some(Reg(byte))
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            8 => f.write_str("sp"),
            9 => f.write_str("pc"),
            n => write!(f, "r{n}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Insn {
    Nop,
    Halt(u8),
    Movi(Reg, u64),
    Mov(Reg, Reg),
    Add(Reg, Reg),
    Sub(Reg, Reg),
    Xor(Reg, Reg),
    Cmp(Reg, Reg),
    Cmpi(Reg, i32),
    Jmp(i32),
    Jz(i32),
    Jnz(i32),
    Call(i32),
    Ret,
    Push(Reg),
    Pop(Reg),
    Load { dst: Reg, base: Reg, disp: i16 },
    Store { base: Reg, disp: i16, src: Reg },
    Lea { dst: Reg, base: Reg, disp: i16 },
    Sys(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeError {
    /// The first byte is not an assigned opcode.
    BadOpcode(u8),
    /// An operand byte is outside its allowed range.
    BadOperand,
    /// The window ended before the instruction did.
    Truncated,
}

impl Insn {
    /// Encoded size in bytes; never zero.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        match self {
            Insn::Nop | Insn::Ret => 1,
            Insn::Halt(_) | Insn::Push(_) | Insn::Pop(_) | Insn::Sys(_) => 2,
            Insn::Mov(..) | Insn::Add(..) | Insn::Sub(..) | Insn::Xor(..) | Insn::Cmp(..) => 3,
            Insn::Jmp(_) | Insn::Jz(_) | Insn::Jnz(_) | Insn::Call(_) => 5,
            Insn::Load { .. } | Insn::Store { .. } | Insn::Lea { .. } => 5,
            Insn::Cmpi(..) => 6,
            Insn::Movi(..) => 10,
        }
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            Insn::Nop => "nop",
            Insn::Halt(_) => "halt",
            Insn::Movi(..) => "movi",
            Insn::Mov(..) => "mov",
            Insn::Add(..) => "add",
            Insn::Sub(..) => "sub",
            Insn::Xor(..) => "xor",
            Insn::Cmp(..) => "cmp",
            Insn::Cmpi(..) => "cmpi",
            Insn::Jmp(_) => "jmp",
            Insn::Jz(_) => "jz",
            Insn::Jnz(_) => "jnz",
            Insn::Call(_) => "call",
            Insn::Ret => "ret",
            Insn::Push(_) => "push",
            Insn::Pop(_) => "pop",
            Insn::Load { .. } => "load",
            Insn::Store { .. } => "store",
            Insn::Lea { .. } => "lea",
            Insn::Sys(_) => "sys",
        }
    }

    /// Relative displacement of a branch or call.
    pub fn rel32(&self) -> Option<i32> {
        match *self {
            Insn::Jmp(d) | Insn::Jz(d) | Insn::Jnz(d) | Insn::Call(d) => Some(d),
            _ => None,
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        let rr = |out: &mut Vec<u8>, op: u8, a: Reg, b: Reg| out.extend_from_slice(&[op, a.0, b.0]);
        let mem = |out: &mut Vec<u8>, op: u8, a: Reg, b: Reg, d: i16| {
            out.extend_from_slice(&[op, a.0, b.0]);
            out.extend_from_slice(&d.to_le_bytes());
        };
        let rel = |out: &mut Vec<u8>, op: u8, d: i32| {
            out.push(op);
            out.extend_from_slice(&d.to_le_bytes());
        };
        match *self {
            Insn::Nop => out.push(OP_NOP),
            Insn::Halt(c) => out.extend_from_slice(&[OP_HALT, c]),
            Insn::Movi(r, v) => {
                out.extend_from_slice(&[OP_MOVI, r.0]);
                out.extend_from_slice(&v.to_le_bytes());
            }
            Insn::Mov(a, b) => rr(out, OP_MOV, a, b),
            Insn::Add(a, b) => rr(out, OP_ADD, a, b),
            Insn::Sub(a, b) => rr(out, OP_SUB, a, b),
            Insn::Xor(a, b) => rr(out, OP_XOR, a, b),
            Insn::Cmp(a, b) => rr(out, OP_CMP, a, b),
            Insn::Cmpi(r, v) => {
                out.extend_from_slice(&[OP_CMPI, r.0]);
                out.extend_from_slice(&v.to_le_bytes());
            }
            Insn::Jmp(d) => rel(out, OP_JMP, d),
            Insn::Jz(d) => rel(out, OP_JZ, d),
            Insn::Jnz(d) => rel(out, OP_JNZ, d),
            Insn::Call(d) => rel(out, OP_CALL, d),
            Insn::Ret => out.push(OP_RET),
            Insn::Push(r) => out.extend_from_slice(&[OP_PUSH, r.0]),
            Insn::Pop(r) => out.extend_from_slice(&[OP_POP, r.0]),
            Insn::Load { dst, base, disp } => mem(out, OP_LOAD, dst, base, disp),
            Insn::Store { base, disp, src } => mem(out, OP_STORE, base, src, disp),
            Insn::Lea { dst, base, disp } => mem(out, OP_LEA, dst, base, disp),
            Insn::Sys(n) => out.extend_from_slice(&[OP_SYS, n]),
        }
    }
}

/// Decode one instruction from the start of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<Insn, DecodeError> {
    let op = *bytes.first().ok_or(DecodeError::Truncated)?;
    let need = match op {
        OP_NOP | OP_RET => 1,
        OP_HALT | OP_PUSH | OP_POP | OP_SYS => 2,
        OP_MOV | OP_ADD | OP_SUB | OP_XOR | OP_CMP => 3,
        OP_JMP | OP_JZ | OP_JNZ | OP_CALL | OP_LOAD | OP_STORE | OP_LEA => 5,
        OP_CMPI => 6,
        OP_MOVI => 10,
        other => return Err(DecodeError::BadOpcode(other)),
    };
    if bytes.len() < need {
        return Err(DecodeError::Truncated);
    }
    let b = &bytes[..need];
    let data = |i: usize| Reg::data(b[i]).ok_or(DecodeError::BadOperand);
    let base = |i: usize| Reg::base(b[i]).ok_or(DecodeError::BadOperand);
    let rel = || i32::from_le_bytes([b[1], b[2], b[3], b[4]]);
    let disp = || i16::from_le_bytes([b[3], b[4]]);
    let insn = match op {
        OP_NOP => Insn::Nop,
        OP_HALT => Insn::Halt(b[1]),
        OP_MOVI => {
            let mut imm = [0u8; 8];
            imm.copy_from_slice(&b[2..10]);
            Insn::Movi(data(1)?, u64::from_le_bytes(imm))
        }
        OP_MOV => Insn::Mov(data(1)?, data(2)?),
        OP_ADD => Insn::Add(data(1)?, data(2)?),
        OP_SUB => Insn::Sub(data(1)?, data(2)?),
        OP_XOR => Insn::Xor(data(1)?, data(2)?),
        OP_CMP => Insn::Cmp(data(1)?, data(2)?),
        OP_CMPI => Insn::Cmpi(data(1)?, i32::from_le_bytes([b[2], b[3], b[4], b[5]])),
        OP_JMP => Insn::Jmp(rel()),
        OP_JZ => Insn::Jz(rel()),
        OP_JNZ => Insn::Jnz(rel()),
        OP_CALL => Insn::Call(rel()),
        OP_RET => Insn::Ret,
        OP_PUSH => Insn::Push(data(1)?),
        OP_POP => Insn::Pop(data(1)?),
        OP_LOAD => Insn::Load {
            dst: data(1)?,
            base: base(2)?,
            disp: disp(),
        },
        OP_STORE => Insn::Store {
            base: base(1)?,
            src: data(2)?,
            disp: disp(),
        },
        OP_LEA => Insn::Lea {
            dst: data(1)?,
            base: base(2)?,
            disp: disp(),
        },
        OP_SYS => match b[1] {
            n @ SYS_EXIT..=SYS_RECV_WAIT => Insn::Sys(n),
            _ => return Err(DecodeError::BadOperand),
        },
        _ => unreachable!(),
    };
    Ok(insn)
}

impl fmt::Display for Insn {
    /// Formats the instruction in assembler syntax. Branch targets are
    /// printed as raw displacements relative to the next instruction.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.mnemonic();
        let mem = |f: &mut fmt::Formatter<'_>, base: Reg, disp: i16| {
            if disp < 0 {
                write!(f, "[{base}-{}]", -(disp as i32))
            } else {
                write!(f, "[{base}+{disp}]")
            }
        };
        match *self {
            Insn::Nop | Insn::Ret => f.write_str(m),
            Insn::Halt(c) | Insn::Sys(c) => write!(f, "{m} {c}"),
            Insn::Movi(r, v) => write!(f, "{m} {r}, {v:#x}"),
            Insn::Mov(a, b)
            | Insn::Add(a, b)
            | Insn::Sub(a, b)
            | Insn::Xor(a, b)
            | Insn::Cmp(a, b) => {
                write!(f, "{m} {a}, {b}")
            }
            Insn::Cmpi(r, v) => write!(f, "{m} {r}, {v}"),
            Insn::Jmp(d) | Insn::Jz(d) | Insn::Jnz(d) | Insn::Call(d) => write!(f, "{m} {d:+}"),
            Insn::Push(r) | Insn::Pop(r) => write!(f, "{m} {r}"),
            Insn::Load { dst, base, disp } | Insn::Lea { dst, base, disp } => {
                write!(f, "{m} {dst}, ")?;
                mem(f, base, disp)
            }
            Insn::Store { base, disp, src } => {
                write!(f, "{m} ")?;
                mem(f, base, disp)?;
                write!(f, ", {src}")
            }
        }
    }
}
