//! GISA-32: a small byte-addressable, little-endian, variable-length
//! instruction set.
//!
//! The instruction length is a pure function of the opcode byte, so a
//! decoder never needs more than the first byte to know how far to read.
//! `BRK` is a single byte (`0xCC`) which is what lets a debugger patch it
//! over the first byte of any instruction.

mod asm;
mod disasm;

pub use asm::{assemble, AsmError, AssembledImage, Section, Symbol};
pub use disasm::{disassemble, format_listing, ListingLine};

use std::fmt;

use thiserror::Error;

/// Opcode of the one-byte breakpoint instruction.
pub const BRK_OPCODE: u8 = 0xCC;

/// Length of `CALL a32`; a return address is always `call_site + CALL_LEN`.
pub const CALL_LEN: u32 = 5;

/// General purpose register index (0..=7).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(pub u8);

impl Reg {
    pub const SP: Reg = Reg(7);
    pub const FP: Reg = Reg(6);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    fn valid(self) -> bool {
        self.0 < 8
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Control register selector used by `MOVCR` / `MOVRC`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ControlReg {
    /// Physical address of the page directory.
    Ptbr = 0,
    /// Physical address of the 64-entry vector table.
    Ivt = 1,
    /// Faulting virtual address of the last exception.
    Far = 2,
    /// Error code of the last exception.
    Err = 3,
    /// Return pc saved on exception/interrupt entry.
    Epc = 4,
    /// Saved flags (bit0 Z, bit1 N, bit2 IF).
    Eflags = 5,
    /// Saved mode (0 kernel, 1 user).
    Emode = 6,
    /// Paging enable (bit0).
    Pgen = 7,
}

impl ControlReg {
    pub const ALL: [ControlReg; 8] = [
        ControlReg::Ptbr,
        ControlReg::Ivt,
        ControlReg::Far,
        ControlReg::Err,
        ControlReg::Epc,
        ControlReg::Eflags,
        ControlReg::Emode,
        ControlReg::Pgen,
    ];

    pub fn from_index(i: u8) -> Option<ControlReg> {
        Self::ALL.get(i as usize).copied()
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            ControlReg::Ptbr => "PTBR",
            ControlReg::Ivt => "IVT",
            ControlReg::Far => "FAR",
            ControlReg::Err => "ERR",
            ControlReg::Epc => "EPC",
            ControlReg::Eflags => "EFLAGS",
            ControlReg::Emode => "EMODE",
            ControlReg::Pgen => "PGEN",
        }
    }

    pub fn from_name(s: &str) -> Option<ControlReg> {
        let upper = s.to_ascii_uppercase();
        if let Some(n) = upper.strip_prefix("CR") {
            return n.parse::<u8>().ok().and_then(ControlReg::from_index);
        }
        Self::ALL.iter().copied().find(|c| c.name() == upper)
    }
}

impl fmt::Display for ControlReg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Mnemonic-level opcode. The discriminant is the encoded opcode byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Nop = 0x00,
    Hlt = 0x01,
    Movi = 0x02,
    Mov = 0x03,
    Ld = 0x04,
    St = 0x05,
    Add = 0x06,
    Sub = 0x07,
    And = 0x08,
    Or = 0x09,
    Xor = 0x0A,
    Addi = 0x0B,
    Cmp = 0x0C,
    Jmp = 0x0D,
    Jz = 0x0E,
    Jnz = 0x0F,
    Call = 0x10,
    Ret = 0x11,
    Push = 0x12,
    Pop = 0x13,
    In = 0x14,
    Out = 0x15,
    Syscall = 0x16,
    Iret = 0x17,
    Movcr = 0x18,
    Movrc = 0x19,
    Sti = 0x1A,
    Cli = 0x1B,
    Brk = 0xCC,
}

impl Opcode {
    pub fn from_byte(b: u8) -> Option<Opcode> {
        use Opcode::*;
        Some(match b {
            0x00 => Nop,
            0x01 => Hlt,
            0x02 => Movi,
            0x03 => Mov,
            0x04 => Ld,
            0x05 => St,
            0x06 => Add,
            0x07 => Sub,
            0x08 => And,
            0x09 => Or,
            0x0A => Xor,
            0x0B => Addi,
            0x0C => Cmp,
            0x0D => Jmp,
            0x0E => Jz,
            0x0F => Jnz,
            0x10 => Call,
            0x11 => Ret,
            0x12 => Push,
            0x13 => Pop,
            0x14 => In,
            0x15 => Out,
            0x16 => Syscall,
            0x17 => Iret,
            0x18 => Movcr,
            0x19 => Movrc,
            0x1A => Sti,
            0x1B => Cli,
            0xCC => Brk,
            _ => return None,
        })
    }

    /// Total encoded length, including the opcode byte.
    pub fn len(self) -> usize {
        use Opcode::*;
        match self {
            Nop | Hlt | Ret | Syscall | Iret | Sti | Cli | Brk => 1,
            Mov | Add | Sub | And | Or | Xor | Cmp | Push | Pop | Movcr | Movrc => 2,
            In | Out => 3,
            Ld | St | Addi => 4,
            Jmp | Jz | Jnz | Call => 5,
            Movi => 6,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        use Opcode::*;
        match self {
            Nop => "NOP",
            Hlt => "HLT",
            Movi => "MOVI",
            Mov => "MOV",
            Ld => "LD",
            St => "ST",
            Add => "ADD",
            Sub => "SUB",
            And => "AND",
            Or => "OR",
            Xor => "XOR",
            Addi => "ADDI",
            Cmp => "CMP",
            Jmp => "JMP",
            Jz => "JZ",
            Jnz => "JNZ",
            Call => "CALL",
            Ret => "RET",
            Push => "PUSH",
            Pop => "POP",
            In => "IN",
            Out => "OUT",
            Syscall => "SYSCALL",
            Iret => "IRET",
            Movcr => "MOVCR",
            Movrc => "MOVRC",
            Sti => "STI",
            Cli => "CLI",
            Brk => "BRK",
        }
    }
}

/// Register-register ALU operations sharing the two-register encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Xor,
    Cmp,
}

impl AluOp {
    fn opcode(self) -> Opcode {
        match self {
            AluOp::Add => Opcode::Add,
            AluOp::Sub => Opcode::Sub,
            AluOp::And => Opcode::And,
            AluOp::Or => Opcode::Or,
            AluOp::Xor => Opcode::Xor,
            AluOp::Cmp => Opcode::Cmp,
        }
    }
}

/// Conditions for the absolute jump family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JumpCond {
    Always,
    Zero,
    NotZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    Nop,
    Hlt,
    Movi { rd: Reg, imm: u32 },
    Mov { rd: Reg, rs: Reg },
    /// `rd <- mem32[base + offset]`
    Ld { rd: Reg, base: Reg, offset: i16 },
    /// `mem32[base + offset] <- rs`
    St { base: Reg, rs: Reg, offset: i16 },
    Alu { op: AluOp, rd: Reg, rs: Reg },
    Addi { rd: Reg, imm: i16 },
    Jump { cond: JumpCond, target: u32 },
    Call { target: u32 },
    Ret,
    Push { rs: Reg },
    Pop { rd: Reg },
    In { rd: Reg, port: u8 },
    Out { port: u8, rs: Reg },
    Syscall,
    Iret,
    /// `cr <- rs`
    Movcr { cr: ControlReg, rs: Reg },
    /// `rd <- cr`
    Movrc { rd: Reg, cr: ControlReg },
    Sti,
    Cli,
    Brk,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("operand out of range: {0}")]
    OperandOutOfRange(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unknown opcode 0x{0:02X}")]
    UnknownOpcode(u8),
    #[error("truncated instruction: need {need} bytes, have {have}")]
    TruncatedInstruction { need: usize, have: usize },
    #[error("invalid operand byte 0x{0:02X}")]
    InvalidOperand(u8),
    #[error("offset {0} out of bounds")]
    OutOfBounds(usize),
}

impl Instruction {
    pub fn opcode(&self) -> Opcode {
        use Instruction::*;
        match *self {
            Nop => Opcode::Nop,
            Hlt => Opcode::Hlt,
            Movi { .. } => Opcode::Movi,
            Mov { .. } => Opcode::Mov,
            Ld { .. } => Opcode::Ld,
            St { .. } => Opcode::St,
            Alu { op, .. } => op.opcode(),
            Addi { .. } => Opcode::Addi,
            Jump { cond: JumpCond::Always, .. } => Opcode::Jmp,
            Jump { cond: JumpCond::Zero, .. } => Opcode::Jz,
            Jump { cond: JumpCond::NotZero, .. } => Opcode::Jnz,
            Call { .. } => Opcode::Call,
            Ret => Opcode::Ret,
            Push { .. } => Opcode::Push,
            Pop { .. } => Opcode::Pop,
            In { .. } => Opcode::In,
            Out { .. } => Opcode::Out,
            Syscall => Opcode::Syscall,
            Iret => Opcode::Iret,
            Movcr { .. } => Opcode::Movcr,
            Movrc { .. } => Opcode::Movrc,
            Sti => Opcode::Sti,
            Cli => Opcode::Cli,
            Brk => Opcode::Brk,
        }
    }

    pub fn len(&self) -> usize {
        self.opcode().len()
    }

    /// Instructions that raise #GP when executed in user mode.
    pub fn is_privileged(&self) -> bool {
        matches!(
            self,
            Instruction::Hlt
                | Instruction::In { .. }
                | Instruction::Out { .. }
                | Instruction::Iret
                | Instruction::Movcr { .. }
                | Instruction::Movrc { .. }
                | Instruction::Sti
                | Instruction::Cli
        )
    }
}

fn pack(hi: Reg, lo: Reg) -> Result<u8, EncodeError> {
    check(hi)?;
    check(lo)?;
    Ok((hi.0 << 4) | lo.0)
}

fn check(r: Reg) -> Result<u8, EncodeError> {
    if r.valid() {
        Ok(r.0)
    } else {
        Err(EncodeError::OperandOutOfRange(format!("register r{}", r.0)))
    }
}

/// Encodes one instruction into its byte form.
pub fn encode(instr: &Instruction) -> Result<Vec<u8>, EncodeError> {
    use Instruction::*;
    let op = instr.opcode() as u8;
    let mut out = Vec::with_capacity(instr.len());
    out.push(op);
    match *instr {
        Nop | Hlt | Ret | Syscall | Iret | Sti | Cli | Brk => {}
        Movi { rd, imm } => {
            out.push(check(rd)?);
            out.extend_from_slice(&imm.to_le_bytes());
        }
        Mov { rd, rs } | Alu { rd, rs, .. } => out.push(pack(rd, rs)?),
        Ld { rd, base, offset } => {
            out.push(pack(rd, base)?);
            out.extend_from_slice(&offset.to_le_bytes());
        }
        St { base, rs, offset } => {
            out.push(pack(base, rs)?);
            out.extend_from_slice(&offset.to_le_bytes());
        }
        Addi { rd, imm } => {
            out.push(check(rd)?);
            out.extend_from_slice(&imm.to_le_bytes());
        }
        Jump { target, .. } | Call { target } => out.extend_from_slice(&target.to_le_bytes()),
        Push { rs } => out.push(check(rs)?),
        Pop { rd } => out.push(check(rd)?),
        In { rd, port } => {
            out.push(check(rd)?);
            out.push(port);
        }
        Out { port, rs } => {
            out.push(check(rs)?);
            out.push(port);
        }
        Movcr { cr, rs } => out.push((cr.index() << 4) | check(rs)?),
        Movrc { rd, cr } => out.push((check(rd)? << 4) | cr.index()),
    }
    debug_assert_eq!(out.len(), instr.len());
    Ok(out)
}

fn reg(b: u8, raw: u8) -> Result<Reg, DecodeError> {
    if b < 8 {
        Ok(Reg(b))
    } else {
        Err(DecodeError::InvalidOperand(raw))
    }
}

fn unpack(b: u8) -> Result<(Reg, Reg), DecodeError> {
    Ok((reg(b >> 4, b)?, reg(b & 0xF, b)?))
}

/// Decodes the instruction starting at `offset`, returning it with its length.
pub fn decode(bytes: &[u8], offset: usize) -> Result<(Instruction, usize), DecodeError> {
    let first = *bytes.get(offset).ok_or(DecodeError::OutOfBounds(offset))?;
    let op = Opcode::from_byte(first).ok_or(DecodeError::UnknownOpcode(first))?;
    let len = op.len();
    let have = bytes.len() - offset;
    if have < len {
        return Err(DecodeError::TruncatedInstruction { need: len, have });
    }
    let b = &bytes[offset..offset + len];
    let u32_at = |i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
    let i16_at = |i: usize| i16::from_le_bytes([b[i], b[i + 1]]);
    let alu = |op: AluOp| -> Result<Instruction, DecodeError> {
        let (rd, rs) = unpack(b[1])?;
        Ok(Instruction::Alu { op, rd, rs })
    };
    use Opcode as O;
    let instr = match op {
        O::Nop => Instruction::Nop,
        O::Hlt => Instruction::Hlt,
        O::Movi => Instruction::Movi { rd: reg(b[1], b[1])?, imm: u32_at(2) },
        O::Mov => {
            let (rd, rs) = unpack(b[1])?;
            Instruction::Mov { rd, rs }
        }
        O::Ld => {
            let (rd, base) = unpack(b[1])?;
            Instruction::Ld { rd, base, offset: i16_at(2) }
        }
        O::St => {
            let (base, rs) = unpack(b[1])?;
            Instruction::St { base, rs, offset: i16_at(2) }
        }
        O::Add => alu(AluOp::Add)?,
        O::Sub => alu(AluOp::Sub)?,
        O::And => alu(AluOp::And)?,
        O::Or => alu(AluOp::Or)?,
        O::Xor => alu(AluOp::Xor)?,
        O::Cmp => alu(AluOp::Cmp)?,
        O::Addi => Instruction::Addi { rd: reg(b[1], b[1])?, imm: i16_at(2) },
        O::Jmp => Instruction::Jump { cond: JumpCond::Always, target: u32_at(1) },
        O::Jz => Instruction::Jump { cond: JumpCond::Zero, target: u32_at(1) },
        O::Jnz => Instruction::Jump { cond: JumpCond::NotZero, target: u32_at(1) },
        O::Call => Instruction::Call { target: u32_at(1) },
        O::Ret => Instruction::Ret,
        O::Push => Instruction::Push { rs: reg(b[1], b[1])? },
        O::Pop => Instruction::Pop { rd: reg(b[1], b[1])? },
        O::In => Instruction::In { rd: reg(b[1], b[1])?, port: b[2] },
        O::Out => Instruction::Out { rs: reg(b[1], b[1])?, port: b[2] },
        O::Syscall => Instruction::Syscall,
        O::Iret => Instruction::Iret,
        O::Movcr => {
            let cr = ControlReg::from_index(b[1] >> 4).ok_or(DecodeError::InvalidOperand(b[1]))?;
            Instruction::Movcr { cr, rs: reg(b[1] & 0xF, b[1])? }
        }
        O::Movrc => {
            let cr = ControlReg::from_index(b[1] & 0xF).ok_or(DecodeError::InvalidOperand(b[1]))?;
            Instruction::Movrc { rd: reg(b[1] >> 4, b[1])?, cr }
        }
        O::Sti => Instruction::Sti,
        O::Cli => Instruction::Cli,
        O::Brk => Instruction::Brk,
    };
    Ok((instr, len))
}

fn hex_signed(v: i16) -> String {
    if v < 0 {
        format!("-{:#x}", -(v as i32))
    } else {
        format!("+{:#x}", v)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Instruction::*;
        let m = self.opcode().mnemonic();
        match *self {
            Nop | Hlt | Ret | Syscall | Iret | Sti | Cli | Brk => f.write_str(m),
            Movi { rd, imm } => write!(f, "{m} {rd}, {imm:#x}"),
            Mov { rd, rs } | Alu { rd, rs, .. } => write!(f, "{m} {rd}, {rs}"),
            Ld { rd, base, offset } => write!(f, "{m} {rd}, [{base}{}]", hex_signed(offset)),
            St { base, rs, offset } => write!(f, "{m} [{base}{}], {rs}", hex_signed(offset)),
            Addi { rd, imm } => {
                if imm < 0 {
                    write!(f, "{m} {rd}, -{:#x}", -(imm as i32))
                } else {
                    write!(f, "{m} {rd}, {imm:#x}")
                }
            }
            Jump { target, .. } | Call { target } => write!(f, "{m} {target:#x}"),
            Push { rs } => write!(f, "{m} {rs}"),
            Pop { rd } => write!(f, "{m} {rd}"),
            In { rd, port } => write!(f, "{m} {rd}, {port:#x}"),
            Out { port, rs } => write!(f, "{m} {port:#x}, {rs}"),
            Movcr { cr, rs } => write!(f, "{m} {cr}, {rs}"),
            Movrc { rd, cr } => write!(f, "{m} {rd}, {cr}"),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encoding_table_examples() {
        assert_eq!(
            encode(&Instruction::Movi { rd: Reg(1), imm: 5 }).unwrap(),
            [0x02, 0x01, 0x05, 0, 0, 0]
        );
        assert_eq!(encode(&Instruction::Brk).unwrap(), [0xCC]);
        assert_eq!(
            encode(&Instruction::Ld { rd: Reg(2), base: Reg(1), offset: 8 }).unwrap(),
            [0x04, 0x21, 0x08, 0x00]
        );
    }

    #[test]
    fn decode_examples() {
        assert_eq!(
            decode(&[0x03, 0x21], 0).unwrap(),
            (Instruction::Mov { rd: Reg(2), rs: Reg(1) }, 2)
        );
        assert_eq!(decode(&[0xCC], 0).unwrap(), (Instruction::Brk, 1));
        assert_eq!(decode(&[0xFE], 0), Err(DecodeError::UnknownOpcode(0xFE)));
        assert!(matches!(
            decode(&[0x02, 0x01, 0x05], 0),
            Err(DecodeError::TruncatedInstruction { need: 6, have: 3 })
        ));
    }

    #[test]
    fn bad_register_rejected() {
        assert!(encode(&Instruction::Push { rs: Reg(9) }).is_err());
        assert_eq!(decode(&[0x12, 0x08], 0), Err(DecodeError::InvalidOperand(0x08)));
    }

    #[test]
    fn every_opcode_length_matches_table() {
        let table: &[(u8, usize)] = &[
            (0x00, 1), (0x01, 1), (0x02, 6), (0x03, 2), (0x04, 4), (0x05, 4), (0x06, 2),
            (0x07, 2), (0x08, 2), (0x09, 2), (0x0A, 2), (0x0B, 4), (0x0C, 2), (0x0D, 5),
            (0x0E, 5), (0x0F, 5), (0x10, 5), (0x11, 1), (0x12, 2), (0x13, 2), (0x14, 3),
            (0x15, 3), (0x16, 1), (0x17, 1), (0x18, 2), (0x19, 2), (0x1A, 1), (0x1B, 1),
            (0xCC, 1),
        ];
        for &(b, len) in table {
            assert_eq!(Opcode::from_byte(b).unwrap().len(), len, "opcode {b:#x}");
        }
        let assigned = (0..=255u8).filter(|b| Opcode::from_byte(*b).is_some()).count();
        assert_eq!(assigned, table.len());
    }

    pub(crate) fn arb_instruction() -> impl Strategy<Value = Instruction> {
        let r = (0u8..8).prop_map(Reg);
        let cr = (0u8..8).prop_map(|i| ControlReg::from_index(i).unwrap());
        let alu = prop_oneof![
            Just(AluOp::Add),
            Just(AluOp::Sub),
            Just(AluOp::And),
            Just(AluOp::Or),
            Just(AluOp::Xor),
            Just(AluOp::Cmp)
        ];
        let cond = prop_oneof![Just(JumpCond::Always), Just(JumpCond::Zero), Just(JumpCond::NotZero)];
        prop_oneof![
            Just(Instruction::Nop),
            Just(Instruction::Hlt),
            Just(Instruction::Ret),
            Just(Instruction::Syscall),
            Just(Instruction::Iret),
            Just(Instruction::Sti),
            Just(Instruction::Cli),
            Just(Instruction::Brk),
            (r.clone(), any::<u32>()).prop_map(|(rd, imm)| Instruction::Movi { rd, imm }),
            (r.clone(), r.clone()).prop_map(|(rd, rs)| Instruction::Mov { rd, rs }),
            (r.clone(), r.clone(), any::<i16>())
                .prop_map(|(rd, base, offset)| Instruction::Ld { rd, base, offset }),
            (r.clone(), r.clone(), any::<i16>())
                .prop_map(|(base, rs, offset)| Instruction::St { base, rs, offset }),
            (alu, r.clone(), r.clone()).prop_map(|(op, rd, rs)| Instruction::Alu { op, rd, rs }),
            (r.clone(), any::<i16>()).prop_map(|(rd, imm)| Instruction::Addi { rd, imm }),
            (cond, any::<u32>()).prop_map(|(cond, target)| Instruction::Jump { cond, target }),
            any::<u32>().prop_map(|target| Instruction::Call { target }),
            r.clone().prop_map(|rs| Instruction::Push { rs }),
            r.clone().prop_map(|rd| Instruction::Pop { rd }),
            (r.clone(), any::<u8>()).prop_map(|(rd, port)| Instruction::In { rd, port }),
            (any::<u8>(), r.clone()).prop_map(|(port, rs)| Instruction::Out { port, rs }),
            (cr.clone(), r.clone()).prop_map(|(cr, rs)| Instruction::Movcr { cr, rs }),
            (r, cr).prop_map(|(rd, cr)| Instruction::Movrc { rd, cr }),
        ]
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(i in arb_instruction()) {
            let bytes = encode(&i).unwrap();
            prop_assert_eq!(bytes.len(), i.len());
            prop_assert_eq!(decode(&bytes, 0).unwrap(), (i, bytes.len()));
        }

        #[test]
        fn encode_inverts_decode(bytes in proptest::collection::vec(any::<u8>(), 1..8)) {
            if let Ok((i, len)) = decode(&bytes, 0) {
                prop_assert_eq!(encode(&i).unwrap(), bytes[..len].to_vec());
            }
        }
    }
}
