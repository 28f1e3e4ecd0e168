//! Introspection of the toy guest kernel: process list, per-process
//! landmarks and symbol resolution.
//!
//! The kernel publishes a small info block at physical `0x0F00`:
//!
//! | offset | field           |
//! |--------|-----------------|
//! | 0      | magic `GOSK`    |
//! | 4      | procListHead    |
//! | 8      | currentProc     |
//!
//! Each process descriptor is 96 bytes: pid, 16-byte name, ptbr, state,
//! stackBase, heapBase, next, followed by the register save area.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::isa::AssembledImage;

pub const KIB_ADDR: u32 = 0x0F00;
pub const KIB_MAGIC: u32 = 0x4B53_4F47;

pub mod desc {
    pub const PID: u32 = 0;
    pub const NAME: u32 = 4;
    pub const NAME_LEN: usize = 16;
    pub const PTBR: u32 = 20;
    pub const STATE: u32 = 24;
    pub const STACK_BASE: u32 = 28;
    pub const HEAP_BASE: u32 = 32;
    pub const NEXT: u32 = 36;
    /// r0..r7, then EPC, EFLAGS, EMODE.
    pub const SAVE: u32 = 40;
    pub const SIZE: u32 = 96;
}

const MAX_PROCS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OsError {
    #[error("guest kernel info block not found")]
    UnsupportedGuest,
    #[error("process list is corrupt at {0:#x}")]
    CorruptList(u32),
    #[error("no process with page table base {0:#x}")]
    NoSuchProcess(u32),
    #[error("symbol not found: {0}")]
    SymbolNotFound(String),
    #[error("symbols line {line}: {msg}")]
    BadSymbols { line: usize, msg: String },
}

/// Physical memory as seen by introspection.
pub trait PhysRead {
    fn read_phys(&self, pa: u32, len: usize) -> Option<Vec<u8>>;

    fn read_u32(&self, pa: u32) -> Option<u32> {
        self.read_phys(pa, 4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl PhysRead for crate::machine::Machine {
    fn read_phys(&self, pa: u32, len: usize) -> Option<Vec<u8>> {
        self.read_phys_guest(pa, len).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcState {
    Ready,
    Running,
    Done,
    Other(u32),
}

impl From<u32> for ProcState {
    fn from(v: u32) -> Self {
        match v {
            0 => ProcState::Ready,
            1 => ProcState::Running,
            2 => ProcState::Done,
            n => ProcState::Other(n),
        }
    }
}

impl std::fmt::Display for ProcState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProcState::Ready => f.write_str("ready"),
            ProcState::Running => f.write_str("running"),
            ProcState::Done => f.write_str("done"),
            ProcState::Other(n) => write!(f, "state{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessInfo {
    pub pid: u32,
    pub name: String,
    pub ptbr: u32,
    pub state: ProcState,
    pub stack_base: u32,
    pub heap_base: u32,
    /// Physical address of the descriptor.
    pub desc: u32,
}

fn check_magic(r: &impl PhysRead) -> Result<(), OsError> {
    match r.read_u32(KIB_ADDR) {
        Some(KIB_MAGIC) => Ok(()),
        _ => Err(OsError::UnsupportedGuest),
    }
}

fn read_desc(r: &impl PhysRead, pa: u32) -> Result<ProcessInfo, OsError> {
    let b = r.read_phys(pa, desc::SAVE as usize).ok_or(OsError::CorruptList(pa))?;
    let word = |o: u32| u32::from_le_bytes(b[o as usize..o as usize + 4].try_into().unwrap());
    let raw = &b[desc::NAME as usize..desc::NAME as usize + desc::NAME_LEN];
    let end = raw.iter().position(|c| *c == 0).unwrap_or(raw.len());
    Ok(ProcessInfo {
        pid: word(desc::PID),
        name: String::from_utf8_lossy(&raw[..end]).into_owned(),
        ptbr: word(desc::PTBR),
        state: word(desc::STATE).into(),
        stack_base: word(desc::STACK_BASE),
        heap_base: word(desc::HEAP_BASE),
        desc: pa,
    })
}

/// Walks the kernel's process list.
pub fn proc_list(r: &impl PhysRead) -> Result<Vec<ProcessInfo>, OsError> {
    check_magic(r)?;
    let mut cur = r.read_u32(KIB_ADDR + 4).ok_or(OsError::UnsupportedGuest)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    while cur != 0 {
        if !seen.insert(cur) || out.len() >= MAX_PROCS {
            return Err(OsError::CorruptList(cur));
        }
        out.push(read_desc(r, cur)?);
        cur = r.read_u32(cur + desc::NEXT).ok_or(OsError::CorruptList(cur))?;
    }
    Ok(out)
}

pub fn current_process(r: &impl PhysRead) -> Result<ProcessInfo, OsError> {
    check_magic(r)?;
    let pa = r.read_u32(KIB_ADDR + 8).ok_or(OsError::UnsupportedGuest)?;
    read_desc(r, pa)
}

pub fn process_by_ptbr(r: &impl PhysRead, ptbr: u32) -> Result<ProcessInfo, OsError> {
    proc_list(r)?
        .into_iter()
        .find(|p| p.ptbr == ptbr)
        .ok_or(OsError::NoSuchProcess(ptbr))
}

pub fn proc_name(r: &impl PhysRead, ptbr: u32) -> Result<String, OsError> {
    process_by_ptbr(r, ptbr).map(|p| p.name)
}

pub fn proc_pid(r: &impl PhysRead, ptbr: u32) -> Result<u32, OsError> {
    process_by_ptbr(r, ptbr).map(|p| p.pid)
}

pub fn proc_stack(r: &impl PhysRead, ptbr: u32) -> Result<u32, OsError> {
    process_by_ptbr(r, ptbr).map(|p| p.stack_base)
}

pub fn proc_heap(r: &impl PhysRead, ptbr: u32) -> Result<u32, OsError> {
    process_by_ptbr(r, ptbr).map(|p| p.heap_base)
}

/// Address-sorted symbol table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SymbolTable {
    syms: Vec<(u32, String)>,
}

impl SymbolTable {
    pub fn new(mut syms: Vec<(u32, String)>) -> Result<SymbolTable, OsError> {
        syms.sort();
        for w in syms.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(OsError::BadSymbols {
                    line: 0,
                    msg: format!("{} and {} share address {:#x}", w[0].1, w[1].1, w[0].0),
                });
            }
        }
        Ok(SymbolTable { syms })
    }

    /// Parses `HEXADDR NAME` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<SymbolTable, OsError> {
        let mut syms = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| OsError::BadSymbols { line: i + 1, msg: msg.into() };
            let mut parts = line.split_whitespace();
            let addr = parts.next().ok_or_else(|| bad("missing address"))?;
            let name = parts.next().ok_or_else(|| bad("missing name"))?;
            if parts.next().is_some() {
                return Err(bad("trailing fields"));
            }
            let addr = u32::from_str_radix(addr.trim_start_matches("0x"), 16).map_err(|_| bad("bad address"))?;
            syms.push((addr, name.to_string()));
        }
        SymbolTable::new(syms)
    }

    pub fn from_image(img: &AssembledImage) -> SymbolTable {
        SymbolTable::new(img.symbols.iter().map(|s| (s.addr, s.name.clone())).collect())
            .expect("assembler symbols have distinct addresses")
    }

    pub fn is_empty(&self) -> bool {
        self.syms.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.syms.iter().map(|(a, n)| (*a, n.as_str()))
    }

    pub fn addr_of(&self, name: &str) -> Result<u32, OsError> {
        self.syms
            .iter()
            .find(|(_, n)| n == name)
            .map(|(a, _)| *a)
            .ok_or_else(|| OsError::SymbolNotFound(name.to_string()))
    }

    /// Nearest symbol at or below `va`, with the offset from it.
    pub fn name_of(&self, va: u32) -> Result<(&str, u32), OsError> {
        let i = self.syms.partition_point(|(a, _)| *a <= va);
        if i == 0 {
            return Err(OsError::SymbolNotFound(format!("{va:#x}")));
        }
        let (a, n) = &self.syms[i - 1];
        Ok((n, va - a))
    }

    /// `name+0xOFF`, `name`, or the bare hex address.
    pub fn describe(&self, va: u32) -> String {
        match self.name_of(va) {
            Ok((n, 0)) => n.to_string(),
            Ok((n, off)) => format!("{n}+{off:#x}"),
            Err(_) => format!("{va:#x}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::Machine;

    #[test]
    fn symbols_round_trip() {
        let t = SymbolTable::parse("00000100 kmain\n00000180 f1\n").unwrap();
        assert_eq!(t.addr_of("kmain").unwrap(), 0x100);
        assert_eq!(t.name_of(0x104).unwrap(), ("kmain", 4));
        assert_eq!(t.name_of(0x180).unwrap(), ("f1", 0));
        assert!(matches!(t.addr_of("nope"), Err(OsError::SymbolNotFound(_))));
        assert!(t.name_of(0x50).is_err());
        assert_eq!(t.describe(0x181), "f1+0x1");
    }

    #[test]
    fn symbols_reject_shared_address() {
        assert!(SymbolTable::parse("100 a\n100 b\n").is_err());
        assert!(SymbolTable::parse("zz a\n").is_err());
    }

    #[test]
    fn zeroed_ram_is_unsupported() {
        let m = Machine::new(1 << 20);
        assert_eq!(proc_list(&m), Err(OsError::UnsupportedGuest));
    }

    fn put_desc(m: &mut Machine, pa: u32, pid: u32, name: &str, ptbr: u32, next: u32) {
        m.write_phys_u32(pa + desc::PID, pid).unwrap();
        m.write_phys(pa + desc::NAME, name.as_bytes()).unwrap();
        m.write_phys_u32(pa + desc::PTBR, ptbr).unwrap();
        m.write_phys_u32(pa + desc::STACK_BASE, 0x9000 + pid).unwrap();
        m.write_phys_u32(pa + desc::NEXT, next).unwrap();
    }

    #[test]
    fn list_lookup_and_cycle() {
        let mut m = Machine::new(1 << 20);
        m.write_phys_u32(KIB_ADDR, KIB_MAGIC).unwrap();
        m.write_phys_u32(KIB_ADDR + 4, 0x3000).unwrap();
        m.write_phys_u32(KIB_ADDR + 8, 0x3060).unwrap();
        put_desc(&mut m, 0x3000, 0, "kernel", 0x1000, 0x3060);
        put_desc(&mut m, 0x3060, 1, "procA", 0x5000, 0);
        let names: Vec<_> = proc_list(&m).unwrap().into_iter().map(|p| p.name).collect();
        assert_eq!(names, ["kernel", "procA"]);
        assert_eq!(proc_name(&m, 0x5000).unwrap(), "procA");
        assert_eq!(proc_pid(&m, 0x5000).unwrap(), 1);
        assert_eq!(proc_stack(&m, 0x5000).unwrap(), 0x9001);
        assert_eq!(current_process(&m).unwrap().pid, 1);
        assert_eq!(proc_name(&m, 0x7777), Err(OsError::NoSuchProcess(0x7777)));
        m.write_phys_u32(0x3060 + desc::NEXT, 0x3060).unwrap();
        assert_eq!(proc_list(&m), Err(OsError::CorruptList(0x3060)));
    }
}
