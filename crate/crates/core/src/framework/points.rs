use std::collections::BTreeSet;

use super::event::AccessKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BreakpointStyle {
    /// Patch `BRK` over the first byte.
    #[default]
    Soft,
    /// Leave code intact and protect the page at the host level.
    Transparent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BreakpointOptions {
    /// PTBR of the target process; `None` matches any process.
    pub process: Option<u32>,
    pub persistent: bool,
    pub style: BreakpointStyle,
}

impl Default for BreakpointOptions {
    fn default() -> Self {
        BreakpointOptions { process: None, persistent: true, style: BreakpointStyle::Soft }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WatchAccess {
    Read,
    Write,
    ReadWrite,
}

impl WatchAccess {
    pub fn covers(self, a: AccessKind) -> bool {
        matches!(
            (self, a),
            (WatchAccess::ReadWrite, _) | (WatchAccess::Read, AccessKind::Read) | (WatchAccess::Write, AccessKind::Write)
        )
    }
}

/// Why a breakpoint site exists. One physical site can serve several.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Purpose {
    Plain { id: u32, persistent: bool },
    FunctionEntry { id: u32 },
    FunctionExit { id: u32, function: u32, sp: u32 },
    SyscallGate,
    SyscallExit { number: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Use {
    pub purpose: Purpose,
    pub process: Option<u32>,
}

/// A code location the framework intercepts, keyed by physical address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Site {
    pub va: u32,
    pub pa: u32,
    pub style: BreakpointStyle,
    pub saved: u8,
    /// Copy of `saved` in the hidden pool, if there is one.
    pub saved_at: Option<u32>,
    pub armed: bool,
    pub uses: Vec<Use>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Watchpoint {
    pub id: u32,
    pub va: u32,
    pub len: u32,
    pub access: WatchAccess,
    pub process: Option<u32>,
    pub frames: BTreeSet<u32>,
}

impl Watchpoint {
    pub fn overlaps(&self, va: u32, len: u32) -> bool {
        let (a0, a1) = (self.va as u64, self.va as u64 + self.len as u64);
        let (b0, b1) = (va as u64, va as u64 + len as u64);
        a0 < b1 && b0 < a1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionTrace {
    pub id: u32,
    pub function: u32,
    pub pa: u32,
}
