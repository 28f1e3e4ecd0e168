use std::fmt;

use crate::vmx::IoAccess;

use super::FrameworkError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    ProcessSwitch,
    Exception,
    Interrupt,
    BreakpointHit,
    WatchpointHit,
    FunctionEntry,
    FunctionExit,
    SyscallEntry,
    SyscallExit,
    IoPort,
    IoMmap,
}

impl EventKind {
    pub const ALL: [EventKind; 11] = [
        EventKind::ProcessSwitch,
        EventKind::Exception,
        EventKind::Interrupt,
        EventKind::BreakpointHit,
        EventKind::WatchpointHit,
        EventKind::FunctionEntry,
        EventKind::FunctionExit,
        EventKind::SyscallEntry,
        EventKind::SyscallExit,
        EventKind::IoPort,
        EventKind::IoMmap,
    ];

    /// Fields a condition may constrain for this kind.
    pub fn fields(self) -> &'static [Field] {
        use Field::*;
        match self {
            EventKind::ProcessSwitch => &[Process],
            EventKind::Exception => &[Process, Vector, Address],
            EventKind::Interrupt => &[Process, Vector, Address],
            EventKind::BreakpointHit => &[Process, Id, Address],
            EventKind::WatchpointHit => &[Process, Id, Address, Access],
            EventKind::FunctionEntry | EventKind::FunctionExit => &[Process, Id, Function],
            EventKind::SyscallEntry | EventKind::SyscallExit => &[Process, Number],
            EventKind::IoPort => &[Process, Port, Access],
            EventKind::IoMmap => &[Process, Address, Access],
        }
    }
}

/// Direction of a memory or port access carried by an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
}

impl From<IoAccess> for AccessKind {
    fn from(a: IoAccess) -> Self {
        match a {
            IoAccess::Read => AccessKind::Read,
            IoAccess::Write => AccessKind::Write,
        }
    }
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventDetail {
    ProcessSwitch { old: u32, new: u32 },
    Exception { vector: u8, instruction: u32, err: u32 },
    Interrupt { vector: u8, instruction: u32 },
    BreakpointHit { id: u32, address: u32 },
    WatchpointHit { id: u32, address: u32, access: AccessKind, instruction: u32 },
    FunctionEntry { id: u32, function: u32, name: Option<String>, caller: u32, ret: u32 },
    FunctionExit { id: u32, function: u32, name: Option<String>, ret: u32 },
    SyscallEntry { number: u32, caller: u32, ret: u32 },
    SyscallExit { number: u32, ret: u32 },
    IoPort { port: u8, access: AccessKind, value: u32 },
    IoMmap { address: u32, access: AccessKind, instruction: u32 },
}

/// A high-level event. `process` is the PTBR current when it happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub process: u32,
    pub retired: u64,
    pub detail: EventDetail,
}

impl Event {
    pub fn kind(&self) -> EventKind {
        match self.detail {
            EventDetail::ProcessSwitch { .. } => EventKind::ProcessSwitch,
            EventDetail::Exception { .. } => EventKind::Exception,
            EventDetail::Interrupt { .. } => EventKind::Interrupt,
            EventDetail::BreakpointHit { .. } => EventKind::BreakpointHit,
            EventDetail::WatchpointHit { .. } => EventKind::WatchpointHit,
            EventDetail::FunctionEntry { .. } => EventKind::FunctionEntry,
            EventDetail::FunctionExit { .. } => EventKind::FunctionExit,
            EventDetail::SyscallEntry { .. } => EventKind::SyscallEntry,
            EventDetail::SyscallExit { .. } => EventKind::SyscallExit,
            EventDetail::IoPort { .. } => EventKind::IoPort,
            EventDetail::IoMmap { .. } => EventKind::IoMmap,
        }
    }

    fn field(&self, f: Field) -> Option<u32> {
        use EventDetail::*;
        let access = |a: &AccessKind| *a as u32;
        Some(match (&self.detail, f) {
            (_, Field::Process) => self.process,
            (Exception { vector, .. } | Interrupt { vector, .. }, Field::Vector) => *vector as u32,
            (Exception { instruction, .. } | Interrupt { instruction, .. }, Field::Address) => *instruction,
            (BreakpointHit { id, .. } | WatchpointHit { id, .. }, Field::Id) => *id,
            (FunctionEntry { id, .. } | FunctionExit { id, .. }, Field::Id) => *id,
            (BreakpointHit { address, .. } | WatchpointHit { address, .. } | IoMmap { address, .. }, Field::Address) => {
                *address
            }
            (WatchpointHit { access: a, .. } | IoPort { access: a, .. } | IoMmap { access: a, .. }, Field::Access) => {
                access(a)
            }
            (FunctionEntry { function, .. } | FunctionExit { function, .. }, Field::Function) => *function,
            (SyscallEntry { number, .. } | SyscallExit { number, .. }, Field::Number) => *number,
            (IoPort { port, .. }, Field::Port) => *port as u32,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    Process,
    Vector,
    Address,
    Id,
    Access,
    Function,
    Number,
    Port,
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Conjunction of equality predicates over event fields.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Condition {
    preds: Vec<(Field, u32)>,
}

impl Condition {
    pub fn any() -> Condition {
        Condition::default()
    }

    pub fn and(mut self, field: Field, value: u32) -> Condition {
        self.preds.push((field, value));
        self
    }

    pub fn port(self, port: u8) -> Condition {
        self.and(Field::Port, port as u32)
    }

    pub fn access(self, a: AccessKind) -> Condition {
        self.and(Field::Access, a as u32)
    }

    pub fn vector(self, v: u8) -> Condition {
        self.and(Field::Vector, v as u32)
    }

    pub fn process(self, ptbr: u32) -> Condition {
        self.and(Field::Process, ptbr)
    }

    pub fn get(&self, field: Field) -> Option<u32> {
        self.preds.iter().find(|(f, _)| *f == field).map(|(_, v)| *v)
    }

    pub(super) fn validate(&self, kind: EventKind) -> Result<(), FrameworkError> {
        for (f, _) in &self.preds {
            if !kind.fields().contains(f) {
                return Err(FrameworkError::UnsupportedCondition(f.to_string()));
            }
        }
        Ok(())
    }

    pub fn matches(&self, ev: &Event) -> bool {
        self.preds.iter().all(|(f, v)| ev.field(*f) == Some(*v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventOutcome {
    PassThrough,
    /// For port reads the guest receives 0; for port writes the device never
    /// sees the value.
    Consume,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscription {
    pub id: u32,
    pub kind: EventKind,
    pub condition: Condition,
}
