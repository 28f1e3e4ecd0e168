//! The trap gate: every call a tool makes goes through [`Api`], which counts
//! it, checks capabilities and polices the per-event budget.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use crate::isa::ListingLine;
use crate::machine::Cpu;
use crate::osdep::{self, ProcessInfo};

use super::event::{Condition, Event, EventKind, EventOutcome};
use super::points::{BreakpointOptions, WatchAccess};
use super::{Framework, FrameworkError, StepReport, WalkResult};

pub const DEFAULT_MAX_API_CALLS: u64 = 100_000;
pub const DEFAULT_MAX_WALL: Duration = Duration::from_millis(250);

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Capabilities {
    pub guest_write: bool,
    pub port_read: BTreeSet<u8>,
}

impl Capabilities {
    pub fn with_ports(guest_write: bool, ports: &[u8]) -> Capabilities {
        Capabilities { guest_write, port_read: ports.iter().copied().collect() }
    }
}

/// Per-event limits. `None` means unlimited.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub max_api_calls: Option<u64>,
    pub max_wall: Option<Duration>,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { max_api_calls: Some(DEFAULT_MAX_API_CALLS), max_wall: Some(DEFAULT_MAX_WALL) }
    }
}

impl Budget {
    pub fn unlimited() -> Budget {
        Budget { max_api_calls: None, max_wall: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolHandle {
    pub capabilities: Capabilities,
    pub budget: Budget,
}

/// An analysis tool.
pub trait Tool {
    /// Called once from `register_tool`, through the trap gate.
    fn attach(&mut self, _api: &mut Api<'_>) -> Result<(), FrameworkError> {
        Ok(())
    }

    fn on_event(&mut self, api: &mut Api<'_>, event: &Event) -> EventOutcome;
}

/// Unwind payload used when a tool exceeds its budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WatchdogExpired {
    pub calls: u64,
}

/// Handle through which a tool reaches the framework.
pub struct Api<'a> {
    fw: &'a mut Framework,
    calls: u64,
    started: Instant,
    budget: Budget,
    caps: Capabilities,
}

impl<'a> Api<'a> {
    pub(super) fn new(fw: &'a mut Framework, budget: Budget, caps: Capabilities) -> Api<'a> {
        Api { fw, calls: 0, started: Instant::now(), budget, caps }
    }

    pub fn call_count(&self) -> u64 {
        self.calls
    }

    fn gate(&mut self) {
        self.calls += 1;
        let over_calls = self.budget.max_api_calls.is_some_and(|m| self.calls > m);
        let over_wall = self.budget.max_wall.is_some_and(|w| self.started.elapsed() > w);
        if over_calls || over_wall {
            // resume_unwind skips the panic hook: this is not a bug report.
            std::panic::resume_unwind(Box::new(WatchdogExpired { calls: self.calls }));
        }
    }

    fn need_write(&self) -> Result<(), FrameworkError> {
        if self.caps.guest_write {
            Ok(())
        } else {
            Err(FrameworkError::WriteAccessDenied)
        }
    }

    pub fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    pub fn subscribe(&mut self, kind: EventKind, cond: Condition) -> Result<u32, FrameworkError> {
        self.gate();
        self.fw.subscribe(kind, cond)
    }

    pub fn unsubscribe(&mut self, id: u32) -> Result<(), FrameworkError> {
        self.gate();
        self.fw.unsubscribe(id)
    }

    pub fn read_regs(&mut self) -> Cpu {
        self.gate();
        self.fw.read_regs()
    }

    pub fn write_regs(&mut self, cpu: &Cpu) -> Result<(), FrameworkError> {
        self.gate();
        self.need_write()?;
        self.fw.write_regs(cpu);
        Ok(())
    }

    pub fn current_process(&mut self) -> u32 {
        self.gate();
        self.fw.current_process()
    }

    pub fn retired(&mut self) -> u64 {
        self.gate();
        self.fw.read_regs().retired
    }

    pub fn guest_read(&mut self, process: u32, va: u32, n: usize) -> Result<Vec<u8>, FrameworkError> {
        self.gate();
        self.fw.guest_read(process, va, n)
    }

    pub fn guest_write(&mut self, process: u32, va: u32, data: &[u8]) -> Result<(), FrameworkError> {
        self.gate();
        self.need_write()?;
        self.fw.guest_write(process, va, data)
    }

    pub fn walk_page_table(&mut self, process: u32, va: u32) -> Result<WalkResult, FrameworkError> {
        self.gate();
        self.fw.walk_page_table(process, va)
    }

    pub fn read_physical(&mut self, pa: u32, n: usize) -> Result<Vec<u8>, FrameworkError> {
        self.gate();
        self.fw.read_physical(pa, n)
    }

    pub fn write_physical(&mut self, pa: u32, data: &[u8]) -> Result<(), FrameworkError> {
        self.gate();
        self.need_write()?;
        self.fw.write_physical(pa, data)
    }

    pub fn port_read(&mut self, port: u8) -> Result<u8, FrameworkError> {
        self.gate();
        if !self.caps.port_read.contains(&port) {
            return Err(FrameworkError::PortAccessDenied(port));
        }
        Ok(self.fw.port_read(port))
    }

    pub fn single_step(&mut self, count: u32) -> StepReport {
        self.gate();
        self.fw.single_step(count)
    }

    pub fn disassemble(&mut self, process: u32, va: u32, count: usize) -> Result<Vec<ListingLine>, FrameworkError> {
        self.gate();
        self.fw.disassemble_guest(process, va, count)
    }

    pub fn set_breakpoint(&mut self, va: u32, opts: BreakpointOptions) -> Result<u32, FrameworkError> {
        self.gate();
        self.fw.set_breakpoint(va, opts)
    }

    pub fn set_watchpoint(
        &mut self,
        va: u32,
        len: u32,
        access: WatchAccess,
        process: Option<u32>,
    ) -> Result<u32, FrameworkError> {
        self.gate();
        self.fw.set_watchpoint(va, len, access, process)
    }

    pub fn remove(&mut self, id: u32) -> Result<(), FrameworkError> {
        self.gate();
        self.fw.remove(id)
    }

    pub fn trace_function(&mut self, target: &str) -> Result<u32, FrameworkError> {
        self.gate();
        self.fw.trace_function(target)
    }

    pub fn trace_syscalls(&mut self, on: bool) -> Result<(), FrameworkError> {
        self.gate();
        self.fw.trace_syscalls(on)
    }

    pub fn symbol_addr(&mut self, name: &str) -> Result<u32, FrameworkError> {
        self.gate();
        Ok(self.fw.symbols().addr_of(name)?)
    }

    pub fn symbol_name(&mut self, va: u32) -> String {
        self.gate();
        self.fw.symbols().describe(va)
    }

    /// Enclosing symbol and offset.
    pub fn symbol_lookup(&mut self, va: u32) -> Option<(String, u32)> {
        self.gate();
        self.fw.symbols().name_of(va).ok().map(|(n, off)| (n.to_string(), off))
    }

    pub fn proc_list(&mut self) -> Result<Vec<ProcessInfo>, FrameworkError> {
        self.gate();
        Ok(osdep::proc_list(&*self.fw)?)
    }

    pub fn proc_name(&mut self, ptbr: u32) -> Result<String, FrameworkError> {
        self.gate();
        Ok(osdep::proc_name(&*self.fw, ptbr)?)
    }

    /// Bytes in the hidden pool for the tool's own use.
    pub fn hidden_alloc(&mut self, len: u32) -> Result<u32, FrameworkError> {
        self.gate();
        self.fw.hidden_alloc(len)
    }
}
