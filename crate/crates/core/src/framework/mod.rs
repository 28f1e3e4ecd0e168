//! The analysis framework: takes over a running machine, turns exits into
//! high-level events for one analysis tool, and gives the tool a mediated
//! view of guest state.

pub mod api;
pub mod event;
pub mod points;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};

use thiserror::Error;

use crate::isa::{disassemble, ControlReg, Instruction, ListingLine, Reg, BRK_OPCODE, CALL_LEN};
use crate::machine::{
    hex, pte, Access, Cpu, Devices, Machine, PhysicalOutOfBounds, Shadow, ShadowMap, StepOutcome, PAGE_SIZE,
    VEC_BRK, VEC_PF, VEC_SYSCALL,
};
use crate::memguard::{MemGuard, MemGuardError, DEFAULT_RESERVED_FRAMES};
use crate::osdep::{OsError, PhysRead, SymbolTable};
use crate::vmx::{ExecutionControls, Exit, ExitReason, IoAccess, Injection, ResumeAction, Vmcs, VmxError};

pub use api::{Api, Budget, Capabilities, Tool, ToolHandle, WatchdogExpired};
pub use event::{AccessKind, Condition, Event, EventDetail, EventKind, EventOutcome, Field, Subscription};
pub use points::{BreakpointOptions, BreakpointStyle, WatchAccess};
use points::{FunctionTrace, Purpose, Site, Use, Watchpoint};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameworkError {
    #[error("framework already loaded")]
    AlreadyLoaded,
    #[error("framework not loaded")]
    NotLoaded,
    #[error("a tool is already registered")]
    ToolAlreadyRegistered,
    #[error("unsupported condition field: {0}")]
    UnsupportedCondition(String),
    #[error("address {0:#x} is not mapped")]
    UnmappedAddress(u32),
    #[error("breakpoint already set at {0:#x}")]
    DuplicateBreakpoint(u32),
    #[error("symbol not found: {0}")]
    SymbolNotFound(String),
    #[error("system call gate is not installed")]
    GateUnreachable,
    #[error("guest address {0:#x} is not mapped")]
    UnmappedGuestAddress(u32),
    #[error("write access to guest state not granted")]
    WriteAccessDenied,
    #[error("not mapped at {0:?} level")]
    NotMapped(Level),
    #[error("physical range {pa:#x}+{len} out of bounds")]
    PhysicalOutOfBounds { pa: u32, len: usize },
    #[error("port {0:#x} not in the read allowlist")]
    PortAccessDenied(u8),
    #[error("no breakpoint, watchpoint, trace or subscription with id {0}")]
    NoSuchId(u32),
    #[error(transparent)]
    MemGuard(#[from] MemGuardError),
    #[error(transparent)]
    Vmx(#[from] VmxError),
    #[error(transparent)]
    Os(OsError),
}

impl From<OsError> for FrameworkError {
    fn from(e: OsError) -> Self {
        match e {
            OsError::SymbolNotFound(s) => FrameworkError::SymbolNotFound(s),
            e => FrameworkError::Os(e),
        }
    }
}

impl From<PhysicalOutOfBounds> for FrameworkError {
    fn from(e: PhysicalOutOfBounds) -> Self {
        FrameworkError::PhysicalOutOfBounds { pa: e.pa, len: e.len }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Directory,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkResult {
    pub pa: u32,
    /// Effective present/writable/user bits (directory AND table).
    pub flags: u32,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub reserved_frames: u32,
    pub symbols: SymbolTable,
    pub record_exits: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config { reserved_frames: DEFAULT_RESERVED_FRAMES, symbols: SymbolTable::default(), record_exits: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunEnd {
    Halted,
    TripleFault(String),
    Limit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepReport {
    pub retired: u64,
    pub last: Option<StepOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    /// Turned into one or more delivered events.
    Abstracted,
    /// Handled by the framework itself with nothing delivered.
    Internal,
    Reinjected,
    /// Ends the run.
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub exit: Exit,
    pub events: u64,
    pub disposition: Disposition,
}

#[derive(Debug)]
enum Guest {
    Virtual(Box<Vmcs>),
    Native(Box<Machine>),
}

struct Registered {
    tool: Option<Box<dyn Tool>>,
    handle: ToolHandle,
}

/// Saved state while framework protections are lifted for one instruction.
struct Lifted {
    shadow: ShadowMap,
    bytes: Vec<u32>,
}

pub struct Framework {
    guest: Guest,
    mg: MemGuard,
    symbols: SymbolTable,
    tool: Option<Registered>,
    dispatching: bool,
    deferred: VecDeque<Event>,
    subs: Vec<Subscription>,
    sites: BTreeMap<u32, Site>,
    watchpoints: Vec<Watchpoint>,
    traces: Vec<FunctionTrace>,
    syscall_gate: Option<u32>,
    next_id: u32,
    completion: Option<(ResumeAction, Vec<Injection>)>,
    unload_requested: bool,
    termination: Option<String>,
    record_exits: bool,
    ledger: Vec<LedgerEntry>,
    delivered: u64,
}

impl std::fmt::Debug for Framework {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Framework")
            .field("loaded", &self.is_loaded())
            .field("sites", &self.sites.len())
            .field("watchpoints", &self.watchpoints.len())
            .finish_non_exhaustive()
    }
}

impl PhysRead for Framework {
    fn read_phys(&self, pa: u32, len: usize) -> Option<Vec<u8>> {
        self.machine().read_phys_guest(pa, len).ok()
    }
}

impl Framework {
    /// Late-launches the framework underneath a running machine.
    pub fn load(machine: Machine, config: Config) -> Result<Framework, FrameworkError> {
        let mut fw = Framework {
            guest: Guest::Native(Box::new(machine)),
            mg: MemGuard::default(),
            symbols: config.symbols,
            tool: None,
            dispatching: false,
            deferred: VecDeque::new(),
            subs: Vec::new(),
            sites: BTreeMap::new(),
            watchpoints: Vec::new(),
            traces: Vec::new(),
            syscall_gate: None,
            next_id: 1,
            completion: None,
            unload_requested: false,
            termination: None,
            record_exits: config.record_exits,
            ledger: Vec::new(),
            delivered: 0,
        };
        fw.launch(config.reserved_frames)?;
        Ok(fw)
    }

    /// Loads again after an unload.
    pub fn reload(&mut self, reserved_frames: u32) -> Result<(), FrameworkError> {
        self.launch(reserved_frames)
    }

    fn launch(&mut self, reserved_frames: u32) -> Result<(), FrameworkError> {
        let Guest::Native(m) = &mut self.guest else {
            return Err(FrameworkError::AlreadyLoaded);
        };
        if m.vmx_enabled {
            return Err(FrameworkError::AlreadyLoaded);
        }
        let mut mg = MemGuard::for_machine(m, reserved_frames);
        mg.reserve(m)?;
        let machine = std::mem::replace(m.as_mut(), Machine::new(0));
        let mut vmcs = Vmcs::late_launch(machine, ExecutionControls::default())?;
        // A zero-length run parks the guest in the exited state.
        let cur = vmcs.guest().cpu.retired;
        vmcs.run_until(cur)?;
        self.guest = Guest::Virtual(Box::new(vmcs));
        self.mg = mg;
        self.unload_requested = false;
        self.sync();
        Ok(())
    }

    pub fn is_loaded(&self) -> bool {
        matches!(self.guest, Guest::Virtual(_))
    }

    pub fn machine(&self) -> &Machine {
        match &self.guest {
            Guest::Virtual(v) => v.guest(),
            Guest::Native(m) => m,
        }
    }

    /// Direct host access to the machine, bypassing every framework check.
    pub fn machine_mut(&mut self) -> &mut Machine {
        match &mut self.guest {
            Guest::Virtual(v) => v.guest_mut(),
            Guest::Native(m) => m,
        }
    }

    fn m(&mut self) -> &mut Machine {
        self.machine_mut()
    }

    pub fn vmcs(&self) -> Option<&Vmcs> {
        match &self.guest {
            Guest::Virtual(v) => Some(v),
            Guest::Native(_) => None,
        }
    }

    pub fn memguard(&self) -> &MemGuard {
        &self.mg
    }

    pub fn symbols(&self) -> &SymbolTable {
        &self.symbols
    }

    pub fn set_symbols(&mut self, symbols: SymbolTable) {
        self.symbols = symbols;
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    pub fn delivered_events(&self) -> u64 {
        self.delivered
    }

    /// Why the tool was terminated, if it was.
    pub fn termination(&self) -> Option<&str> {
        self.termination.as_deref()
    }

    pub fn into_machine(mut self) -> Machine {
        if self.is_loaded() {
            self.unload().expect("loaded framework unloads");
        }
        match self.guest {
            Guest::Native(m) => *m,
            Guest::Virtual(_) => unreachable!("unloaded above"),
        }
    }

    /// Digest of the guest as it would look without the framework: hidden
    /// frames, remapped entries and patched breakpoint bytes are shown with
    /// their guest-visible content.
    pub fn guest_digest(&self) -> [u8; 32] {
        let m = self.machine();
        if !self.is_loaded() {
            return m.digest();
        }
        let raw = m.ram();
        let mut view = raw.to_vec();
        self.mg.guest_view(raw, &mut view);
        for s in self.sites.values() {
            if s.armed && (s.pa as usize) < view.len() {
                view[s.pa as usize] = s.saved;
            }
        }
        m.digest_with(&view, &m.dev.framebuffer)
    }

    pub fn guest_digest_hex(&self) -> String {
        hex(&self.guest_digest())
    }

    // ---- tools and subscriptions ----

    pub fn register_tool(
        &mut self,
        tool: Box<dyn Tool>,
        capabilities: Capabilities,
        budget: Budget,
    ) -> Result<ToolHandle, FrameworkError> {
        if !self.is_loaded() {
            return Err(FrameworkError::NotLoaded);
        }
        if self.tool.is_some() {
            return Err(FrameworkError::ToolAlreadyRegistered);
        }
        let handle = ToolHandle { capabilities, budget };
        self.tool = Some(Registered { tool: Some(tool), handle: handle.clone() });
        let attached = self.with_tool(|tool, api| tool.attach(api));
        match attached {
            Some(Ok(())) => Ok(handle),
            Some(Err(e)) => {
                self.tool = None;
                Err(e)
            }
            None => Err(FrameworkError::NotLoaded),
        }
    }

    pub fn tool_handle(&self) -> Option<&ToolHandle> {
        self.tool.as_ref().map(|t| &t.handle)
    }

    /// Host-side handle with the registered tool's capabilities (or the
    /// defaults if none is registered).
    pub fn api(&mut self) -> Api<'_> {
        let h = self.tool_handle().cloned().unwrap_or(ToolHandle {
            capabilities: Capabilities::default(),
            budget: Budget::default(),
        });
        Api::new(self, h.budget, h.capabilities)
    }

    pub fn subscribe(&mut self, kind: EventKind, condition: Condition) -> Result<u32, FrameworkError> {
        condition.validate(kind)?;
        let id = self.fresh_id();
        self.subs.push(Subscription { id, kind, condition });
        self.sync();
        Ok(id)
    }

    pub fn unsubscribe(&mut self, id: u32) -> Result<(), FrameworkError> {
        let n = self.subs.len();
        self.subs.retain(|s| s.id != id);
        if self.subs.len() == n {
            return Err(FrameworkError::NoSuchId(id));
        }
        self.sync();
        Ok(())
    }

    pub fn subscriptions(&self) -> &[Subscription] {
        &self.subs
    }

    fn ensure_subscribed(&mut self, kind: EventKind) {
        if !self.subs.iter().any(|s| s.kind == kind) {
            let id = self.fresh_id();
            self.subs.push(Subscription { id, kind, condition: Condition::any() });
        }
    }

    fn fresh_id(&mut self) -> u32 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Runs `f` with the tool taken out and an [`Api`] over the framework.
    /// Returns `None` if there is no tool or it was terminated.
    fn with_tool<R>(&mut self, f: impl FnOnce(&mut dyn Tool, &mut Api<'_>) -> R) -> Option<R> {
        let reg = self.tool.as_mut()?;
        let mut tool = reg.tool.take()?;
        let handle = reg.handle.clone();
        let was = std::mem::replace(&mut self.dispatching, true);
        let result = catch_unwind(AssertUnwindSafe(|| {
            let mut api = Api::new(self, handle.budget, handle.capabilities);
            f(tool.as_mut(), &mut api)
        }));
        self.dispatching = was;
        match result {
            Ok(r) => {
                if let Some(reg) = self.tool.as_mut() {
                    reg.tool = Some(tool);
                }
                Some(r)
            }
            Err(payload) => {
                let why = if let Some(w) = payload.downcast_ref::<WatchdogExpired>() {
                    format!("budget exhausted after {} API calls", w.calls)
                } else if let Some(s) = payload.downcast_ref::<&str>() {
                    format!("tool failed: {s}")
                } else if let Some(s) = payload.downcast_ref::<String>() {
                    format!("tool failed: {s}")
                } else {
                    "tool failed".to_string()
                };
                log::warn!("terminating tool: {why}");
                self.terminate(why);
                None
            }
        }
    }

    fn terminate(&mut self, why: String) {
        self.tool = None;
        self.deferred.clear();
        self.termination = Some(why);
        self.unload_requested = true;
    }

    fn subscribed(&self, ev: &Event) -> bool {
        let kind = ev.kind();
        self.subs.iter().any(|s| s.kind == kind && s.condition.matches(ev))
    }

    fn emit(&mut self, detail: EventDetail) -> EventOutcome {
        let m = self.machine();
        let ev = Event { process: m.cpu.ptbr(), retired: m.cpu.retired, detail };
        if self.tool.is_none() || !self.subscribed(&ev) {
            return EventOutcome::PassThrough;
        }
        if self.dispatching {
            self.deferred.push_back(ev);
            return EventOutcome::PassThrough;
        }
        let out = self.dispatch(&ev);
        while let Some(d) = self.deferred.pop_front() {
            self.dispatch(&d);
        }
        out
    }

    fn dispatch(&mut self, ev: &Event) -> EventOutcome {
        self.delivered += 1;
        self.with_tool(|tool, api| tool.on_event(api, ev)).unwrap_or(EventOutcome::PassThrough)
    }

    // ---- run loop and exit handling ----

    pub fn run(&mut self) -> RunEnd {
        self.run_until(u64::MAX)
    }

    /// Runs until HLT, a triple fault, or `limit` retired instructions.
    pub fn run_until(&mut self, limit: u64) -> RunEnd {
        loop {
            let vmcs = match &mut self.guest {
                Guest::Native(m) => {
                    if m.cpu.halted {
                        return halted_end(m);
                    }
                    return match m.run(limit) {
                        StepOutcome::Halted => halted_end(m),
                        _ => RunEnd::Limit,
                    };
                }
                Guest::Virtual(v) => v,
            };
            let m = vmcs.guest();
            if m.cpu.halted {
                return halted_end(m);
            }
            if m.cpu.retired >= limit {
                return RunEnd::Limit;
            }
            self.sync();
            let Guest::Virtual(vmcs) = &mut self.guest else { unreachable!() };
            let (action, injections) = self.completion.take().unwrap_or((ResumeAction::None, Vec::new()));
            for inj in injections {
                vmcs.inject(inj).expect("exited");
            }
            let exit = match vmcs.resume(action).expect("exited") {
                Some(e) => e,
                None => vmcs.run_until(limit).expect("entered"),
            };
            let before = self.delivered;
            let (end, mut disposition) = self.handle_exit(&exit);
            let events = self.delivered - before;
            if events > 0 && disposition != Disposition::Terminal {
                disposition = Disposition::Abstracted;
            }
            if self.record_exits {
                self.ledger.push(LedgerEntry { exit, events, disposition });
            }
            if self.unload_requested {
                self.unload().expect("unload always succeeds");
            }
            if let Some(end) = end {
                return end;
            }
        }
    }

    fn handle_exit(&mut self, exit: &Exit) -> (Option<RunEnd>, Disposition) {
        match exit.reason.clone() {
            ExitReason::Limit => (Some(RunEnd::Limit), Disposition::Terminal),
            ExitReason::Hlt => {
                self.m().halt();
                (Some(RunEnd::Halted), Disposition::Terminal)
            }
            ExitReason::TripleFault { diagnostic } => (Some(RunEnd::TripleFault(diagnostic)), Disposition::Terminal),
            ExitReason::Exception { vector, err, far } => (None, self.on_exception(vector, err, far)),
            ExitReason::ExternalInterrupt { line } => {
                let mark = self.mark();
                let pc = self.machine().cpu.pc;
                self.emit(EventDetail::Interrupt { vector: line, instruction: pc });
                if self.mark() == mark {
                    self.completion = Some((ResumeAction::None, vec![Injection::Interrupt { line }]));
                }
                (None, Disposition::Reinjected)
            }
            ExitReason::IoPort { port, access, reg, value } => {
                let mark = self.mark();
                let len = Instruction::In { rd: reg, port }.len() as u32;
                match access {
                    IoAccess::Read => {
                        let v = self.m().port_in(port);
                        let out = self.emit(EventDetail::IoPort { port, access: AccessKind::Read, value: v });
                        if self.mark() == mark {
                            let v = if out == EventOutcome::Consume { 0 } else { v };
                            self.m().cpu.set_reg(reg, v);
                            self.completion = Some((ResumeAction::Skip(len), Vec::new()));
                        }
                    }
                    IoAccess::Write => {
                        let v = value.unwrap_or(0);
                        let out = self.emit(EventDetail::IoPort { port, access: AccessKind::Write, value: v });
                        if self.mark() == mark {
                            if out == EventOutcome::PassThrough {
                                self.m().port_out(port, v);
                            }
                            self.completion = Some((ResumeAction::Skip(len), Vec::new()));
                        }
                    }
                }
                (None, Disposition::Internal)
            }
            ExitReason::PtbrWrite { new_value, old_value } => {
                let mark = self.mark();
                if new_value != old_value {
                    self.emit(EventDetail::ProcessSwitch { old: old_value, new: new_value });
                }
                if self.mark() == mark {
                    self.load_ptbr(new_value);
                    let len = Instruction::Movcr { cr: ControlReg::Ptbr, rs: Reg(0) }.len() as u32;
                    self.completion = Some((ResumeAction::Skip(len), Vec::new()));
                }
                (None, Disposition::Internal)
            }
        }
    }

    /// Guest progress marker; a tool that steps the guest changes it.
    fn mark(&self) -> (u32, u64) {
        let c = &self.machine().cpu;
        (c.pc, c.retired)
    }

    fn load_ptbr(&mut self, value: u32) {
        let Guest::Virtual(v) = &mut self.guest else { return };
        let m = v.guest_mut();
        m.cpu.cr[ControlReg::Ptbr as usize] = value;
        if let Err(e) = self.mg.on_ptbr_load(m, value) {
            log::warn!("page tables at {value:#x} not tracked: {e}");
        }
    }

    fn on_exception(&mut self, vector: u8, err: u32, far: u32) -> Disposition {
        let m = self.machine();
        let pc = m.cpu.pc;
        let user = m.cpu.user();
        if vector == VEC_BRK {
            if let Ok(pa) = m.translate(pc, Access::Execute, user) {
                if self.sites.get(&pa).is_some_and(|s| s.armed) {
                    self.breakpoint_hit(pa);
                    return Disposition::Internal;
                }
            }
        }
        if vector == VEC_PF && err & 1 != 0 {
            let access = if err & 8 != 0 {
                Access::Execute
            } else if err & 2 != 0 {
                Access::Write
            } else {
                Access::Read
            };
            if m.translate(far, access, err & 4 != 0).is_ok() {
                // The guest's own tables allow this access: our protection.
                if access == Access::Execute && far == pc {
                    if let Ok(pa) = m.translate(pc, Access::Execute, user) {
                        if self.sites.get(&pa).is_some_and(|s| !s.uses.is_empty()) {
                            self.breakpoint_hit(pa);
                            return Disposition::Internal;
                        }
                    }
                }
                self.emulate_one();
                return Disposition::Internal;
            }
        }
        let mark = self.mark();
        self.emit(EventDetail::Exception { vector, instruction: pc, err });
        if self.mark() == mark {
            let trap = vector == VEC_BRK || vector == VEC_SYSCALL;
            let action = if trap { ResumeAction::Skip(1) } else { ResumeAction::None };
            self.completion = Some((action, vec![Injection::Exception { vector, err, far }]));
        }
        Disposition::Reinjected
    }

    // ---- breakpoints ----

    /// Physical address of `va` in `process` (current if `None`).
    fn translate_for(&self, process: Option<u32>, va: u32) -> Option<u32> {
        let m = self.machine();
        match process {
            Some(p) if p != m.cpu.ptbr() => self.walk_page_table(p, va).ok().map(|w| w.pa),
            _ if !m.cpu.paging() => Some(va),
            _ => self.walk_page_table(m.cpu.ptbr(), va).ok().map(|w| w.pa),
        }
    }

    fn add_use(&mut self, process: Option<u32>, va: u32, purpose: Purpose, style: BreakpointStyle) -> Result<u32, FrameworkError> {
        let pa = self.translate_for(process, va).ok_or(FrameworkError::UnmappedAddress(va))?;
        if pa as usize >= self.machine().mem_size() {
            return Err(FrameworkError::UnmappedAddress(va));
        }
        if !self.sites.contains_key(&pa) {
            let saved = self.machine().read_phys(pa, 1)?[0];
            let saved_at = self.mg.alloc(4).ok();
            if let Some(a) = saved_at {
                self.m().write_phys(a, &[saved])?;
            }
            self.sites.insert(pa, Site { va, pa, style, saved, saved_at, armed: false, uses: Vec::new() });
        }
        let site = self.sites.get_mut(&pa).expect("inserted");
        site.uses.push(Use { purpose, process });
        self.arm(pa);
        Ok(pa)
    }

    fn arm(&mut self, pa: u32) {
        let Some(site) = self.sites.get_mut(&pa) else { return };
        if site.style == BreakpointStyle::Soft && !site.armed && !site.uses.is_empty() {
            site.armed = true;
            self.machine_mut().write_phys(pa, &[BRK_OPCODE]).expect("site in RAM");
        }
    }

    fn disarm(&mut self, pa: u32) {
        let Some(site) = self.sites.get_mut(&pa) else { return };
        if site.armed {
            site.armed = false;
            let original = match site.saved_at {
                Some(a) => self.machine().read_phys(a, 1).expect("pool in RAM")[0],
                None => site.saved,
            };
            self.machine_mut().write_phys(pa, &[original]).expect("site in RAM");
        }
    }

    fn drop_site_if_unused(&mut self, pa: u32) {
        if self.sites.get(&pa).is_some_and(|s| s.uses.is_empty()) {
            self.disarm(pa);
            self.sites.remove(&pa);
        }
    }

    fn breakpoint_hit(&mut self, pa: u32) {
        let m = self.machine();
        let process = m.cpu.ptbr();
        let pc = m.cpu.pc;
        let sp = m.cpu.reg(Reg::SP);
        let r0 = m.cpu.reg(Reg(0));
        let epc = m.cpu.cr(ControlReg::Epc);
        self.disarm(pa);

        let uses = std::mem::take(&mut self.sites.get_mut(&pa).expect("site").uses);
        let mut keep = Vec::new();
        let mut events = Vec::new();
        let mut followups = Vec::new();
        for u in uses {
            if u.process.is_some_and(|p| p != process) {
                keep.push(u);
                continue;
            }
            match u.purpose {
                Purpose::Plain { id, persistent } => {
                    events.push(EventDetail::BreakpointHit { id, address: pc });
                    if persistent {
                        keep.push(u);
                    }
                }
                Purpose::FunctionEntry { id } => {
                    let ret = self
                        .guest_read(process, sp, 4)
                        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .unwrap_or(0);
                    let name = self.exact_name(pc);
                    events.push(EventDetail::FunctionEntry {
                        id,
                        function: pc,
                        name,
                        caller: ret.wrapping_sub(CALL_LEN),
                        ret,
                    });
                    followups.push((ret, Purpose::FunctionExit { id, function: pc, sp: sp.wrapping_add(4) }));
                    keep.push(u);
                }
                Purpose::FunctionExit { id, function, sp: want } if want == sp => {
                    let name = self.exact_name(function);
                    events.push(EventDetail::FunctionExit { id, function, name, ret: pc });
                }
                Purpose::SyscallGate => {
                    events.push(EventDetail::SyscallEntry { number: r0, caller: epc.wrapping_sub(1), ret: epc });
                    followups.push((epc, Purpose::SyscallExit { number: r0 }));
                    keep.push(u);
                }
                Purpose::SyscallExit { number } => {
                    events.push(EventDetail::SyscallExit { number, ret: pc });
                }
                Purpose::FunctionExit { .. } => keep.push(u),
            }
        }
        self.sites.get_mut(&pa).expect("site").uses = keep;
        for (va, purpose) in followups {
            if let Err(e) = self.add_use(Some(process), va, purpose, BreakpointStyle::Soft) {
                log::warn!("cannot intercept return to {va:#x}: {e}");
            }
        }
        // add_use may have re-armed this very site.
        self.disarm(pa);

        let mark = self.mark();
        for e in events {
            self.emit(e);
        }
        let moved = self.mark() != mark;
        match self.sites.get(&pa) {
            Some(s) if !s.uses.is_empty() => {
                if !moved {
                    self.emulate_one();
                }
                self.arm(pa);
            }
            Some(_) => self.drop_site_if_unused(pa),
            None => {}
        }
    }

    /// Shows original bytes in place of armed `BRK` patches.
    fn unpatch(&self, pa: u32, bytes: &mut [u8]) {
        let end = pa as u64 + bytes.len() as u64;
        for s in self.sites.range(pa..).take_while(|(k, _)| (**k as u64) < end).map(|(_, s)| s) {
            if s.armed {
                bytes[(s.pa - pa) as usize] = s.saved;
            }
        }
    }

    fn exact_name(&self, va: u32) -> Option<String> {
        match self.symbols.name_of(va) {
            Ok((n, 0)) => Some(n.to_string()),
            _ => None,
        }
    }

    pub fn set_breakpoint(&mut self, va: u32, opts: BreakpointOptions) -> Result<u32, FrameworkError> {
        let pa = self.translate_for(opts.process, va).ok_or(FrameworkError::UnmappedAddress(va))?;
        if let Some(site) = self.sites.get(&pa) {
            if site.uses.iter().any(|u| matches!(u.purpose, Purpose::Plain { .. }) && u.process == opts.process) {
                return Err(FrameworkError::DuplicateBreakpoint(va));
            }
        }
        let id = self.fresh_id();
        self.add_use(opts.process, va, Purpose::Plain { id, persistent: opts.persistent }, opts.style)?;
        self.ensure_subscribed(EventKind::BreakpointHit);
        self.sync();
        Ok(id)
    }

    pub fn set_watchpoint(
        &mut self,
        va: u32,
        len: u32,
        access: WatchAccess,
        process: Option<u32>,
    ) -> Result<u32, FrameworkError> {
        let len = len.max(1);
        let mut frames = BTreeSet::new();
        let mut page = va & !(PAGE_SIZE - 1);
        let last = va.wrapping_add(len - 1);
        loop {
            let at = page.max(va);
            let pa = self.translate_for(process, at).ok_or(FrameworkError::UnmappedAddress(at))?;
            frames.insert(pa / PAGE_SIZE);
            if page >= last & !(PAGE_SIZE - 1) {
                break;
            }
            page += PAGE_SIZE;
        }
        let id = self.fresh_id();
        self.watchpoints.push(Watchpoint { id, va, len, access, process, frames });
        self.ensure_subscribed(EventKind::WatchpointHit);
        self.ensure_subscribed(EventKind::IoMmap);
        self.sync();
        Ok(id)
    }

    /// Sets an entry breakpoint on a function, by symbol name or hex address.
    pub fn trace_function(&mut self, target: &str) -> Result<u32, FrameworkError> {
        let va = match parse_addr(target) {
            Some(a) => a,
            None => self.symbols.addr_of(target)?,
        };
        let id = self.fresh_id();
        let pa = self.add_use(None, va, Purpose::FunctionEntry { id }, BreakpointStyle::Soft)?;
        self.traces.push(FunctionTrace { id, function: va, pa });
        self.ensure_subscribed(EventKind::FunctionEntry);
        self.ensure_subscribed(EventKind::FunctionExit);
        self.sync();
        Ok(id)
    }

    pub fn trace_syscalls(&mut self, on: bool) -> Result<(), FrameworkError> {
        if on {
            if self.syscall_gate.is_some() {
                return Ok(());
            }
            let m = self.machine();
            let gate = m.read_phys_u32(m.cpu.cr(ControlReg::Ivt).wrapping_add(VEC_SYSCALL as u32 * 4)).unwrap_or(0);
            if gate == 0 {
                return Err(FrameworkError::GateUnreachable);
            }
            let pa = self.add_use(None, gate, Purpose::SyscallGate, BreakpointStyle::Soft)?;
            self.syscall_gate = Some(pa);
            self.ensure_subscribed(EventKind::SyscallEntry);
            self.ensure_subscribed(EventKind::SyscallExit);
        } else {
            self.syscall_gate = None;
            self.retain_uses(|p| !matches!(p, Purpose::SyscallGate | Purpose::SyscallExit { .. }));
        }
        self.sync();
        Ok(())
    }

    fn retain_uses(&mut self, keep: impl Fn(&Purpose) -> bool) {
        let pas: Vec<u32> = self.sites.keys().copied().collect();
        for pa in pas {
            let site = self.sites.get_mut(&pa).expect("listed");
            site.uses.retain(|u| keep(&u.purpose));
            self.drop_site_if_unused(pa);
        }
    }

    /// Removes a breakpoint, watchpoint, function trace or subscription.
    pub fn remove(&mut self, id: u32) -> Result<(), FrameworkError> {
        let bp = self
            .sites
            .values()
            .any(|s| s.uses.iter().any(|u| matches!(u.purpose, Purpose::Plain { id: i, .. } if i == id)));
        let trace = self.traces.iter().any(|t| t.id == id);
        if bp || trace {
            self.traces.retain(|t| t.id != id);
            self.retain_uses(|p| match p {
                Purpose::Plain { id: i, .. } | Purpose::FunctionEntry { id: i } | Purpose::FunctionExit { id: i, .. } => {
                    *i != id
                }
                _ => true,
            });
        } else if self.watchpoints.iter().any(|w| w.id == id) {
            self.watchpoints.retain(|w| w.id != id);
        } else {
            return self.unsubscribe(id);
        }
        self.sync();
        Ok(())
    }

    /// `(id, va, style, persistent)` for every plain breakpoint.
    pub fn breakpoints(&self) -> Vec<(u32, u32, BreakpointStyle, bool)> {
        let mut out = Vec::new();
        for s in self.sites.values() {
            for u in &s.uses {
                if let Purpose::Plain { id, persistent } = u.purpose {
                    out.push((id, s.va, s.style, persistent));
                }
            }
        }
        out.sort_by_key(|b| b.0);
        out
    }

    pub fn watchpoint_ids(&self) -> Vec<(u32, u32, u32, WatchAccess)> {
        self.watchpoints.iter().map(|w| (w.id, w.va, w.len, w.access)).collect()
    }

    /// Whether the guest byte at physical `pa` is currently patched.
    pub fn is_armed(&self, pa: u32) -> bool {
        self.sites.get(&pa).is_some_and(|s| s.armed)
    }

    // ---- root-mode emulation ----

    fn lift(&mut self) -> Lifted {
        let m = self.machine();
        let (pc, user) = (m.cpu.pc, m.cpu.user());
        let mut bytes = Vec::new();
        for i in 0..6 {
            if let Ok(pa) = m.translate(pc.wrapping_add(i), Access::Execute, user) {
                if self.sites.get(&pa).is_some_and(|s| s.armed) {
                    bytes.push(pa);
                }
            }
        }
        for pa in &bytes {
            self.disarm(*pa);
        }
        let shadow = std::mem::take(&mut self.m().shadow);
        Lifted { shadow, bytes }
    }

    fn unlift(&mut self, l: Lifted) {
        self.m().shadow = l.shadow;
        for pa in l.bytes {
            self.arm(pa);
        }
    }

    /// Executes the instruction at pc with every framework protection
    /// lifted, delivering watchpoint events first and keeping memguard's
    /// view of page tables current.
    fn emulate_one(&mut self) -> StepOutcome {
        if self.machine().cpu.halted {
            return StepOutcome::Halted;
        }
        let lifted = self.lift();
        let m = self.machine();
        let fetched = m.fetch();
        let user = m.cpu.user();
        let process = m.cpu.ptbr();
        let pc = m.cpu.pc;
        let mut notes = Vec::new();
        let mut slots = BTreeMap::new();
        if let Ok((instr, _)) = &fetched {
            for acc in m.data_accesses(instr) {
                let kind = if acc.access == Access::Write { AccessKind::Write } else { AccessKind::Read };
                for w in &self.watchpoints {
                    if w.process.is_some_and(|p| p != process) || !w.access.covers(kind) || !w.overlaps(acc.va, acc.len) {
                        continue;
                    }
                    let address = acc.va.max(w.va);
                    let mmio = m.translate(address, acc.access, user).is_ok_and(Devices::fb_contains);
                    notes.push(if mmio {
                        EventDetail::IoMmap { address, access: kind, instruction: pc }
                    } else {
                        EventDetail::WatchpointHit { id: w.id, address, access: kind, instruction: pc }
                    });
                }
                if acc.access == Access::Write {
                    for i in 0..acc.len {
                        if let Ok(pa) = m.translate(acc.va.wrapping_add(i), Access::Write, user) {
                            if self.mg.guards(pa) {
                                let slot = pa & !3;
                                slots.insert(slot, guest_word(m, slot));
                            }
                        }
                    }
                }
            }
        }
        let (instr, len) = match fetched {
            Ok(x) => x,
            Err(f) => {
                self.unlift(lifted);
                self.fault_in_emulation(f);
                return StepOutcome::Fault(f);
            }
        };
        if !notes.is_empty() {
            self.unlift(lifted);
            let mark = self.mark();
            for n in notes {
                self.emit(n);
            }
            if self.mark() != mark {
                return StepOutcome::Retired;
            }
            return self.execute_lifted(instr, len, slots);
        }
        let out = self.execute_inner(instr, len, slots);
        self.unlift(lifted);
        self.after_execute(out)
    }

    fn execute_lifted(&mut self, instr: Instruction, len: usize, slots: BTreeMap<u32, u32>) -> StepOutcome {
        let lifted = self.lift();
        let out = self.execute_inner(instr, len, slots);
        self.unlift(lifted);
        self.after_execute(out)
    }

    fn execute_inner(&mut self, instr: Instruction, len: usize, slots: BTreeMap<u32, u32>) -> (StepOutcome, Option<(u32, u32)>, bool, Option<EventDetail>) {
        let old_ptbr = self.machine().cpu.ptbr();
        let kernel = !self.machine().cpu.user();
        let out = self.m().execute_decoded(instr, len);
        let mut rebuild = false;
        if out == StepOutcome::Retired {
            let dir = old_ptbr & pte::FRAME_MASK;
            for (slot, before) in slots {
                let now = guest_word(self.machine(), slot);
                if now != before {
                    let Guest::Virtual(v) = &mut self.guest else { break };
                    if let Err(e) = self.mg.on_pt_write(v.guest_mut(), slot, now) {
                        log::warn!("page-table write at {slot:#x}: {e}");
                    }
                    rebuild |= slot & pte::FRAME_MASK == dir;
                }
            }
        }
        let new_ptbr = self.machine().cpu.ptbr();
        let switch = (out == StepOutcome::Retired && new_ptbr != old_ptbr).then_some((old_ptbr, new_ptbr));
        let io = match (out, instr) {
            (StepOutcome::Retired, Instruction::In { rd, port }) if kernel && self.io_watched(port) => {
                Some(EventDetail::IoPort { port, access: AccessKind::Read, value: self.machine().cpu.reg(rd) })
            }
            (StepOutcome::Retired, Instruction::Out { port, rs }) if kernel && self.io_watched(port) => {
                Some(EventDetail::IoPort { port, access: AccessKind::Write, value: self.machine().cpu.reg(rs) })
            }
            _ => None,
        };
        (out, switch, rebuild, io)
    }

    fn after_execute(&mut self, r: (StepOutcome, Option<(u32, u32)>, bool, Option<EventDetail>)) -> StepOutcome {
        let (out, switch, rebuild, io) = r;
        if let Some((old, new)) = switch {
            self.load_ptbr(new);
            self.emit(EventDetail::ProcessSwitch { old, new });
        } else if rebuild {
            let p = self.machine().cpu.ptbr();
            self.load_ptbr(p);
        }
        if let Some(io) = io {
            self.emit(io);
        }
        if let StepOutcome::Fault(f) = out {
            self.fault_in_emulation(f);
        }
        out
    }

    fn io_watched(&self, port: u8) -> bool {
        self.vmcs().is_some_and(|v| v.controls().io(port))
    }

    fn fault_in_emulation(&mut self, f: crate::machine::Fault) {
        let pc = self.machine().cpu.pc;
        self.emit(EventDetail::Exception { vector: f.vector, instruction: pc, err: f.err });
        let _ = self.m().raise(f);
    }

    /// Applies a pending exit completion directly to the machine.
    /// Applies a pending exit completion. Returns whether it finished an
    /// instruction on the guest's behalf.
    fn settle(&mut self) -> bool {
        let Some((action, injections)) = self.completion.take() else { return false };
        let m = self.m();
        let skipped = matches!(action, ResumeAction::Skip(_));
        if let ResumeAction::Skip(len) = action {
            m.skip_instruction(len);
        }
        for inj in injections {
            let _ = match inj {
                Injection::Exception { vector, err, far } => m.inject_exception(vector, err, far),
                Injection::Interrupt { line } => m.inject_interrupt(line),
            };
        }
        skipped
    }

    /// Executes `count` guest instructions in root mode. Pending interrupts
    /// are delivered first and do not count. Finishing an instruction the
    /// current exit interrupted counts as the first step.
    pub fn single_step(&mut self, count: u32) -> StepReport {
        let start = self.machine().cpu.retired;
        let first = if count > 0 && self.settle() { 1 } else { 0 };
        let mut last = (first == 1).then_some(StepOutcome::Retired);
        for _ in first..count {
            if !self.is_loaded() {
                let m = self.m();
                let mut out = m.step();
                if let StepOutcome::Interrupted(_) = out {
                    out = m.execute();
                }
                if let StepOutcome::Fault(f) = out {
                    let _ = m.raise(f);
                }
                last = Some(out);
                continue;
            }
            let m = self.m();
            if m.cpu.halted {
                last = Some(StepOutcome::Halted);
                break;
            }
            m.drain_input();
            if let Some(line) = m.interrupt_deliverable() {
                let pc = m.cpu.pc;
                self.emit(EventDetail::Interrupt { vector: line, instruction: pc });
                if self.m().inject_interrupt(line).is_err() {
                    last = Some(StepOutcome::Halted);
                    break;
                }
            }
            last = Some(self.emulate_one());
        }
        StepReport { retired: self.machine().cpu.retired - start, last }
    }

    // ---- protections and controls ----

    fn sync(&mut self) {
        let Guest::Virtual(vmcs) = &mut self.guest else { return };
        let mut shadow = ShadowMap::new();
        for (f, s) in self.mg.shadow() {
            shadow.insert(f, s);
        }
        for w in &self.watchpoints {
            for f in &w.frames {
                shadow.insert(*f, Shadow::NoAccess);
            }
        }
        for s in self.sites.values() {
            if s.style == BreakpointStyle::Transparent && !s.uses.is_empty() {
                shadow.insert(s.pa / PAGE_SIZE, Shadow::NoAccess);
            }
        }
        let mut c = ExecutionControls::default();
        c.set_exception(VEC_BRK, true);
        if !shadow.is_empty() {
            c.set_exception(VEC_PF, true);
        }
        c.ptbr_write_exit = self.mg.is_active();
        for s in &self.subs {
            match s.kind {
                EventKind::Exception => match s.condition.get(Field::Vector) {
                    Some(v) if v < 64 => c.set_exception(v as u8, true),
                    Some(_) => {}
                    None => c.exception_bitmap |= 0xFFFF_FFFF,
                },
                EventKind::IoPort => match s.condition.get(Field::Port) {
                    Some(p) if p < 256 => c.set_io(p as u8, true),
                    Some(_) => {}
                    None => c.io_bitmap = [u64::MAX; 4],
                },
                EventKind::ProcessSwitch => c.ptbr_write_exit = true,
                EventKind::Interrupt => c.external_interrupt_exit = true,
                _ => {}
            }
        }
        vmcs.guest_mut().shadow = shadow;
        if vmcs.is_exited() {
            vmcs.set_controls(c).expect("exited");
        }
    }

    // ---- unload ----

    /// Removes every trace of the framework and continues natively.
    pub fn unload(&mut self) -> Result<(), FrameworkError> {
        if !self.is_loaded() {
            return Err(FrameworkError::NotLoaded);
        }
        self.settle();
        let pas: Vec<u32> = self.sites.keys().copied().collect();
        for pa in pas {
            self.disarm(pa);
        }
        self.sites.clear();
        self.watchpoints.clear();
        self.traces.clear();
        self.syscall_gate = None;
        self.subs.clear();
        self.deferred.clear();
        self.tool = None;
        let Guest::Virtual(vmcs) = &mut self.guest else { unreachable!() };
        let m = vmcs.guest_mut();
        m.shadow.clear();
        self.mg.release(m);
        self.mg = MemGuard::default();
        let machine = vmcs.unload()?;
        self.guest = Guest::Native(Box::new(machine));
        self.unload_requested = false;
        Ok(())
    }

    // ---- guest inspection ----

    pub fn current_process(&self) -> u32 {
        self.machine().cpu.ptbr()
    }

    pub fn read_regs(&self) -> Cpu {
        self.machine().cpu.clone()
    }

    /// Replaces registers, pc, flags, mode and control registers. The
    /// retired count and halt state are kept.
    pub fn write_regs(&mut self, cpu: &Cpu) {
        let old_ptbr = self.machine().cpu.ptbr();
        let m = self.m();
        let (retired, halted) = (m.cpu.retired, m.cpu.halted);
        m.cpu = cpu.clone();
        m.cpu.retired = retired;
        m.cpu.halted = halted;
        if cpu.ptbr() != old_ptbr {
            self.load_ptbr(cpu.ptbr());
        }
    }

    /// Software page walk through `ptbr`. Follows the entries the hardware
    /// would use, so it always agrees with the machine's own translation.
    pub fn walk_page_table(&self, ptbr: u32, va: u32) -> Result<WalkResult, FrameworkError> {
        let m = self.machine();
        let word = |pa: u32| m.read_phys(pa, 4).ok().map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let pde = word((ptbr & pte::FRAME_MASK).wrapping_add((va >> 22) * 4))
            .filter(|e| e & pte::PRESENT != 0)
            .ok_or(FrameworkError::NotMapped(Level::Directory))?;
        let entry = word((pde & pte::FRAME_MASK) + ((va >> 12) & 0x3FF) * 4)
            .filter(|e| e & pte::PRESENT != 0)
            .ok_or(FrameworkError::NotMapped(Level::Table))?;
        Ok(WalkResult { pa: (entry & pte::FRAME_MASK) | (va & 0xFFF), flags: pde & entry & 7 })
    }

    /// Physical address of `va` in `process`; process 0 means physical.
    fn resolve(&self, process: u32, va: u32) -> Result<u32, FrameworkError> {
        if process == 0 {
            return Ok(va);
        }
        self.walk_page_table(process, va).map(|w| w.pa).map_err(|_| FrameworkError::UnmappedGuestAddress(va))
    }

    /// Physical (start, len) chunks covering `[va, va+n)`, split at pages.
    fn chunks(&self, process: u32, va: u32, n: usize) -> Result<Vec<(u32, usize)>, FrameworkError> {
        let mut out = Vec::new();
        let mut done = 0usize;
        while done < n {
            let a = va.wrapping_add(done as u32);
            let pa = self.resolve(process, a)?;
            let len = ((PAGE_SIZE - a % PAGE_SIZE) as usize).min(n - done);
            out.push((pa, len));
            done += len;
        }
        Ok(out)
    }

    pub fn guest_read(&self, process: u32, va: u32, n: usize) -> Result<Vec<u8>, FrameworkError> {
        let mut out = Vec::with_capacity(n);
        for (pa, len) in self.chunks(process, va, n)? {
            let mut bytes =
                self.machine().read_phys_guest(pa, len).map_err(|_| FrameworkError::UnmappedGuestAddress(va))?;
            self.unpatch(pa, &mut bytes);
            out.extend(bytes);
        }
        Ok(out)
    }

    pub fn guest_write(&mut self, process: u32, va: u32, data: &[u8]) -> Result<(), FrameworkError> {
        let chunks = self.chunks(process, va, data.len())?;
        let mut off = 0;
        for (pa, len) in chunks {
            self.write_physical(pa, &data[off..off + len])?;
            off += len;
        }
        Ok(())
    }

    pub fn read_physical(&self, pa: u32, n: usize) -> Result<Vec<u8>, FrameworkError> {
        let mut bytes = self.machine().read_phys_guest(pa, n)?;
        self.unpatch(pa, &mut bytes);
        Ok(bytes)
    }

    /// Physical write on the guest's behalf: patched breakpoint bytes keep
    /// their patch and page-table slots go through memguard.
    pub fn write_physical(&mut self, pa: u32, data: &[u8]) -> Result<(), FrameworkError> {
        self.machine().read_phys(pa, data.len())?;
        let dir = self.machine().cpu.ptbr() & pte::FRAME_MASK;
        let mut rebuild = false;
        for (i, b) in data.iter().enumerate() {
            let p = pa + i as u32;
            if let Some(site) = self.sites.get_mut(&p).filter(|s| s.armed) {
                site.saved = *b;
                if let Some(a) = site.saved_at {
                    self.machine_mut().write_phys(a, &[*b])?;
                }
                continue;
            }
            if self.mg.guards(p) {
                let slot = p & !3;
                let mut bytes = guest_word(self.machine(), slot).to_le_bytes();
                bytes[(p & 3) as usize] = *b;
                let Guest::Virtual(v) = &mut self.guest else { unreachable!("guards implies loaded") };
                self.mg.on_pt_write(v.guest_mut(), slot, u32::from_le_bytes(bytes))?;
                rebuild |= slot & pte::FRAME_MASK == dir;
                continue;
            }
            self.machine_mut().write_phys(p, &[*b])?;
        }
        if rebuild {
            let p = self.machine().cpu.ptbr();
            self.load_ptbr(p);
        }
        self.sync();
        Ok(())
    }

    pub fn port_read(&mut self, port: u8) -> u8 {
        self.m().port_in(port) as u8
    }

    /// Disassembles guest memory, showing original bytes under patches.
    pub fn disassemble_guest(&self, process: u32, va: u32, count: usize) -> Result<Vec<ListingLine>, FrameworkError> {
        let want = count * 6;
        let mut bytes = Vec::with_capacity(want);
        for i in 0..want {
            let a = va.wrapping_add(i as u32);
            let pa = match self.resolve(process, a) {
                Ok(pa) if (pa as usize) < self.machine().mem_size() || Devices::fb_contains(pa) => pa,
                _ if i == 0 => return Err(FrameworkError::UnmappedGuestAddress(va)),
                _ => break,
            };
            let b = match self.sites.get(&pa) {
                Some(s) if s.armed => s.saved,
                _ => self.machine().read_phys_guest(pa, 1)?[0],
            };
            bytes.push(b);
        }
        Ok(disassemble(&bytes, va, count))
    }

    pub fn hidden_alloc(&mut self, len: u32) -> Result<u32, FrameworkError> {
        Ok(self.mg.alloc(len)?)
    }
}

fn halted_end(m: &Machine) -> RunEnd {
    match &m.diagnostic {
        Some(d) => RunEnd::TripleFault(d.clone()),
        None => RunEnd::Halted,
    }
}

fn guest_word(m: &Machine, slot: u32) -> u32 {
    let b = m.read_phys_guest(slot, 4).unwrap_or_else(|_| vec![0; 4]);
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn parse_addr(s: &str) -> Option<u32> {
    let s = s.trim();
    let h = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X"))?;
    u32::from_str_radix(h, 16).ok()
}

