//! Interactive debugger built as a framework tool.
//!
//! The debugger listens for the hotkey on the keyboard data port. While it is
//! in control the guest is frozen: the screen is saved to the hidden pool,
//! replaced by the debugger UI, and restored byte for byte on `c`.

pub mod command;
pub mod script;

use std::collections::VecDeque;

use crate::framework::{
    AccessKind, Api, BreakpointOptions, Capabilities, Condition, Event, EventDetail, EventKind, EventOutcome,
    FrameworkError, Tool,
};
use crate::isa::{decode, Instruction, Reg};
use crate::machine::{Cpu, Devices, Mode, FB_BASE, FB_COLS, FB_ROWS, FB_SIZE, PORT_KBD_DATA, PORT_KBD_STATUS};

pub use command::{Command, ParseError, Target, HELP};
pub use script::{run_script, Script, ScriptConsole, ScriptParseError, ScriptRun, Transcript};

pub const DEFAULT_HOTKEY: u8 = 0xFF;
pub const MAX_FRAMES: usize = 64;
pub const UNWALKABLE: &str = "<unwalkable>";

const ATTR_TITLE: u8 = 0x70;
const ATTR_TEXT: u8 = 0x1F;
const ATTR_HIGHLIGHT: u8 = 0x1E;
const ATTR_DIM: u8 = 0x17;
const ATTR_PROMPT: u8 = 0x0F;

const DISASM_LINES: usize = 8;
const OUTPUT_LINES: usize = 5;

/// What the debugger gets when it asks its console for input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Poll {
    Command(String),
    /// Nothing yet; the debugger polls the keyboard and asks again.
    Idle,
    /// No more input will ever come: resume and stay out of the way.
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DebugState {
    Running,
    Debug { banner: String, retired: u64, process: String, pid: Option<u32> },
}

/// Where commands come from and output goes.
pub trait Console {
    fn poll(&mut self) -> Poll;

    /// Called when both the console and the keyboard had nothing.
    fn idle(&mut self) {}

    fn write(&mut self, line: &str);

    fn state(&mut self, _state: &DebugState) {}

    fn frame(&mut self, _fb: &[u8]) {}
}

/// Capabilities the debugger needs.
pub fn capabilities() -> Capabilities {
    Capabilities::with_ports(true, &[PORT_KBD_DATA, PORT_KBD_STATUS])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Options {
    pub hotkey: u8,
    /// Open a session from `attach`, before the guest runs again.
    pub break_at_start: bool,
}

impl Default for Options {
    fn default() -> Self {
        Options { hotkey: DEFAULT_HOTKEY, break_at_start: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub addr: u32,
    pub symbol: Option<(String, u32)>,
}

impl Frame {
    pub fn name(&self) -> String {
        match &self.symbol {
            Some((n, _)) => n.clone(),
            None => format!("{:#x}", self.addr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Backtrace {
    pub frames: Vec<Frame>,
    /// False if the chain hit unreadable memory or a bad frame pointer.
    pub complete: bool,
}

impl Backtrace {
    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.frames.iter().map(Frame::name).collect();
        if !self.complete {
            v.push(UNWALKABLE.to_string());
        }
        v
    }
}

/// Address space to read the current process through: PTBR, or 0 for
/// physical when paging is off.
pub fn space(cpu: &Cpu) -> u32 {
    if cpu.paging() {
        cpu.ptbr()
    } else {
        0
    }
}

fn read_u32(api: &mut Api<'_>, process: u32, va: u32) -> Option<u32> {
    let b = api.guest_read(process, va, 4).ok()?;
    Some(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn instruction_at(api: &mut Api<'_>, process: u32, va: u32) -> Option<Instruction> {
    let bytes = api.guest_read(process, va, 6).or_else(|_| api.guest_read(process, va, 1)).ok()?;
    decode(&bytes, 0).ok().map(|(i, _)| i)
}

/// Walks the frame-pointer chain. Stops are recognised at a function's
/// first instruction, right after its `PUSH r6`, and at `RET`, where the
/// return address is still on the stack.
pub fn backtrace(api: &mut Api<'_>) -> Backtrace {
    let cpu = api.read_regs();
    let process = space(&cpu);
    let sp = cpu.reg(Reg::SP);
    let fp0 = cpu.reg(Reg::FP);
    let frame = |api: &mut Api<'_>, addr: u32| Frame { addr, symbol: api.symbol_lookup(addr) };
    let mut frames = vec![frame(api, cpu.pc)];
    let here = instruction_at(api, process, cpu.pc);
    let push_len = Instruction::Push { rs: Reg::FP }.len() as u32;
    let off = api.symbol_lookup(cpu.pc).map(|(_, o)| o);
    let first = match (off, here) {
        (Some(0), _) | (_, Some(Instruction::Ret)) => read_u32(api, process, sp).map(|r| (r, fp0)),
        (Some(o), _) if o == push_len => read_u32(api, process, sp.wrapping_add(4)).map(|r| (r, fp0)),
        _ if fp0 == 0 => return Backtrace { frames, complete: true },
        _ => read_u32(api, process, fp0.wrapping_add(4)).zip(read_u32(api, process, fp0)),
    };
    let Some((mut ret, mut fp)) = first else {
        return Backtrace { frames, complete: false };
    };
    let mut prev_fp = if fp == fp0 { 0 } else { fp0 };
    loop {
        frames.push(frame(api, ret));
        if frames.len() >= MAX_FRAMES || fp == 0 {
            return Backtrace { frames, complete: true };
        }
        if fp <= prev_fp {
            return Backtrace { frames, complete: false };
        }
        match read_u32(api, process, fp.wrapping_add(4)).zip(read_u32(api, process, fp)) {
            Some((r, next)) => {
                prev_fp = fp;
                ret = r;
                fp = next;
            }
            None => return Backtrace { frames, complete: false },
        }
    }
}

fn syscall_name(n: u32) -> &'static str {
    match n {
        1 => "write",
        2 => "getpid",
        3 => "yield",
        4 => "exit",
        _ => "?",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flow {
    Stay,
    Resume,
}

struct Screen {
    cells: Vec<u8>,
}

impl Screen {
    fn new() -> Screen {
        let mut cells = vec![0; FB_SIZE];
        for c in cells.chunks_mut(2) {
            c[0] = b' ';
            c[1] = ATTR_TEXT;
        }
        Screen { cells }
    }

    fn put(&mut self, row: usize, col: usize, text: &str, attr: u8) {
        if row >= FB_ROWS {
            return;
        }
        for (i, ch) in text.bytes().enumerate() {
            let c = col + i;
            if c >= FB_COLS {
                break;
            }
            let at = (row * FB_COLS + c) * 2;
            self.cells[at] = ch;
            self.cells[at + 1] = attr;
        }
    }

    fn line(&mut self, row: usize, text: &str, attr: u8) {
        self.put(row, 0, &format!("{text:<width$}", width = FB_COLS), attr);
    }
}

pub struct HyperDbg {
    opts: Options,
    console: Box<dyn Console>,
    backup: u32,
    editor: String,
    recent: VecDeque<String>,
    points: Vec<u32>,
    trace_sys: bool,
    hotkey_sub: Option<u32>,
    banner: String,
    in_session: bool,
    detached: bool,
    closed: bool,
}

impl HyperDbg {
    pub fn new(opts: Options, console: Box<dyn Console>) -> HyperDbg {
        HyperDbg {
            opts,
            console,
            backup: 0,
            editor: String::new(),
            recent: VecDeque::new(),
            points: Vec::new(),
            trace_sys: false,
            hotkey_sub: None,
            banner: String::new(),
            in_session: false,
            detached: false,
            closed: false,
        }
    }

    fn say(&mut self, line: impl Into<String>) {
        let line = line.into();
        self.console.write(&line);
        if self.in_session {
            self.recent.push_back(line);
            while self.recent.len() > OUTPUT_LINES {
                self.recent.pop_front();
            }
        }
    }

    fn process_label(api: &mut Api<'_>, ptbr: u32) -> (String, Option<u32>) {
        match api.proc_list() {
            Ok(list) => match list.into_iter().find(|p| p.ptbr == ptbr) {
                Some(p) => (p.name, Some(p.pid)),
                None => ("?".into(), None),
            },
            Err(_) => ("-".into(), None),
        }
    }

    fn session(&mut self, api: &mut Api<'_>, banner: String) {
        if self.closed {
            return;
        }
        let Ok(saved) = api.read_physical(FB_BASE, FB_SIZE) else { return };
        if api.write_physical(self.backup, &saved).is_err() {
            return;
        }
        self.in_session = true;
        self.banner = banner.clone();
        self.recent.clear();
        let cpu = api.read_regs();
        let (process, pid) = Self::process_label(api, cpu.ptbr());
        self.console.state(&DebugState::Debug { banner, retired: cpu.retired, process, pid });
        self.paint(api);
        loop {
            match self.console.poll() {
                Poll::Command(line) => {
                    if self.execute(api, &line) == Flow::Resume {
                        break;
                    }
                }
                Poll::Closed => {
                    self.closed = true;
                    break;
                }
                Poll::Idle => match self.poll_key(api) {
                    Some(k) => {
                        if let Some(line) = self.type_key(k) {
                            if self.execute(api, &line) == Flow::Resume {
                                break;
                            }
                        } else {
                            self.paint(api);
                        }
                    }
                    None => self.console.idle(),
                },
            }
        }
        let saved = api.read_physical(self.backup, FB_SIZE).unwrap_or(saved);
        let _ = api.write_physical(FB_BASE, &saved);
        self.in_session = false;
        self.console.state(&DebugState::Running);
        self.console.frame(&saved);
    }

    fn poll_key(&mut self, api: &mut Api<'_>) -> Option<u8> {
        if api.port_read(PORT_KBD_STATUS).ok()? == 0 {
            return None;
        }
        api.port_read(PORT_KBD_DATA).ok()
    }

    /// Line editing. Returns a finished line on Enter.
    fn type_key(&mut self, k: u8) -> Option<String> {
        match k {
            b'\n' | b'\r' => Some(std::mem::take(&mut self.editor)),
            0x08 | 0x7F => {
                self.editor.pop();
                None
            }
            0x20..=0x7E => {
                self.editor.push(k as char);
                None
            }
            _ => None,
        }
    }

    fn execute(&mut self, api: &mut Api<'_>, line: &str) -> Flow {
        let line = line.trim();
        if line.is_empty() {
            return Flow::Stay;
        }
        self.say(format!("> {line}"));
        let flow = match Command::parse(line) {
            Ok(cmd) => self.run_command(api, cmd),
            Err(e) => {
                self.say(e.0);
                for l in HELP.lines() {
                    self.say(l);
                }
                Flow::Stay
            }
        };
        if flow == Flow::Stay {
            self.paint(api);
        }
        flow
    }

    fn resolve(&mut self, api: &mut Api<'_>, t: &Target) -> Option<u32> {
        match t {
            Target::Addr(a) => Some(*a),
            Target::Symbol(s) => match api.symbol_addr(s) {
                Ok(a) => Some(a),
                Err(e) => {
                    self.say(e.to_string());
                    None
                }
            },
        }
    }

    fn run_command(&mut self, api: &mut Api<'_>, cmd: Command) -> Flow {
        match cmd {
            Command::Help => {
                for l in HELP.lines() {
                    self.say(l);
                }
            }
            Command::Continue => return Flow::Resume,
            Command::Step(n) => {
                let rep = api.single_step(n);
                let cpu = api.read_regs();
                self.banner = format!("stepped {} to retired {}", rep.retired, cpu.retired);
                self.say(format!("pc={:08x} retired={}", cpu.pc, cpu.retired));
            }
            Command::Regs => {
                let c = api.read_regs();
                let flags = format!(
                    "{}{}{}",
                    if c.z { "Z" } else { "-" },
                    if c.n { "N" } else { "-" },
                    if c.ie { "I" } else { "-" }
                );
                let mode = if c.mode == Mode::User { "user" } else { "kernel" };
                self.say(format!("pc={:08x} flags={flags} mode={mode} ptbr={:08x}", c.pc, c.ptbr()));
                for half in c.regs.chunks(4).enumerate() {
                    let (h, regs) = half;
                    let s: Vec<String> =
                        regs.iter().enumerate().map(|(i, v)| format!("r{}={v:08x}", h * 4 + i)).collect();
                    self.say(s.join(" "));
                }
            }
            Command::Break { at, process } => {
                let Some(va) = self.resolve(api, &at) else { return Flow::Stay };
                let mut opts = BreakpointOptions::default();
                if let Some(p) = process {
                    let Ok(list) = api.proc_list() else {
                        self.say("no process list in this guest");
                        return Flow::Stay;
                    };
                    match list.iter().find(|x| x.name == p || Some(x.pid) == p.parse().ok()) {
                        Some(x) => opts.process = Some(x.ptbr),
                        None => {
                            self.say(format!("no such process: {p}"));
                            return Flow::Stay;
                        }
                    }
                }
                match api.set_breakpoint(va, opts) {
                    Ok(id) => {
                        self.points.push(id);
                        let name = api.symbol_name(va);
                        self.say(format!("breakpoint {id} at {name} ({va:#010x})"));
                    }
                    Err(e) => self.say(e.to_string()),
                }
            }
            Command::Watch { at, access } => {
                let Some(va) = self.resolve(api, &at) else { return Flow::Stay };
                match api.set_watchpoint(va, 1, access, None) {
                    Ok(id) => {
                        self.points.push(id);
                        self.say(format!("watchpoint {id} at {va:#010x}"));
                    }
                    Err(e) => self.say(e.to_string()),
                }
            }
            Command::Delete(id) if !self.points.contains(&id) => {
                self.say(format!("no breakpoint or watchpoint {id}"));
            }
            Command::Delete(id) => match api.remove(id) {
                Ok(()) => {
                    self.points.retain(|p| *p != id);
                    self.say(format!("deleted {id}"));
                }
                Err(e) => self.say(e.to_string()),
            },
            Command::Mem { at, len } => {
                let Some(va) = self.resolve(api, &at) else { return Flow::Stay };
                let len = len.min(4096) as usize;
                match self.read_view(api, va, len) {
                    Ok(bytes) => {
                        for (i, chunk) in bytes.chunks(16).enumerate() {
                            let hex: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
                            self.say(format!("{:08x}: {}", va.wrapping_add(i as u32 * 16), hex.join(" ")));
                        }
                    }
                    Err(e) => self.say(e.to_string()),
                }
            }
            Command::Edit { at, bytes } => {
                let Some(va) = self.resolve(api, &at) else { return Flow::Stay };
                match self.write_view(api, va, &bytes) {
                    Ok(()) => self.say(format!("wrote {} bytes at {va:#010x}", bytes.len())),
                    Err(e) => self.say(e.to_string()),
                }
            }
            Command::Backtrace => {
                let bt = backtrace(api);
                for (i, f) in bt.frames.iter().enumerate() {
                    let sym = match &f.symbol {
                        Some((n, 0)) => n.clone(),
                        Some((n, o)) => format!("{n}+{o:#x}"),
                        None => "?".into(),
                    };
                    self.say(format!("#{i} {:08x} {sym}", f.addr));
                }
                if !bt.complete {
                    self.say(UNWALKABLE);
                }
            }
            Command::Ps => match api.proc_list() {
                Ok(list) => {
                    let cur = api.current_process();
                    self.say("  PID NAME             STATE    PTBR");
                    for p in list {
                        let mark = if p.ptbr == cur { '*' } else { ' ' };
                        self.say(format!("{mark}{:>4} {:<16} {:<8} {:08x}", p.pid, p.name, p.state.to_string(), p.ptbr));
                    }
                }
                Err(e) => self.say(format!("no process list: {e}")),
            },
            Command::TraceSys(on) => match api.trace_syscalls(on) {
                Ok(()) => {
                    self.trace_sys = on;
                    self.say(format!("syscall trace {}", if on { "on" } else { "off" }));
                }
                Err(e) => self.say(e.to_string()),
            },
            Command::Quit => {
                for id in std::mem::take(&mut self.points) {
                    let _ = api.remove(id);
                }
                if self.trace_sys {
                    let _ = api.trace_syscalls(false);
                    self.trace_sys = false;
                }
                if let Some(id) = self.hotkey_sub.take() {
                    let _ = api.unsubscribe(id);
                }
                self.detached = true;
                self.say("debugger detached");
                return Flow::Resume;
            }
        }
        Flow::Stay
    }

    fn physical_of(api: &mut Api<'_>, process: u32, va: u32) -> Option<u32> {
        if process == 0 {
            Some(va)
        } else {
            api.walk_page_table(process, va).ok().map(|w| w.pa)
        }
    }

    /// Guest memory as the guest sees it: screen bytes come from the saved
    /// copy while the UI covers the screen.
    fn read_view(&mut self, api: &mut Api<'_>, va: u32, len: usize) -> Result<Vec<u8>, FrameworkError> {
        let process = space(&api.read_regs());
        let mut out = api.guest_read(process, va, len)?;
        if self.in_session {
            let saved = api.read_physical(self.backup, FB_SIZE)?;
            for (i, b) in out.iter_mut().enumerate() {
                match Self::physical_of(api, process, va.wrapping_add(i as u32)) {
                    Some(pa) if Devices::fb_contains(pa) => *b = saved[(pa - FB_BASE) as usize],
                    _ => {}
                }
            }
        }
        Ok(out)
    }

    fn write_view(&mut self, api: &mut Api<'_>, va: u32, data: &[u8]) -> Result<(), FrameworkError> {
        let process = space(&api.read_regs());
        for (i, b) in data.iter().enumerate() {
            let a = va.wrapping_add(i as u32);
            match Self::physical_of(api, process, a) {
                Some(pa) if self.in_session && Devices::fb_contains(pa) => {
                    api.write_physical(self.backup + (pa - FB_BASE), &[*b])?
                }
                _ => api.guest_write(process, a, &[*b])?,
            }
        }
        Ok(())
    }

    fn paint(&mut self, api: &mut Api<'_>) {
        let cpu = api.read_regs();
        let process = space(&cpu);
        let (name, pid) = Self::process_label(api, cpu.ptbr());
        let pid = pid.map_or("-".to_string(), |p| p.to_string());
        let mut s = Screen::new();
        s.line(0, &format!(" HyperDbg  {name} (pid {pid})  retired {}  pc {:08x}", cpu.retired, cpu.pc), ATTR_TITLE);
        s.line(1, &format!(" {}", self.banner), ATTR_HIGHLIGHT);

        let start = match api.symbol_lookup(cpu.pc) {
            Some((_, off)) if off <= 64 => cpu.pc - off,
            _ => cpu.pc,
        };
        let mut listing = api.disassemble(process, start, 40).unwrap_or_default();
        match listing.iter().position(|l| l.addr == cpu.pc) {
            Some(i) => {
                listing.drain(..i.saturating_sub(2));
            }
            None => listing = api.disassemble(process, cpu.pc, DISASM_LINES).unwrap_or_default(),
        }
        if listing.is_empty() {
            s.put(3, 1, "<pc not mapped>", ATTR_TEXT);
        }
        for (i, l) in listing.iter().take(DISASM_LINES).enumerate() {
            let here = l.addr == cpu.pc;
            let mark = if here { "=>" } else { "  " };
            let text = format!("{mark} {:08x}  {}", l.addr, l.text);
            s.put(3 + i, 1, &format!("{text:<48}"), if here { ATTR_HIGHLIGHT } else { ATTR_TEXT });
        }

        s.put(3, 52, &format!("pc  {:08x}", cpu.pc), ATTR_TEXT);
        for (i, v) in cpu.regs.iter().enumerate() {
            s.put(4 + i, 52, &format!("r{i}  {v:08x}"), ATTR_TEXT);
        }
        let mode = if cpu.mode == Mode::User { "user" } else { "kernel" };
        let flags: String = [(cpu.z, 'Z'), (cpu.n, 'N'), (cpu.ie, 'I')]
            .iter()
            .map(|(on, c)| if *on { *c } else { '-' })
            .collect();
        s.put(12, 52, &format!("fl  {flags} {mode}"), ATTR_TEXT);

        s.line(13, " backtrace", ATTR_DIM);
        let bt = backtrace(api);
        for (i, n) in bt.names().iter().take(4).enumerate() {
            s.put(14 + i, 1, &format!("#{i} {n}"), ATTR_TEXT);
        }

        s.line(18, " output", ATTR_DIM);
        for (i, l) in self.recent.iter().enumerate() {
            s.put(19 + i, 1, l, ATTR_TEXT);
        }
        s.line(24, &format!("> {}", self.editor), ATTR_PROMPT);
        let _ = api.write_physical(FB_BASE, &s.cells);
        self.console.frame(&s.cells);
    }
}

impl Tool for HyperDbg {
    fn attach(&mut self, api: &mut Api<'_>) -> Result<(), FrameworkError> {
        self.backup = api.hidden_alloc(FB_SIZE as u32)?;
        let cond = Condition::any().port(PORT_KBD_DATA).access(AccessKind::Read);
        self.hotkey_sub = Some(api.subscribe(EventKind::IoPort, cond)?);
        if self.opts.break_at_start {
            self.session(api, "break at start".into());
        }
        Ok(())
    }

    fn on_event(&mut self, api: &mut Api<'_>, ev: &Event) -> EventOutcome {
        if self.detached {
            return EventOutcome::PassThrough;
        }
        match &ev.detail {
            EventDetail::IoPort { port: PORT_KBD_DATA, access: AccessKind::Read, value }
                if *value == self.opts.hotkey as u32 =>
            {
                self.session(api, format!("hotkey at retired {}", ev.retired));
                EventOutcome::Consume
            }
            EventDetail::BreakpointHit { id, address } if self.points.contains(id) => {
                let name = api.symbol_name(*address);
                self.session(api, format!("breakpoint {id} hit at {name}"));
                EventOutcome::PassThrough
            }
            EventDetail::WatchpointHit { id, address, access, instruction } if self.points.contains(id) => {
                let by = api.symbol_name(*instruction);
                self.session(api, format!("watchpoint {id}: {access} of {address:#x} by {by}"));
                EventOutcome::PassThrough
            }
            EventDetail::SyscallEntry { number, .. } if self.trace_sys => {
                let (name, pid) = Self::process_label(api, ev.process);
                let pid = pid.map_or("-".to_string(), |p| p.to_string());
                self.say(format!("[{}] {name}({pid}) syscall {number} {}", ev.retired, syscall_name(*number)));
                EventOutcome::PassThrough
            }
            EventDetail::SyscallExit { number, .. } if self.trace_sys => {
                let r0 = api.read_regs().reg(Reg(0));
                self.say(format!("[{}] sysret {number} = {r0:#x}", ev.retired));
                EventOutcome::PassThrough
            }
            _ => EventOutcome::PassThrough,
        }
    }
}
