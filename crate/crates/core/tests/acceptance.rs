//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fail. Every count below is exact.

mod common;

use std::cell::RefCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::rc::Rc;

use rand::{Rng, SeedableRng};

use common::*;
use hvdbg::framework::*;
use hvdbg::guestos::*;
use hvdbg::hyperdbg::{capabilities, Console, DebugState, HyperDbg, Options, Poll, DEFAULT_HOTKEY};
use hvdbg::isa::{ControlReg, Instruction};
use hvdbg::machine::{hex, Access, Machine, StepOutcome, PAGE_SIZE};

const NON_INTERFERENCE_FIXTURES: [&str; 3] = ["counter_loop", "two_procs", "kbd_echo"];
const LAUNCH_AT: u64 = 1_000;
const BP_PERSISTENT_HITS: usize = 5;
const BP_ONESHOT_HITS: usize = 1;
const COUNTER_WRITES: usize = 7;
const WALK_PROBES: usize = 1_000;
const WALK_SEED: u64 = 0x5eed;
const PANIC_ON_EVENT: u32 = 3;
const API_BUDGET: u64 = 100_000;
const HOTKEY_AT: u64 = 5_000;
const STEP_COUNTS: [u32; 3] = [1, 3, 10];
const CALL_TREE_BT: [&str; 3] = ["f2", "f1", "kmain"];

type Check = fn() -> Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let checks: [(&str, Check); 9] = [
        ("zero subscriptions equal native", c1_non_interference),
        ("launch mid-run, one exit, unload", c2_launch_unload),
        ("breakpoint hit counts", c3_breakpoints),
        ("write watch on counter", c4_watch),
        ("page walker agrees with MMU", c5_walker),
        ("reserved frames masqueraded", c6_map_reserved),
        ("faulty tools are contained", c7_containment),
        ("syscall and switch counts", c8_event_counts),
        ("interactive debugger", c9_debugger),
    ];
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let r = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match r {
            Ok(()) => println!("criterion {}: PASS  {name}", i + 1),
            Err(e) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {e}", i + 1);
            }
        }
    }
    std::panic::set_hook(hook);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn c1_non_interference() -> Result<(), String> {
    for name in NON_INTERFERENCE_FIXTURES {
        let f = fixture(name);
        let mut fw = load(&f);
        ensure!(fw.subscriptions().is_empty(), "{name}: fresh framework has subscriptions");
        ensure!(fw.run() == RunEnd::Halted, "{name}: did not halt");
        let (got, want) = (fw.guest_digest_hex(), native_digest(&f));
        ensure!(got == want, "{name}: digest {got} != native {want}");
        ensure!(fw.delivered_events() == 0, "{name}: events delivered");
    }
    Ok(())
}

fn c2_launch_unload() -> Result<(), String> {
    let f = fixture("two_procs");
    let mut m = f.machine();
    m.run(LAUNCH_AT);
    ensure!(m.cpu.paging(), "paging not yet enabled at {LAUNCH_AT}");
    let tables: Vec<u32> = [KERNEL_DIR, PROC_A_DIR, PROC_B_DIR].to_vec();
    let mut fw = Framework::load(m, Config { symbols: f.symbols.clone(), record_exits: true, ..Config::default() })
        .map_err(|e| e.to_string())?;
    let gate = f.symbol("syscall_gate");
    let site = fw.walk_page_table(KERNEL_DIR, gate).map_err(|e| e.to_string())?.pa;
    let code = fw.machine().read_phys(site, 1).unwrap();
    let opts = BreakpointOptions { persistent: false, ..BreakpointOptions::default() };
    let log: Log = Rc::default();
    let setup = Box::new(move |api: &mut Api<'_>| {
        api.set_breakpoint(gate, opts).unwrap();
    });
    let rec = Recorder { log: log.clone(), setup: Some(setup) };
    fw.register_tool(Box::new(rec), Capabilities::default(), Budget::unlimited()).map_err(|e| e.to_string())?;
    ensure!(fw.machine().read_phys(site, 1).unwrap() != code, "breakpoint not armed");
    while fw.delivered_events() == 0 {
        let next = fw.machine().cpu.retired + 1;
        ensure!(fw.run_until(next) == RunEnd::Limit, "halted before the exit");
    }
    ensure!(log.borrow().len() == 1, "took {} exits", log.borrow().len());
    fw.unload().map_err(|e| e.to_string())?;
    let at = fw.machine().cpu.retired;

    let mut reference = f.machine();
    reference.run(at);
    ensure!(fw.machine().read_phys(site, 1).unwrap() == code, "code byte not restored");
    for dir in tables {
        let page = |m: &Machine| m.read_phys(dir, PAGE_SIZE as usize).unwrap();
        ensure!(page(fw.machine()) == page(&reference), "page directory {dir:#x} differs from native");
    }
    ensure!(hex(&fw.machine().digest()) == hex(&reference.digest()), "state at unload differs from native");
    ensure!(fw.run() == RunEnd::Halted, "did not halt after unload");
    ensure!(fw.guest_digest_hex() == native_digest(&f), "final digest differs from native");
    Ok(())
}

fn c3_breakpoints() -> Result<(), String> {
    let f = fixture("call_tree");
    let f1 = f.symbol("f1");
    let native = native_digest(&f);
    for style in [BreakpointStyle::Soft, BreakpointStyle::Transparent] {
        for (persistent, want) in [(true, BP_PERSISTENT_HITS), (false, BP_ONESHOT_HITS)] {
            let opts = BreakpointOptions { persistent, style, process: None };
            let (fw, ev) = record(&f, move |api| {
                api.set_breakpoint(f1, opts).unwrap();
            });
            let hits = ev.iter().filter(|e| e.kind() == EventKind::BreakpointHit).count();
            ensure!(hits == want, "{style:?} persistent={persistent}: {hits} hits, want {want}");
            ensure!(fw.guest_digest_hex() == native, "{style:?} persistent={persistent}: digest differs");
        }
    }
    Ok(())
}

fn c4_watch() -> Result<(), String> {
    let f = fixture("counter_loop");
    let native = native(&f);
    let (fw, ev) = record(&f, |api| {
        api.set_watchpoint(COUNTER_ADDR, 1, WatchAccess::Write, None).unwrap();
    });
    let hits = ev.iter().filter(|e| e.kind() == EventKind::WatchpointHit).count();
    ensure!(hits == COUNTER_WRITES, "{hits} hits on the counter, want {COUNTER_WRITES}");
    ensure!(fw.guest_digest_hex() == hex(&native.digest()), "digest differs");
    let (fw, ev) = record(&f, |api| {
        api.set_watchpoint(COUNTER_ADDR + 0x100, 4, WatchAccess::ReadWrite, None).unwrap();
    });
    ensure!(ev.is_empty(), "{} hits on an unrelated address", ev.len());
    ensure!(fw.machine().dev.debug_log == native.dev.debug_log, "output changed");
    ensure!(fw.guest_digest_hex() == hex(&native.digest()), "digest differs");
    Ok(())
}

fn c5_walker() -> Result<(), String> {
    let f = fixture("two_procs");
    let mut fw = load(&f);
    while fw.machine().cpu.ptbr() != PROC_B_DIR {
        ensure!(fw.run_until(fw.machine().cpu.retired + 1) == RunEnd::Limit, "procB never ran");
    }
    let mut rng = rand::rngs::StdRng::seed_from_u64(WALK_SEED);
    let (mut mapped, mut probes) = (0, 0);
    for ptbr in [PROC_A_DIR, PROC_B_DIR] {
        let mut mmu = fw.machine().clone();
        mmu.cpu.cr[ControlReg::Ptbr as usize] = ptbr;
        for _ in 0..WALK_PROBES {
            let va = match rng.gen_range(0..4) {
                0 => rng.gen::<u32>(),
                1 => USER_BASE + rng.gen_range(0..0x4000),
                _ => rng.gen_range(0..0x0100_0000),
            };
            probes += 1;
            let walked = fw.walk_page_table(ptbr, va).ok().map(|w| w.pa);
            let hw = mmu.translate(va, Access::Read, false).ok();
            ensure!(walked == hw, "ptbr {ptbr:#x} va {va:#x}: walker {walked:x?} mmu {hw:x?}");
            if let Some(pa) = hw {
                mapped += 1;
                let via_guest = fw.guest_read(ptbr, va, 1).map_err(|e| e.to_string())?;
                let via_phys = fw.read_physical(pa, 1).map_err(|e| e.to_string())?;
                ensure!(via_guest == via_phys, "va {va:#x}: guest_read {via_guest:?} != read_physical {via_phys:?}");
            }
        }
    }
    ensure!(probes >= 2 * WALK_PROBES, "only {probes} probes");
    ensure!(mapped > 0 && mapped < probes, "probes did not cover mapped and unmapped addresses");
    Ok(())
}

fn c6_map_reserved() -> Result<(), String> {
    let f = fixture("map_reserved");
    let mut fw = load(&f);
    let reserved: Vec<u32> = fw.memguard().reserved().iter().copied().collect();
    ensure!(reserved.contains(&MAP_RESERVED_FRAME), "target frame is not reserved");
    let hash = |fw: &Framework| {
        let mut all = Vec::new();
        for fr in &reserved {
            all.extend(fw.machine().read_phys(fr * PAGE_SIZE, PAGE_SIZE as usize).unwrap());
        }
        hex(&<sha2::Sha256 as sha2::Digest>::digest(&all))
    };
    let before = hash(&fw);
    ensure!(fw.run() == RunEnd::Halted, "did not halt");
    let m = fw.machine();
    let believed = m.read_phys_guest(MAP_RESERVED_SLOT, 4).unwrap();
    let believed = u32::from_le_bytes(believed.try_into().unwrap());
    let actual = m.read_phys_u32(MAP_RESERVED_SLOT).unwrap();
    ensure!(believed >> 12 == MAP_RESERVED_FRAME, "guest sees PTE {believed:#x}");
    ensure!(actual >> 12 != MAP_RESERVED_FRAME, "hardware PTE still points at the reserved frame");
    ensure!(m.dev.debug_log == [1, 1], "guest checks failed: {:?}", m.dev.debug_log);
    ensure!(hash(&fw) == before, "reserved frames changed");
    ensure!(fw.guest_digest_hex() == native_digest(&f), "digest differs from native");
    Ok(())
}

fn c7_containment() -> Result<(), String> {
    struct Bomb(u32);
    impl Tool for Bomb {
        fn attach(&mut self, api: &mut Api<'_>) -> Result<(), FrameworkError> {
            api.trace_function("f1").map(drop)
        }
        fn on_event(&mut self, _: &mut Api<'_>, _: &Event) -> EventOutcome {
            self.0 += 1;
            if self.0 == PANIC_ON_EVENT {
                panic!("event {}", self.0);
            }
            EventOutcome::PassThrough
        }
    }
    struct Spinner;
    impl Tool for Spinner {
        fn attach(&mut self, api: &mut Api<'_>) -> Result<(), FrameworkError> {
            api.trace_function("f2").map(drop)
        }
        fn on_event(&mut self, api: &mut Api<'_>, _: &Event) -> EventOutcome {
            loop {
                api.retired();
            }
        }
    }
    let f = fixture("call_tree");
    let native = native_digest(&f);

    let mut fw = load(&f);
    fw.register_tool(Box::new(Bomb(0)), Capabilities::default(), Budget::default()).map_err(|e| e.to_string())?;
    ensure!(fw.run() == RunEnd::Halted, "panicking tool: did not halt");
    ensure!(!fw.is_loaded(), "panicking tool: framework still loaded");
    ensure!(fw.delivered_events() == PANIC_ON_EVENT as u64, "delivered {}", fw.delivered_events());
    ensure!(fw.guest_digest_hex() == native, "panicking tool: digest differs");

    let mut fw = load(&f);
    let budget = Budget { max_api_calls: Some(API_BUDGET), max_wall: None };
    fw.register_tool(Box::new(Spinner), Capabilities::default(), budget).map_err(|e| e.to_string())?;
    ensure!(fw.run() == RunEnd::Halted, "runaway tool: did not halt");
    let why = fw.termination().unwrap_or_default().to_string();
    ensure!(why.contains(&(API_BUDGET + 1).to_string()), "termination reason: {why:?}");
    ensure!(fw.guest_digest_hex() == native, "runaway tool: digest differs");
    Ok(())
}

/// Native oracle: retired SYSCALLs and PTBR loads that changed the value.
fn native_counts(f: &Fixture) -> (usize, usize) {
    let mut m = f.machine();
    let (mut syscalls, mut switches) = (0, 0);
    while !m.cpu.halted {
        let retired = m.cpu.retired;
        let ptbr = m.cpu.ptbr();
        let is_syscall = matches!(m.fetch(), Ok((Instruction::Syscall, _)));
        match m.step() {
            StepOutcome::Fault(fault) => {
                if m.raise(fault).is_err() {
                    break;
                }
            }
            StepOutcome::Halted => break,
            _ => {}
        }
        if is_syscall && m.cpu.retired == retired + 1 {
            syscalls += 1;
        }
        if m.cpu.ptbr() != ptbr {
            switches += 1;
        }
    }
    (syscalls, switches)
}

fn c8_event_counts() -> Result<(), String> {
    let f = fixture("two_procs");
    let (syscalls, switches) = native_counts(&f);
    ensure!(syscalls > 0 && switches > 0, "oracle saw {syscalls} syscalls, {switches} switches");
    let (fw, ev) = record(&f, |api| {
        api.trace_syscalls(true).unwrap();
        api.subscribe(EventKind::ProcessSwitch, Condition::any()).unwrap();
    });
    let entries = ev.iter().filter(|e| e.kind() == EventKind::SyscallEntry).count();
    let switched = ev.iter().filter(|e| e.kind() == EventKind::ProcessSwitch).count();
    ensure!(entries == syscalls, "{entries} SyscallEntry events, oracle {syscalls}");
    ensure!(switched == switches, "{switched} ProcessSwitch events, oracle {switches}");
    ensure!(fw.guest_digest_hex() == native_digest(&f), "digest differs");
    Ok(())
}

#[derive(Default)]
struct Seen {
    lines: Vec<String>,
    states: Vec<DebugState>,
    frames: Vec<Vec<u8>>,
}

struct Scripted {
    commands: std::collections::VecDeque<String>,
    seen: Rc<RefCell<Seen>>,
}

impl Console for Scripted {
    fn poll(&mut self) -> Poll {
        self.commands.pop_front().map_or(Poll::Closed, Poll::Command)
    }
    fn write(&mut self, line: &str) {
        self.seen.borrow_mut().lines.push(line.to_string());
    }
    fn state(&mut self, s: &DebugState) {
        self.seen.borrow_mut().states.push(s.clone());
    }
    fn frame(&mut self, fb: &[u8]) {
        self.seen.borrow_mut().frames.push(fb.to_vec());
    }
}

fn debug_session(name: &str, hotkey_at: Option<u64>, commands: &[String]) -> Result<(Framework, Seen), String> {
    let f = fixture(name);
    let mut m = f.machine();
    if let Some(at) = hotkey_at {
        m.input.push(at, DEFAULT_HOTKEY);
    }
    let mut fw = Framework::load(m, Config { symbols: f.symbols.clone(), ..Config::default() })
        .map_err(|e| e.to_string())?;
    let seen = Rc::new(RefCell::new(Seen::default()));
    let console = Scripted { commands: commands.iter().cloned().collect(), seen: seen.clone() };
    let opts = Options { hotkey: DEFAULT_HOTKEY, break_at_start: hotkey_at.is_none() };
    fw.register_tool(Box::new(HyperDbg::new(opts, Box::new(console))), capabilities(), Budget::unlimited())
        .map_err(|e| e.to_string())?;
    ensure!(fw.run() == RunEnd::Halted, "{name}: did not halt");
    let seen = seen.take();
    Ok((fw, seen))
}

fn retired_lines(lines: &[String]) -> Vec<u64> {
    lines
        .iter()
        .filter_map(|l| l.strip_prefix("pc=")?.split("retired=").nth(1)?.parse().ok())
        .collect()
}

fn c9_debugger() -> Result<(), String> {
    let mut before = fixture("counter_loop").machine();
    before.run(HOTKEY_AT);
    let (_, seen) = debug_session("counter_loop", Some(HOTKEY_AT), &["c".to_string()])?;
    match seen.states.first() {
        Some(DebugState::Debug { retired, .. }) => ensure!(*retired == HOTKEY_AT, "entered debug at {retired}"),
        s => return Err(format!("no debug state: {s:?}")),
    }
    ensure!(seen.frames.last() == Some(&before.dev.framebuffer), "framebuffer not restored after c");

    for n in STEP_COUNTS {
        let cmds = [format!("s {n}"), "c".to_string()];
        let (_, seen) = debug_session("counter_loop", Some(HOTKEY_AT), &cmds)?;
        let got = retired_lines(&seen.lines);
        ensure!(got == [HOTKEY_AT + n as u64], "s {n}: retired {got:?}");
    }

    let cmds: Vec<String> = ["b f2", "c", "bt", "c"].iter().map(|s| s.to_string()).collect();
    let (_, seen) = debug_session("call_tree", None, &cmds)?;
    let names: Vec<&str> = seen
        .lines
        .iter()
        .filter(|l| l.starts_with('#'))
        .map(|l| l.rsplit(' ').next().unwrap().split('+').next().unwrap())
        .collect();
    ensure!(names == CALL_TREE_BT, "backtrace {names:?}");
    Ok(())
}
