mod common;

use proptest::prelude::*;

use common::*;
use hvdbg::framework::*;
use hvdbg::guestos::{list_fixtures, COUNTER_ADDR};
use hvdbg::hyperdbg::{Command, Script};
use hvdbg::machine::{hex, Access, Machine, StepOutcome};
use hvdbg::memguard::MemGuardError;

/// Steps `m` natively to HLT. `inspect` sees the state before each step;
/// its result is kept only if that step retired an instruction.
fn trace<T>(mut m: Machine, mut inspect: impl FnMut(&Machine) -> T) -> Vec<T> {
    let mut out = Vec::new();
    while !m.cpu.halted {
        let seen = inspect(&m);
        let retired = m.cpu.retired;
        match m.step() {
            StepOutcome::Fault(f) => {
                if m.raise(f).is_err() {
                    break;
                }
            }
            StepOutcome::Halted => break,
            _ => {}
        }
        if m.cpu.retired == retired + 1 {
            out.push(seen);
        }
    }
    out
}

fn watch_oracle(va: u32, len: u32, want: WatchAccess) -> usize {
    let hits = trace(fixture("counter_loop").machine(), |m| {
        let Ok((instr, _)) = m.fetch() else { return false };
        m.data_accesses(&instr).iter().any(|a| {
            let kind_ok = match want {
                WatchAccess::Read => a.access == Access::Read,
                WatchAccess::Write => a.access == Access::Write,
                WatchAccess::ReadWrite => true,
            };
            kind_ok && a.va < va + len && va < a.va + a.len
        })
    });
    hits.into_iter().filter(|h| *h).count()
}

fn arb_access() -> impl Strategy<Value = WatchAccess> {
    prop_oneof![Just(WatchAccess::Read), Just(WatchAccess::Write), Just(WatchAccess::ReadWrite)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loading_at_any_point_is_invisible(which in 0..list_fixtures().len(), at in 0u64..9_000) {
        let f = fixture(list_fixtures()[which]);
        let mut m = f.machine();
        m.run(at);
        let mut fw = match Framework::load(m, Config::default()) {
            Ok(fw) => fw,
            // The guest already mapped a frame the pool wants.
            Err(FrameworkError::MemGuard(MemGuardError::FrameInUse(_))) if f.name == "map_reserved" => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        prop_assert_eq!(fw.run(), RunEnd::Halted);
        prop_assert_eq!(fw.guest_digest_hex(), native_digest(&f));
    }

    #[test]
    fn watch_hits_match_oracle(
        va in prop_oneof![COUNTER_ADDR - 8..COUNTER_ADDR + 16, 0x7FC0u32..0x8000],
        len in 1u32..9,
        access in arb_access(),
    ) {
        let f = fixture("counter_loop");
        let (fw, ev) = record(&f, move |api| {
            api.set_watchpoint(va, len, access, None).unwrap();
        });
        let hits = ev.iter().filter(|e| e.kind() == EventKind::WatchpointHit).count();
        prop_assert_eq!(hits, watch_oracle(va, len, access));
        prop_assert_eq!(fw.guest_digest_hex(), native_digest(&f));
    }

    #[test]
    fn breakpoint_hits_match_oracle(pick in any::<prop::sample::Index>(), transparent in any::<bool>()) {
        let f = fixture("call_tree");
        let pcs = trace(f.machine(), |m| m.cpu.pc);
        let mut sites = pcs.clone();
        sites.sort_unstable();
        sites.dedup();
        let site = *pick.get(&sites);
        let want = pcs.iter().filter(|pc| **pc == site).count();
        let style = if transparent { BreakpointStyle::Transparent } else { BreakpointStyle::Soft };
        let (fw, ev) = record(&f, move |api| {
            api.set_breakpoint(site, BreakpointOptions { style, ..BreakpointOptions::default() }).unwrap();
        });
        prop_assert_eq!(ev.len(), want);
        prop_assert_eq!(fw.guest_digest_hex(), hex(&native(&f).digest()));
    }

    #[test]
    fn command_parser_never_panics(line in "[ -~]{0,40}") {
        let _ = Command::parse(&line);
    }

    #[test]
    fn script_parser_never_panics(text in "([a-z@0-9x #]{0,16}\n){0,8}") {
        if let Err(e) = Script::parse(&text, 0xFF) {
            prop_assert!(e.line >= 1 && e.line <= text.lines().count());
        }
    }
}
