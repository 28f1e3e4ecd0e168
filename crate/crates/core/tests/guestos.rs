use hvdbg::guestos::*;
use hvdbg::machine::{hex, StepOutcome};
use hvdbg::osdep::{self, ProcState};

const GOLDEN: [(&str, &str); 8] = [
    ("boot_min", "82374c50bf5e7c130059348c78f55e6d415bc0b54ec2a253e721e8796a89248d"),
    ("counter_loop", "e659f61ce6faeef8e98f08cf58031845d1f7a054e7664de0879f6e2a3361d8be"),
    ("call_tree", "9e99e3e32f02743613a93bebbd40b31488d9afb657845c05909fc97c9758b2f8"),
    ("recursion", "2cd6fcaf8b0ed60d194c8afc2349da25a3ba5d95cd1da1564442673d97a6a02d"),
    ("two_procs", "643726f49c8255be462eee1ac40f4333273a5f673bf6c6a24fda7c34950f5afd"),
    ("kbd_echo", "820c83f7da70039e82b9e19f473650069240ec0bfa064862b9f2f8708d473718"),
    ("pf_demo", "94d4f8d587028fc1753e79f023b47bf1332bd85466e07a5109cbf40ace02ca10"),
    ("map_reserved", "7c93ac1bb090dc9744645a2c7fa8cc6d65ff76c3f553241cb31418dd70600377"),
];

fn run(name: &str) -> hvdbg::machine::Machine {
    let mut m = build_fixture(name).unwrap().machine();
    assert_eq!(m.run(1_000_000), StepOutcome::Halted, "{name} did not halt");
    m
}

#[test]
fn golden_digests() {
    assert_eq!(list_fixtures().len(), GOLDEN.len());
    for (name, want) in GOLDEN {
        assert_eq!(hex(&run(name).digest()), want, "{name}");
    }
}

#[test]
fn unknown_fixture() {
    assert_eq!(build_fixture("nope").unwrap_err(), GuestOsError::UnknownFixture("nope".into()));
}

#[test]
fn debug_logs() {
    assert_eq!(run("boot_min").dev.debug_log, [1]);
    assert_eq!(run("counter_loop").dev.debug_log, [7]);
    assert_eq!(run("call_tree").dev.debug_log, [15]);
    assert_eq!(run("recursion").dev.debug_log, [6]);
    assert_eq!(run("two_procs").dev.debug_log, b"ABABAB");
    assert_eq!(run("pf_demo").dev.debug_log, [0x77, 1]);
    assert_eq!(run("map_reserved").dev.debug_log, [1, 1]);
}

#[test]
fn counter_loop_outlasts_hotkey_schedule() {
    let m = run("counter_loop");
    assert!(m.cpu.retired > 5000);
    assert_eq!(m.read_phys(COUNTER_ADDR, 1).unwrap(), [7]);
}

#[test]
fn kbd_echo_writes_keys_to_screen() {
    let m = run("kbd_echo");
    assert!(m.dev.screen_text()[0].starts_with("hi!"));
}

#[test]
fn symbols_present() {
    let f = build_fixture("call_tree").unwrap();
    for s in ["kmain", "f1", "f2"] {
        f.symbols.addr_of(s).unwrap();
    }
    build_fixture("recursion").unwrap().symbols.addr_of("fact").unwrap();
    let tp = build_fixture("two_procs").unwrap();
    for s in ["kmain", "syscall_gate", "procA_main", "procB_main"] {
        tp.symbols.addr_of(s).unwrap();
    }
    assert!(tp.symbols_file().contains("syscall_gate"));
}

#[test]
fn two_procs_switches_address_spaces() {
    let f = build_fixture("two_procs").unwrap();
    let mut m = f.machine();
    let mut ptbrs = Vec::new();
    while !m.cpu.halted {
        let before = m.cpu.ptbr();
        if let StepOutcome::Fault(fl) = m.step() {
            m.raise(fl).unwrap();
        }
        if m.cpu.ptbr() != before {
            ptbrs.push(m.cpu.ptbr());
        }
    }
    assert!(ptbrs.contains(&PROC_A_DIR) && ptbrs.contains(&PROC_B_DIR));
    let procs = osdep::proc_list(&m).unwrap();
    let names: Vec<&str> = procs.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, ["kernel", "procA", "procB"]);
    assert_eq!(procs[1].pid, 1);
    assert_eq!(procs[2].state, ProcState::Done);
}
