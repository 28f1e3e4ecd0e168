use std::process::{Command, Output};

use hvdbg_cli::{parse_keys, RunConfig, Target};

fn hvdbg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hvdbg")).args(args).output().expect("spawn hvdbg")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn boot_min_prints_digest_and_log() {
    let o = hvdbg(&["run", "boot_min"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("digest: 82374c50bf5e7c130059348c78f55e6d415bc0b54ec2a253e721e8796a89248d"), "{out}");
    assert!(out.lines().any(|l| l == "debug: 01"), "{out}");
}

#[test]
fn unknown_flag_is_usage_error() {
    let o = hvdbg(&["run", "boot_min", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn script_and_serve_conflict() {
    let o = hvdbg(&["run", "boot_min", "--script", "x", "--serve", "127.0.0.1:0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_mem_is_usage_error() {
    assert_eq!(hvdbg(&["run", "boot_min", "--mem", "12345"]).status.code(), Some(2));
}

#[test]
fn debugger_does_not_change_digest() {
    let native = stdout(&hvdbg(&["run", "two_procs", "--digest-only"]));
    let hosted = stdout(&hvdbg(&["run", "two_procs", "--tool", "hyperdbg", "--digest-only"]));
    assert_eq!(native.trim().len(), 64);
    assert_eq!(native, hosted);
}

#[test]
fn fixtures_lists_every_fixture() {
    let out = stdout(&hvdbg(&["fixtures"]));
    assert_eq!(out.lines().collect::<Vec<_>>(), hvdbg::guestos::list_fixtures());
}

#[test]
fn assembly_source_runs() {
    let dir = std::env::temp_dir().join(format!("hvdbg-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("tiny.s");
    std::fs::write(&path, "_start:\n    MOVI r0, 0x2A\n    OUT 0xE9, r0\n    HLT\n").unwrap();
    let o = hvdbg(&["run", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().any(|l| l == "debug: 2a"));
}

fn script_run(script: &str) -> Output {
    let dir = std::env::temp_dir().join(format!("hvdbg-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(format!("s{}.txt", script.len()));
    std::fs::write(&path, script).unwrap();
    hvdbg(&["run", "call_tree", "--script", path.to_str().unwrap()])
}

#[test]
fn script_transcript_is_deterministic() {
    let script = "b f2\nc\nbt\nc\n";
    let a = script_run(script);
    let b = script_run(script);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let out = stdout(&a);
    let bt: Vec<&str> = out.lines().filter(|l| l.starts_with('#')).collect();
    assert_eq!(bt.len(), 3, "{out}");
    assert!(bt[0].ends_with(" f2") && bt[1].contains(" f1+") && bt[2].contains(" kmain+"), "{out}");
    assert!(out.contains("digest: 9e99e3e32f02743613a93bebbd40b31488d9afb657845c05909fc97c9758b2f8"));
}

#[test]
fn script_parse_error_names_line() {
    let o = script_run("b f2\n\nzz\n");
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("script line 3"));
}

#[test]
fn key_schedule() {
    assert_eq!(parse_keys("10:0x41, 20:66").unwrap(), [(10, 0x41), (20, 66)]);
    assert_eq!(parse_keys("").unwrap(), []);
    for bad in ["10", "x:1", "10:256", "10:0xzz"] {
        assert!(parse_keys(bad).is_err(), "{bad}");
    }
}

#[test]
fn config_checks() {
    let mut cfg = RunConfig::new(Target::parse("boot_min"));
    assert_eq!(cfg.target, Target::Fixture("boot_min".into()));
    cfg.validate().unwrap();
    cfg.paused = true;
    assert!(cfg.validate().is_err());
    assert!(matches!(Target::parse("some/file.s"), Target::Source(_)));
}

#[test]
fn scheduled_keys_override_fixture_keys() {
    let mut cfg = RunConfig::new(Target::parse("kbd_echo"));
    let (m, _) = cfg.load().unwrap();
    assert_eq!(m.input.remaining(), 4);
    cfg.keys = vec![(100, b'z')];
    let r = hvdbg_cli::runner::run(&cfg).unwrap();
    assert_ne!(r.digest, hvdbg_cli::runner::run(&RunConfig::new(Target::parse("kbd_echo"))).unwrap().digest);
}
