use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use hvdbg::framework::RunEnd;
use hvdbg::guestos::list_fixtures;
use hvdbg_cli::runner::{self, parse_keys, Report, RunConfig, Target, ToolKind};
use hvdbg_cli::serve;

#[derive(Parser)]
#[command(name = "hvdbg", version, about = "Run guests natively or under the hypervisor debugger")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a fixture or an assembly source file until it halts.
    Run(RunArgs),
    /// List built-in fixtures.
    Fixtures,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tool {
    Hyperdbg,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Fixture name or path to an assembly source file.
    image: String,
    /// Symbol file (`ADDR NAME` per line).
    #[arg(long)]
    symbols: Option<PathBuf>,
    /// Guest memory size in bytes.
    #[arg(long, default_value_t = hvdbg::machine::DEFAULT_MEM_SIZE)]
    mem: usize,
    #[arg(long, value_enum)]
    tool: Option<Tool>,
    /// Key schedule, `RETIRED:CODE[,RETIRED:CODE...]`.
    #[arg(long)]
    keys: Option<String>,
    /// Debugger script; implies `--tool hyperdbg`.
    #[arg(long, conflicts_with = "serve")]
    script: Option<PathBuf>,
    /// Serve the debug protocol on this address.
    #[arg(long)]
    serve: Option<String>,
    /// With --serve, wait for a resume before running.
    #[arg(long, requires = "serve")]
    paused: bool,
    /// Hotkey scancode.
    #[arg(long, default_value_t = hvdbg::hyperdbg::DEFAULT_HOTKEY)]
    hotkey: u8,
    /// Print only the digest.
    #[arg(long)]
    digest_only: bool,
}

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}\n");
    let _ = Cli::command().print_help();
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args = match cli.cmd {
        Cmd::Fixtures => {
            for f in list_fixtures() {
                println!("{f}");
            }
            return ExitCode::SUCCESS;
        }
        Cmd::Run(a) => a,
    };
    let mut cfg = RunConfig::new(Target::parse(&args.image));
    cfg.symbols = args.symbols;
    cfg.mem = args.mem;
    cfg.script = args.script;
    cfg.serve = args.serve;
    cfg.paused = args.paused;
    cfg.hotkey = args.hotkey;
    if args.tool.is_some() || cfg.script.is_some() {
        cfg.tool = ToolKind::HyperDbg;
    }
    if let Some(k) = &args.keys {
        match parse_keys(k) {
            Ok(k) => cfg.keys = k,
            Err(e) => return usage(e),
        }
    }
    if let Err(e) = cfg.validate() {
        return usage(e);
    }

    let report = match &cfg.serve {
        Some(addr) => {
            let listener = match serve::bind(addr) {
                Ok(l) => l,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            };
            if let Some(a) = serve::local_addr(&listener) {
                println!("listening on {a}");
                let _ = std::io::stdout().flush();
            }
            serve::serve(&cfg, listener)
        }
        None => runner::run(&cfg),
    };
    match report {
        Ok(r) => print_report(&r, args.digest_only),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn print_report(r: &Report, digest_only: bool) -> ExitCode {
    if digest_only {
        println!("{}", r.digest);
    } else {
        for line in &r.transcript {
            println!("{line}");
        }
        println!("digest: {}", r.digest);
        println!("debug: {}", r.debug_log_hex());
    }
    match &r.end {
        RunEnd::TripleFault(d) => {
            eprintln!("triple fault: {d}");
            ExitCode::FAILURE
        }
        _ => ExitCode::SUCCESS,
    }
}
