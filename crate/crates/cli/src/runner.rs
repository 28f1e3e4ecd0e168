use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use hvdbg::framework::RunEnd;
use hvdbg::guestos::{build_fixture, list_fixtures};
use hvdbg::hyperdbg::{run_script, Script, DEFAULT_HOTKEY};
use hvdbg::isa::assemble;
use hvdbg::machine::{hex, InputSchedule, Machine, StepOutcome, PAGE_SIZE, RESET_PC};
use hvdbg::osdep::SymbolTable;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Fixture(String),
    /// Assembly source file.
    Source(PathBuf),
}

impl Target {
    pub fn parse(s: &str) -> Target {
        if list_fixtures().contains(&s) {
            Target::Fixture(s.to_string())
        } else {
            Target::Source(PathBuf::from(s))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ToolKind {
    #[default]
    None,
    HyperDbg,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub target: Target,
    pub symbols: Option<PathBuf>,
    pub mem: usize,
    pub tool: ToolKind,
    pub keys: Vec<(u64, u8)>,
    pub script: Option<PathBuf>,
    pub serve: Option<String>,
    pub paused: bool,
    pub hotkey: u8,
}

impl RunConfig {
    pub fn new(target: Target) -> RunConfig {
        RunConfig {
            target,
            symbols: None,
            mem: hvdbg::machine::DEFAULT_MEM_SIZE,
            tool: ToolKind::None,
            keys: Vec::new(),
            script: None,
            serve: None,
            paused: false,
            hotkey: DEFAULT_HOTKEY,
        }
    }

    /// Checks flag combinations. Errors here are usage errors.
    pub fn validate(&self) -> Result<()> {
        if self.script.is_some() && self.serve.is_some() {
            bail!("--script and --serve cannot be combined");
        }
        if self.mem == 0 || !self.mem.is_multiple_of(PAGE_SIZE as usize) {
            bail!("--mem must be a positive multiple of {PAGE_SIZE}");
        }
        if self.mem < 64 * 1024 {
            bail!("--mem must be at least 65536");
        }
        if self.paused && self.serve.is_none() {
            bail!("--paused only applies to --serve");
        }
        Ok(())
    }

    /// Fresh machine with the target loaded, plus its symbols.
    pub fn load(&self) -> Result<(Machine, SymbolTable)> {
        let (image, mut symbols, mut keys) = match &self.target {
            Target::Fixture(name) => {
                let f = build_fixture(name)?;
                (f.image, f.symbols, f.keys)
            }
            Target::Source(path) => {
                let src = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let image = assemble(&src).with_context(|| format!("assembling {}", path.display()))?;
                let symbols = SymbolTable::parse(&image.symbols_file())?;
                (image, symbols, Vec::new())
            }
        };
        if let Some(path) = &self.symbols {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            symbols = SymbolTable::parse(&text)?;
        }
        if !self.keys.is_empty() {
            keys = self.keys.clone();
        }
        let mut m = Machine::new(self.mem);
        m.load_image(&image).context("image does not fit in memory")?;
        m.cpu.pc = if image.sections.is_empty() { RESET_PC } else { image.entry };
        m.input = InputSchedule::new(keys);
        Ok((m, symbols))
    }
}

/// `N:CODE[,N:CODE...]`, retired count then scancode.
pub fn parse_keys(s: &str) -> Result<Vec<(u64, u8)>> {
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
        let Some((at, code)) = item.split_once(':') else {
            bail!("bad key entry {item:?}, expected N:CODE");
        };
        let at: u64 = at.trim().parse().with_context(|| format!("bad retired count in {item:?}"))?;
        let code = code.trim();
        let code = match code.strip_prefix("0x").or_else(|| code.strip_prefix("0X")) {
            Some(h) => u8::from_str_radix(h, 16),
            None => code.parse(),
        }
        .with_context(|| format!("bad scancode in {item:?}"))?;
        out.push((at, code));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub digest: String,
    pub debug_log: Vec<u8>,
    pub transcript: Vec<String>,
    pub end: RunEnd,
}

impl Report {
    pub fn debug_log_hex(&self) -> String {
        self.debug_log.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ")
    }
}

/// Runs to HLT without a server.
pub fn run(cfg: &RunConfig) -> Result<Report> {
    let (mut machine, symbols) = cfg.load()?;
    if cfg.tool == ToolKind::None && cfg.script.is_none() {
        let end = match machine.run(u64::MAX) {
            StepOutcome::Halted => match machine.diagnostic.clone() {
                Some(d) => RunEnd::TripleFault(d),
                None => RunEnd::Halted,
            },
            _ => RunEnd::Limit,
        };
        return Ok(Report {
            digest: hex(&machine.digest()),
            debug_log: machine.dev.debug_log.clone(),
            transcript: Vec::new(),
            end,
        });
    }
    let script = match &cfg.script {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Script::parse(&text, cfg.hotkey)?
        }
        None => Script::default(),
    };
    let r = run_script(machine, symbols, &script, cfg.hotkey)?;
    Ok(Report {
        digest: r.framework.guest_digest_hex(),
        debug_log: r.framework.machine().dev.debug_log.clone(),
        transcript: r.transcript,
        end: r.end,
    })
}
