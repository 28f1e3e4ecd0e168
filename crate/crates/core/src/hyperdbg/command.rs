use std::fmt;

use crate::framework::WatchAccess;

/// An address argument: a number or a symbol, resolved at execution time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Addr(u32),
    Symbol(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Help,
    Continue,
    Step(u32),
    Regs,
    Break { at: Target, process: Option<String> },
    Watch { at: Target, access: WatchAccess },
    Delete(u32),
    Mem { at: Target, len: u32 },
    Edit { at: Target, bytes: Vec<u8> },
    Backtrace,
    Ps,
    TraceSys(bool),
    Quit,
}

pub const HELP: &str = "\
h                      this help
c                      continue
s [n]                  step n instructions (default 1)
r                      registers
b <addr|sym> [proc]    breakpoint, optionally only in proc (pid or name)
w <addr> [r|w|rw]      watch one byte (default rw)
d <id>                 delete breakpoint or watchpoint
m <addr> <len>         dump memory
e <addr> <hexbytes>    write memory
bt                     backtrace
ps                     process list
trace sys on|off       log system calls
q                      detach the debugger";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError(pub String);

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ParseError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError(msg.into()))
}

/// `0x` hex, or decimal.
pub fn parse_number(s: &str) -> Option<u32> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u32::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}

fn target(s: &str) -> Result<Target, ParseError> {
    if let Some(n) = parse_number(s) {
        return Ok(Target::Addr(n));
    }
    if s.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
    {
        Ok(Target::Symbol(s.to_string()))
    } else {
        err(format!("bad address: {s}"))
    }
}

fn hex_bytes(s: &str) -> Result<Vec<u8>, ParseError> {
    let s = s.strip_prefix("0x").unwrap_or(s);
    if s.is_empty() || !s.len().is_multiple_of(2) {
        return err(format!("bad hex bytes: {s}"));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).or_else(|_| err(format!("bad hex bytes: {s}"))))
        .collect()
}

impl Command {
    pub fn parse(line: &str) -> Result<Command, ParseError> {
        let words: Vec<&str> = line.split_whitespace().collect();
        let Some((&head, args)) = words.split_first() else {
            return err("empty command");
        };
        let argc = |lo: usize, hi: usize| {
            if (lo..=hi).contains(&args.len()) {
                Ok(())
            } else {
                err(format!("wrong number of arguments for {head}"))
            }
        };
        Ok(match head {
            "h" | "help" => {
                argc(0, 0)?;
                Command::Help
            }
            "c" => {
                argc(0, 0)?;
                Command::Continue
            }
            "s" => {
                argc(0, 1)?;
                match args.first() {
                    None => Command::Step(1),
                    Some(n) => match parse_number(n) {
                        Some(n) if n > 0 => Command::Step(n),
                        _ => return err(format!("bad step count: {n}")),
                    },
                }
            }
            "r" => {
                argc(0, 0)?;
                Command::Regs
            }
            "b" => {
                argc(1, 2)?;
                Command::Break { at: target(args[0])?, process: args.get(1).map(|s| s.to_string()) }
            }
            "w" => {
                argc(1, 2)?;
                let access = match args.get(1).copied() {
                    None | Some("rw") => WatchAccess::ReadWrite,
                    Some("r") => WatchAccess::Read,
                    Some("w") => WatchAccess::Write,
                    Some(a) => return err(format!("bad access: {a}")),
                };
                Command::Watch { at: target(args[0])?, access }
            }
            "d" => {
                argc(1, 1)?;
                Command::Delete(parse_number(args[0]).ok_or_else(|| ParseError(format!("bad id: {}", args[0])))?)
            }
            "m" => {
                argc(2, 2)?;
                let len = parse_number(args[1]).ok_or_else(|| ParseError(format!("bad length: {}", args[1])))?;
                Command::Mem { at: target(args[0])?, len }
            }
            "e" => {
                argc(2, 2)?;
                Command::Edit { at: target(args[0])?, bytes: hex_bytes(args[1])? }
            }
            "bt" => {
                argc(0, 0)?;
                Command::Backtrace
            }
            "ps" => {
                argc(0, 0)?;
                Command::Ps
            }
            "trace" => {
                argc(2, 2)?;
                if args[0] != "sys" {
                    return err(format!("cannot trace {}", args[0]));
                }
                match args[1] {
                    "on" => Command::TraceSys(true),
                    "off" => Command::TraceSys(false),
                    a => return err(format!("expected on or off, got {a}")),
                }
            }
            "q" => {
                argc(0, 0)?;
                Command::Quit
            }
            other => return err(format!("unknown command: {other}")),
        })
    }
}
