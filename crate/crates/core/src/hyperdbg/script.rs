//! Debugger scripts: scheduled keys plus a queue of commands.
//!
//! ```text
//! # comments and blank lines are ignored
//! key@1200 0x41        scancode 0x41 arrives at retired 1200
//! hotkey@5000          the debugger hotkey arrives at retired 5000
//! r                    commands run, in order, in each debug session
//! c
//! ```
//!
//! If the first line is a command, the debugger breaks in before the guest
//! runs its first instruction.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::rc::Rc;

use thiserror::Error;

use super::command::{parse_number, Command};
use super::{capabilities, Console, DebugState, HyperDbg, Options, Poll};
use crate::framework::{Budget, Config, Framework, FrameworkError, RunEnd};
use crate::machine::Machine;
use crate::osdep::SymbolTable;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("script line {line}: {msg}")]
pub struct ScriptParseError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Script {
    pub keys: Vec<(u64, u8)>,
    pub commands: Vec<String>,
    pub break_at_start: bool,
}

impl Script {
    pub fn parse(text: &str, hotkey: u8) -> Result<Script, ScriptParseError> {
        let mut s = Script::default();
        let mut seen_line = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |msg: String| ScriptParseError { line: i + 1, msg };
            let words: Vec<&str> = line.split_whitespace().collect();
            if let Some(at) = words[0].strip_prefix("hotkey@") {
                if words.len() != 1 {
                    return Err(fail("hotkey takes no argument".into()));
                }
                let at = at.parse().map_err(|_| fail(format!("bad time: {at}")))?;
                s.keys.push((at, hotkey));
            } else if let Some(at) = words[0].strip_prefix("key@") {
                if words.len() != 2 {
                    return Err(fail("expected key@N CODE".into()));
                }
                let at = at.parse().map_err(|_| fail(format!("bad time: {at}")))?;
                let code = parse_number(words[1])
                    .and_then(|c| u8::try_from(c).ok())
                    .ok_or_else(|| fail(format!("bad scancode: {}", words[1])))?;
                s.keys.push((at, code));
            } else {
                Command::parse(line).map_err(|e| fail(e.0))?;
                if !seen_line {
                    s.break_at_start = true;
                }
                s.commands.push(line.to_string());
            }
            seen_line = true;
        }
        Ok(s)
    }
}

/// Transcript shared between a [`ScriptConsole`] and whoever reads it.
pub type Transcript = Rc<RefCell<Vec<String>>>;

/// Feeds queued commands; once they run out every session resumes at once.
#[derive(Debug, Default)]
pub struct ScriptConsole {
    commands: VecDeque<String>,
    transcript: Transcript,
}

impl ScriptConsole {
    pub fn new(commands: impl IntoIterator<Item = String>) -> ScriptConsole {
        ScriptConsole { commands: commands.into_iter().collect(), transcript: Transcript::default() }
    }

    pub fn transcript(&self) -> Transcript {
        self.transcript.clone()
    }
}

impl Console for ScriptConsole {
    fn poll(&mut self) -> Poll {
        match self.commands.pop_front() {
            Some(c) => Poll::Command(c),
            None => Poll::Closed,
        }
    }

    fn write(&mut self, line: &str) {
        self.transcript.borrow_mut().push(line.to_string());
    }

    fn state(&mut self, state: &DebugState) {
        let line = match state {
            DebugState::Debug { banner, .. } => format!("-- {banner}"),
            DebugState::Running => "-- running".to_string(),
        };
        self.transcript.borrow_mut().push(line);
    }
}

/// Result of [`run_script`].
#[derive(Debug)]
pub struct ScriptRun {
    pub framework: Framework,
    pub end: RunEnd,
    pub transcript: Vec<String>,
}

/// Runs `machine` under the debugger driven by `script` until it halts.
pub fn run_script(
    mut machine: Machine,
    symbols: SymbolTable,
    script: &Script,
    hotkey: u8,
) -> Result<ScriptRun, FrameworkError> {
    for (at, code) in &script.keys {
        machine.input.push(*at, *code);
    }
    let mut fw = Framework::load(machine, Config { symbols, ..Config::default() })?;
    let console = ScriptConsole::new(script.commands.iter().cloned());
    let transcript = console.transcript();
    let opts = Options { hotkey, break_at_start: script.break_at_start };
    fw.register_tool(Box::new(HyperDbg::new(opts, Box::new(console))), capabilities(), Budget::unlimited())?;
    let end = fw.run();
    let transcript = transcript.borrow().clone();
    Ok(ScriptRun { framework: fw, end, transcript })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_example() {
        let s = Script::parse("hotkey@5000\nr\n\n# done\nc\nkey@7 0x41\n", 0xFF).unwrap();
        assert_eq!(s.keys, [(5000, 0xFF), (7, 0x41)]);
        assert_eq!(s.commands, ["r", "c"]);
        assert!(!s.break_at_start);
        assert!(Script::parse("b f1\nc\nbt", 0xFF).unwrap().break_at_start);
    }

    #[test]
    fn errors_name_the_line() {
        assert_eq!(Script::parse("r\nkey@x 1", 0xFF).unwrap_err().line, 2);
        assert_eq!(Script::parse("\n\nfrobnicate", 0xFF).unwrap_err().line, 3);
        assert_eq!(Script::parse("key@5 0x100", 0xFF).unwrap_err().line, 1);
    }
}
