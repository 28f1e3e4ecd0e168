//! Single-client debug server. The machine lives on the calling thread; two
//! helper threads move NDJSON lines between the socket and a pair of queues.

use std::cell::RefCell;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::rc::Rc;
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::Result;
use thiserror::Error;

use hvdbg::framework::{Budget, Config, Framework, RunEnd};
use hvdbg::hyperdbg::{capabilities, Console, DebugState, HyperDbg, Options, Poll};
use hvdbg::machine::LiveKeys;

use crate::protocol::{parse_client, ClientMsg, Ctl, RunState, ServerMsg};
use crate::runner::{Report, RunConfig, ToolKind};

/// Instructions run between checks of the inbound queue.
pub const SLICE: u64 = 20_000;
pub const HEARTBEAT: Duration = Duration::from_millis(200);
pub const NOT_IN_DEBUG: &str = "not in debug state";

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: std::io::Error },
}

type Inbound = Result<ClientMsg, String>;

struct Link {
    tx: Sender<String>,
    rx: Receiver<Inbound>,
    keys: LiveKeys,
    seq: u64,
    frame: Vec<u8>,
    last_frame: Instant,
    gone: bool,
}

impl Link {
    fn send(&mut self, msg: ServerMsg) {
        if self.tx.send(msg.to_line()).is_err() {
            self.gone = true;
        }
    }

    fn frame(&mut self, fb: &[u8]) {
        self.frame = fb.to_vec();
        self.heartbeat();
    }

    fn heartbeat(&mut self) {
        let msg = ServerMsg::frame(self.seq, &self.frame);
        self.seq += 1;
        self.last_frame = Instant::now();
        self.send(msg);
    }

    fn recv(&mut self) -> Option<Inbound> {
        match self.rx.try_recv() {
            Ok(m) => Some(m),
            Err(TryRecvError::Empty) => None,
            Err(TryRecvError::Disconnected) => {
                self.gone = true;
                None
            }
        }
    }

    fn push_key(&self, code: u8) {
        if let Ok(mut q) = self.keys.lock() {
            q.push_back(code);
        }
    }
}

struct ServeConsole(Rc<RefCell<Link>>);

impl Console for ServeConsole {
    fn poll(&mut self) -> Poll {
        let mut link = self.0.borrow_mut();
        loop {
            match link.recv() {
                Some(Ok(ClientMsg::Cmd { s })) => return Poll::Command(s),
                Some(Ok(ClientMsg::Key { code })) => {
                    link.push_key(code);
                    return Poll::Idle;
                }
                Some(Ok(ClientMsg::Ctl { .. })) => {}
                Some(Err(e)) => link.send(ServerMsg::Err { s: e }),
                None if link.gone => return Poll::Closed,
                None => return Poll::Idle,
            }
        }
    }

    fn idle(&mut self) {
        thread::sleep(Duration::from_millis(5));
        let mut link = self.0.borrow_mut();
        if link.last_frame.elapsed() >= HEARTBEAT {
            link.heartbeat();
        }
    }

    fn write(&mut self, line: &str) {
        self.0.borrow_mut().send(ServerMsg::Out { s: line.to_string() });
    }

    fn state(&mut self, state: &DebugState) {
        let s = match state {
            DebugState::Running => RunState::Running,
            DebugState::Debug { .. } => RunState::Debug,
        };
        self.0.borrow_mut().send(ServerMsg::State { s });
    }

    fn frame(&mut self, fb: &[u8]) {
        self.0.borrow_mut().frame(fb);
    }
}

/// Binds `addr` and reports the bound address before blocking in accept.
pub fn bind(addr: &str) -> Result<TcpListener, ServeError> {
    TcpListener::bind(addr).map_err(|source| ServeError::BindFailure { addr: addr.to_string(), source })
}

/// Serves one client until it disconnects. The returned report describes
/// the machine at that point.
pub fn serve(cfg: &RunConfig, listener: TcpListener) -> Result<Report> {
    let (machine, symbols) = cfg.load()?;
    let (stream, _) = listener.accept()?;
    drop(listener);
    let (tx, rx) = spawn_io(stream)?;
    let keys = LiveKeys::default();

    let mut machine = machine;
    machine.live_keys = Some(keys.clone());
    let mut fw = Framework::load(machine, Config { symbols, ..Config::default() })?;
    let link = Rc::new(RefCell::new(Link {
        tx,
        rx,
        keys,
        seq: 0,
        frame: Vec::new(),
        last_frame: Instant::now(),
        gone: false,
    }));
    if cfg.tool == ToolKind::HyperDbg {
        let console = ServeConsole(link.clone());
        fw.register_tool(
            Box::new(HyperDbg::new(Options { hotkey: cfg.hotkey, break_at_start: false }, Box::new(console))),
            capabilities(),
            Budget::unlimited(),
        )?;
    }

    let mut running = !cfg.paused;
    let mut end = None;
    let mut seen = u64::MAX;
    link.borrow_mut().send(ServerMsg::State { s: RunState::Running });
    loop {
        let fb = fw.machine().dev.framebuffer.clone();
        {
            let mut l = link.borrow_mut();
            if fw.machine().fb_version != seen || l.frame != fb {
                seen = fw.machine().fb_version;
                l.frame(&fb);
            } else if l.last_frame.elapsed() >= HEARTBEAT {
                l.heartbeat();
            }
            while let Some(msg) = l.recv() {
                match msg {
                    Ok(ClientMsg::Key { code }) => l.push_key(code),
                    Ok(ClientMsg::Cmd { .. }) => l.send(ServerMsg::Err { s: NOT_IN_DEBUG.into() }),
                    Ok(ClientMsg::Ctl { s: Ctl::Pause }) => running = false,
                    Ok(ClientMsg::Ctl { s: Ctl::Resume }) => running = true,
                    Err(e) => l.send(ServerMsg::Err { s: e }),
                }
            }
            if l.gone {
                break;
            }
        }
        if end.is_some() || !running {
            thread::sleep(Duration::from_millis(5));
            continue;
        }
        let limit = fw.machine().cpu.retired + SLICE;
        match fw.run_until(limit) {
            RunEnd::Limit => {}
            e => {
                let fb = fw.machine().dev.framebuffer.clone();
                let mut l = link.borrow_mut();
                l.frame(&fb);
                l.send(ServerMsg::State { s: RunState::Halted });
                if let RunEnd::TripleFault(d) = &e {
                    l.send(ServerMsg::Err { s: format!("triple fault: {d}") });
                }
                l.send(ServerMsg::Out { s: format!("digest: {}", fw.guest_digest_hex()) });
                end = Some(e);
            }
        }
    }
    Ok(Report {
        digest: fw.guest_digest_hex(),
        debug_log: fw.machine().dev.debug_log.clone(),
        transcript: Vec::new(),
        end: end.unwrap_or(RunEnd::Limit),
    })
}

fn spawn_io(stream: TcpStream) -> std::io::Result<(Sender<String>, Receiver<Inbound>)> {
    let reader = stream.try_clone()?;
    let (in_tx, in_rx) = mpsc::channel::<Inbound>();
    let (out_tx, out_rx) = mpsc::channel::<String>();
    thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            if in_tx.send(parse_client(&line)).is_err() {
                break;
            }
        }
    });
    thread::spawn(move || {
        let mut stream = stream;
        for line in out_rx {
            if writeln!(stream, "{line}").is_err() {
                break;
            }
        }
        let _ = stream.shutdown(std::net::Shutdown::Both);
    });
    Ok((out_tx, in_rx))
}

pub fn local_addr(l: &TcpListener) -> Option<SocketAddr> {
    l.local_addr().ok()
}
