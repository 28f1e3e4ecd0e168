#![allow(dead_code)]

use std::cell::RefCell;
use std::rc::Rc;

use hvdbg::framework::{Api, Budget, Capabilities, Config, Event, EventOutcome, Framework, RunEnd, Tool};
use hvdbg::guestos::{build_fixture, Fixture};
use hvdbg::machine::{hex, Machine, StepOutcome};

pub type Log = Rc<RefCell<Vec<Event>>>;
pub type Setup = Box<dyn FnOnce(&mut Api<'_>)>;

/// Records every event and runs `setup` from `attach`.
pub struct Recorder {
    pub log: Log,
    pub setup: Option<Setup>,
}

impl Tool for Recorder {
    fn attach(&mut self, api: &mut Api<'_>) -> Result<(), hvdbg::framework::FrameworkError> {
        if let Some(f) = self.setup.take() {
            f(api);
        }
        Ok(())
    }

    fn on_event(&mut self, _api: &mut Api<'_>, ev: &Event) -> EventOutcome {
        self.log.borrow_mut().push(ev.clone());
        EventOutcome::PassThrough
    }
}

pub fn fixture(name: &str) -> Fixture {
    build_fixture(name).unwrap()
}

pub fn native(f: &Fixture) -> Machine {
    let mut m = f.machine();
    assert_eq!(m.run(10_000_000), StepOutcome::Halted);
    m
}

pub fn native_digest(f: &Fixture) -> String {
    hex(&native(f).digest())
}

pub fn load(f: &Fixture) -> Framework {
    Framework::load(f.machine(), Config { symbols: f.symbols.clone(), ..Config::default() }).unwrap()
}

/// Loads `f`, registers a recorder whose `attach` runs `setup`, runs to HLT.
pub fn record(f: &Fixture, setup: impl FnOnce(&mut Api<'_>) + 'static) -> (Framework, Vec<Event>) {
    let mut fw = load(f);
    let log: Log = Rc::default();
    let rec = Recorder { log: log.clone(), setup: Some(Box::new(setup)) };
    fw.register_tool(Box::new(rec), Capabilities::with_ports(true, &[0x60, 0x64]), Budget::unlimited()).unwrap();
    assert_eq!(fw.run(), RunEnd::Halted);
    let events = log.borrow().clone();
    (fw, events)
}
