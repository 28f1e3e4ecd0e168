//! Virtualization layer. A running [`Machine`] is late-launched into a
//! guest; [`Vmcs::run`] steps it until an event selected by the
//! [`ExecutionControls`] occurs and reports it as an [`Exit`]. Exits are
//! fault-like: the causing instruction has not retired.

use std::collections::VecDeque;

use thiserror::Error;

use crate::isa::{ControlReg, Instruction, Reg};
use crate::machine::{DoubleFault, Fault, Machine, StepOutcome};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VmxError {
    #[error("machine is already running under the virtualization layer")]
    AlreadyLaunched,
    #[error("guest is not in the exited state")]
    NotExited,
    #[error("guest is not entered; resume it first")]
    NotEntered,
    #[error("pending injections remain")]
    PendingWorkRemains,
    #[error("control structure has been unloaded")]
    Invalidated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExecutionControls {
    pub exception_bitmap: u64,
    pub io_bitmap: [u64; 4],
    pub ptbr_write_exit: bool,
    pub external_interrupt_exit: bool,
}

impl ExecutionControls {
    pub fn exception(&self, vector: u8) -> bool {
        vector < 64 && self.exception_bitmap & (1u64 << vector) != 0
    }

    pub fn set_exception(&mut self, vector: u8, on: bool) {
        if on {
            self.exception_bitmap |= 1u64 << vector;
        } else {
            self.exception_bitmap &= !(1u64 << vector);
        }
    }

    pub fn io(&self, port: u8) -> bool {
        self.io_bitmap[port as usize / 64] & (1u64 << (port % 64)) != 0
    }

    pub fn set_io(&mut self, port: u8, on: bool) {
        let w = &mut self.io_bitmap[port as usize / 64];
        if on {
            *w |= 1u64 << (port % 64);
        } else {
            *w &= !(1u64 << (port % 64));
        }
    }

    pub fn io_ports(&self) -> Vec<u8> {
        (0..=255u8).filter(|p| self.io(*p)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IoAccess {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExitReason {
    Exception { vector: u8, err: u32, far: u32 },
    ExternalInterrupt { line: u8 },
    /// `reg` is the destination (`IN`) or source (`OUT`); `value` is the
    /// value being written for `OUT`.
    IoPort { port: u8, access: IoAccess, reg: Reg, value: Option<u32> },
    PtbrWrite { new_value: u32, old_value: u32 },
    Hlt,
    /// The guest could not deliver a fault; it is halted.
    TripleFault { diagnostic: String },
    /// A bounded run reached its retired-instruction limit.
    Limit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exit {
    pub reason: ExitReason,
    /// pc of the causing instruction.
    pub at: u32,
    pub retired: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    Exception { vector: u8, err: u32, far: u32 },
    Interrupt { line: u8 },
}

impl From<Fault> for Injection {
    fn from(f: Fault) -> Self {
        Injection::Exception { vector: f.vector, err: f.err, far: f.far }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResumeAction {
    Retry,
    /// The host emulated the instruction; advance pc and count it retired.
    Skip(u32),
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VmState {
    Entered,
    Exited,
    Invalid,
}

#[derive(Debug)]
pub struct Vmcs {
    guest: Option<Machine>,
    controls: ExecutionControls,
    last_exit: Option<Exit>,
    pending: VecDeque<Injection>,
    state: VmState,
    exits: u64,
}

impl Vmcs {
    /// Takes over a running machine. Nothing guest-visible changes.
    pub fn late_launch(mut machine: Machine, controls: ExecutionControls) -> Result<Vmcs, VmxError> {
        if machine.vmx_enabled {
            return Err(VmxError::AlreadyLaunched);
        }
        machine.vmx_enabled = true;
        Ok(Vmcs {
            guest: Some(machine),
            controls,
            last_exit: None,
            pending: VecDeque::new(),
            state: VmState::Entered,
            exits: 0,
        })
    }

    pub fn is_valid(&self) -> bool {
        self.state != VmState::Invalid
    }

    pub fn is_exited(&self) -> bool {
        self.state == VmState::Exited
    }

    /// Guest state. Panics after [`Vmcs::unload`].
    pub fn guest(&self) -> &Machine {
        self.guest.as_ref().expect("vmcs used after unload")
    }

    pub fn guest_mut(&mut self) -> &mut Machine {
        self.guest.as_mut().expect("vmcs used after unload")
    }

    pub fn controls(&self) -> &ExecutionControls {
        &self.controls
    }

    pub fn last_exit(&self) -> Option<&Exit> {
        self.last_exit.as_ref()
    }

    pub fn exit_count(&self) -> u64 {
        self.exits
    }

    pub fn pending_injections(&self) -> usize {
        self.pending.len()
    }

    fn require(&self, want: VmState) -> Result<(), VmxError> {
        match self.state {
            VmState::Invalid => Err(VmxError::Invalidated),
            s if s == want => Ok(()),
            VmState::Entered => Err(VmxError::NotExited),
            VmState::Exited => Err(VmxError::NotEntered),
        }
    }

    pub fn set_controls(&mut self, controls: ExecutionControls) -> Result<(), VmxError> {
        self.require(VmState::Exited)?;
        self.controls = controls;
        Ok(())
    }

    /// Queues an event for delivery through the guest's vector table at the
    /// next resume.
    pub fn inject(&mut self, inj: Injection) -> Result<(), VmxError> {
        self.require(VmState::Exited)?;
        self.pending.push_back(inj);
        Ok(())
    }

    /// Re-enters the guest. Queued injections are delivered first, in order.
    /// Returns a triple-fault exit if an injection could not be delivered.
    pub fn resume(&mut self, action: ResumeAction) -> Result<Option<Exit>, VmxError> {
        self.require(VmState::Exited)?;
        let m = self.guest.as_mut().expect("valid vmcs has a guest");
        if let ResumeAction::Skip(len) = action {
            m.skip_instruction(len);
        }
        self.state = VmState::Entered;
        while let Some(inj) = self.pending.pop_front() {
            let m = self.guest.as_mut().expect("valid vmcs has a guest");
            let r = match inj {
                Injection::Exception { vector, err, far } => m.inject_exception(vector, err, far),
                Injection::Interrupt { line } => m.inject_interrupt(line),
            };
            if let Err(e) = r {
                self.pending.clear();
                return Ok(Some(self.triple_fault(e)));
            }
        }
        Ok(None)
    }

    fn triple_fault(&mut self, e: DoubleFault) -> Exit {
        let pc = self.guest().cpu.pc;
        self.exit(ExitReason::TripleFault { diagnostic: e.to_string() }, pc)
    }

    fn exit(&mut self, reason: ExitReason, at: u32) -> Exit {
        let e = Exit { reason, at, retired: self.guest().cpu.retired };
        self.exits += 1;
        self.state = VmState::Exited;
        self.last_exit = Some(e.clone());
        e
    }

    /// Runs the guest until the next exit.
    pub fn run(&mut self) -> Result<Exit, VmxError> {
        self.run_until(u64::MAX)
    }

    /// Runs until the next exit or until `limit` instructions have retired.
    pub fn run_until(&mut self, limit: u64) -> Result<Exit, VmxError> {
        self.require(VmState::Entered)?;
        let ctl = self.controls;
        loop {
            let m = self.guest.as_mut().expect("valid vmcs has a guest");
            let pc = m.cpu.pc;
            if m.cpu.halted {
                return Ok(match m.diagnostic.clone() {
                    Some(d) => self.exit(ExitReason::TripleFault { diagnostic: d }, pc),
                    None => self.exit(ExitReason::Hlt, pc),
                });
            }
            if m.cpu.retired >= limit {
                return Ok(self.exit(ExitReason::Limit, pc));
            }
            m.drain_input();
            if let Some(line) = m.interrupt_deliverable() {
                if ctl.external_interrupt_exit {
                    return Ok(self.exit(ExitReason::ExternalInterrupt { line }, pc));
                }
                if let Err(e) = m.inject_interrupt(line) {
                    return Ok(self.triple_fault(e));
                }
                continue;
            }
            let (instr, len) = match m.fetch() {
                Ok(x) => x,
                Err(f) => {
                    if let Some(e) = self.fault(f, &ctl) {
                        return Ok(e);
                    }
                    continue;
                }
            };
            if !m.cpu.user() {
                let reason = match instr {
                    Instruction::In { rd, port } if ctl.io(port) => {
                        Some(ExitReason::IoPort { port, access: IoAccess::Read, reg: rd, value: None })
                    }
                    Instruction::Out { port, rs } if ctl.io(port) => Some(ExitReason::IoPort {
                        port,
                        access: IoAccess::Write,
                        reg: rs,
                        value: Some(m.cpu.reg(rs)),
                    }),
                    Instruction::Movcr { cr: ControlReg::Ptbr, rs } if ctl.ptbr_write_exit => {
                        Some(ExitReason::PtbrWrite { new_value: m.cpu.reg(rs), old_value: m.cpu.ptbr() })
                    }
                    Instruction::Hlt => Some(ExitReason::Hlt),
                    _ => None,
                };
                if let Some(r) = reason {
                    return Ok(self.exit(r, pc));
                }
            }
            match m.execute_decoded(instr, len) {
                StepOutcome::Fault(f) => {
                    if let Some(e) = self.fault(f, &ctl) {
                        return Ok(e);
                    }
                }
                StepOutcome::Halted => return Ok(self.exit(ExitReason::Hlt, pc)),
                StepOutcome::Retired | StepOutcome::Interrupted(_) => {}
            }
        }
    }

    fn fault(&mut self, f: Fault, ctl: &ExecutionControls) -> Option<Exit> {
        let pc = self.guest().cpu.pc;
        if ctl.exception(f.vector) {
            return Some(self.exit(ExitReason::Exception { vector: f.vector, err: f.err, far: f.far }, pc));
        }
        let m = self.guest.as_mut().expect("valid vmcs has a guest");
        match m.raise(f) {
            Ok(()) => None,
            Err(e) => Some(self.triple_fault(e)),
        }
    }

    /// Leaves virtualized execution and hands the machine back.
    pub fn unload(&mut self) -> Result<Machine, VmxError> {
        self.require(VmState::Exited)?;
        if !self.pending.is_empty() {
            return Err(VmxError::PendingWorkRemains);
        }
        let mut m = self.guest.take().expect("valid vmcs has a guest");
        m.vmx_enabled = false;
        self.state = VmState::Invalid;
        Ok(m)
    }
}
