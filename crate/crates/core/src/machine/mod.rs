//! Deterministic GISA-32 machine: CPU, two-level paging, physical memory
//! and the timer / keyboard / framebuffer / debug-port devices.
//!
//! The virtual clock is the retired-instruction count. Interrupt delivery
//! and anything done from outside the guest costs zero guest time.

mod devices;
mod mmu;

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use devices::*;
pub use mmu::{pte, Access, PageFault, Walk};

use crate::isa::{decode, AluOp, ControlReg, Instruction, JumpCond, Reg};

pub const PAGE_SIZE: u32 = 0x1000;
pub const DEFAULT_MEM_SIZE: usize = 16 << 20;
pub const RESET_PC: u32 = 0x100;
pub const RESET_IVT: u32 = 0x400;

pub const VEC_BRK: u8 = 3;
pub const VEC_SYSCALL: u8 = 8;
pub const VEC_GP: u8 = 13;
pub const VEC_PF: u8 = 14;
pub const IRQ_TIMER: u8 = 32;
pub const IRQ_KBD: u8 = 33;

/// `ERR` values for #GP.
pub const GP_PRIVILEGE: u32 = 0;
pub const GP_INVALID_OPCODE: u32 = 1;
pub const GP_BUS: u32 = 2;

pub const EFLAGS_Z: u32 = 1;
pub const EFLAGS_N: u32 = 2;
pub const EFLAGS_IF: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("physical access {pa:#x}+{len} out of bounds")]
pub struct PhysicalOutOfBounds {
    pub pa: u32,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Kernel,
    User,
}

/// Architectural CPU state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cpu {
    pub regs: [u32; 8],
    pub pc: u32,
    pub z: bool,
    pub n: bool,
    pub ie: bool,
    pub mode: Mode,
    pub cr: [u32; 8],
    pub retired: u64,
    pub halted: bool,
}

impl Default for Cpu {
    fn default() -> Self {
        let mut cr = [0; 8];
        cr[ControlReg::Ivt as usize] = RESET_IVT;
        Cpu {
            regs: [0; 8],
            pc: RESET_PC,
            z: false,
            n: false,
            ie: false,
            mode: Mode::Kernel,
            cr,
            retired: 0,
            halted: false,
        }
    }
}

impl Cpu {
    pub fn reg(&self, r: Reg) -> u32 {
        self.regs[r.index()]
    }

    pub fn set_reg(&mut self, r: Reg, v: u32) {
        self.regs[r.index()] = v;
    }

    pub fn cr(&self, c: ControlReg) -> u32 {
        self.cr[c as usize]
    }

    pub fn ptbr(&self) -> u32 {
        self.cr(ControlReg::Ptbr)
    }

    pub fn paging(&self) -> bool {
        self.cr(ControlReg::Pgen) & 1 != 0
    }

    pub fn flags(&self) -> u32 {
        ((self.z as u32) * EFLAGS_Z) | ((self.n as u32) * EFLAGS_N) | ((self.ie as u32) * EFLAGS_IF)
    }

    pub fn set_flags(&mut self, f: u32) {
        self.z = f & EFLAGS_Z != 0;
        self.n = f & EFLAGS_N != 0;
        self.ie = f & EFLAGS_IF != 0;
    }

    pub fn user(&self) -> bool {
        self.mode == Mode::User
    }
}

/// An exception raised by an instruction, not yet delivered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fault {
    pub vector: u8,
    pub err: u32,
    pub far: u32,
}

impl Fault {
    pub fn gp(err: u32) -> Fault {
        Fault { vector: VEC_GP, err, far: 0 }
    }

    /// BRK and SYSCALL are traps: delivery retires the instruction and the
    /// saved EPC points past it.
    pub fn is_trap(&self) -> bool {
        self.vector == VEC_BRK || self.vector == VEC_SYSCALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Retired,
    /// A pending interrupt was delivered instead of executing an instruction.
    Interrupted(u8),
    /// The instruction at pc raised an exception. No state has changed.
    Fault(Fault),
    Halted,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("double fault delivering vector {vector}: {reason}")]
pub struct DoubleFault {
    pub vector: u8,
    pub reason: String,
}

/// Host-side protection applied on top of the guest's own page tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shadow {
    NoAccess,
    ReadOnly,
}

/// Frame number to host-side protection. Never visible to the guest.
pub type ShadowMap = BTreeMap<u32, Shadow>;

/// One memory access an instruction would perform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemAccess {
    pub va: u32,
    pub len: u32,
    pub access: Access,
}

#[derive(Debug, Clone)]
pub struct Machine {
    pub cpu: Cpu,
    mem: Vec<u8>,
    pub dev: Devices,
    /// Latched interrupt lines, bit n = vector n.
    pub pending_irq: u64,
    pub input: InputSchedule,
    pub live_keys: Option<LiveKeys>,
    pub shadow: ShadowMap,
    /// Page-table slot (physical, 4-aligned) to the value the guest believes
    /// it holds. Guest loads and stores see these values; the hardware walk
    /// does not.
    pub masquerade: BTreeMap<u32, u32>,
    pub vmx_enabled: bool,
    pub diagnostic: Option<String>,
    /// Bumped on every framebuffer write.
    pub fb_version: u64,
}

impl Default for Machine {
    fn default() -> Self {
        Machine::new(DEFAULT_MEM_SIZE)
    }
}

struct Effects {
    next_pc: u32,
    writes: Vec<(u32, u8)>,
}

impl Machine {
    pub fn new(mem_size: usize) -> Machine {
        assert!(mem_size.is_multiple_of(PAGE_SIZE as usize), "memory size must be whole pages");
        Machine {
            cpu: Cpu::default(),
            mem: vec![0; mem_size],
            dev: Devices::default(),
            pending_irq: 0,
            input: InputSchedule::default(),
            live_keys: None,
            shadow: ShadowMap::new(),
            masquerade: BTreeMap::new(),
            vmx_enabled: false,
            diagnostic: None,
            fb_version: 0,
        }
    }

    pub fn mem_size(&self) -> usize {
        self.mem.len()
    }

    pub fn frame_count(&self) -> u32 {
        (self.mem.len() / PAGE_SIZE as usize) as u32
    }

    /// Copies every section to its physical load address.
    pub fn load_image(&mut self, img: &crate::isa::AssembledImage) -> Result<(), PhysicalOutOfBounds> {
        for s in &img.sections {
            self.write_phys(s.load, &s.bytes)?;
        }
        Ok(())
    }

    fn check_phys(&self, pa: u32, len: usize) -> Result<(), PhysicalOutOfBounds> {
        if (pa as u64) + (len as u64) > self.mem.len() as u64 {
            Err(PhysicalOutOfBounds { pa, len })
        } else {
            Ok(())
        }
    }

    pub fn read_phys(&self, pa: u32, len: usize) -> Result<Vec<u8>, PhysicalOutOfBounds> {
        self.check_phys(pa, len)?;
        Ok((0..len as u32).map(|i| self.phys_byte(pa + i)).collect())
    }

    pub fn write_phys(&mut self, pa: u32, data: &[u8]) -> Result<(), PhysicalOutOfBounds> {
        self.check_phys(pa, data.len())?;
        for (i, b) in data.iter().enumerate() {
            self.set_phys_byte(pa + i as u32, *b);
        }
        Ok(())
    }

    pub fn read_phys_u32(&self, pa: u32) -> Result<u32, PhysicalOutOfBounds> {
        let b = self.read_phys(pa, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn write_phys_u32(&mut self, pa: u32, v: u32) -> Result<(), PhysicalOutOfBounds> {
        self.write_phys(pa, &v.to_le_bytes())
    }

    fn phys_byte(&self, pa: u32) -> u8 {
        if Devices::fb_contains(pa) {
            self.dev.framebuffer[(pa - FB_BASE) as usize]
        } else {
            self.mem[pa as usize]
        }
    }

    fn set_phys_byte(&mut self, pa: u32, b: u8) {
        if Devices::fb_contains(pa) {
            self.dev.framebuffer[(pa - FB_BASE) as usize] = b;
            self.fb_version += 1;
        } else {
            self.mem[pa as usize] = b;
        }
    }

    fn guest_byte(&self, pa: u32) -> u8 {
        if !self.masquerade.is_empty() {
            if let Some(v) = self.masquerade.get(&(pa & !3)) {
                return v.to_le_bytes()[(pa & 3) as usize];
            }
        }
        self.phys_byte(pa)
    }

    fn set_guest_byte(&mut self, pa: u32, b: u8) {
        if !self.masquerade.is_empty() {
            if let Some(v) = self.masquerade.get_mut(&(pa & !3)) {
                let mut bytes = v.to_le_bytes();
                bytes[(pa & 3) as usize] = b;
                *v = u32::from_le_bytes(bytes);
                return;
            }
        }
        self.set_phys_byte(pa, b);
    }

    /// Physical read as the guest would observe it (masquerade applied).
    pub fn read_phys_guest(&self, pa: u32, len: usize) -> Result<Vec<u8>, PhysicalOutOfBounds> {
        self.check_phys(pa, len)?;
        Ok((0..len as u32).map(|i| self.guest_byte(pa + i)).collect())
    }

    /// Raw RAM, without the framebuffer overlay.
    pub fn ram(&self) -> &[u8] {
        &self.mem
    }

    // ---- interrupts and input ----

    pub fn raise_irq(&mut self, line: u8) {
        self.pending_irq |= 1u64 << line;
    }

    /// Lowest pending line, if any.
    pub fn pending_line(&self) -> Option<u8> {
        (self.pending_irq != 0).then(|| self.pending_irq.trailing_zeros() as u8)
    }

    pub fn interrupt_deliverable(&self) -> Option<u8> {
        if self.cpu.ie {
            self.pending_line()
        } else {
            None
        }
    }

    pub fn push_key(&mut self, code: u8) {
        self.dev.kbd_fifo.push_back(code);
        self.raise_irq(IRQ_KBD);
    }

    /// Moves due scheduled keys and any live keys into the keyboard FIFO.
    pub fn drain_input(&mut self) {
        let due: Vec<u8> = self.input.due(self.cpu.retired).collect();
        for k in due {
            self.push_key(k);
        }
        let live: Vec<u8> = match &self.live_keys {
            Some(q) => q.lock().map(|mut q| q.drain(..).collect()).unwrap_or_default(),
            None => Vec::new(),
        };
        for k in live {
            self.push_key(k);
        }
    }

    /// Device side of `IN`. Reads may have side effects (FIFO pop).
    pub fn port_in(&mut self, port: u8) -> u32 {
        match port {
            PORT_KBD_DATA | PORT_KBD_STATUS => {
                self.drain_input();
                if port == PORT_KBD_STATUS {
                    return !self.dev.kbd_fifo.is_empty() as u32;
                }
                let v = self.dev.kbd_fifo.pop_front().unwrap_or(0) as u32;
                if self.dev.kbd_fifo.is_empty() {
                    self.pending_irq &= !(1u64 << IRQ_KBD);
                }
                v
            }
            PORT_TIMER => self.dev.timer_divisor,
            _ => 0,
        }
    }

    /// Device side of `OUT`.
    pub fn port_out(&mut self, port: u8, value: u32) {
        match port {
            PORT_TIMER => self.dev.timer_divisor = value,
            PORT_DEBUG => self.dev.debug_log.push(value as u8),
            _ => {}
        }
    }

    // ---- exception / interrupt delivery ----

    fn enter_vector(&mut self, vector: u8, epc: u32) -> Result<(), DoubleFault> {
        let ivt = self.cpu.cr(ControlReg::Ivt);
        let slot = ivt.wrapping_add(vector as u32 * 4);
        let handler = self.read_phys_u32(slot).map_err(|_| DoubleFault {
            vector,
            reason: format!("vector table entry at {slot:#x} out of bounds"),
        })?;
        if handler == 0 {
            return Err(DoubleFault { vector, reason: "no handler installed".into() });
        }
        let c = &mut self.cpu;
        c.cr[ControlReg::Epc as usize] = epc;
        c.cr[ControlReg::Eflags as usize] = c.flags();
        c.cr[ControlReg::Emode as usize] = (c.mode == Mode::User) as u32;
        c.ie = false;
        c.mode = Mode::Kernel;
        c.pc = handler;
        Ok(())
    }

    fn double_fault(&mut self, e: DoubleFault) -> DoubleFault {
        self.cpu.halted = true;
        self.diagnostic = Some(e.to_string());
        e
    }

    /// Delivers an exception at the current boundary with `EPC = pc`.
    pub fn inject_exception(&mut self, vector: u8, err: u32, far: u32) -> Result<(), DoubleFault> {
        self.cpu.cr[ControlReg::Err as usize] = err;
        self.cpu.cr[ControlReg::Far as usize] = far;
        let pc = self.cpu.pc;
        self.enter_vector(vector, pc).map_err(|e| self.double_fault(e))
    }

    /// Delivers an interrupt line. Timer is edge-latched and cleared here;
    /// the keyboard line stays up until the FIFO is drained.
    pub fn inject_interrupt(&mut self, line: u8) -> Result<(), DoubleFault> {
        if line != IRQ_KBD {
            self.pending_irq &= !(1u64 << line);
        }
        let pc = self.cpu.pc;
        self.enter_vector(line, pc).map_err(|e| self.double_fault(e))
    }

    /// Delivers a fault reported by [`Machine::step`] the way hardware would.
    pub fn raise(&mut self, f: Fault) -> Result<(), DoubleFault> {
        if f.is_trap() {
            self.cpu.pc = self.cpu.pc.wrapping_add(1);
            self.retire();
        }
        self.inject_exception(f.vector, f.err, f.far)
    }

    fn retire(&mut self) {
        self.cpu.retired += 1;
        let d = self.dev.timer_divisor;
        if d != 0 && self.cpu.retired.is_multiple_of(d as u64) {
            self.raise_irq(IRQ_TIMER);
        }
    }

    /// Advances pc past an instruction emulated outside the guest and counts
    /// it as retired.
    pub fn skip_instruction(&mut self, len: u32) {
        self.cpu.pc = self.cpu.pc.wrapping_add(len);
        self.retire();
    }

    /// Marks the machine halted. `HLT` is not counted as retired.
    pub fn halt(&mut self) {
        self.cpu.halted = true;
    }

    // ---- address translation ----

    /// Translation through the guest's own page tables only.
    pub fn translate(&self, va: u32, access: Access, as_user: bool) -> Result<u32, PageFault> {
        if !self.cpu.paging() {
            return Ok(va);
        }
        mmu::walk(self, self.cpu.ptbr(), va, access, as_user).map(|w| w.pa)
    }

    /// Guest translation followed by the host shadow check; this is what
    /// instruction fetch and `LD`/`ST` use.
    pub fn translate_effective(&self, va: u32, access: Access, as_user: bool) -> Result<u32, Fault> {
        let pa = self.translate(va, access, as_user).map_err(|pf| pf.fault())?;
        if let Some(s) = self.shadow.get(&(pa / PAGE_SIZE)) {
            let blocked = match s {
                Shadow::NoAccess => true,
                Shadow::ReadOnly => access == Access::Write,
            };
            if blocked {
                return Err(PageFault { va, code: mmu::err_code(true, access, as_user) }.fault());
            }
        }
        if (pa as usize) >= self.mem.len() {
            return Err(Fault::gp(GP_BUS));
        }
        Ok(pa)
    }

    fn read_virt(&self, va: u32, len: u32, access: Access) -> Result<Vec<u8>, Fault> {
        let user = self.cpu.user();
        let mut out = Vec::with_capacity(len as usize);
        let mut i = 0;
        while i < len {
            let a = va.wrapping_add(i);
            let pa = self.translate_effective(a, access, user)?;
            let chunk = (PAGE_SIZE - a % PAGE_SIZE).min(len - i);
            let chunk = chunk.min(self.mem.len() as u32 - pa);
            for k in 0..chunk {
                out.push(self.guest_byte(pa + k));
            }
            i += chunk;
        }
        Ok(out)
    }

    fn plan_write(&self, va: u32, data: &[u8], out: &mut Vec<(u32, u8)>) -> Result<(), Fault> {
        let user = self.cpu.user();
        let mut pa = 0;
        for (i, b) in data.iter().enumerate() {
            let a = va.wrapping_add(i as u32);
            if i == 0 || a.is_multiple_of(PAGE_SIZE) {
                pa = self.translate_effective(a, Access::Write, user)?;
            } else {
                pa += 1;
                if pa as usize >= self.mem.len() {
                    return Err(Fault::gp(GP_BUS));
                }
            }
            out.push((pa, *b));
        }
        Ok(())
    }

    /// Fetches and decodes the instruction at pc.
    pub fn fetch(&self) -> Result<(Instruction, usize), Fault> {
        let pc = self.cpu.pc;
        let first = self.read_virt(pc, 1, Access::Execute)?;
        let len = match crate::isa::Opcode::from_byte(first[0]) {
            Some(op) => op.len(),
            None => return Err(Fault::gp(GP_INVALID_OPCODE)),
        };
        let bytes = if len == 1 { first } else { self.read_virt(pc, len as u32, Access::Execute)? };
        decode(&bytes, 0).map_err(|_| Fault::gp(GP_INVALID_OPCODE))
    }

    /// Data accesses `instr` would perform from the current state.
    pub fn data_accesses(&self, instr: &Instruction) -> Vec<MemAccess> {
        let c = &self.cpu;
        let sp = c.reg(Reg::SP);
        let at = |va: u32, access| vec![MemAccess { va, len: 4, access }];
        match *instr {
            Instruction::Ld { base, offset, .. } => {
                at(c.reg(base).wrapping_add(offset as i32 as u32), Access::Read)
            }
            Instruction::St { base, offset, .. } => {
                at(c.reg(base).wrapping_add(offset as i32 as u32), Access::Write)
            }
            Instruction::Push { .. } | Instruction::Call { .. } => at(sp.wrapping_sub(4), Access::Write),
            Instruction::Pop { .. } | Instruction::Ret => at(sp, Access::Read),
            _ => Vec::new(),
        }
    }

    // ---- execution ----

    /// One instruction boundary: drains input, delivers a pending enabled
    /// interrupt if there is one, otherwise executes one instruction.
    pub fn step(&mut self) -> StepOutcome {
        if self.cpu.halted {
            return StepOutcome::Halted;
        }
        self.drain_input();
        if let Some(line) = self.interrupt_deliverable() {
            return match self.inject_interrupt(line) {
                Ok(()) => StepOutcome::Interrupted(line),
                Err(_) => StepOutcome::Halted,
            };
        }
        self.execute()
    }

    /// Executes the instruction at pc with no interrupt check. On a fault
    /// nothing is modified.
    pub fn execute(&mut self) -> StepOutcome {
        if self.cpu.halted {
            return StepOutcome::Halted;
        }
        let (instr, len) = match self.fetch() {
            Ok(x) => x,
            Err(f) => return StepOutcome::Fault(f),
        };
        self.execute_decoded(instr, len)
    }

    /// Executes an instruction already fetched from pc by [`Machine::fetch`].
    pub fn execute_decoded(&mut self, instr: Instruction, len: usize) -> StepOutcome {
        if instr.is_privileged() && self.cpu.user() {
            return StepOutcome::Fault(Fault::gp(GP_PRIVILEGE));
        }
        match instr {
            Instruction::Hlt => {
                self.halt();
                return StepOutcome::Halted;
            }
            Instruction::Brk => return StepOutcome::Fault(Fault { vector: VEC_BRK, err: 0, far: 0 }),
            Instruction::Syscall => {
                return StepOutcome::Fault(Fault { vector: VEC_SYSCALL, err: 0, far: 0 })
            }
            _ => {}
        }
        let fx = match self.plan(&instr, len) {
            Ok(fx) => fx,
            Err(f) => return StepOutcome::Fault(f),
        };
        for (pa, b) in fx.writes {
            self.set_guest_byte(pa, b);
        }
        self.apply_registers(&instr, len);
        self.cpu.pc = fx.next_pc;
        self.retire();
        StepOutcome::Retired
    }

    /// Computes next pc and memory writes, validating every access.
    fn plan(&self, instr: &Instruction, len: usize) -> Result<Effects, Fault> {
        let c = &self.cpu;
        let fall = c.pc.wrapping_add(len as u32);
        let mut writes = Vec::new();
        let next_pc = match *instr {
            Instruction::St { base, rs, offset } => {
                let va = c.reg(base).wrapping_add(offset as i32 as u32);
                self.plan_write(va, &c.reg(rs).to_le_bytes(), &mut writes)?;
                fall
            }
            Instruction::Ld { base, offset, .. } => {
                self.read_virt(c.reg(base).wrapping_add(offset as i32 as u32), 4, Access::Read)?;
                fall
            }
            Instruction::Push { rs } => {
                self.plan_write(c.reg(Reg::SP).wrapping_sub(4), &c.reg(rs).to_le_bytes(), &mut writes)?;
                fall
            }
            Instruction::Pop { .. } => {
                self.read_virt(c.reg(Reg::SP), 4, Access::Read)?;
                fall
            }
            Instruction::Call { target } => {
                self.plan_write(c.reg(Reg::SP).wrapping_sub(4), &fall.to_le_bytes(), &mut writes)?;
                target
            }
            Instruction::Ret => {
                let b = self.read_virt(c.reg(Reg::SP), 4, Access::Read)?;
                u32::from_le_bytes([b[0], b[1], b[2], b[3]])
            }
            Instruction::Jump { cond, target } => {
                let taken = match cond {
                    JumpCond::Always => true,
                    JumpCond::Zero => c.z,
                    JumpCond::NotZero => !c.z,
                };
                if taken {
                    target
                } else {
                    fall
                }
            }
            Instruction::Iret => c.cr(ControlReg::Epc),
            _ => fall,
        };
        Ok(Effects { next_pc, writes })
    }

    /// Register-side effects. Memory reads here were already validated by `plan`.
    fn apply_registers(&mut self, instr: &Instruction, _len: usize) {
        let load = |m: &Machine, va: u32| {
            let b = m.read_virt(va, 4, Access::Read).expect("validated by plan");
            u32::from_le_bytes([b[0], b[1], b[2], b[3]])
        };
        match *instr {
            Instruction::Movi { rd, imm } => self.cpu.set_reg(rd, imm),
            Instruction::Mov { rd, rs } => {
                let v = self.cpu.reg(rs);
                self.cpu.set_reg(rd, v)
            }
            Instruction::Ld { rd, base, offset } => {
                let v = load(self, self.cpu.reg(base).wrapping_add(offset as i32 as u32));
                self.cpu.set_reg(rd, v);
            }
            Instruction::Alu { op, rd, rs } => {
                let (a, b) = (self.cpu.reg(rd), self.cpu.reg(rs));
                let (v, flags) = match op {
                    AluOp::Add => (a.wrapping_add(b), true),
                    AluOp::Sub | AluOp::Cmp => (a.wrapping_sub(b), true),
                    AluOp::And => (a & b, false),
                    AluOp::Or => (a | b, false),
                    AluOp::Xor => (a ^ b, false),
                };
                if flags {
                    self.set_zn(v);
                }
                if op != AluOp::Cmp {
                    self.cpu.set_reg(rd, v);
                }
            }
            Instruction::Addi { rd, imm } => {
                let v = self.cpu.reg(rd).wrapping_add(imm as i32 as u32);
                self.set_zn(v);
                self.cpu.set_reg(rd, v);
            }
            Instruction::Push { .. } | Instruction::Call { .. } => {
                let sp = self.cpu.reg(Reg::SP).wrapping_sub(4);
                self.cpu.set_reg(Reg::SP, sp);
            }
            Instruction::Pop { rd } => {
                let sp = self.cpu.reg(Reg::SP);
                let v = load(self, sp);
                self.cpu.set_reg(Reg::SP, sp.wrapping_add(4));
                self.cpu.set_reg(rd, v);
            }
            Instruction::Ret => {
                let sp = self.cpu.reg(Reg::SP);
                self.cpu.set_reg(Reg::SP, sp.wrapping_add(4));
            }
            Instruction::In { rd, port } => {
                let v = self.port_in(port);
                self.cpu.set_reg(rd, v);
            }
            Instruction::Out { port, rs } => {
                let v = self.cpu.reg(rs);
                self.port_out(port, v);
            }
            Instruction::Iret => {
                let f = self.cpu.cr(ControlReg::Eflags);
                self.cpu.set_flags(f);
                self.cpu.mode = if self.cpu.cr(ControlReg::Emode) & 1 != 0 { Mode::User } else { Mode::Kernel };
            }
            Instruction::Movcr { cr, rs } => {
                let v = self.cpu.reg(rs);
                self.cpu.cr[cr as usize] = v;
            }
            Instruction::Movrc { rd, cr } => {
                let v = self.cpu.cr(cr);
                self.cpu.set_reg(rd, v);
            }
            Instruction::Sti => self.cpu.ie = true,
            Instruction::Cli => self.cpu.ie = false,
            Instruction::Nop
            | Instruction::St { .. }
            | Instruction::Jump { .. }
            | Instruction::Hlt
            | Instruction::Syscall
            | Instruction::Brk => {}
        }
    }

    fn set_zn(&mut self, v: u32) {
        self.cpu.z = v == 0;
        self.cpu.n = (v as i32) < 0;
    }

    /// Native execution: steps and delivers faults until HLT or until
    /// `limit` instructions have retired.
    pub fn run(&mut self, limit: u64) -> StepOutcome {
        loop {
            if self.cpu.retired >= limit && !self.cpu.halted {
                return StepOutcome::Retired;
            }
            match self.step() {
                StepOutcome::Halted => return StepOutcome::Halted,
                StepOutcome::Fault(f)
                    if self.raise(f).is_err() => {
                        return StepOutcome::Halted;
                    }
                _ => {}
            }
        }
    }

    /// SHA-256 over architectural state, RAM, device state and the debug log.
    /// Host-only bookkeeping (shadow map, input schedule) is excluded.
    pub fn digest(&self) -> [u8; 32] {
        self.digest_with(&self.mem, &self.dev.framebuffer)
    }

    /// Digest as if RAM and the framebuffer held the given contents.
    pub fn digest_with(&self, ram: &[u8], fb: &[u8]) -> [u8; 32] {
        let mut h = Sha256::new();
        let c = &self.cpu;
        for r in c.regs {
            h.update(r.to_le_bytes());
        }
        h.update(c.pc.to_le_bytes());
        h.update([c.flags() as u8, (c.mode == Mode::User) as u8, c.halted as u8]);
        for r in c.cr {
            h.update(r.to_le_bytes());
        }
        h.update(c.retired.to_le_bytes());
        h.update(self.pending_irq.to_le_bytes());
        h.update(self.dev.timer_divisor.to_le_bytes());
        h.update((self.dev.kbd_fifo.len() as u32).to_le_bytes());
        h.update(self.dev.kbd_fifo.iter().copied().collect::<Vec<u8>>());
        h.update((self.dev.debug_log.len() as u32).to_le_bytes());
        h.update(&self.dev.debug_log);
        h.update(fb);
        h.update(ram);
        h.finalize().into()
    }
}

pub fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests;
