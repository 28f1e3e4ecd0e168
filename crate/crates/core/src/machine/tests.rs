use super::*;
use crate::isa::assemble;
use proptest::prelude::*;

fn boot(src: &str) -> Machine {
    let mut m = Machine::default();
    m.load_image(&assemble(src).unwrap()).unwrap();
    m
}

/// Identity-maps the first `pages` pages through a directory at 0x1000 and a
/// table at 0x2000, with the given flags.
fn identity_paging(m: &mut Machine, pages: u32, flags: u32) {
    m.write_phys_u32(0x1000, 0x2000 | pte::PRESENT | pte::WRITABLE | pte::USER).unwrap();
    for p in 0..pages {
        m.write_phys_u32(0x2000 + p * 4, (p << 12) | flags).unwrap();
    }
    m.cpu.cr[ControlReg::Ptbr as usize] = 0x1000;
    m.cpu.cr[ControlReg::Pgen as usize] = 1;
}

#[test]
fn movi_retires() {
    let mut m = boot(".org 0x100\nMOVI r1, 5\n");
    assert_eq!(m.step(), StepOutcome::Retired);
    assert_eq!(m.cpu.regs[1], 5);
    assert_eq!(m.cpu.pc, 0x106);
    assert_eq!(m.cpu.retired, 1);
}

#[test]
fn store_to_non_present_page_faults_without_side_effects() {
    let mut m = boot(".org 0x100\nMOVI r1, 0x5000\nST [r1], r2\n");
    identity_paging(&mut m, 4, pte::PRESENT | pte::WRITABLE);
    m.step();
    let before = m.digest();
    let out = m.step();
    assert_eq!(out, StepOutcome::Fault(Fault { vector: 14, err: 0b010, far: 0x5000 }));
    assert_eq!(m.cpu.pc, 0x106);
    assert_eq!(m.digest(), before);
}

#[test]
fn privileged_in_user_mode() {
    let mut m = boot(".org 0x100\nHLT\n");
    m.cpu.mode = Mode::User;
    assert_eq!(m.step(), StepOutcome::Fault(Fault { vector: 13, err: 0, far: 0 }));
    assert!(!m.cpu.halted);
}

#[test]
fn invalid_opcode_is_gp() {
    let mut m = boot(".org 0x100\nDB 0xFE\n");
    assert_eq!(m.step(), StepOutcome::Fault(Fault::gp(GP_INVALID_OPCODE)));
}

#[test]
fn halt_does_not_retire() {
    let mut m = boot(".org 0x100\nNOP\nHLT\n");
    assert_eq!(m.run(u64::MAX), StepOutcome::Halted);
    assert_eq!(m.cpu.retired, 1);
    assert_eq!(m.cpu.pc, 0x101);
}

#[test]
fn translate_examples() {
    let mut m = Machine::default();
    m.cpu.cr[ControlReg::Ptbr as usize] = 0x1000;
    m.cpu.cr[ControlReg::Pgen as usize] = 1;
    m.write_phys_u32(0x1004, 0x2003).unwrap();
    m.write_phys_u32(0x2008, 0x5003).unwrap();
    assert_eq!(m.translate(0x0040_2004, Access::Read, false), Ok(0x5004));
    m.write_phys_u32(0x2008, 0x5001).unwrap();
    assert_eq!(
        m.translate(0x0040_2004, Access::Write, false),
        Err(PageFault { va: 0x0040_2004, code: 0b011 })
    );
    let e = m.translate(0x0080_0000, Access::Read, false).unwrap_err();
    assert_eq!(e.code & 1, 0);
}

#[test]
fn pte_ignored_bits_do_not_affect_translation() {
    let mut m = Machine::default();
    m.cpu.cr[ControlReg::Ptbr as usize] = 0x1000;
    m.cpu.cr[ControlReg::Pgen as usize] = 1;
    m.write_phys_u32(0x1000, 0x2FFB).unwrap();
    m.write_phys_u32(0x2000, 0x7FF3).unwrap();
    assert_eq!(m.translate(0x123, Access::Write, false), Ok(0x7123));
}

#[test]
fn user_access_to_supervisor_page() {
    let mut m = Machine::default();
    identity_paging(&mut m, 8, pte::PRESENT | pte::WRITABLE);
    assert_eq!(m.translate(0x3000, Access::Read, true), Err(PageFault { va: 0x3000, code: 0b101 }));
    assert_eq!(m.translate(0x3000, Access::Execute, true).unwrap_err().code, 0b1101);
}

#[test]
fn physical_memory_and_framebuffer() {
    let mut m = Machine::default();
    m.write_phys(FB_BASE, &[b'A', 0x07]).unwrap();
    assert_eq!(m.read_phys(FB_BASE, 2).unwrap(), [0x41, 0x07]);
    assert_eq!(m.dev.cell(0, 0), (b'A', 0x07));
    assert_eq!(m.read_phys(0, 4).unwrap(), [0, 0, 0, 0]);
    assert_eq!(m.read_phys(0x100_0000, 1), Err(PhysicalOutOfBounds { pa: 0x100_0000, len: 1 }));
}

const IVT_SRC: &str = "
.org 0x100
    NOP
    NOP
    NOP
.org 0x400
    .space 128
    .word h32, h33
.org 0x600
h32: NOP
h33: NOP
";

#[test]
fn irq_masking_and_delivery() {
    let mut m = boot(IVT_SRC);
    m.raise_irq(IRQ_KBD);
    assert_eq!(m.step(), StepOutcome::Retired);
    m.cpu.ie = true;
    assert_eq!(m.step(), StepOutcome::Interrupted(IRQ_KBD));
    assert_eq!(m.cpu.pc, 0x601);
    assert!(!m.cpu.ie);
    assert_eq!(m.cpu.cr(ControlReg::Epc), 0x101);
    assert_eq!(m.cpu.retired, 1);
}

#[test]
fn lower_line_wins() {
    let mut m = boot(IVT_SRC);
    m.cpu.ie = true;
    m.raise_irq(IRQ_KBD);
    m.raise_irq(IRQ_TIMER);
    assert_eq!(m.step(), StepOutcome::Interrupted(IRQ_TIMER));
    assert_eq!(m.cpu.pc, 0x600);
}

#[test]
fn inject_sets_far_and_missing_handler_double_faults() {
    let mut m = boot(".org 0x100\nNOP\n.org 0x438\n.word 0x700\n");
    m.inject_exception(14, 0b010, 0x5000).unwrap();
    assert_eq!(m.cpu.pc, 0x700);
    assert_eq!(m.cpu.cr(ControlReg::Far), 0x5000);
    assert_eq!(m.cpu.cr(ControlReg::Err), 0b010);
    assert!(m.inject_exception(3, 0, 0).is_err());
    assert!(m.cpu.halted);
    assert!(m.diagnostic.is_some());
}

#[test]
fn traps_retire_and_save_next_pc() {
    let mut m = boot(".org 0x100\nSYSCALL\n.org 0x420\n.word 0x700\n");
    let StepOutcome::Fault(f) = m.step() else { panic!() };
    assert_eq!(m.cpu.retired, 0);
    m.raise(f).unwrap();
    assert_eq!(m.cpu.retired, 1);
    assert_eq!(m.cpu.cr(ControlReg::Epc), 0x101);
    assert_eq!(m.cpu.pc, 0x700);
}

#[test]
fn timer_fires_on_divisor_multiples() {
    let mut m = boot(".org 0x100\nNOP\nNOP\nNOP\nNOP\n");
    m.dev.timer_divisor = 2;
    m.step();
    assert_eq!(m.pending_irq, 0);
    m.step();
    assert_eq!(m.pending_line(), Some(IRQ_TIMER));
}

#[test]
fn keyboard_fifo_and_schedule() {
    let mut m = boot(".org 0x100\nNOP\nIN r1, 0x64\nIN r2, 0x60\nIN r3, 0x60\n");
    m.input = InputSchedule::new(vec![(1, b'b')]);
    m.step();
    assert!(m.dev.kbd_fifo.is_empty());
    m.step();
    assert_eq!(m.cpu.regs[1], 1);
    m.step();
    m.step();
    assert_eq!((m.cpu.regs[2], m.cpu.regs[3]), (0x62, 0));
    assert_eq!(m.pending_line(), None);
}

#[test]
fn iret_restores_saved_state() {
    let mut m = boot(".org 0x100\nIRET\n");
    m.cpu.cr[ControlReg::Epc as usize] = 0x4000;
    m.cpu.cr[ControlReg::Eflags as usize] = EFLAGS_IF | EFLAGS_Z;
    m.cpu.cr[ControlReg::Emode as usize] = 1;
    m.step();
    assert_eq!(m.cpu.pc, 0x4000);
    assert!(m.cpu.ie && m.cpu.z && m.cpu.user());
}

#[test]
fn digest_is_deterministic_and_sensitive() {
    let mut a = boot(".org 0x100\nMOVI r1, 5\nHLT\n");
    let b = a.clone();
    assert_eq!(a.digest(), b.digest());
    a.step();
    assert_ne!(a.digest(), b.digest());
}

#[test]
fn shadow_protection_faults_after_guest_translation() {
    let mut m = boot(".org 0x100\nMOVI r1, 0x3000\nLD r2, [r1]\nST [r1], r2\n");
    m.shadow.insert(3, Shadow::ReadOnly);
    m.step();
    assert_eq!(m.step(), StepOutcome::Retired);
    assert_eq!(m.step(), StepOutcome::Fault(Fault { vector: 14, err: 0b011, far: 0x3000 }));
    m.shadow.insert(3, Shadow::NoAccess);
    m.cpu.pc = 0x106;
    assert_eq!(m.step(), StepOutcome::Fault(Fault { vector: 14, err: 0b001, far: 0x3000 }));
    assert_eq!(m.translate(0x3000, Access::Read, false), Ok(0x3000));
}

#[test]
fn unaligned_cross_page_store_is_atomic_on_fault() {
    let mut m = boot(".org 0x100\nMOVI r1, 0x3FFE\nMOVI r2, 0x11223344\nST [r1], r2\n");
    identity_paging(&mut m, 4, pte::PRESENT | pte::WRITABLE);
    m.step();
    m.step();
    let before = m.digest();
    assert_eq!(m.step(), StepOutcome::Fault(Fault { vector: 14, err: 0b010, far: 0x4000 }));
    assert_eq!(m.digest(), before);
    identity_paging(&mut m, 5, pte::PRESENT | pte::WRITABLE);
    assert_eq!(m.step(), StepOutcome::Retired);
    assert_eq!(m.read_phys(0x3FFE, 4).unwrap(), [0x44, 0x33, 0x22, 0x11]);
}

#[test]
fn call_and_ret_use_the_stack() {
    let mut m = boot(".org 0x100\nMOVI r7, 0x8000\nCALL f\nHLT\nf: RET\n");
    m.run(u64::MAX);
    assert_eq!(m.cpu.pc, 0x10B);
    assert_eq!(m.cpu.regs[7], 0x8000);
    assert_eq!(m.read_phys_u32(0x7FFC).unwrap(), 0x10B);
}

#[test]
fn flags_from_alu() {
    let mut m = boot(".org 0x100\nMOVI r1, 1\nADDI r1, -1\nADDI r1, -1\nCMP r1, r1\n");
    m.step();
    m.step();
    assert!(m.cpu.z && !m.cpu.n);
    m.step();
    assert!(!m.cpu.z && m.cpu.n);
    m.step();
    assert!(m.cpu.z && m.cpu.regs[1] == u32::MAX);
}

fn arb_program() -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(crate::isa::tests::arb_instruction(), 1..24)
        .prop_map(|v| v.iter().flat_map(|i| crate::isa::encode(i).unwrap()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn faults_leave_state_untouched(prog in arb_program(), regs in proptest::array::uniform8(any::<u32>()), user in any::<bool>()) {
        let mut m = Machine::new(1 << 20);
        m.write_phys(0x100, &prog).unwrap();
        identity_paging(&mut m, 64, pte::PRESENT | pte::WRITABLE | pte::USER);
        m.cpu.regs = regs;
        if user { m.cpu.mode = Mode::User; }
        for _ in 0..prog.len() {
            let before = m.digest();
            let pc = m.cpu.pc;
            match m.execute() {
                StepOutcome::Fault(_) => {
                    prop_assert_eq!(m.digest(), before);
                    prop_assert_eq!(m.cpu.pc, pc);
                    break;
                }
                StepOutcome::Halted => break,
                _ => {}
            }
        }
    }

    #[test]
    fn loads_agree_with_translate(
        pages in proptest::collection::vec((1u32..64, 64u32..256, any::<u32>()), 1..16),
        off in 0u32..0xFFD,
        pick in any::<prop::sample::Index>(),
    ) {
        let mut m = Machine::new(1 << 20);
        m.write_phys_u32(0x1000, 0x2000 | pte::PRESENT | pte::WRITABLE).unwrap();
        m.write_phys_u32(0x2000, pte::PRESENT).unwrap();
        for (vp, frame, word) in &pages {
            m.write_phys_u32(0x2000 + vp * 4, (frame << 12) | pte::PRESENT | pte::WRITABLE).unwrap();
            m.write_phys_u32((frame << 12) | off, *word).unwrap();
        }
        m.cpu.cr[ControlReg::Ptbr as usize] = 0x1000;
        m.cpu.cr[ControlReg::Pgen as usize] = 1;
        let va = (pages[pick.index(pages.len())].0 << 12) | off;
        let pa = m.translate(va, Access::Read, false).unwrap();
        let ld = crate::isa::Instruction::Ld { rd: Reg(3), base: Reg(2), offset: 0 };
        m.write_phys(0x100, &crate::isa::encode(&ld).unwrap()).unwrap();
        m.cpu.regs[2] = va;
        prop_assert_eq!(m.step(), StepOutcome::Retired);
        prop_assert_eq!(m.cpu.regs[3], m.read_phys_u32(pa).unwrap());
    }
}
