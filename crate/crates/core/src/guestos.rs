//! Guest fixtures: a toy kernel and small programs, assembled on demand.
//!
//! Physical layout shared by the fixtures:
//!
//! | address   | contents                                   |
//! |-----------|--------------------------------------------|
//! | `0x0100`  | reset entry, jumps to `kmain`              |
//! | `0x0400`  | vector table                               |
//! | `0x0500`  | kernel code                                |
//! | `0x0F00`  | kernel info block (two_procs)              |
//! | `0x1000`  | kernel page directory                      |
//! | `0x2000`  | identity table for the low 4 MiB           |
//! | `0x3000`  | process descriptors / extra page table     |
//! | `0x6000`  | kernel data                                |
//! | `0x8000`  | top of the kernel stack                    |
//! | `0x10000` | per-process tables, code and stacks        |
//!
//! Functions follow `PUSH r6; MOV r6,r7` / `MOV r7,r6; POP r6; RET` so the
//! r6 chain is walkable. Interrupt handlers may clobber r5 only.

use std::fmt::Write as _;

use thiserror::Error;

use crate::isa::{assemble, AsmError, AssembledImage};
use crate::machine::{InputSchedule, Machine, DEFAULT_MEM_SIZE};
use crate::osdep::SymbolTable;

pub const FIXTURES: [&str; 8] =
    ["boot_min", "counter_loop", "call_tree", "recursion", "two_procs", "kbd_echo", "pf_demo", "map_reserved"];

/// Where counter_loop keeps its counter.
pub const COUNTER_ADDR: u32 = 0x6000;
/// User virtual address both two_procs processes run at.
pub const USER_BASE: u32 = 0x0040_0000;
/// Page directories of the two_procs address spaces.
pub const KERNEL_DIR: u32 = 0x1000;
pub const PROC_A_DIR: u32 = 0x10000;
pub const PROC_B_DIR: u32 = 0x14000;
/// Reserved frame map_reserved maps at [`MAP_RESERVED_VA`].
pub const MAP_RESERVED_FRAME: u32 = 0xFF8;
pub const MAP_RESERVED_VA: u32 = 0x0080_0000;
/// Page-table slot map_reserved writes.
pub const MAP_RESERVED_SLOT: u32 = 0x3000;
/// Page pf_demo touches before mapping it.
pub const PF_DEMO_VA: u32 = 0x0080_0000;

/// Key schedule kbd_echo is run with by default.
pub const KBD_ECHO_KEYS: [(u64, u8); 4] = [(200, b'h'), (900, b'i'), (1600, b'!'), (2400, b'\n')];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GuestOsError {
    #[error("unknown fixture: {0}")]
    UnknownFixture(String),
    #[error("fixture {name} failed to assemble: {err}")]
    Assembly { name: String, err: AsmError },
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub source: String,
    pub image: AssembledImage,
    pub symbols: SymbolTable,
    /// Scheduled keys the fixture expects, if any.
    pub keys: Vec<(u64, u8)>,
}

impl Fixture {
    pub fn symbols_file(&self) -> String {
        self.image.symbols_file()
    }

    /// A fresh machine with the image loaded and pc at its entry.
    pub fn machine(&self) -> Machine {
        self.machine_with(DEFAULT_MEM_SIZE)
    }

    pub fn machine_with(&self, mem_size: usize) -> Machine {
        let mut m = Machine::new(mem_size);
        m.load_image(&self.image).expect("fixture fits in memory");
        m.cpu.pc = self.image.entry;
        m.input = InputSchedule::new(self.keys.clone());
        m
    }

    pub fn symbol(&self, name: &str) -> u32 {
        self.image.symbol(name).unwrap_or_else(|| panic!("fixture {} has no symbol {name}", self.name))
    }
}

pub fn list_fixtures() -> &'static [&'static str] {
    &FIXTURES
}

pub fn fixture_source(name: &str) -> Result<String, GuestOsError> {
    Ok(match name {
        "boot_min" => BOOT_MIN.to_string(),
        "counter_loop" => single_task(COUNTER_LOOP, &[]),
        "call_tree" => single_task(CALL_TREE, &[]),
        "recursion" => single_task(RECURSION, &[]),
        "kbd_echo" => single_task(KBD_ECHO, &[(33, "echo_irq")]),
        "pf_demo" => paged_task(PF_DEMO, &[(14, "pf_handler")]),
        "map_reserved" => paged_task(MAP_RESERVED, &[]),
        "two_procs" => two_procs(),
        other => return Err(GuestOsError::UnknownFixture(other.to_string())),
    })
}

pub fn build_fixture(name: &str) -> Result<Fixture, GuestOsError> {
    let source = fixture_source(name)?;
    let image = assemble(&source).map_err(|err| GuestOsError::Assembly { name: name.to_string(), err })?;
    let symbols = SymbolTable::from_image(&image);
    let keys = if name == "kbd_echo" { KBD_ECHO_KEYS.to_vec() } else { Vec::new() };
    Ok(Fixture { name: name.to_string(), source, image, symbols, keys })
}

const BOOT_MIN: &str = "
.org 0x100
.global kmain
kmain:
    MOVI r0, 1
    OUT 0xE9, r0
    HLT
";

/// Vector table with a keyboard handler plus `vectors`; the timer is
/// switched off.
fn single_task(body: &str, vectors: &[(usize, &str)]) -> String {
    let mut ivt = vec!["0".to_string(); 64];
    ivt[33] = "kbd_irq".into();
    for (v, label) in vectors {
        ivt[*v] = label.to_string();
    }
    let ivt = ivt.chunks(8).map(|c| format!("    .word {}\n", c.join(", "))).collect::<String>();
    format!(
        "
.org 0x100
_start:
    JMP kmain

.org 0x400
ivt:
{ivt}
.org 0x500
.global kmain, kbd_irq
kbd_irq:
    IN r5, 0x60
    IRET

kmain:
    MOVI r7, 0x8000
    MOVI r6, 0
    MOVI r0, 0
    OUT 0x40, r0
{body}"
    )
}

/// Like [`single_task`] with the low 4 MiB identity-mapped and paging on.
fn paged_task(body: &str, vectors: &[(usize, &str)]) -> String {
    let mut s = single_task(&format!(
        "    MOVI r0, 0x1000
    MOVCR PTBR, r0
    MOVI r0, 1
    MOVCR PGEN, r0
{body}"
    ), vectors);
    s.push_str(&directory(0x1000, &[(0, 0x2003)]));
    s.push_str(&identity_table(0x2000));
    s
}

const COUNTER_LOOP: &str = "
    STI
    MOVI r1, 0x6000
    MOVI r3, 7
.global outer
outer:
    LD r2, [r1+0]
    ADDI r2, 1
    ST [r1+0], r2
    LD r4, [r1+8]
    ST [r1+12], r4
    MOVI r4, 600
delay:
    ADDI r4, -1
    JNZ delay
    ADDI r3, -1
    JNZ outer
    LD r0, [r1+0]
    OUT 0xE9, r0
    CLI
    HLT

.org 0x6000
.global counter
counter:
    .word 0, 0, 0x5A5A, 0
";

const CALL_TREE: &str = "
    STI
    MOVI r0, 0
    MOVI r3, 5
loop:
    CALL f1
    ADDI r3, -1
    JNZ loop
    OUT 0xE9, r0
    CLI
    HLT

.global f1, f2
f1:
    PUSH r6
    MOV r6, r7
    CALL f2
    ADDI r0, 1
    MOV r7, r6
    POP r6
    RET

f2:
    PUSH r6
    MOV r6, r7
    ADDI r0, 2
    MOV r7, r6
    POP r6
    RET
";

const RECURSION: &str = "
    STI
    MOVI r1, 3
    CALL fact
    OUT 0xE9, r0
    CLI
    HLT

; r0 = r1!, r1 >= 1
.global fact
fact:
    PUSH r6
    MOV r6, r7
    MOVI r2, 1
    CMP r1, r2
    JNZ fact_rec
    MOVI r0, 1
    JMP fact_done
fact_rec:
    PUSH r1
    ADDI r1, -1
    CALL fact
    POP r1
    MOV r2, r0
    MOV r4, r1
    MOVI r0, 0
fact_mul:
    ADD r0, r2
    ADDI r4, -1
    JNZ fact_mul
fact_done:
    MOV r7, r6
    POP r6
    RET
";

const KBD_ECHO: &str = "
    STI
    MOVI r3, 3000
spin:
    ADDI r3, -1
    JNZ spin
    CLI
    HLT

.global echo_irq
echo_irq:
    IN r5, 0x60
    ADDI r5, 0
    JZ echo_done
    PUSH r0
    PUSH r1
    MOVI r0, cursor
    LD r1, [r0+0]
    PUSH r1
    MOVI r0, 0xB8000
    ADD r1, r0
    MOVI r0, 0x0700
    OR r0, r5
    ST [r1+0], r0
    POP r1
    ADDI r1, 2
    MOVI r0, cursor
    ST [r0+0], r1
    POP r1
    POP r0
echo_done:
    IRET

.org 0x6000
cursor:
    .word 0
";

const PF_DEMO: &str = "
    MOVI r0, 0x1000
    MOVI r1, 0x3003
    ST [r0+8], r1
    MOVI r3, 0x00800000
    MOVI r4, 0x77
    ST [r3+0], r4
    LD r2, [r3+0]
    OUT 0xE9, r2
    MOVI r0, 0x0F00
    LD r2, [r0+0]
    OUT 0xE9, r2
    HLT

; Maps the faulting page to frame 0x30000 and retries.
.global pf_handler
pf_handler:
    MOVRC r5, FAR
    PUSH r0
    PUSH r1
    MOVI r0, 0x3000
    MOVI r1, 0x30003
    ST [r0+0], r1
    MOVI r0, 0x0F00
    LD r1, [r0+0]
    ADDI r1, 1
    ST [r0+0], r1
    POP r1
    POP r0
    IRET

.org 0x0F00
faults:
    .word 0
";

const MAP_RESERVED: &str = "
    MOVI r0, 0x1000
    MOVI r1, 0x3003
    ST [r0+8], r1
    MOVI r0, 0x3000
    MOVI r1, 0xFF8003
    ST [r0+0], r1
    LD r2, [r0+0]
    CMP r2, r1
    MOVI r4, 1
    JZ pte_ok
    MOVI r4, 0
pte_ok:
    OUT 0xE9, r4
    MOVI r0, 0x00800000
    MOVI r3, 0x12345678
    ST [r0+0], r3
    LD r2, [r0+0]
    CMP r2, r3
    MOVI r4, 1
    JZ data_ok
    MOVI r4, 0
data_ok:
    OUT 0xE9, r4
    HLT
";

fn directory(at: u32, entries: &[(u32, u32)]) -> String {
    let mut words = vec![0u32; 1024];
    for (i, e) in entries {
        words[*i as usize] = *e;
    }
    table_words(at, &words)
}

fn identity_table(at: u32) -> String {
    let words: Vec<u32> = (0..1024).map(|i| (i << 12) | 3).collect();
    table_words(at, &words)
}

fn table_words(at: u32, words: &[u32]) -> String {
    let mut s = format!("\n.org {at:#x}\n");
    let last_used = words.iter().rposition(|w| *w != 0).map_or(0, |i| i + 1);
    for chunk in words[..last_used].chunks(8) {
        let list: Vec<String> = chunk.iter().map(|w| format!("{w:#x}")).collect();
        let _ = writeln!(s, "    .word {}", list.join(", "));
    }
    if last_used < words.len() {
        let _ = writeln!(s, "    .space {}", (words.len() - last_used) * 4);
    }
    s
}

/// Save-area offsets in a process descriptor.
const SAVE_R0: u32 = 40;
const SAVE_SP: u32 = SAVE_R0 + 7 * 4;
const SAVE_EPC: u32 = SAVE_R0 + 8 * 4;
const SAVE_EFLAGS: u32 = SAVE_EPC + 4;
const SAVE_EMODE: u32 = SAVE_EPC + 8;

const DESC_KERNEL: u32 = 0x3000;
const DESC_A: u32 = 0x3060;
const DESC_B: u32 = 0x30C0;

fn descriptor(at: u32, pid: u32, name: &str, ptbr: u32, state: u32, next: u32, user_entry: Option<u32>) -> String {
    let mut name_bytes = [0u8; 16];
    name_bytes[..name.len()].copy_from_slice(name.as_bytes());
    let name_words: Vec<String> = name_bytes
        .chunks(4)
        .map(|c| format!("{:#x}", u32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let (stack, heap) = if user_entry.is_some() { (USER_BASE + 0x1000, USER_BASE + 0x2000) } else { (0x7000, 0x6000) };
    let mut save = [0u32; 14];
    if let Some(entry) = user_entry {
        save[7] = USER_BASE + 0x2000;
        save[8] = entry;
        save[9] = 4;
        save[10] = 1;
    }
    let save: Vec<String> = save.iter().map(|w| format!("{w:#x}")).collect();
    format!(
        "
.org {at:#x}
    .word {pid}
    .word {}
    .word {ptbr:#x}, {state}, {stack:#x}, {heap:#x}, {next:#x}
    .word {}
",
        name_words.join(", "),
        save.join(", ")
    )
}

fn two_procs() -> String {
    let mut s = format!(
        "
.org 0x100
_start:
    JMP kmain

.org 0x400
ivt:
    .space 32
    .word syscall_gate
    .space 16
    .word fault_handler
    .word fault_handler
    .space 68
    .word timer_irq
    .word kbd_irq
    .space 120

.org 0x500
.global kmain, syscall_gate, timer_irq, kbd_irq, fault_handler
kmain:
    MOVI r7, 0x8000
    MOVI r6, 0
    MOVI r0, {KERNEL_DIR:#x}
    MOVCR PTBR, r0
    MOVI r0, 1
    MOVCR PGEN, r0
    MOVI r0, 97
    OUT 0x40, r0
    STI
idle:
    MOVI r3, 2
    MOVI r1, {DESC_A:#x}
    LD r2, [r1+24]
    CMP r2, r3
    JNZ idle
    MOVI r1, {DESC_B:#x}
    LD r2, [r1+24]
    CMP r2, r3
    JNZ idle
    CLI
    HLT

kbd_irq:
    IN r5, 0x60
    IRET

; r0 number, r1 argument; result in r0.
syscall_gate:
    PUSH r2
    MOVI r2, 1
    CMP r0, r2
    JZ sys_write
    MOVI r2, 2
    CMP r0, r2
    JZ sys_getpid
    MOVI r2, 3
    CMP r0, r2
    JZ sys_yield
    MOVI r2, 4
    CMP r0, r2
    JZ sys_exit
    POP r2
    MOVI r0, 0xFFFFFFFF
    IRET
sys_write:
    POP r2
    OUT 0xE9, r1
    MOVI r0, 0
    IRET
sys_getpid:
    POP r2
    MOVI r0, 0x0F00
    LD r0, [r0+8]
    LD r0, [r0+0]
    IRET
sys_yield:
    POP r2
    MOVI r0, 0
    PUSH r0
    JMP save_ctx
sys_exit:
    POP r2
    MOVI r0, 0x0F00
    LD r0, [r0+8]
    MOVI r1, 2
    ST [r0+24], r1
    JMP pick

; User faults end the process; kernel faults stop the machine.
fault_handler:
    MOVRC r0, EMODE
    ADDI r0, 0
    JZ panic
    MOVI r0, 0x0F00
    LD r0, [r0+8]
    MOVI r1, 2
    ST [r0+24], r1
    JMP pick
panic:
    HLT

timer_irq:
    PUSH r0
save_ctx:
    MOVI r0, 0x0F00
    LD r0, [r0+8]
    ST [r0+{r1}], r1
    ST [r0+{r2}], r2
    ST [r0+{r3}], r3
    ST [r0+{r4}], r4
    ST [r0+{r5}], r5
    ST [r0+{r6}], r6
    POP r1
    ST [r0+{SAVE_R0}], r1
    ST [r0+{SAVE_SP}], r7
    MOVRC r1, EPC
    ST [r0+{SAVE_EPC}], r1
    MOVRC r1, EFLAGS
    ST [r0+{SAVE_EFLAGS}], r1
    MOVRC r1, EMODE
    ST [r0+{SAVE_EMODE}], r1
    LD r1, [r0+24]
    MOVI r2, 1
    CMP r1, r2
    JNZ pick
    MOVI r1, 0
    ST [r0+24], r1

; r0 = current descriptor; switch to the next one not done.
pick:
    MOVI r3, 2
pick_next:
    LD r0, [r0+36]
    ADDI r0, 0
    JNZ pick_check
    MOVI r1, 0x0F00
    LD r0, [r1+4]
pick_check:
    LD r1, [r0+24]
    CMP r1, r3
    JZ pick_next
    MOVI r1, 1
    ST [r0+24], r1
    MOVI r1, 0x0F00
    ST [r1+8], r0
    LD r1, [r0+20]
    MOVCR PTBR, r1
    LD r1, [r0+{SAVE_EPC}]
    MOVCR EPC, r1
    LD r1, [r0+{SAVE_EFLAGS}]
    MOVCR EFLAGS, r1
    LD r1, [r0+{SAVE_EMODE}]
    MOVCR EMODE, r1
    LD r7, [r0+{SAVE_SP}]
    LD r1, [r0+{r1}]
    LD r2, [r0+{r2}]
    LD r3, [r0+{r3}]
    LD r4, [r0+{r4}]
    LD r5, [r0+{r5}]
    LD r6, [r0+{r6}]
    LD r0, [r0+{SAVE_R0}]
    IRET

.org 0x0F00
kinfo:
    .word 0x4B534F47, {DESC_KERNEL:#x}, {DESC_KERNEL:#x}
",
        r1 = SAVE_R0 + 4,
        r2 = SAVE_R0 + 8,
        r3 = SAVE_R0 + 12,
        r4 = SAVE_R0 + 16,
        r5 = SAVE_R0 + 20,
        r6 = SAVE_R0 + 24,
    );
    let entry_a = USER_BASE;
    let entry_b = USER_BASE + 0x100;
    s.push_str(&descriptor(DESC_KERNEL, 0, "kernel", KERNEL_DIR, 1, DESC_A, None));
    s.push_str(&descriptor(DESC_A, 1, "procA", PROC_A_DIR, 0, DESC_B, Some(entry_a)));
    s.push_str(&descriptor(DESC_B, 2, "procB", PROC_B_DIR, 0, 0, Some(entry_b)));
    s.push_str(&directory(KERNEL_DIR, &[(0, 0x2003)]));
    s.push_str(&identity_table(0x2000));
    for (dir, table, code, stack) in [(PROC_A_DIR, 0x11000, 0x12000, 0x13000), (PROC_B_DIR, 0x15000, 0x16000, 0x17000)] {
        s.push_str(&directory(dir, &[(0, 0x2003), (1, table | 7)]));
        s.push_str(&directory(table, &[(0, code | 7), (1, stack | 7)]));
    }
    s.push_str(&user_program("procA_main", 'A', entry_a, 0x12000));
    s.push_str(&user_program("procB_main", 'B', entry_b, 0x16100));
    s
}

/// Prints `letter` three times with a busy pause between, asks for its pid,
/// yields once, then ends with a privileged instruction.
fn user_program(label: &str, letter: char, va: u32, pa: u32) -> String {
    format!(
        "
.org {va:#x}, {pa:#x}
.global {label}
{label}:
    MOVI r3, 3
{label}_loop:
    MOVI r0, 1
    MOVI r1, '{letter}'
    SYSCALL
    MOVI r4, 40
{label}_pause:
    ADDI r4, -1
    JNZ {label}_pause
    ADDI r3, -1
    JNZ {label}_loop
    MOVI r0, 2
    SYSCALL
    MOVI r0, 3
    SYSCALL
    HLT
"
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::StepOutcome;

    #[test]
    fn every_fixture_builds() {
        for name in list_fixtures() {
            build_fixture(name).unwrap_or_else(|e| panic!("{e}"));
        }
        assert!(matches!(build_fixture("nope"), Err(GuestOsError::UnknownFixture(_))));
    }

    #[test]
    fn boot_min_logs_one() {
        let f = build_fixture("boot_min").unwrap();
        let mut m = f.machine();
        assert_eq!(m.run(1000), StepOutcome::Halted);
        assert_eq!(m.dev.debug_log, [1]);
        assert_eq!(m.cpu.retired, 2);
    }
}
