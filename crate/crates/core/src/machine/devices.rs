use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

pub const PORT_TIMER: u8 = 0x40;
pub const PORT_KBD_DATA: u8 = 0x60;
pub const PORT_KBD_STATUS: u8 = 0x64;
pub const PORT_DEBUG: u8 = 0xE9;

pub const FB_BASE: u32 = 0xB8000;
pub const FB_COLS: usize = 80;
pub const FB_ROWS: usize = 25;
pub const FB_SIZE: usize = FB_COLS * FB_ROWS * 2;

pub const DEFAULT_TIMER_DIVISOR: u32 = 10_000;

/// Shared queue for keys arriving from outside the emulation loop.
pub type LiveKeys = Arc<Mutex<VecDeque<u8>>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Devices {
    pub timer_divisor: u32,
    pub kbd_fifo: VecDeque<u8>,
    pub framebuffer: Vec<u8>,
    pub debug_log: Vec<u8>,
}

impl Default for Devices {
    fn default() -> Self {
        Devices {
            timer_divisor: DEFAULT_TIMER_DIVISOR,
            kbd_fifo: VecDeque::new(),
            framebuffer: vec![0; FB_SIZE],
            debug_log: Vec::new(),
        }
    }
}

impl Devices {
    pub fn fb_contains(pa: u32) -> bool {
        (FB_BASE..FB_BASE + FB_SIZE as u32).contains(&pa)
    }

    /// Character and attribute at a cell.
    pub fn cell(&self, row: usize, col: usize) -> (u8, u8) {
        let i = (row * FB_COLS + col) * 2;
        (self.framebuffer[i], self.framebuffer[i + 1])
    }

    /// Framebuffer rendered as 25 text lines, non-printables as spaces.
    pub fn screen_text(&self) -> Vec<String> {
        (0..FB_ROWS)
            .map(|r| {
                (0..FB_COLS)
                    .map(|c| {
                        let ch = self.cell(r, c).0;
                        if (0x20..0x7F).contains(&ch) {
                            ch as char
                        } else {
                            ' '
                        }
                    })
                    .collect::<String>()
                    .trim_end()
                    .to_string()
            })
            .collect()
    }
}

/// Scancodes scheduled to arrive when the retired count reaches a value.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InputSchedule {
    entries: Vec<(u64, u8)>,
    next: usize,
}

impl InputSchedule {
    pub fn new(mut entries: Vec<(u64, u8)>) -> Self {
        entries.sort_by_key(|e| e.0);
        InputSchedule { entries, next: 0 }
    }

    pub fn push(&mut self, at: u64, code: u8) {
        let pos = self.entries[self.next..].partition_point(|e| e.0 <= at) + self.next;
        self.entries.insert(pos, (at, code));
    }

    pub fn due(&mut self, retired: u64) -> impl Iterator<Item = u8> + '_ {
        let start = self.next;
        while self.next < self.entries.len() && self.entries[self.next].0 <= retired {
            self.next += 1;
        }
        self.entries[start..self.next].iter().map(|e| e.1)
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - self.next
    }

    pub fn next_at(&self) -> Option<u64> {
        self.entries.get(self.next).map(|e| e.0)
    }
}
