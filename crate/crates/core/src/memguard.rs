//! Hides a pool of physical frames from the guest.
//!
//! Every page-table page of the active address space is write-protected at
//! the virtualization layer. When the guest installs an entry naming a
//! hidden frame, the stored entry is redirected to a substitute frame and
//! the value the guest wrote is kept in the machine's masquerade map, so
//! the guest reads back exactly what it wrote.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::machine::{pte, Machine, Shadow, PAGE_SIZE};

/// Frames at the top of RAM given to the framework by default.
pub const DEFAULT_RESERVED_FRAMES: u32 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemGuardError {
    #[error("frame {0:#x} is mapped by the active address space")]
    FrameInUse(u32),
    #[error("page directory at {0:#x} leaves physical memory")]
    MalformedDirectory(u32),
    #[error("substitute pool exhausted")]
    SubstitutePoolExhausted,
    #[error("hidden pool exhausted")]
    HiddenPoolExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Remap {
    pub guest_visible: u32,
    pub actual: u32,
}

#[derive(Debug, Clone, Default)]
pub struct MemGuard {
    reserved: BTreeSet<u32>,
    substitute_region: BTreeSet<u32>,
    free: Vec<u32>,
    subst_of: BTreeMap<u32, u32>,
    remap: BTreeMap<u32, Remap>,
    watch: BTreeSet<u32>,
    snapshot: BTreeMap<u32, Vec<u8>>,
    alloc_next: u32,
    alloc_end: u32,
}

impl MemGuard {
    /// The top `n` frames are reserved; the `n` frames below them feed
    /// substitutes.
    pub fn for_machine(m: &Machine, n: u32) -> MemGuard {
        let top = m.frame_count();
        let n = n.min(top / 4);
        let reserved: BTreeSet<u32> = (top - n..top).collect();
        let substitutes: Vec<u32> = (top - 2 * n..top - n).collect();
        MemGuard::new(reserved, substitutes)
    }

    pub fn new(reserved: BTreeSet<u32>, substitutes: Vec<u32>) -> MemGuard {
        let alloc_next = reserved.iter().next().map(|f| f * PAGE_SIZE).unwrap_or(0);
        let mut free = substitutes.clone();
        free.reverse();
        let alloc_end = contiguous_end(&reserved);
        MemGuard {
            reserved,
            substitute_region: substitutes.into_iter().collect(),
            free,
            alloc_next,
            alloc_end,
            ..MemGuard::default()
        }
    }

    pub fn is_active(&self) -> bool {
        !self.reserved.is_empty()
    }

    pub fn reserved(&self) -> &BTreeSet<u32> {
        &self.reserved
    }

    /// Frames the guest must never reach directly.
    pub fn is_hidden(&self, frame: u32) -> bool {
        self.reserved.contains(&frame) || self.substitute_region.contains(&frame)
    }

    pub fn watch_set(&self) -> &BTreeSet<u32> {
        &self.watch
    }

    pub fn remaps(&self) -> &BTreeMap<u32, Remap> {
        &self.remap
    }

    pub fn substitute_of(&self, frame: u32) -> Option<u32> {
        self.subst_of.get(&frame).copied()
    }

    /// Installs the pool. Fails if the active address space already maps a
    /// reserved frame.
    pub fn reserve(&mut self, m: &mut Machine) -> Result<(), MemGuardError> {
        if !self.is_active() {
            return Ok(());
        }
        let ptbr = m.cpu.ptbr();
        if m.cpu.paging() && ptbr != 0 {
            for (_, entry) in entries(m, ptbr)? {
                let f = pte::frame(entry);
                if self.reserved.contains(&f) {
                    return Err(MemGuardError::FrameInUse(f));
                }
            }
        }
        for f in self.reserved.iter().chain(self.substitute_region.iter()) {
            let bytes = m.read_phys(f * PAGE_SIZE, PAGE_SIZE as usize).expect("pool frame in RAM");
            self.snapshot.insert(*f, bytes);
        }
        if ptbr != 0 {
            self.on_ptbr_load(m, ptbr)?;
        }
        Ok(())
    }

    /// Bump allocation inside the reserved frames for framework data.
    pub fn alloc(&mut self, len: u32) -> Result<u32, MemGuardError> {
        let len = (len + 3) & !3;
        if self.alloc_next + len > self.alloc_end {
            return Err(MemGuardError::HiddenPoolExhausted);
        }
        let pa = self.alloc_next;
        self.alloc_next += len;
        Ok(pa)
    }

    /// Rebuilds the watch set for a new directory and substitutes any entry
    /// already naming a hidden frame.
    pub fn on_ptbr_load(&mut self, m: &mut Machine, new_ptbr: u32) -> Result<(), MemGuardError> {
        self.watch.clear();
        if !self.is_active() || new_ptbr == 0 {
            return Ok(());
        }
        let dir = new_ptbr & pte::FRAME_MASK;
        if dir as usize + PAGE_SIZE as usize > m.mem_size() {
            return Err(MemGuardError::MalformedDirectory(new_ptbr));
        }
        self.watch.insert(dir / PAGE_SIZE);
        for i in 0..1024 {
            let slot = dir + i * 4;
            self.reconcile(m, slot)?;
            let pde = m.read_phys_u32(slot).expect("directory in RAM");
            if pde & pte::PRESENT == 0 {
                continue;
            }
            let table = pde & pte::FRAME_MASK;
            if table as usize + PAGE_SIZE as usize > m.mem_size() {
                return Err(MemGuardError::MalformedDirectory(new_ptbr));
            }
            self.watch.insert(table / PAGE_SIZE);
            for j in 0..1024 {
                self.reconcile(m, table + j * 4)?;
            }
        }
        Ok(())
    }

    /// Brings one slot in line with the hiding rule, using whatever value
    /// the guest last stored there.
    fn reconcile(&mut self, m: &mut Machine, slot: u32) -> Result<(), MemGuardError> {
        let raw = m.read_phys_u32(slot).expect("slot in RAM");
        let guest_value = match self.remap.get(&slot) {
            Some(r) if r.actual == raw => return Ok(()),
            // Stale: the raw slot was changed behind our back.
            Some(_) => raw,
            None => {
                if raw & pte::PRESENT == 0 || !self.is_hidden(pte::frame(raw)) {
                    return Ok(());
                }
                raw
            }
        };
        self.on_pt_write(m, slot, guest_value)
    }

    /// Stores `value` into the page-table slot at `slot` on the guest's
    /// behalf, redirecting hidden frames to substitutes.
    pub fn on_pt_write(&mut self, m: &mut Machine, slot: u32, value: u32) -> Result<(), MemGuardError> {
        let slot = slot & !3;
        let f = pte::frame(value);
        if value & pte::PRESENT != 0 && self.is_hidden(f) {
            let s = self.substitute(m, f)?;
            let actual = (value & !pte::FRAME_MASK) | (s << 12);
            m.write_phys_u32(slot, actual).expect("slot in RAM");
            m.masquerade.insert(slot, value);
            self.remap.insert(slot, Remap { guest_visible: value, actual });
        } else {
            m.masquerade.remove(&slot);
            self.remap.remove(&slot);
            m.write_phys_u32(slot, value).expect("slot in RAM");
        }
        Ok(())
    }

    fn substitute(&mut self, m: &mut Machine, frame: u32) -> Result<u32, MemGuardError> {
        if let Some(s) = self.subst_of.get(&frame) {
            return Ok(*s);
        }
        let s = self.free.pop().ok_or(MemGuardError::SubstitutePoolExhausted)?;
        // The guest should find what a native run would have left there.
        let content = self.snapshot.get(&frame).cloned().unwrap_or_else(|| vec![0; PAGE_SIZE as usize]);
        m.write_phys(s * PAGE_SIZE, &content).expect("substitute in RAM");
        self.subst_of.insert(frame, s);
        Ok(s)
    }

    /// Host-side protections memguard needs: page-table pages (active ones
    /// and any holding a remapped slot) are read-only to the guest.
    pub fn shadow(&self) -> impl Iterator<Item = (u32, Shadow)> + '_ {
        let remapped = self.remap.keys().map(|s| s / PAGE_SIZE);
        self.watch.iter().copied().chain(remapped).map(|f| (f, Shadow::ReadOnly))
    }

    /// Whether a write to `pa` must be routed through [`MemGuard::on_pt_write`].
    pub fn guards(&self, pa: u32) -> bool {
        let f = pa / PAGE_SIZE;
        self.watch.contains(&f) || self.remap.keys().any(|s| s / PAGE_SIZE == f)
    }

    /// RAM as the guest would see it had the pool never existed.
    pub fn guest_view(&self, raw: &[u8], view: &mut [u8]) {
        let page = PAGE_SIZE as usize;
        for f in self.reserved.iter().chain(self.substitute_region.iter()) {
            let dst = *f as usize * page;
            match self.subst_of.get(f) {
                Some(s) => {
                    let src = *s as usize * page;
                    view[dst..dst + page].copy_from_slice(&raw[src..src + page]);
                }
                None => {
                    if let Some(snap) = self.snapshot.get(f) {
                        view[dst..dst + page].copy_from_slice(snap);
                    }
                }
            }
        }
        for (slot, r) in &self.remap {
            let s = *slot as usize;
            view[s..s + 4].copy_from_slice(&r.guest_visible.to_le_bytes());
        }
    }

    /// Hands everything back: guest data moves into the frames the guest
    /// named, remapped slots get their guest-visible values, and the pool
    /// regains its pre-load content.
    pub fn release(&mut self, m: &mut Machine) {
        if self.snapshot.is_empty() {
            return;
        }
        let raw = m.ram().to_vec();
        let mut view = raw.clone();
        self.guest_view(&raw, &mut view);
        for f in self.reserved.iter().chain(self.substitute_region.iter()) {
            let a = (*f * PAGE_SIZE) as usize;
            m.write_phys(a as u32, &view[a..a + PAGE_SIZE as usize]).expect("pool frame in RAM");
        }
        for (slot, r) in &self.remap {
            m.write_phys_u32(*slot, r.guest_visible).expect("slot in RAM");
        }
        m.masquerade.clear();
        self.remap.clear();
        self.subst_of.clear();
        self.watch.clear();
    }
}

fn contiguous_end(frames: &BTreeSet<u32>) -> u32 {
    let mut it = frames.iter();
    let Some(first) = it.next() else { return 0 };
    let mut end = first + 1;
    for f in it {
        if *f != end {
            break;
        }
        end += 1;
    }
    end * PAGE_SIZE
}

/// Present (slot, entry) pairs of a directory and its tables.
fn entries(m: &Machine, ptbr: u32) -> Result<Vec<(u32, u32)>, MemGuardError> {
    let dir = ptbr & pte::FRAME_MASK;
    let mut out = Vec::new();
    for i in 0..1024 {
        let slot = dir + i * 4;
        let pde = m.read_phys_u32(slot).map_err(|_| MemGuardError::MalformedDirectory(ptbr))?;
        if pde & pte::PRESENT == 0 {
            continue;
        }
        out.push((slot, pde));
        let table = pde & pte::FRAME_MASK;
        for j in 0..1024 {
            let s = table + j * 4;
            let e = m.read_phys_u32(s).map_err(|_| MemGuardError::MalformedDirectory(ptbr))?;
            if e & pte::PRESENT != 0 {
                out.push((s, e));
            }
        }
    }
    Ok(out)
}
