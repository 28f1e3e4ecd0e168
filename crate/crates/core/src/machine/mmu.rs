//! Two-level page walk. Directory index is `va >> 22`, table index
//! `(va >> 12) & 0x3FF`, offset `va & 0xFFF`.

use super::{Fault, Machine, VEC_PF};

pub mod pte {
    pub const PRESENT: u32 = 1;
    pub const WRITABLE: u32 = 2;
    pub const USER: u32 = 4;
    pub const FRAME_MASK: u32 = 0xFFFF_F000;

    pub fn frame(entry: u32) -> u32 {
        entry >> 12
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Access {
    Read,
    Write,
    Execute,
}

/// Page-fault error code: bit0 protection, bit1 write, bit2 user, bit3 execute.
pub fn err_code(protection: bool, access: Access, user: bool) -> u32 {
    (protection as u32) | ((access == Access::Write) as u32) << 1 | (user as u32) << 2 | ((access == Access::Execute) as u32) << 3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageFault {
    pub va: u32,
    pub code: u32,
}

impl PageFault {
    pub fn fault(self) -> Fault {
        Fault { vector: VEC_PF, err: self.code, far: self.va }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Walk {
    pub pa: u32,
    pub pde_pa: u32,
    pub pte_pa: u32,
    pub pde: u32,
    pub pte: u32,
    pub writable: bool,
    pub user: bool,
}

pub(super) fn walk(m: &Machine, ptbr: u32, va: u32, access: Access, user: bool) -> Result<Walk, PageFault> {
    let not_present = PageFault { va, code: err_code(false, access, user) };
    let pde_pa = (ptbr & pte::FRAME_MASK).wrapping_add((va >> 22) * 4);
    let pde = m.read_phys_u32(pde_pa).map_err(|_| not_present)?;
    if pde & pte::PRESENT == 0 {
        return Err(not_present);
    }
    let pte_pa = (pde & pte::FRAME_MASK) + ((va >> 12) & 0x3FF) * 4;
    let pte = m.read_phys_u32(pte_pa).map_err(|_| not_present)?;
    if pte & pte::PRESENT == 0 {
        return Err(not_present);
    }
    let writable = pde & pte & pte::WRITABLE != 0;
    let user_ok = pde & pte & pte::USER != 0;
    if (user && !user_ok) || (access == Access::Write && !writable) {
        return Err(PageFault { va, code: err_code(true, access, user) });
    }
    Ok(Walk { pa: (pte & pte::FRAME_MASK) | (va & 0xFFF), pde_pa, pte_pa, pde, pte, writable, user: user_ok })
}
