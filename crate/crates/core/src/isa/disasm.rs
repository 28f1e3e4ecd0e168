use std::fmt::Write as _;

use super::decode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListingLine {
    pub addr: u32,
    pub len: usize,
    pub text: String,
}

/// Disassembles up to `max` instructions. Undecodable bytes become
/// `DB 0xNN` and advance one byte, so this never fails.
pub fn disassemble(bytes: &[u8], base: u32, max: usize) -> Vec<ListingLine> {
    let mut out = Vec::new();
    let mut off = 0usize;
    while off < bytes.len() && out.len() < max {
        let addr = base.wrapping_add(off as u32);
        match decode(bytes, off) {
            Ok((instr, len)) => {
                out.push(ListingLine { addr, len, text: instr.to_string() });
                off += len;
            }
            Err(_) => {
                out.push(ListingLine { addr, len: 1, text: format!("DB 0x{:02X}", bytes[off]) });
                off += 1;
            }
        }
    }
    out
}

/// Renders lines as `0xADDR: TEXT`, one per line.
pub fn format_listing(lines: &[ListingLine]) -> String {
    let mut s = String::new();
    for l in lines {
        let _ = writeln!(s, "{:#x}: {}", l.addr, l.text);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{assemble, encode, tests::arb_instruction};
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(format_listing(&disassemble(&[0xCC], 0x200, 10)), "0x200: BRK\n");
        assert_eq!(disassemble(&[2, 1, 5, 0, 0, 0], 0, 1)[0].text, "MOVI r1, 0x5");
        assert_eq!(disassemble(&[0xFE], 0, 1)[0].text, "DB 0xFE");
    }

    #[test]
    fn truncated_tail_falls_back_to_db() {
        let l = disassemble(&[0x02, 0x01], 0x10, 8);
        assert_eq!(l.len(), 2);
        assert_eq!(l[0].text, "DB 0x02");
        assert_eq!(l[1].addr, 0x11);
    }

    #[test]
    fn max_count_respected() {
        assert_eq!(disassemble(&[0; 32], 0, 5).len(), 5);
    }

    proptest! {
        #[test]
        fn reassembly_is_byte_identical(prog in proptest::collection::vec(arb_instruction(), 1..40)) {
            let bytes: Vec<u8> = prog.iter().flat_map(|i| encode(i).unwrap()).collect();
            let mut src = String::from(".org 0x1000\n");
            for l in disassemble(&bytes, 0x1000, usize::MAX) {
                src.push_str(&l.text);
                src.push('\n');
            }
            let img = assemble(&src).unwrap();
            prop_assert_eq!(&img.sections[0].bytes, &bytes);
        }

        #[test]
        fn arbitrary_bytes_reassemble(bytes in proptest::collection::vec(any::<u8>(), 1..64)) {
            let mut src = String::from(".org 0x2000\n");
            for l in disassemble(&bytes, 0x2000, usize::MAX) {
                src.push_str(&l.text);
                src.push('\n');
            }
            prop_assert_eq!(&assemble(&src).unwrap().sections[0].bytes, &bytes);
        }
    }
}
