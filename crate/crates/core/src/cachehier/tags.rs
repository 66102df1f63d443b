use serde::{Deserialize, Serialize};

use crate::addrspace::{MachineSpec, BASE_PAGE_SHIFT};
use crate::error::{Error, Result};

/// Widest ASID/VMID field a TLB-block tag stores; any further spare bits go
/// to page-size information.
pub const ASID_FIELD_MAX_BITS: u32 = 11;
/// Page-size information needs one bit (4 KiB vs 2 MiB).
pub const PAGE_SIZE_FIELD_BITS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagWidths {
    pub data_tag_bits: u32,
    pub tlb_tag_bits: u32,
    pub asid_bits: u32,
    pub page_size_bits: u32,
}

impl TagWidths {
    pub fn spare_bits(&self) -> u32 {
        self.data_tag_bits - self.tlb_tag_bits
    }

    /// Whether `asid` can be stored in a TLB-block tag without aliasing.
    pub fn asid_fits(&self, asid: u16) -> bool {
        (asid as u64) < (1u64 << self.asid_bits)
    }
}

/// Tag widths of a data block and of a TLB block in an L2 with `num_sets`
/// sets. Fails when the TLB-block tag does not fit the physical tag field.
pub fn derive_tag_widths(spec: &MachineSpec, num_sets: u64) -> Result<TagWidths> {
    if !num_sets.is_power_of_two() {
        return Err(Error::config(format!("cache set count {num_sets} is not a power of two")));
    }
    let set_bits = num_sets.trailing_zeros() as i64;
    let line_bits = spec.cache_line_bytes.trailing_zeros() as i64;
    let slot_bits = spec.ptes_per_line().trailing_zeros() as i64;
    let data = spec.pa_bits as i64 - set_bits - line_bits;
    let tlb = spec.va_bits as i64 - BASE_PAGE_SHIFT as i64 - set_bits - slot_bits;
    if tlb < 0 || data <= tlb {
        return Err(Error::config(format!(
            "TLB-block tag ({tlb} bits) does not fit the {data}-bit data tag for VA {} / PA {}; \
             store fewer PTEs per block (e.g. 7 instead of 8) to free tag bits",
            spec.va_bits, spec.pa_bits
        )));
    }
    let spare = (data - tlb) as u32;
    let asid_bits = spare.min(ASID_FIELD_MAX_BITS);
    Ok(TagWidths {
        data_tag_bits: data as u32,
        tlb_tag_bits: tlb as u32,
        asid_bits,
        page_size_bits: (spare - asid_bits).min(PAGE_SIZE_FIELD_BITS),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(va: u32, pa: u32) -> MachineSpec {
        MachineSpec {
            va_bits: va,
            pa_bits: pa,
            cache_line_bytes: 64,
        }
    }

    /// Sets of a 16-way, 64 B-line cache of `bytes`.
    fn sets(bytes: u64) -> u64 {
        bytes / 64 / 16
    }

    #[test]
    fn one_mib_l2() {
        let w = derive_tag_widths(&spec(48, 52), sets(1 << 20)).unwrap();
        assert_eq!((w.data_tag_bits, w.tlb_tag_bits, w.asid_bits), (36, 23, 11));
        assert!(w.asid_bits + w.page_size_bits <= w.spare_bits());
    }

    #[test]
    fn two_mib_l2() {
        let w = derive_tag_widths(&spec(48, 52), sets(2 << 20)).unwrap();
        assert_eq!((w.data_tag_bits, w.tlb_tag_bits), (35, 22));
        assert_eq!(w.spare_bits(), 13);
        assert_eq!(w.asid_bits, 11);
        assert_eq!(w.page_size_bits, 1);
    }

    #[test]
    fn fifty_seven_bit_va() {
        let w = derive_tag_widths(&spec(57, 52), sets(1 << 20)).unwrap();
        assert_eq!(w.asid_bits, 4);
        assert!(w.asid_fits(11));
        assert!(!w.asid_fits(16));
    }

    #[test]
    fn infeasible_geometry_advises_fewer_ptes() {
        let err = derive_tag_widths(&spec(60, 50), sets(1 << 20)).unwrap_err();
        assert!(err.to_string().contains("fewer PTEs"));
    }
}
