//! Physical address decomposition for the sliced LLC.
//!
//! A line address is split as `[tag | set | slice]` (above the line offset).
//! The slice index takes the lowest line bits so consecutive lines of a tile
//! are striped over every slice; the tag starts right above the set index, so
//! its lowest bits change once per way-sized chunk of address space. Those
//! low tag bits are what the anti-thrashing priority and the bypass gear read.

use crate::error::{config_err, Result};

/// Width of the physical address space in bits.
pub const PHYS_ADDR_BITS: u32 = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddressMap {
    line_bytes: u64,
    offset_bits: u32,
    slice_bits: u32,
    set_bits: u32,
}

fn log2_exact(v: u64, what: &str) -> Result<u32> {
    if v == 0 || !v.is_power_of_two() {
        return Err(config_err(format!("{what} must be a power of two, got {v}")));
    }
    Ok(v.trailing_zeros())
}

impl AddressMap {
    pub fn new(line_bytes: u64, n_slices: u64, sets_per_slice: u64) -> Result<Self> {
        let offset_bits = log2_exact(line_bytes, "line size")?;
        let slice_bits = log2_exact(n_slices, "slice count")?;
        let set_bits = log2_exact(sets_per_slice, "sets per slice")?;
        if offset_bits + slice_bits + set_bits >= PHYS_ADDR_BITS {
            return Err(config_err("cache geometry leaves no tag bits"));
        }
        Ok(Self {
            line_bytes,
            offset_bits,
            slice_bits,
            set_bits,
        })
    }

    #[inline]
    pub fn line_bytes(&self) -> u64 {
        self.line_bytes
    }

    #[inline]
    pub fn line_of(&self, addr: u64) -> u64 {
        addr >> self.offset_bits
    }

    #[inline]
    pub fn addr_of_line(&self, line: u64) -> u64 {
        line << self.offset_bits
    }

    #[inline]
    pub fn slice_of_line(&self, line: u64) -> usize {
        (line & ((1 << self.slice_bits) - 1)) as usize
    }

    #[inline]
    pub fn set_of_line(&self, line: u64) -> usize {
        ((line >> self.slice_bits) & ((1 << self.set_bits) - 1)) as usize
    }

    #[inline]
    pub fn tag_of_line(&self, line: u64) -> u64 {
        line >> (self.slice_bits + self.set_bits)
    }

    #[inline]
    pub fn tag_of_addr(&self, addr: u64) -> u64 {
        self.tag_of_line(self.line_of(addr))
    }

    /// Rebuilds a line address from its tag, set and slice.
    pub fn line_from_parts(&self, tag: u64, set: usize, slice: usize) -> u64 {
        (tag << (self.slice_bits + self.set_bits)) | ((set as u64) << self.slice_bits) | slice as u64
    }

    pub fn n_slices(&self) -> usize {
        1 << self.slice_bits
    }

    pub fn sets_per_slice(&self) -> usize {
        1 << self.set_bits
    }

    /// Bytes covered by one value of the tag, i.e. the size of one way
    /// across all slices.
    pub fn way_bytes(&self) -> u64 {
        1 << (self.offset_bits + self.slice_bits + self.set_bits)
    }

    pub fn tag_bits(&self) -> u32 {
        PHYS_ADDR_BITS - self.offset_bits - self.slice_bits - self.set_bits
    }
}
