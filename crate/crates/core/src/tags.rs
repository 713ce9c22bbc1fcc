//! Tag space: one taint bit per live object and per register, addressed by
//! `(offset, bit)` coordinates from a fixed virtual base, plus a
//! byte-granular spill map for addresses no object covers.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::hash::{BuildHasherDefault, Hasher};

use thiserror::Error;

use crate::isa::{Reg, NUM_REGS};
use crate::objects::ObjectId;

pub const TAG_SPACE_BASE: u32 = 0xA800_0000;
pub const DEFAULT_CAPACITY: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TagCoordinate {
    pub offset: u32,
    pub bit: u8,
}

impl TagCoordinate {
    pub fn from_slot(slot: usize) -> TagCoordinate {
        TagCoordinate { offset: (slot / 8) as u32, bit: (slot % 8) as u8 }
    }

    pub fn slot(self) -> usize {
        self.offset as usize * 8 + self.bit as usize
    }

    /// Virtual address of the tag byte holding this coordinate.
    pub fn byte_address(self) -> Result<u32, ShadowOverflow> {
        guarded_shadow_address(self.offset, TAG_SPACE_BASE)
    }

    /// AND-mask that clears this coordinate's bit within its byte word.
    pub fn clear_mask(self) -> u32 {
        0xFFFF_FFFEu32.rotate_left(u32::from(self.bit))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("tag space exhausted ({capacity} object slots)")]
pub struct CapacityError {
    pub capacity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("shadow address {addr:#010x} + {base:#010x} overflows 32 bits")]
pub struct ShadowOverflow {
    pub addr: u32,
    pub base: u32,
}

/// `addr + base`, refusing sums that wrap past 2^32.
pub fn guarded_shadow_address(addr: u32, base: u32) -> Result<u32, ShadowOverflow> {
    addr.checked_add(base).ok_or(ShadowOverflow { addr, base })
}

/// Object ids are unique counters; a multiplicative hash is enough.
#[derive(Debug, Clone, Default)]
struct IdHasher(u64);

impl Hasher for IdHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.write_u32(u32::from(b) ^ (self.0 as u32).rotate_left(8));
        }
    }

    fn write_u32(&mut self, n: u32) {
        self.0 = u64::from(n).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }
}

#[derive(Debug, Clone)]
pub struct TagSpace {
    bits: Vec<u8>,
    capacity: usize,
    coords: HashMap<ObjectId, TagCoordinate, BuildHasherDefault<IdHasher>>,
    /// Released object slots, reused lowest-first.
    free: BinaryHeap<Reverse<usize>>,
    next_slot: usize,
    spill: BTreeSet<u32>,
}

impl Default for TagSpace {
    fn default() -> Self {
        TagSpace::new(DEFAULT_CAPACITY)
    }
}

impl TagSpace {
    /// `capacity` counts object slots; the register slots come on top.
    pub fn new(capacity: usize) -> TagSpace {
        TagSpace {
            bits: vec![0; NUM_REGS.div_ceil(8)],
            capacity,
            coords: HashMap::default(),
            free: BinaryHeap::new(),
            next_slot: NUM_REGS,
            spill: BTreeSet::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn register_coordinate(reg: Reg) -> TagCoordinate {
        TagCoordinate::from_slot(reg.index())
    }

    pub fn assign_coordinate(&mut self, id: ObjectId) -> Result<TagCoordinate, CapacityError> {
        if let Some(&c) = self.coords.get(&id) {
            return Ok(c);
        }
        let slot = match self.free.pop() {
            Some(Reverse(s)) => s,
            None => {
                if self.next_slot - NUM_REGS >= self.capacity {
                    return Err(CapacityError { capacity: self.capacity });
                }
                self.next_slot += 1;
                self.next_slot - 1
            }
        };
        let coord = TagCoordinate::from_slot(slot);
        if self.bits.len() <= coord.offset as usize {
            self.bits.resize(coord.offset as usize + 1, 0);
        }
        self.coords.insert(id, coord);
        Ok(coord)
    }

    /// Clears the object's bit and returns its slot to the pool.
    pub fn release_coordinate(&mut self, id: ObjectId) {
        if let Some(coord) = self.coords.remove(&id) {
            self.write_tag(coord, false);
            self.free.push(Reverse(coord.slot()));
        }
    }

    pub fn coordinate(&self, id: ObjectId) -> Option<TagCoordinate> {
        self.coords.get(&id).copied()
    }

    pub fn live_coordinates(&self) -> usize {
        self.coords.len()
    }

    /// The tag byte at `offset` from the tag space base.
    pub fn shadow_byte(&self, offset: u32) -> u8 {
        self.bits.get(offset as usize).copied().unwrap_or(0)
    }

    pub fn read_tag(&self, coord: TagCoordinate) -> bool {
        self.bits.get(coord.offset as usize).is_some_and(|b| b >> coord.bit & 1 == 1)
    }

    pub fn write_tag(&mut self, coord: TagCoordinate, tag: bool) {
        let Some(byte) = self.bits.get_mut(coord.offset as usize) else {
            return;
        };
        if tag {
            *byte |= 1 << coord.bit;
        } else {
            *byte &= coord.clear_mask() as u8;
        }
    }

    pub fn reg(&self, reg: Reg) -> bool {
        self.read_tag(Self::register_coordinate(reg))
    }

    pub fn set_reg(&mut self, reg: Reg, tag: bool) {
        self.write_tag(Self::register_coordinate(reg), tag)
    }

    pub fn spill_read(&self, addr: u32) -> bool {
        self.spill.contains(&addr)
    }

    pub fn spill_write(&mut self, addr: u32, tag: bool) {
        if tag {
            self.spill.insert(addr);
        } else {
            self.spill.remove(&addr);
        }
    }

    /// Any spill byte tainted in `[start, end)`.
    pub fn spill_any(&self, start: u32, end: u32) -> bool {
        self.spill_tainted_in(start, end).is_some()
    }

    /// Lowest tainted spill byte in `[start, end)`.
    pub fn spill_tainted_in(&self, start: u32, end: u32) -> Option<u32> {
        if start >= end || self.spill.is_empty() {
            return None;
        }
        self.spill.range(start..end).next().copied()
    }

    pub fn spill_fill(&mut self, start: u32, end: u32, tag: bool) {
        if start >= end {
            return;
        }
        if tag {
            self.spill.extend(start..end);
        } else if !self.spill.is_empty() {
            let doomed: Vec<u32> = self.spill.range(start..end).copied().collect();
            for a in doomed {
                self.spill.remove(&a);
            }
        }
    }

    /// Removes and reports whether any spill byte in the range was tainted.
    pub fn spill_take(&mut self, start: u32, end: u32) -> bool {
        let any = self.spill_any(start, end);
        if any {
            self.spill_fill(start, end, false);
        }
        any
    }

    pub fn spill_tainted(&self) -> impl Iterator<Item = u32> + '_ {
        self.spill.iter().copied()
    }

    /// Bytes of bit storage needed for the live objects plus registers.
    pub fn shadow_bytes(&self) -> usize {
        (self.coords.len() + NUM_REGS).div_ceil(8)
    }

    /// Hex listing of the bit array, 16 bytes per line, prefixed with the
    /// virtual tag address; followed by the tainted spill bytes.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, chunk) in self.bits.chunks(16).enumerate() {
            let addr = TAG_SPACE_BASE + (i * 16) as u32;
            let _ = write!(out, "{addr:#010x}:");
            for b in chunk {
                let _ = write!(out, " {b:02x}");
            }
            out.push('\n');
        }
        if !self.spill.is_empty() {
            let _ = writeln!(out, "spill: {} tainted byte(s)", self.spill.len());
            for a in &self.spill {
                let _ = writeln!(out, "  {a:#010x}");
            }
        }
        out
    }
}
