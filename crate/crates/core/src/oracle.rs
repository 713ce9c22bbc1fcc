//! Byte-granular taint tracking: one bit per memory byte and per register.
//! Applies the same rules as the object engine, byte by byte.

use crate::engine::{ProvenanceEntry, SourceSet, TagRef, Tracker};
use crate::isa::{Reg, NUM_REGS};
use crate::objects::{LiveObject, ObjectTable, Slot};
use crate::tags::CapacityError;
use crate::vm::{ArithRhs, Flow, StepEvent};

#[derive(Debug, Clone)]
pub struct ByteTaintMap {
    mem: Vec<u64>,
    /// Bit per `mem` word that may be non-zero; set on taint, never cleared.
    dirty: Vec<u64>,
    size: u32,
    regs: u16,
    sources: SourceSet,
    reads: u64,
    writes: u64,
}

impl ByteTaintMap {
    pub fn new(mem_size: u32) -> ByteTaintMap {
        ByteTaintMap {
            mem: vec![0; (mem_size as usize).div_ceil(64)],
            dirty: vec![0; (mem_size as usize).div_ceil(64 * 64)],
            size: mem_size,
            regs: 0,
            sources: SourceSet::ALL,
            reads: 0,
            writes: 0,
        }
    }

    /// Memory bytes plus register slots.
    pub fn len_bits(&self) -> u64 {
        u64::from(self.size) + NUM_REGS as u64
    }

    pub fn byte(&self, addr: u32) -> bool {
        addr < self.size && self.mem[(addr >> 6) as usize] >> (addr & 63) & 1 == 1
    }

    fn put(&mut self, addr: u32, tag: bool) {
        if addr >= self.size {
            return;
        }
        let w = &mut self.mem[(addr >> 6) as usize];
        if tag {
            *w |= 1 << (addr & 63);
            self.dirty[(addr >> 12) as usize] |= 1 << (addr >> 6 & 63);
        } else {
            *w &= !(1 << (addr & 63));
        }
    }

    pub fn set_byte(&mut self, addr: u32, tag: bool) {
        self.writes += 1;
        self.put(addr, tag);
    }

    pub fn reg(&self, reg: Reg) -> bool {
        self.regs >> reg.index() & 1 == 1
    }

    pub fn set_reg(&mut self, reg: Reg, tag: bool) {
        self.writes += 1;
        if tag {
            self.regs |= 1 << reg.index();
        } else {
            self.regs &= !(1 << reg.index());
        }
    }

    fn read_reg(&mut self, reg: Reg) -> bool {
        self.reads += 1;
        self.reg(reg)
    }

    fn read_range(&mut self, addr: u32, len: u32) -> bool {
        let mut t = false;
        for a in range(addr, len) {
            t |= self.byte(a);
        }
        self.reads += u64::from(len);
        t
    }

    fn fill(&mut self, addr: u32, len: u32, tag: bool) {
        for a in range(addr, len) {
            self.put(a, tag);
        }
        self.writes += u64::from(len);
    }

    /// Any byte tainted in `[addr, addr+len)`, without counting.
    pub fn any(&self, addr: u32, len: u32) -> bool {
        range(addr, len).any(|a| self.byte(a))
    }

    pub fn tainted_bytes(&self) -> impl Iterator<Item = u32> + '_ {
        let words = self
            .dirty
            .iter()
            .enumerate()
            .flat_map(|(d, &bits)| (0..64usize).filter(move |b| bits >> b & 1 == 1).map(move |b| d * 64 + b));
        words.flat_map(move |i| {
            let w = self.mem[i];
            (0..64u32).filter(move |b| w >> b & 1 == 1).map(move |b| i as u32 * 64 + b)
        })
    }

    /// Cumulative per-bit shadow writes.
    pub fn count_shadow_ops(&self) -> u64 {
        self.writes
    }

    fn apply_flow(&mut self, flow: &Flow) {
        match *flow {
            Flow::ConstToReg { dst } | Flow::ZeroIdiom { dst } => self.set_reg(dst, false),
            Flow::RegToReg { dst, src } => {
                let t = self.read_reg(src);
                self.set_reg(dst, t);
            }
            Flow::MemToReg { dst, addr, len, index } => {
                let mut t = self.read_range(addr, len);
                if let Some(ix) = index {
                    t |= self.read_reg(ix);
                }
                self.set_reg(dst, t);
            }
            Flow::RegToMem { addr, len, src } => {
                let t = self.read_reg(src);
                self.fill(addr, len, t);
            }
            Flow::ConstToMem { addr, len } => self.fill(addr, len, false),
            Flow::MemToMem { dst, src, len } => {
                // memmove order: copy backwards when the destination is above.
                let copy = |m: &mut Self, i: u32| {
                    let t = m.byte(src.wrapping_add(i));
                    m.put(dst.wrapping_add(i), t);
                };
                if dst > src {
                    (0..len).rev().for_each(|i| copy(self, i));
                } else {
                    (0..len).for_each(|i| copy(self, i));
                }
                self.reads += u64::from(len);
                self.writes += u64::from(len);
            }
            Flow::MergeToMem { dst, len, src, src_len } => {
                let t = self.read_range(src, src_len);
                self.fill(dst, len, t);
            }
            Flow::Arith { dst, rhs } => {
                let mut t = self.read_reg(dst);
                match rhs {
                    ArithRhs::Const => {}
                    ArithRhs::Reg(r) => t |= self.read_reg(r),
                    ArithRhs::Mem { addr, len } => t |= self.read_range(addr, len),
                }
                self.set_reg(dst, t);
            }
            Flow::Unary { .. } => {}
            Flow::Input { addr, len, source } => {
                let t = self.sources.contains(source);
                self.fill(addr, len, t);
            }
        }
    }
}

fn range(addr: u32, len: u32) -> impl Iterator<Item = u32> {
    let end = (u64::from(addr) + u64::from(len)).min(u64::from(u32::MAX) + 1);
    (u64::from(addr)..end).map(|a| a as u32)
}

impl Tracker for ByteTaintMap {
    fn apply(&mut self, _table: &ObjectTable, ev: &StepEvent) {
        if ev.fault.is_some() {
            return;
        }
        for flow in &ev.flows {
            self.apply_flow(flow);
        }
    }

    fn objects_born(&mut self, _table: &ObjectTable, _slots: &[Slot]) -> Result<(), CapacityError> {
        Ok(())
    }

    /// Dead objects' bytes are cleared, mirroring the object engine.
    fn objects_died(&mut self, dead: &[(Slot, LiveObject)]) {
        for (_, o) in dead {
            for a in range(o.base, o.size) {
                self.put(a, false);
            }
        }
    }

    fn reg_tainted(&self, reg: Reg) -> bool {
        self.reg(reg)
    }

    fn range_tainted(&self, _table: &ObjectTable, addr: u32, len: u32) -> bool {
        self.any(addr, len)
    }

    fn object_tainted(&self, table: &ObjectTable, slot: Slot) -> bool {
        let o = table.get(slot);
        self.any(o.base, o.size)
    }

    fn shadow_reads(&self) -> u64 {
        self.reads
    }

    fn shadow_writes(&self) -> u64 {
        self.writes
    }

    fn set_sources(&mut self, sources: SourceSet) {
        self.sources = sources;
    }

    fn provenance(&self) -> &[ProvenanceEntry] {
        &[]
    }

    fn range_sources(&self, table: &ObjectTable, addr: u32, len: u32) -> Vec<TagRef> {
        let mut out = Vec::new();
        for seg in table.segments(addr, len) {
            let Some(a) = (seg.start..seg.end).find(|&a| self.byte(a)) else { continue };
            out.push(match seg.slot {
                Some(s) => TagRef::Object(table.get(s).id),
                None => TagRef::Spill(a),
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{Opcode, SourceKind};

    fn run(map: &mut ByteTaintMap, flows: &[Flow]) {
        let mut ev = StepEvent::new(0, 0, Opcode::Mov);
        ev.flows.extend(flows.iter().cloned());
        map.apply(&ObjectTable::empty(), &ev);
    }

    #[test]
    fn strcpy_scenario_counts_per_byte() {
        let mut m = ByteTaintMap::new(1 << 16);
        assert_eq!(m.count_shadow_ops(), 0);
        run(&mut m, &[Flow::Input { addr: 0x1000, len: 1024, source: SourceKind::Stdin }]);
        run(&mut m, &[Flow::MemToMem { dst: 0x2000, src: 0x1000, len: 1024 }]);
        assert_eq!(m.count_shadow_ops(), 2048);
        assert!((0x2000..0x2400).all(|a| m.byte(a)));
        assert!(!m.byte(0x2400));
    }

    #[test]
    fn constant_byte_store_clears_one_byte() {
        let mut m = ByteTaintMap::new(256);
        run(&mut m, &[Flow::Input { addr: 16, len: 16, source: SourceKind::Stdin }]);
        run(&mut m, &[Flow::ConstToMem { addr: 16, len: 1 }]);
        assert!(!m.byte(16));
        assert_eq!((17..32).filter(|&a| m.byte(a)).count(), 15);
    }

    #[test]
    fn overlapping_copy_behaves_like_memmove() {
        let mut m = ByteTaintMap::new(256);
        run(&mut m, &[Flow::Input { addr: 0, len: 4, source: SourceKind::Stdin }]);
        run(&mut m, &[Flow::MemToMem { dst: 2, src: 0, len: 8 }]);
        let got: Vec<bool> = (0..10).map(|a| m.byte(a)).collect();
        assert_eq!(got, [true, true, true, true, true, true, false, false, false, false]);
    }

    #[test]
    fn writes_touch_exactly_their_range() {
        for start in 0..64u32 {
            for len in 0..=(64 - start) {
                let mut m = ByteTaintMap::new(64);
                run(&mut m, &[Flow::Input { addr: 0, len: 64, source: SourceKind::Stdin }]);
                run(&mut m, &[Flow::ConstToMem { addr: start, len }]);
                for a in 0..64 {
                    assert_eq!(m.byte(a), !(start..start + len).contains(&a));
                }
                let mut m = ByteTaintMap::new(64);
                run(&mut m, &[Flow::Input { addr: start, len, source: SourceKind::Stdin }]);
                assert_eq!(m.tainted_bytes().collect::<Vec<_>>(), (start..start + len).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn registers_and_index() {
        let mut m = ByteTaintMap::new(64);
        m.set_reg(Reg::gp(1), true);
        run(&mut m, &[Flow::MemToReg { dst: Reg::gp(2), addr: 0, len: 4, index: Some(Reg::gp(1)) }]);
        assert!(m.reg(Reg::gp(2)));
        run(&mut m, &[Flow::ZeroIdiom { dst: Reg::gp(2) }]);
        assert!(!m.reg(Reg::gp(2)));
        assert_eq!(m.len_bits(), 74);
    }
}
