//! Object-granular taint propagation.
//!
//! Each live object owns one tag bit; a write that covers the whole object
//! assigns the source tag, a partial write can only raise it. Bytes that no
//! object covers are tracked individually in the spill map.

use std::fmt;

use smallvec::SmallVec;

use crate::isa::{Reg, SourceKind};
use crate::objects::{LiveObject, ObjectId, ObjectTable, RecordId, Segment, Slot};
use crate::tags::{CapacityError, TagCoordinate, TagSpace};
use crate::vm::{ArithRhs, Flow, StepEvent};

/// The propagation rule behind one tag write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    /// Bytes from an enabled untrusted source.
    Mark,
    Move,
    Const,
    Arith,
    Unary,
    ZeroIdiom,
    Copy,
    Merge,
    IndexedLoad,
    /// A new object takes over spill taint lying beneath it.
    Absorb,
    /// Events with no data flow (jumps, calls' control part, HALT).
    ControlOnly,
}

impl Rule {
    pub const ALL: [Rule; 11] = [
        Rule::Mark,
        Rule::Move,
        Rule::Const,
        Rule::Arith,
        Rule::Unary,
        Rule::ZeroIdiom,
        Rule::Copy,
        Rule::Merge,
        Rule::IndexedLoad,
        Rule::Absorb,
        Rule::ControlOnly,
    ];

    /// The one rule that handles a flow. Input from a disabled source is
    /// treated as a constant write.
    pub fn of(flow: &Flow, sources: &SourceSet) -> Rule {
        match flow {
            Flow::ConstToReg { .. } | Flow::ConstToMem { .. } => Rule::Const,
            Flow::RegToReg { .. } | Flow::RegToMem { .. } => Rule::Move,
            Flow::MemToReg { index: Some(_), .. } => Rule::IndexedLoad,
            Flow::MemToReg { index: None, .. } => Rule::Move,
            Flow::MemToMem { .. } => Rule::Copy,
            Flow::MergeToMem { .. } => Rule::Merge,
            Flow::Arith { .. } => Rule::Arith,
            Flow::ZeroIdiom { .. } => Rule::ZeroIdiom,
            Flow::Unary { .. } => Rule::Unary,
            Flow::Input { source, .. } if sources.contains(*source) => Rule::Mark,
            Flow::Input { .. } => Rule::Const,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Rule::Mark => "mark",
            Rule::Move => "move",
            Rule::Const => "const",
            Rule::Arith => "arith",
            Rule::Unary => "unary",
            Rule::ZeroIdiom => "zero",
            Rule::Copy => "copy",
            Rule::Merge => "merge",
            Rule::IndexedLoad => "index",
            Rule::Absorb => "absorb",
            Rule::ControlOnly => "control",
        }
    }
}

/// Untrusted sources whose input is marked tainted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceSet(u8);

impl SourceSet {
    pub const ALL: SourceSet = SourceSet(0b1_1111);
    pub const NONE: SourceSet = SourceSet(0);

    pub fn contains(self, kind: SourceKind) -> bool {
        self.0 >> kind.code() & 1 == 1
    }

    pub fn set(&mut self, kind: SourceKind, on: bool) {
        if on {
            self.0 |= 1 << kind.code();
        } else {
            self.0 &= !(1 << kind.code());
        }
    }
}

impl Default for SourceSet {
    fn default() -> Self {
        SourceSet::ALL
    }
}

/// Something a tag belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TagRef {
    Reg(Reg),
    Object(ObjectId),
    Spill(u32),
}

impl fmt::Display for TagRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TagRef::Reg(r) => write!(f, "{r}"),
            TagRef::Object(id) => write!(f, "o{}", id.0),
            TagRef::Spill(a) => write!(f, "s{a:#x}"),
        }
    }
}

pub type Sources = SmallVec<[TagRef; 2]>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceEntry {
    pub step: u64,
    pub rule: Rule,
    pub srcs: Sources,
    pub dst: TagRef,
    pub tag: bool,
}

impl fmt::Display for ProvenanceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} ", self.step, self.rule.name())?;
        if self.srcs.is_empty() {
            f.write_str("-")?;
        } else {
            for (i, s) in self.srcs.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{s}")?;
            }
        }
        write!(f, " -> {} {}", self.dst, u8::from(self.tag))
    }
}

pub fn provenance_text(log: &[ProvenanceEntry]) -> String {
    log.iter().map(|e| format!("{e}\n")).collect()
}

/// Backward slice of `log` from the last tainting write to `target`,
/// following sources down to the marking entries. Oldest entry first.
pub fn taint_chain(log: &[ProvenanceEntry], target: TagRef) -> Vec<ProvenanceEntry> {
    let mut out: Vec<usize> = Vec::new();
    let mut work: Vec<(TagRef, usize)> = vec![(target, log.len())];
    let mut seen = std::collections::HashSet::new();
    while let Some((t, limit)) = work.pop() {
        let Some(i) = log[..limit].iter().rposition(|e| e.dst == t) else { continue };
        if !log[i].tag || !seen.insert(i) {
            continue;
        }
        out.push(i);
        for s in &log[i].srcs {
            work.push((*s, i));
        }
        if out.len() >= 64 {
            break;
        }
    }
    out.sort_unstable();
    out.into_iter().map(|i| log[i].clone()).collect()
}

/// Interface shared by the object engine and the byte oracle so the
/// session and policy can run over either.
pub trait Tracker {
    fn apply(&mut self, table: &ObjectTable, ev: &StepEvent);
    fn objects_born(&mut self, table: &ObjectTable, slots: &[Slot]) -> Result<(), CapacityError>;
    fn objects_died(&mut self, dead: &[(Slot, LiveObject)]);
    fn reg_tainted(&self, reg: Reg) -> bool;
    /// Whether any taint reaches a read of `[addr, addr+len)`.
    fn range_tainted(&self, table: &ObjectTable, addr: u32, len: u32) -> bool;
    fn object_tainted(&self, table: &ObjectTable, slot: Slot) -> bool;
    fn shadow_reads(&self) -> u64;
    fn shadow_writes(&self) -> u64;
    fn set_sources(&mut self, sources: SourceSet);
    fn provenance(&self) -> &[ProvenanceEntry];
    /// Sources of taint for a read of the range, for reports.
    fn range_sources(&self, table: &ObjectTable, addr: u32, len: u32) -> Vec<TagRef>;
}

type Segs = SmallVec<[Segment; 2]>;

/// Segmentation of one operand of one instruction, valid while the table
/// generation and the address range are unchanged.
#[derive(Debug, Clone, Copy)]
struct CachedSegs {
    generation: u64,
    addr: u32,
    len: u32,
    n: u8,
    segs: [Segment; 2],
    /// For a single-object entry: the object's coordinate and extent.
    coord: Option<TagCoordinate>,
    object: (u32, u32),
    /// Shape of the object and overlap epoch, to revalidate after the
    /// object's frame was left and re-entered.
    record: Option<RecordId>,
    epoch: u64,
}

/// An access that falls inside one object.
#[derive(Debug, Clone, Copy)]
struct Single {
    slot: Slot,
    coord: Option<TagCoordinate>,
    full: bool,
}

impl CachedSegs {
    fn hit(&self, generation: u64, addr: u32, len: u32) -> Option<Segs> {
        if self.generation != generation {
            return None;
        }
        if self.n != 1 && self.addr == addr && self.len == len {
            return Some(SmallVec::from_buf_and_len(self.segs, self.n as usize));
        }
        // Any range inside one cached segment is a single segment itself.
        let s = self.segs[0];
        let end = u64::from(addr) + u64::from(len);
        (self.n == 1 && len > 0 && s.start <= addr && end <= u64::from(s.end))
            .then(|| SmallVec::from_buf_and_len([Segment { start: addr, end: end as u32, ..s }, s], 1))
    }

    fn single(&self, addr: u32, len: u32) -> Option<Single> {
        let s = self.segs[0];
        let slot = s.slot?;
        let end = u64::from(addr) + u64::from(len);
        let inside = self.n == 1 && len > 0 && s.start <= addr && end <= u64::from(s.end);
        inside.then(|| Single {
            slot,
            coord: self.coord,
            full: addr <= self.object.0 && u64::from(self.object.1) <= end,
        })
    }

    /// Whether the cached object's slot now holds an object of the same
    /// shape and no overlapping birth has happened since.
    fn same_shape(&self, table: &ObjectTable) -> bool {
        let Some(slot) = self.segs[0].slot else { return false };
        self.n == 1
            && self.epoch == table.overlap_epoch()
            && table.try_get(slot).is_some_and(|o| o.record == self.record && (o.base, o.end()) == self.object)
    }
}

const CACHE_PCS: usize = 1 << 20;

#[derive(Debug, Clone)]
pub struct TaintEngine {
    pub tags: TagSpace,
    coords: Vec<Option<TagCoordinate>>,
    ids: Vec<ObjectId>,
    sources: SourceSet,
    record: bool,
    log: Vec<ProvenanceEntry>,
    reads: u64,
    writes: u64,
    step: u64,
    pc: u32,
    cache: Vec<[Option<CachedSegs>; 2]>,
}

impl Default for TaintEngine {
    fn default() -> Self {
        TaintEngine::new(TagSpace::default())
    }
}

impl TaintEngine {
    pub fn new(tags: TagSpace) -> TaintEngine {
        TaintEngine {
            tags,
            coords: Vec::new(),
            ids: Vec::new(),
            sources: SourceSet::ALL,
            record: true,
            log: Vec::new(),
            reads: 0,
            writes: 0,
            step: 0,
            pc: 0,
            cache: Vec::new(),
        }
    }

    /// Turns the provenance log on or off (it is on by default).
    pub fn record_provenance(&mut self, on: bool) {
        self.record = on;
    }

    fn coord(&self, slot: Slot) -> Option<TagCoordinate> {
        self.coords.get(slot.0 as usize).copied().flatten()
    }

    fn id(&self, slot: Slot) -> ObjectId {
        self.ids[slot.0 as usize]
    }

    pub fn object_tag(&self, slot: Slot) -> bool {
        self.coord(slot).is_some_and(|c| self.tags.read_tag(c))
    }

    #[inline]
    fn log_write(&mut self, rule: Rule, srcs: &[TagRef], dst: TagRef, tag: bool) {
        self.writes += 1;
        if self.record {
            self.log.push(ProvenanceEntry { step: self.step, rule, srcs: srcs.into(), dst, tag });
        }
    }

    fn read_reg(&mut self, reg: Reg, srcs: &mut Sources) -> bool {
        self.reads += 1;
        let t = self.tags.reg(reg);
        if t {
            srcs.push(TagRef::Reg(reg));
        }
        t
    }

    fn write_reg(&mut self, rule: Rule, srcs: &[TagRef], reg: Reg, tag: bool) {
        self.tags.set_reg(reg, tag);
        self.log_write(rule, srcs, TagRef::Reg(reg), tag);
    }

    fn read_segment(&mut self, table: &ObjectTable, seg: Segment, srcs: &mut Sources) -> bool {
        match seg.slot {
            Some(slot) => {
                self.reads += 1;
                let t = self.object_tag(slot);
                if t && self.record {
                    let r = TagRef::Object(table.get(slot).id);
                    if !srcs.contains(&r) {
                        srcs.push(r);
                    }
                }
                t
            }
            None => {
                self.reads += u64::from(seg.end - seg.start);
                match self.tags.spill_tainted_in(seg.start, seg.end) {
                    Some(a) => {
                        srcs.push(TagRef::Spill(a));
                        true
                    }
                    None => false,
                }
            }
        }
    }

    /// Segments of `[addr, addr+len)`, memoized per instruction operand.
    fn segs(&mut self, table: &ObjectTable, operand: usize, addr: u32, len: u32) -> Segs {
        let pc = self.pc as usize;
        let generation = table.generation();
        if let Some(hit) = self.cache.get(pc).and_then(|e| e[operand]?.hit(generation, addr, len)) {
            return hit;
        }
        let segs: Segs = table.segments(addr, len).collect();
        if pc < CACHE_PCS && segs.len() <= 2 && !segs.is_empty() {
            if self.cache.len() <= pc {
                self.cache.resize(pc + 1, [None, None]);
            }
            let mut buf = [segs[0]; 2];
            buf[..segs.len()].copy_from_slice(&segs);
            let (coord, object) = match segs[0].slot {
                Some(slot) if segs.len() == 1 => {
                    let o = table.get(slot);
                    // Widen to the object's whole segment so other offsets hit.
                    let whole = table.segment(o.base, o.end());
                    buf[0] = if whole.slot == Some(slot) && whole.end >= segs[0].end {
                        whole
                    } else {
                        table.segment(addr, o.end())
                    };
                    (self.coord(slot), (o.base, o.end()))
                }
                _ => (None, (0, 0)),
            };
            let n = segs.len() as u8;
            let record = segs[0].slot.and_then(|s| table.get(s).record);
            let epoch = table.overlap_epoch();
            self.cache[pc][operand] =
                Some(CachedSegs { generation, addr, len, n, segs: buf, coord, object, record, epoch });
        }
        segs
    }

    /// Cached single-object resolution of an operand, if any.
    #[inline]
    fn single(&mut self, table: &ObjectTable, operand: usize, addr: u32, len: u32) -> Option<Single> {
        let c = self.cache.get(self.pc as usize)?[operand].as_ref()?;
        if c.generation != table.generation() && !self.revalidate(table, operand) {
            return None;
        }
        self.cache[self.pc as usize][operand].as_ref()?.single(addr, len)
    }

    /// Brings a stale cache entry up to date if its object was replaced by
    /// one of the same shape.
    #[inline(never)]
    fn revalidate(&mut self, table: &ObjectTable, operand: usize) -> bool {
        let pc = self.pc as usize;
        let Some(c) = self.cache.get(pc).and_then(|e| e[operand].as_ref()) else { return false };
        if !c.same_shape(table) {
            return false;
        }
        let Some(slot) = c.segs[0].slot else { return false };
        let coord = self.coord(slot);
        let Some(c) = self.cache[pc][operand].as_mut() else { return false };
        c.generation = table.generation();
        c.coord = coord;
        true
    }

    fn read_range(&mut self, table: &ObjectTable, addr: u32, len: u32, srcs: &mut Sources) -> bool {
        if let Some(one) = self.single(table, 1, addr, len) {
            self.reads += 1;
            let t = one.coord.is_some_and(|c| self.tags.read_tag(c));
            if t && self.record {
                let r = TagRef::Object(self.id(one.slot));
                if !srcs.contains(&r) {
                    srcs.push(r);
                }
            }
            return t;
        }
        let mut t = false;
        for seg in self.segs(table, 1, addr, len) {
            t |= self.read_segment(table, seg, srcs);
        }
        t
    }

    /// One write per destination object: full coverage assigns, partial
    /// coverage ORs.
    fn write_object(&mut self, table: &ObjectTable, rule: Rule, slot: Slot, full: bool, tag: bool, srcs: &[TagRef]) {
        let Some(coord) = self.coord(slot) else { return };
        if full {
            self.tags.write_tag(coord, tag);
            self.log_write(rule, srcs, TagRef::Object(table.get(slot).id), tag);
        } else if tag {
            self.tags.write_tag(coord, true);
            self.log_write(rule, srcs, TagRef::Object(table.get(slot).id), true);
        }
    }

    fn write_spill(&mut self, rule: Rule, start: u32, end: u32, tag: bool, srcs: &[TagRef]) {
        self.tags.spill_fill(start, end, tag);
        if self.record {
            for a in start..end {
                self.log_write(rule, srcs, TagRef::Spill(a), tag);
            }
        } else {
            self.writes += u64::from(end - start);
        }
    }

    /// Writes a uniform source tag over `[addr, addr+len)`.
    fn write_uniform(&mut self, table: &ObjectTable, rule: Rule, addr: u32, len: u32, tag: bool, srcs: &[TagRef]) {
        if let Some(one) = self.single(table, 0, addr, len) {
            if let Some(c) = one.coord {
                if one.full || tag {
                    self.tags.write_tag(c, tag);
                    let id = self.id(one.slot);
                    self.log_write(rule, srcs, TagRef::Object(id), tag);
                }
            }
            return;
        }
        let end = u64::from(addr) + u64::from(len);
        let mut done: SmallVec<[Slot; 4]> = SmallVec::new();
        for seg in self.segs(table, 0, addr, len) {
            match seg.slot {
                Some(slot) => {
                    if done.contains(&slot) {
                        continue;
                    }
                    done.push(slot);
                    let o = table.get(slot);
                    let full = addr <= o.base && u64::from(o.end()) <= end;
                    self.write_object(table, rule, slot, full, tag, srcs);
                }
                None => self.write_spill(rule, seg.start, seg.end, tag, srcs),
            }
        }
    }

    /// Byte-parallel copy: each destination segment takes its tag from the
    /// matching source slice.
    fn write_copy(&mut self, table: &ObjectTable, dst: u32, src: u32, len: u32) {
        let end = u64::from(dst) + u64::from(len);
        let mut pending: SmallVec<[(Slot, bool, Sources); 4]> = SmallVec::new();
        let mut spill_writes: Vec<(u32, u32, bool, Sources)> = Vec::new();
        for seg in self.segs(table, 0, dst, len) {
            let s = src.wrapping_add(seg.start - dst);
            let n = seg.end - seg.start;
            match seg.slot {
                Some(slot) => {
                    let mut srcs = Sources::new();
                    let t = self.read_range(table, s, n, &mut srcs);
                    match pending.iter_mut().find(|p| p.0 == slot) {
                        Some(p) => {
                            p.1 |= t;
                            for r in srcs {
                                if !p.2.contains(&r) {
                                    p.2.push(r);
                                }
                            }
                        }
                        None => pending.push((slot, t, srcs)),
                    }
                }
                None => {
                    // Spill destination bytes are assigned per source piece.
                    for sseg in table.segments(s, n) {
                        let d0 = seg.start + (sseg.start - s);
                        match sseg.slot {
                            Some(_) => {
                                let mut srcs = Sources::new();
                                let t = self.read_segment(table, sseg, &mut srcs);
                                spill_writes.push((d0, d0 + (sseg.end - sseg.start), t, srcs));
                            }
                            None => {
                                for a in sseg.start..sseg.end {
                                    self.reads += 1;
                                    let t = self.tags.spill_read(a);
                                    let srcs: Sources =
                                        if t { SmallVec::from_slice(&[TagRef::Spill(a)]) } else { Sources::new() };
                                    let d = d0 + (a - sseg.start);
                                    spill_writes.push((d, d + 1, t, srcs));
                                }
                            }
                        }
                    }
                }
            }
        }
        for (slot, t, srcs) in pending {
            let o = table.get(slot);
            let full = dst <= o.base && u64::from(o.end()) <= end;
            self.write_object(table, Rule::Copy, slot, full, t, &srcs);
        }
        for (a, b, t, srcs) in spill_writes {
            self.write_spill(Rule::Copy, a, b, t, &srcs);
        }
    }

    #[inline(never)]
    fn apply_flow(&mut self, table: &ObjectTable, flow: &Flow) {
        let rule = Rule::of(flow, &self.sources);
        let mut srcs = Sources::new();
        match *flow {
            Flow::ConstToReg { dst } | Flow::ZeroIdiom { dst } => self.write_reg(rule, &[], dst, false),
            Flow::RegToReg { dst, src } => {
                let t = self.read_reg(src, &mut srcs);
                self.write_reg(rule, &srcs, dst, t);
            }
            Flow::MemToReg { dst, addr, len, index } => {
                let mut t = self.read_range(table, addr, len, &mut srcs);
                if let Some(ix) = index {
                    t |= self.read_reg(ix, &mut srcs);
                }
                self.write_reg(rule, &srcs, dst, t);
            }
            Flow::RegToMem { addr, len, src } => {
                let t = self.read_reg(src, &mut srcs);
                self.write_uniform(table, rule, addr, len, t, &srcs);
            }
            Flow::ConstToMem { addr, len } => self.write_uniform(table, rule, addr, len, false, &[]),
            Flow::MemToMem { dst, src, len } => self.write_copy(table, dst, src, len),
            Flow::MergeToMem { dst, len, src, src_len } => {
                let t = self.read_range(table, src, src_len, &mut srcs);
                self.write_uniform(table, rule, dst, len, t, &srcs);
            }
            Flow::Arith { dst, rhs } => {
                let mut t = self.read_reg(dst, &mut srcs);
                match rhs {
                    ArithRhs::Const => {}
                    ArithRhs::Reg(r) => t |= self.read_reg(r, &mut srcs),
                    ArithRhs::Mem { addr, len } => t |= self.read_range(table, addr, len, &mut srcs),
                }
                self.write_reg(rule, &srcs, dst, t);
            }
            Flow::Unary { .. } => {}
            Flow::Input { addr, len, .. } => {
                let tag = rule == Rule::Mark;
                self.write_uniform(table, rule, addr, len, tag, &[]);
            }
        }
    }

    /// Tag of a memory operand the cache resolves to one object.
    #[inline(always)]
    fn fast_read(&mut self, table: &ObjectTable, generation: u64, operand: usize, addr: u32, len: u32) -> Option<bool> {
        let mut c = self.cache.get(self.pc as usize)?[operand].as_ref()?;
        if c.generation != generation {
            if !self.revalidate(table, operand) {
                return None;
            }
            c = self.cache[self.pc as usize][operand].as_ref()?;
        }
        let one = c.single(addr, len)?;
        self.reads += 1;
        Some(one.coord.is_some_and(|c| self.tags.read_tag(c)))
    }

    #[inline(always)]
    fn fast_write(&mut self, table: &ObjectTable, generation: u64, addr: u32, len: u32, tag: bool) -> bool {
        let Some(mut c) = self.cache.get(self.pc as usize).and_then(|e| e[0].as_ref()) else { return false };
        if c.generation != generation {
            if !self.revalidate(table, 0) {
                return false;
            }
            let Some(r) = self.cache[self.pc as usize][0].as_ref() else { return false };
            c = r;
        }
        let Some(one) = c.single(addr, len) else { return false };
        if let Some(coord) = one.coord {
            if one.full || tag {
                self.tags.write_tag(coord, tag);
                self.writes += 1;
            }
        }
        true
    }

    /// A copy whose source and destination each lie inside one object.
    #[inline(never)]
    fn fast_copy(&mut self, table: &ObjectTable, dst: u32, src: u32, len: u32) -> bool {
        let (Some(d_end), Some(s_end)) = (dst.checked_add(len), src.checked_add(len)) else { return false };
        if len == 0 {
            return false;
        }
        let d = table.segment(dst, d_end);
        let s = table.segment(src, s_end);
        let (Some(ds), Some(ss)) = (d.slot, s.slot) else { return false };
        if d.end != d_end || s.end != s_end {
            return false;
        }
        self.reads += 1;
        let t = self.object_tag(ss);
        let o = table.get(ds);
        let full = dst <= o.base && o.end() <= d_end;
        if let Some(c) = self.coord(ds) {
            if full || t {
                self.tags.write_tag(c, t);
                self.writes += 1;
            }
        }
        true
    }

    /// Provenance-free propagation of the common flows through the cache.
    /// Returns false, having changed nothing, when the general path is needed.
    #[inline(always)]
    fn apply_fast(&mut self, table: &ObjectTable, generation: u64, flow: &Flow) -> bool {
        match *flow {
            Flow::ConstToReg { dst } | Flow::ZeroIdiom { dst } => self.tags.set_reg(dst, false),
            Flow::RegToReg { dst, src } => {
                self.reads += 1;
                let t = self.tags.reg(src);
                self.tags.set_reg(dst, t);
            }
            Flow::MemToReg { dst, addr, len, index } => {
                let Some(mut t) = self.fast_read(table, generation, 1, addr, len) else { return false };
                if let Some(ix) = index {
                    self.reads += 1;
                    t |= self.tags.reg(ix);
                }
                self.tags.set_reg(dst, t);
            }
            Flow::RegToMem { addr, len, src } => {
                let t = self.tags.reg(src);
                if !self.fast_write(table, generation, addr, len, t) {
                    return false;
                }
                self.reads += 1;
                return true;
            }
            Flow::ConstToMem { addr, len } => return self.fast_write(table, generation, addr, len, false),
            Flow::Arith { dst, rhs } => {
                let mut t = self.tags.reg(dst);
                match rhs {
                    ArithRhs::Const => {}
                    ArithRhs::Reg(r) => {
                        self.reads += 1;
                        t |= self.tags.reg(r);
                    }
                    ArithRhs::Mem { addr, len } => {
                        let Some(m) = self.fast_read(table, generation, 1, addr, len) else { return false };
                        t |= m;
                    }
                }
                self.reads += 1;
                self.tags.set_reg(dst, t);
            }
            Flow::Unary { .. } => return true,
            Flow::MemToMem { dst, src, len } => return self.fast_copy(table, dst, src, len),
            _ => return false,
        }
        self.writes += 1;
        true
    }

    pub fn counters(&self) -> (u64, u64) {
        (self.reads, self.writes)
    }
}

impl Tracker for TaintEngine {
    fn apply(&mut self, table: &ObjectTable, ev: &StepEvent) {
        self.step = ev.step;
        self.pc = ev.pc;
        if ev.fault.is_some() {
            return;
        }
        let generation = table.generation();
        for flow in &ev.flows {
            if self.record || !self.apply_fast(table, generation, flow) {
                self.apply_flow(table, flow);
            }
        }
    }

    /// Assigns coordinates; each new object starts with the OR of any spill
    /// taint beneath it, and that spill taint is then dropped.
    fn objects_born(&mut self, table: &ObjectTable, slots: &[Slot]) -> Result<(), CapacityError> {
        for &slot in slots {
            let o = table.get(slot);
            let i = slot.0 as usize;
            if self.coords.len() <= i {
                self.coords.resize(i + 1, None);
                self.ids.resize(i + 1, ObjectId(u32::MAX));
            }
            self.ids[i] = o.id;
            self.coords[i] = None;
            if o.read_only {
                continue;
            }
            let c = self.tags.assign_coordinate(o.id)?;
            self.coords[i] = Some(c);
            if let Some(a) = self.tags.spill_tainted_in(o.base, o.end()) {
                self.tags.write_tag(c, true);
                self.log_write(Rule::Absorb, &[TagRef::Spill(a)], TagRef::Object(o.id), true);
            }
        }
        for &slot in slots {
            let o = table.get(slot);
            self.tags.spill_fill(o.base, o.end(), false);
        }
        Ok(())
    }

    fn objects_died(&mut self, dead: &[(Slot, LiveObject)]) {
        for (slot, o) in dead {
            self.tags.release_coordinate(o.id);
            if let Some(c) = self.coords.get_mut(slot.0 as usize) {
                *c = None;
            }
        }
    }

    fn reg_tainted(&self, reg: Reg) -> bool {
        self.tags.reg(reg)
    }

    fn range_tainted(&self, table: &ObjectTable, addr: u32, len: u32) -> bool {
        table.segments(addr, len).any(|seg| match seg.slot {
            Some(slot) => self.object_tag(slot),
            None => self.tags.spill_tainted_in(seg.start, seg.end).is_some(),
        })
    }

    fn object_tainted(&self, _table: &ObjectTable, slot: Slot) -> bool {
        self.object_tag(slot)
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
        &self.log
    }

    fn range_sources(&self, table: &ObjectTable, addr: u32, len: u32) -> Vec<TagRef> {
        let mut out = Vec::new();
        for seg in table.segments(addr, len) {
            match seg.slot {
                Some(slot) if self.object_tag(slot) => out.push(TagRef::Object(self.id(slot))),
                Some(_) => {}
                None => {
                    if let Some(a) = self.tags.spill_tainted_in(seg.start, seg.end) {
                        out.push(TagRef::Spill(a));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::Opcode;
    use crate::objects::load_object_table;
    use crate::vm::{ArithRhs, Flow, StepEvent};

    const TABLE: &str = "\
global n 0x00002000 4
global buf 0x00002010 16
global src 0x00003000 1024
global dst 0x00004000 1024
global a 0x00005000 8
global b 0x00005008 8
global c 0x00005010 8
global table 0x00006000 16
";

    struct Rig {
        table: ObjectTable,
        eng: TaintEngine,
        step: u64,
    }

    impl Rig {
        fn new() -> Rig {
            let table = load_object_table(TABLE).unwrap();
            let mut eng = TaintEngine::default();
            let slots: Vec<Slot> = table.live_objects().map(|(s, _)| s).collect();
            eng.objects_born(&table, &slots).unwrap();
            Rig { table, eng, step: 0 }
        }

        fn run(&mut self, flows: &[Flow]) {
            self.step += 1;
            let mut ev = StepEvent::new(self.step, 0, Opcode::Mov);
            ev.flows.extend(flows.iter().cloned());
            self.eng.apply(&self.table, &ev);
        }

        fn obj(&self, name: &str) -> bool {
            let rec = self.table.record_by_name(name).unwrap();
            let (slot, _) = self.table.live_objects().find(|(_, o)| o.record == Some(rec.id)).unwrap();
            self.eng.object_tag(slot)
        }

        fn addr(&self, name: &str) -> u32 {
            match self.table.record_by_name(name).unwrap().location {
                crate::objects::Location::Address(a) => a,
                _ => unreachable!(),
            }
        }

        fn taint(&mut self, name: &str) {
            let (a, n) = (self.addr(name), self.table.record_by_name(name).unwrap().size);
            self.run(&[Flow::Input { addr: a, len: n, source: SourceKind::Stdin }]);
        }

        fn writes(&self) -> u64 {
            self.eng.shadow_writes()
        }
    }

    fn r(n: u8) -> Reg {
        Reg::gp(n)
    }

    #[test]
    fn input_marks_once_per_object() {
        let mut rig = Rig::new();
        let before = rig.writes();
        rig.run(&[Flow::Input { addr: 0x3000, len: 1024, source: SourceKind::Net }]);
        assert_eq!(rig.writes() - before, 1);
        assert!(rig.obj("src"));

        let before = rig.writes();
        rig.run(&[Flow::Input { addr: 0x5004, len: 8, source: SourceKind::Net }]);
        assert_eq!(rig.writes() - before, 2);
        assert!(rig.obj("a") && rig.obj("b"));

        let before = rig.writes();
        rig.run(&[Flow::Input { addr: 0x2004, len: 7, source: SourceKind::Net }]);
        assert_eq!(rig.writes() - before, 7);
        assert!(rig.eng.tags.spill_read(0x2004) && rig.eng.tags.spill_read(0x200a));
    }

    #[test]
    fn disabled_source_is_untainted() {
        let mut rig = Rig::new();
        let mut set = SourceSet::ALL;
        set.set(SourceKind::Env, false);
        rig.eng.set_sources(set);
        rig.run(&[Flow::Input { addr: 0x3000, len: 1024, source: SourceKind::Env }]);
        assert!(!rig.obj("src"));
    }

    #[test]
    fn move_rules() {
        let mut rig = Rig::new();
        rig.eng.tags.set_reg(r(1), true);
        rig.run(&[Flow::RegToMem { addr: 0x2000, len: 4, src: r(1) }]);
        assert!(rig.obj("n"));
        rig.run(&[Flow::RegToMem { addr: 0x2000, len: 4, src: r(2) }]);
        assert!(!rig.obj("n"));
        // partial tainted write taints the whole buffer
        rig.run(&[Flow::RegToMem { addr: 0x2015, len: 1, src: r(1) }]);
        assert!(rig.obj("buf"));
        // partial untainted write does not lower it
        rig.run(&[Flow::RegToMem { addr: 0x2010, len: 4, src: r(2) }]);
        assert!(rig.obj("buf"));
    }

    #[test]
    fn const_rules() {
        let mut rig = Rig::new();
        rig.eng.tags.set_reg(r(3), true);
        rig.run(&[Flow::ConstToReg { dst: r(3) }]);
        assert!(!rig.eng.reg_tainted(r(3)));
        rig.taint("n");
        rig.run(&[Flow::ConstToMem { addr: 0x2000, len: 4 }]);
        assert!(!rig.obj("n"));
        rig.taint("buf");
        rig.run(&[Flow::ConstToMem { addr: 0x2010, len: 1 }]);
        assert!(rig.obj("buf"));
    }

    #[test]
    fn arith_unary_and_zero_idioms() {
        let mut rig = Rig::new();
        rig.eng.tags.set_reg(r(1), true);
        rig.run(&[Flow::Arith { dst: r(0), rhs: ArithRhs::Reg(r(1)) }]);
        assert!(rig.eng.reg_tainted(r(0)));
        rig.run(&[Flow::Arith { dst: r(4), rhs: ArithRhs::Reg(r(5)) }]);
        assert!(!rig.eng.reg_tainted(r(4)));
        rig.eng.tags.set_reg(r(3), true);
        rig.run(&[Flow::Arith { dst: r(1), rhs: ArithRhs::Reg(r(3)) }]);
        assert!(rig.eng.reg_tainted(r(1)));
        rig.taint("n");
        rig.run(&[Flow::Arith { dst: r(6), rhs: ArithRhs::Mem { addr: 0x2000, len: 4 } }]);
        assert!(rig.eng.reg_tainted(r(6)));

        for _ in 0..100 {
            rig.run(&[Flow::Unary { dst: r(1) }]);
        }
        assert!(rig.eng.reg_tainted(r(1)));
        rig.run(&[Flow::Unary { dst: r(7) }]);
        assert!(!rig.eng.reg_tainted(r(7)));

        rig.eng.tags.set_reg(r(2), true);
        rig.run(&[Flow::ZeroIdiom { dst: r(2) }]);
        assert!(!rig.eng.reg_tainted(r(2)));
        rig.eng.tags.set_reg(r(5), true);
        rig.run(&[Flow::ZeroIdiom { dst: r(5) }]);
        assert!(!rig.eng.reg_tainted(r(5)));
    }

    #[test]
    fn copy_reads_once_and_writes_once() {
        let mut rig = Rig::new();
        rig.taint("src");
        let (r0, w0) = rig.eng.counters();
        rig.run(&[Flow::MemToMem { dst: 0x4000, src: 0x3000, len: 1024 }]);
        let (r1, w1) = rig.eng.counters();
        assert_eq!((r1 - r0, w1 - w0), (1, 1));
        assert!(rig.obj("dst"));
        // untainted source with full coverage clears
        rig.run(&[Flow::MemToMem { dst: 0x4000, src: 0x5000, len: 8 }]);
        assert!(rig.obj("dst"));
        rig.run(&[Flow::Input { addr: 0x5000, len: 8, source: SourceKind::Stdin }]);
        rig.run(&[Flow::ConstToMem { addr: 0x5000, len: 8 }]);
        rig.run(&[Flow::MemToMem { dst: 0x5008, src: 0x5000, len: 8 }]);
        assert!(!rig.obj("b"));
    }

    #[test]
    fn copy_uses_per_segment_source_slices() {
        let mut rig = Rig::new();
        // source: first 8 bytes of src tainted only if src is; use a/b/c
        rig.taint("a");
        // copy a,b (16 bytes) onto b,c: b gets a's tag, c gets b's (clean)
        rig.run(&[Flow::MemToMem { dst: 0x5008, src: 0x5000, len: 16 }]);
        assert!(rig.obj("b"));
        assert!(!rig.obj("c"));
    }

    #[test]
    fn memset_rules() {
        let mut rig = Rig::new();
        rig.taint("buf");
        rig.run(&[Flow::ConstToMem { addr: 0x2010, len: 16 }]);
        assert!(!rig.obj("buf"));
        rig.eng.tags.set_reg(r(1), true);
        rig.run(&[Flow::RegToMem { addr: 0x2010, len: 16, src: r(1) }]);
        assert!(rig.obj("buf"));
        rig.run(&[Flow::ConstToMem { addr: 0x2010, len: 8 }]);
        assert!(rig.obj("buf"));
    }

    #[test]
    fn indexed_load_ors_index_taint() {
        let mut rig = Rig::new();
        rig.eng.tags.set_reg(r(1), true);
        rig.run(&[Flow::MemToReg { dst: r(2), addr: 0x6004, len: 4, index: Some(r(1)) }]);
        assert!(rig.eng.reg_tainted(r(2)));
        rig.run(&[Flow::MemToReg { dst: r(2), addr: 0x6004, len: 4, index: Some(r(3)) }]);
        assert!(!rig.eng.reg_tainted(r(2)));
        rig.taint("table");
        rig.run(&[Flow::MemToReg { dst: r(2), addr: 0x6004, len: 4, index: Some(r(3)) }]);
        assert!(rig.eng.reg_tainted(r(2)));
    }

    #[test]
    fn frame_exit_clears_recycled_slot() {
        let mut table = load_object_table("local f x -8 4").unwrap();
        let mut eng = TaintEngine::default();
        let born: Vec<Slot> = table.enter_frame_slots("f", 0xF_0000).into_iter().map(|(s, _)| s).collect();
        eng.objects_born(&table, &born).unwrap();
        let mut ev = StepEvent::new(1, 0, Opcode::Readinput);
        ev.flows.push(Flow::Input { addr: 0xF_0000 - 8, len: 4, source: SourceKind::Stdin });
        eng.apply(&table, &ev);
        assert!(eng.object_tag(born[0]));
        let dead = table.exit_frame(1);
        eng.objects_died(&dead);
        let born: Vec<Slot> = table.enter_frame_slots("f", 0xF_0000).into_iter().map(|(s, _)| s).collect();
        eng.objects_born(&table, &born).unwrap();
        assert!(!eng.object_tag(born[0]));
    }

    #[test]
    fn new_objects_absorb_spill_taint() {
        let mut table = load_object_table("local f x -8 4").unwrap();
        let mut eng = TaintEngine::default();
        let mut ev = StepEvent::new(1, 0, Opcode::Readinput);
        ev.flows.push(Flow::Input { addr: 0xF_0000 - 8, len: 2, source: SourceKind::Stdin });
        eng.apply(&table, &ev);
        assert!(eng.tags.spill_read(0xF_0000 - 8));
        let born: Vec<Slot> = table.enter_frame_slots("f", 0xF_0000).into_iter().map(|(s, _)| s).collect();
        eng.objects_born(&table, &born).unwrap();
        assert!(eng.object_tag(born[0]));
        assert!(!eng.tags.spill_read(0xF_0000 - 8));
    }

    #[test]
    fn provenance_text_and_chain() {
        let mut rig = Rig::new();
        rig.taint("src");
        rig.run(&[Flow::MemToMem { dst: 0x4000, src: 0x3000, len: 1024 }]);
        rig.run(&[Flow::MemToReg { dst: r(1), addr: 0x4000, len: 4, index: None }]);
        let log = rig.eng.provenance();
        assert_eq!(log.len() as u64, rig.eng.shadow_writes());
        let text = provenance_text(log);
        assert!(text.ends_with("1 mark - -> o2 1\n2 copy o2 -> o3 1\n3 move o3 -> r1 1\n"), "{text}");
        let chain = taint_chain(log, TagRef::Reg(r(1)));
        let rules: Vec<Rule> = chain.iter().map(|e| e.rule).collect();
        assert_eq!(rules, vec![Rule::Mark, Rule::Copy, Rule::Move]);
    }

    #[test]
    fn every_flow_maps_to_one_rule() {
        let flows = [
            Flow::ConstToReg { dst: r(0) },
            Flow::RegToReg { dst: r(0), src: r(1) },
            Flow::MemToReg { dst: r(0), addr: 0, len: 4, index: None },
            Flow::MemToReg { dst: r(0), addr: 0, len: 4, index: Some(r(1)) },
            Flow::RegToMem { addr: 0, len: 4, src: r(0) },
            Flow::ConstToMem { addr: 0, len: 4 },
            Flow::MemToMem { dst: 0, src: 4, len: 4 },
            Flow::MergeToMem { dst: 0, len: 4, src: 4, src_len: 4 },
            Flow::Arith { dst: r(0), rhs: ArithRhs::Const },
            Flow::ZeroIdiom { dst: r(0) },
            Flow::Unary { dst: r(0) },
            Flow::Input { addr: 0, len: 1, source: SourceKind::Stdin },
        ];
        for f in &flows {
            let rule = Rule::of(f, &SourceSet::ALL);
            assert!(Rule::ALL.contains(&rule));
            assert_ne!(rule, Rule::ControlOnly);
        }
    }
}
