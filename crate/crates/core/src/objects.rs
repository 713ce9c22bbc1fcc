//! Object table: per-variable location and size metadata, and runtime
//! resolution of addresses to live objects.
//!
//! Records come from a sidecar text file, one per line:
//!
//! ```text
//! global <name> <hex-address> <size>
//! local  <function> <name> <signed-fp-offset> <size>
//! member <parent-name> <name> <offset-within-parent> <size>
//! ```
//!
//! Blank lines and `#` comments are ignored. Globals are live as soon as
//! the table is loaded; locals are instantiated per call frame against the
//! frame pointer; heap objects are registered per allocation. Address
//! resolution returns the innermost (most deeply nested) live object.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::isa::Reg;
use crate::layout::{Layout, BOUNDARY_TAG_SIZE};

pub type RecordId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ObjectRegion {
    Global,
    StackLocal,
    Heap,
    Register,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Address(u32),
    FpOffset(i32),
    Register(Reg),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectRecord {
    pub id: RecordId,
    pub name: String,
    pub region: ObjectRegion,
    pub location: Location,
    pub size: u32,
    pub owner: Option<String>,
    pub parent: Option<RecordId>,
    /// 0 for top-level records, parent's nesting + 1 for members.
    pub nesting: u8,
}

impl ObjectRecord {
    /// Offset of this record relative to its top-level ancestor's
    /// location, for range checks during loading.
    fn span(&self) -> (i64, i64) {
        let start = match self.location {
            Location::Address(a) => i64::from(a),
            Location::FpOffset(o) => i64::from(o),
            Location::Register(_) => 0,
        };
        (start, start + i64::from(self.size))
    }
}

/// Kinds of allocator or call metadata the policy treats as control data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControlKind {
    ReturnAddress,
    BoundaryTag,
    /// Present in the policy model; the VM has no setjmp/longjmp, so no
    /// object of this kind is ever created.
    LongjmpBuf,
}

/// Identity of one live object instance. Unique over a run: two frames of
/// the same function get different ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ObjectId(pub u32);

/// Slab handle for a live object; valid until the object dies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot(pub u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiveObject {
    pub id: ObjectId,
    pub record: Option<RecordId>,
    pub region: ObjectRegion,
    pub base: u32,
    pub size: u32,
    pub nesting: u8,
    pub frame_depth: Option<usize>,
    pub control: Option<ControlKind>,
    pub read_only: bool,
}

impl LiveObject {
    pub fn end(&self) -> u32 {
        self.base + self.size
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && addr < self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct ObjectTableError {
    pub line: usize,
    pub kind: ObjectTableErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObjectTableErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("object `{0}` must have size >= 1")]
    ZeroSize(String),
    #[error("object `{0}` wraps the 32-bit address space")]
    Wraps(String),
    #[error("unknown parent `{0}`")]
    UnknownParent(String),
    #[error("member `{0}` extends past its parent `{1}`")]
    MemberOutsideParent(String, String),
    #[error("`{0}` overlaps sibling `{1}`")]
    OverlappingSiblings(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeapError {
    #[error("free of {0:#010x}, which is not a live heap object")]
    DoubleFree(u32),
}

/// A maximal address range that resolves to one object (or to none).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: u32,
    pub end: u32,
    pub slot: Option<Slot>,
}

#[derive(Debug, Clone, Copy)]
struct IndexEntry {
    base: u32,
    end: u32,
    nesting: u8,
    depth: usize,
    slot: u32,
}

#[derive(Debug, Clone)]
pub struct ObjectTable {
    records: Vec<ObjectRecord>,
    locals_by_fn: HashMap<String, Arc<[RecordId]>>,
    layout: Layout,
    live: Vec<Option<LiveObject>>,
    free_slots: Vec<u32>,
    index: Vec<IndexEntry>,
    frames: Vec<Vec<Slot>>,
    spare_frames: Vec<Vec<Slot>>,
    /// payload base -> (payload slot, boundary tag slot)
    heap: BTreeMap<u32, (Slot, Slot)>,
    next_id: u32,
    generation: u64,
    overlaps: u64,
    max_size: u32,
}

fn parse_int(text: &str) -> Option<i64> {
    let (neg, body) = match text.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, text.strip_prefix('+').unwrap_or(text)),
    };
    let v = match body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        Some(hex) => i64::from_str_radix(hex, 16).ok()?,
        None => body.parse::<i64>().ok()?,
    };
    Some(if neg { -v } else { v })
}

fn parse_hex(text: &str) -> Option<u32> {
    let body = text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")).unwrap_or(text);
    u32::from_str_radix(body, 16).ok()
}

/// Parses an object-table file.
pub fn load_object_table(text: &str) -> Result<ObjectTable, ObjectTableError> {
    load_object_table_with_layout(text, Layout::default())
}

pub fn load_object_table_with_layout(text: &str, layout: Layout) -> Result<ObjectTable, ObjectTableError> {
    let mut records: Vec<ObjectRecord> = Vec::new();
    let mut by_name: HashMap<String, RecordId> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        let bad = |msg: &str| ObjectTableError { line, kind: ObjectTableErrorKind::Syntax(msg.to_string()) };
        let size_of = |s: &str| -> Result<u32, ObjectTableError> {
            parse_int(s).and_then(|v| u32::try_from(v).ok()).ok_or_else(|| bad(&format!("bad size `{s}`")))
        };
        let id = records.len();
        let record = match fields.as_slice() {
            ["global", name, addr, size] => {
                let addr = parse_hex(addr).ok_or_else(|| bad(&format!("bad hex address `{addr}`")))?;
                ObjectRecord {
                    id,
                    name: name.to_string(),
                    region: ObjectRegion::Global,
                    location: Location::Address(addr),
                    size: size_of(size)?,
                    owner: None,
                    parent: None,
                    nesting: 0,
                }
            }
            ["local", function, name, offset, size] => {
                let off = parse_int(offset)
                    .and_then(|v| i32::try_from(v).ok())
                    .ok_or_else(|| bad(&format!("bad frame offset `{offset}`")))?;
                ObjectRecord {
                    id,
                    name: name.to_string(),
                    region: ObjectRegion::StackLocal,
                    location: Location::FpOffset(off),
                    size: size_of(size)?,
                    owner: Some(function.to_string()),
                    parent: None,
                    nesting: 0,
                }
            }
            ["member", parent_name, name, offset, size] => {
                let Some(&pid) = by_name.get(*parent_name) else {
                    return Err(ObjectTableError {
                        line,
                        kind: ObjectTableErrorKind::UnknownParent(parent_name.to_string()),
                    });
                };
                let parent = &records[pid];
                let off = parse_int(offset)
                    .filter(|v| *v >= 0)
                    .and_then(|v| u32::try_from(v).ok())
                    .ok_or_else(|| bad(&format!("bad member offset `{offset}`")))?;
                let location = match parent.location {
                    Location::Address(a) => Location::Address(a.wrapping_add(off)),
                    Location::FpOffset(o) => Location::FpOffset(o.wrapping_add(off as i32)),
                    Location::Register(r) => Location::Register(r),
                };
                let size = size_of(size)?;
                if u64::from(off) + u64::from(size) > u64::from(parent.size) {
                    return Err(ObjectTableError {
                        line,
                        kind: ObjectTableErrorKind::MemberOutsideParent(name.to_string(), parent.name.clone()),
                    });
                }
                ObjectRecord {
                    id,
                    name: name.to_string(),
                    region: parent.region,
                    location,
                    size,
                    owner: parent.owner.clone(),
                    parent: Some(pid),
                    nesting: parent.nesting + 1,
                }
            }
            [kw, ..] if ["global", "local", "member"].contains(kw) => {
                return Err(bad(&format!("wrong number of fields for `{kw}`")))
            }
            [kw, ..] => return Err(bad(&format!("unknown record kind `{kw}`"))),
            [] => unreachable!(),
        };
        if record.size == 0 {
            return Err(ObjectTableError { line, kind: ObjectTableErrorKind::ZeroSize(record.name) });
        }
        if let Location::Address(a) = record.location {
            if u64::from(a) + u64::from(record.size) > u64::from(u32::MAX) + 1 {
                return Err(ObjectTableError { line, kind: ObjectTableErrorKind::Wraps(record.name) });
            }
        }
        let (start, end) = record.span();
        let clash = records.iter().find(|other| {
            other.parent == record.parent && other.region == record.region && other.owner == record.owner && {
                let (s, e) = other.span();
                s < end && start < e
            }
        });
        if let Some(other) = clash {
            return Err(ObjectTableError {
                line,
                kind: ObjectTableErrorKind::OverlappingSiblings(record.name.clone(), other.name.clone()),
            });
        }
        by_name.insert(record.name.clone(), id);
        records.push(record);
    }
    Ok(ObjectTable::new(records, layout))
}

impl ObjectTable {
    /// Builds a table from validated records; globals become live at once.
    pub fn new(records: Vec<ObjectRecord>, layout: Layout) -> ObjectTable {
        let mut locals_by_fn: HashMap<String, Vec<RecordId>> = HashMap::new();
        for r in &records {
            if let (ObjectRegion::StackLocal, Some(owner)) = (r.region, &r.owner) {
                locals_by_fn.entry(owner.clone()).or_default().push(r.id);
            }
        }
        let mut table = ObjectTable {
            records,
            locals_by_fn: locals_by_fn.into_iter().map(|(k, v)| (k, Arc::from(v))).collect(),
            layout,
            live: Vec::new(),
            free_slots: Vec::new(),
            index: Vec::new(),
            frames: Vec::new(),
            spare_frames: Vec::new(),
            heap: BTreeMap::new(),
            next_id: 0,
            generation: 0,
            overlaps: 0,
            max_size: 0,
        };
        let globals: Vec<(RecordId, u32, u32, u8)> = table
            .records
            .iter()
            .filter_map(|r| match (r.region, r.location) {
                (ObjectRegion::Global, Location::Address(a)) => Some((r.id, a, r.size, r.nesting)),
                _ => None,
            })
            .collect();
        for (id, base, size, nesting) in globals {
            let read_only = table.layout.is_read_only(base);
            table.insert(LiveObject {
                id: ObjectId(0),
                record: Some(id),
                region: ObjectRegion::Global,
                base,
                size,
                nesting,
                frame_depth: None,
                control: None,
                read_only,
            });
        }
        table
    }

    pub fn empty() -> ObjectTable {
        ObjectTable::new(Vec::new(), Layout::default())
    }

    pub fn records(&self) -> &[ObjectRecord] {
        &self.records
    }

    pub fn record(&self, id: RecordId) -> &ObjectRecord {
        &self.records[id]
    }

    pub fn record_by_name(&self, name: &str) -> Option<&ObjectRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Bumped on every change to the set of live objects.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Bumped whenever a top-level object is born over live memory, the
    /// only way a birth can change how already-resolved bytes resolve.
    pub fn overlap_epoch(&self) -> u64 {
        self.overlaps
    }

    pub fn frame_depth(&self) -> usize {
        self.frames.len()
    }

    pub fn get(&self, slot: Slot) -> &LiveObject {
        self.live[slot.0 as usize].as_ref().expect("stale slot")
    }

    pub fn try_get(&self, slot: Slot) -> Option<&LiveObject> {
        self.live.get(slot.0 as usize)?.as_ref()
    }

    pub fn live_objects(&self) -> impl Iterator<Item = (Slot, &LiveObject)> {
        self.live.iter().enumerate().filter_map(|(i, o)| o.as_ref().map(|o| (Slot(i as u32), o)))
    }

    pub fn live_count(&self) -> usize {
        self.index.len()
    }

    /// Human-readable name of a live object.
    pub fn describe(&self, obj: &LiveObject) -> String {
        match (obj.record, obj.control) {
            (Some(r), _) => {
                let rec = &self.records[r];
                match &rec.owner {
                    Some(f) => format!("{f}:{}", rec.name),
                    None => rec.name.clone(),
                }
            }
            (None, Some(ControlKind::ReturnAddress)) => format!("ret@{:#010x}", obj.base),
            (None, Some(ControlKind::BoundaryTag)) => format!("tag@{:#010x}", obj.base),
            (None, Some(ControlKind::LongjmpBuf)) => format!("jmpbuf@{:#010x}", obj.base),
            (None, None) => format!("heap@{:#010x}", obj.base),
        }
    }

    fn insert(&mut self, mut obj: LiveObject) -> (Slot, LiveObject) {
        obj.id = ObjectId(self.next_id);
        self.next_id += 1;
        if obj.nesting == 0 && self.overlaps_live(obj.base, obj.end()) {
            self.overlaps += 1;
        }
        let slot = match self.free_slots.pop() {
            Some(s) => s,
            None => {
                self.live.push(None);
                self.live.len() as u32 - 1
            }
        };
        let depth = obj.frame_depth.unwrap_or(0);
        let entry = IndexEntry { base: obj.base, end: obj.end(), nesting: obj.nesting, depth, slot };
        let key = (entry.base, entry.nesting, entry.depth);
        let pos = self.index.partition_point(|e| (e.base, e.nesting, e.depth) <= key);
        self.index.insert(pos, entry);
        self.max_size = self.max_size.max(obj.size);
        self.live[slot as usize] = Some(obj.clone());
        self.generation += 1;
        (Slot(slot), obj)
    }

    fn overlaps_live(&self, base: u32, end: u32) -> bool {
        let upper = self.index.partition_point(|e| e.base < end);
        let floor = base.saturating_sub(self.max_size);
        base < end
            && self.index[..upper].iter().rev().take_while(|e| e.base >= floor).any(|e| e.base < e.end && e.end > base)
    }

    fn remove(&mut self, slot: Slot) -> LiveObject {
        let obj = self.live[slot.0 as usize].take().expect("stale slot");
        if let Some(pos) = self.index.iter().position(|e| e.slot == slot.0) {
            self.index.remove(pos);
        }
        self.free_slots.push(slot.0);
        self.generation += 1;
        obj
    }

    /// Opens a new frame and instantiates the function's locals against
    /// `fp`. Unknown functions get an empty frame.
    pub fn enter_frame(&mut self, function: &str, fp: u32) -> Vec<LiveObject> {
        self.enter_frame_slots(function, fp).into_iter().map(|(_, o)| o).collect()
    }

    pub fn enter_frame_slots(&mut self, function: &str, fp: u32) -> Vec<(Slot, LiveObject)> {
        let mut slots = Vec::new();
        self.enter_frame_into(&self.locals_of(function), fp, &mut slots);
        slots.into_iter().map(|s| (s, self.get(s).clone())).collect()
    }

    /// Record ids of the locals of `function`, for [`Self::enter_frame_into`].
    pub fn locals_of(&self, function: &str) -> Arc<[RecordId]> {
        self.locals_by_fn.get(function).cloned().unwrap_or_else(|| Arc::from([]))
    }

    /// Opens a frame with the given locals, appending the new slots to `out`.
    pub fn enter_frame_into(&mut self, locals: &[RecordId], fp: u32, out: &mut Vec<Slot>) {
        let mut frame = self.spare_frames.pop().unwrap_or_default();
        frame.clear();
        self.frames.push(frame);
        let depth = self.frames.len();
        for &id in locals {
            let rec = &self.records[id];
            let Location::FpOffset(off) = rec.location else { continue };
            let base = fp.wrapping_add(off as u32);
            if u64::from(base) + u64::from(rec.size) > u64::from(u32::MAX) + 1 {
                continue;
            }
            let obj = LiveObject {
                id: ObjectId(0),
                record: Some(id),
                region: ObjectRegion::StackLocal,
                base,
                size: rec.size,
                nesting: rec.nesting,
                frame_depth: Some(depth),
                control: None,
                read_only: false,
            };
            let (slot, _) = self.insert(obj);
            self.frames[depth - 1].push(slot);
            out.push(slot);
        }
    }

    /// Adds the hidden return-address object of the current frame.
    pub fn attach_return_slot(&mut self, addr: u32) -> (Slot, LiveObject) {
        let depth = self.frames.len();
        let obj = LiveObject {
            id: ObjectId(0),
            record: None,
            region: ObjectRegion::StackLocal,
            base: addr,
            size: 4,
            nesting: 0,
            frame_depth: Some(depth),
            control: Some(ControlKind::ReturnAddress),
            read_only: false,
        };
        let (slot, obj) = self.insert(obj);
        if let Some(frame) = self.frames.last_mut() {
            frame.push(slot);
        }
        (slot, obj)
    }

    /// Return-address object of the frame at `depth`, if any.
    pub fn return_slot(&self, depth: usize) -> Option<(Slot, &LiveObject)> {
        let frame = self.frames.get(depth.checked_sub(1)?)?;
        frame.iter().map(|&s| (s, self.get(s))).find(|(_, o)| o.control == Some(ControlKind::ReturnAddress))
    }

    /// Closes the frame at `depth` (must be the deepest), returning the
    /// objects that died.
    pub fn exit_frame(&mut self, depth: usize) -> Vec<(Slot, LiveObject)> {
        let mut dead = Vec::new();
        self.exit_frame_into(depth, &mut dead);
        dead
    }

    /// Closes frame `depth` if it is the innermost, appending its objects to `out`.
    pub fn exit_frame_into(&mut self, depth: usize, out: &mut Vec<(Slot, LiveObject)>) {
        if depth == 0 || depth != self.frames.len() {
            return;
        }
        let Some(slots) = self.frames.pop() else { return };
        let start = out.len();
        // Freed in reverse so the next frame of the same shape gets the same slots.
        for &s in slots.iter().rev() {
            let obj = self.remove(s);
            out.push((s, obj));
        }
        out[start..].reverse();
        self.spare_frames.push(slots);
    }

    /// Registers a heap chunk and its boundary tag, which sits in the 8
    /// bytes right before `base`.
    pub fn register_heap_object(&mut self, base: u32, size: u32) -> [(Slot, LiveObject); 2] {
        let payload = LiveObject {
            id: ObjectId(0),
            record: None,
            region: ObjectRegion::Heap,
            base,
            size,
            nesting: 0,
            frame_depth: None,
            control: None,
            read_only: false,
        };
        let tag = LiveObject {
            base: base - BOUNDARY_TAG_SIZE,
            size: BOUNDARY_TAG_SIZE,
            control: Some(ControlKind::BoundaryTag),
            ..payload.clone()
        };
        let p = self.insert(payload);
        let t = self.insert(tag);
        self.heap.insert(base, (p.0, t.0));
        [p, t]
    }

    pub fn unregister_heap_object(&mut self, base: u32) -> Result<[(Slot, LiveObject); 2], HeapError> {
        let (p, t) = self.heap.remove(&base).ok_or(HeapError::DoubleFree(base))?;
        Ok([(p, self.remove(p)), (t, self.remove(t))])
    }

    pub fn heap_chunk(&self, base: u32) -> Option<(Slot, Slot)> {
        self.heap.get(&base).copied()
    }

    /// Boundary tag of the chunk that follows `base` in the heap.
    pub fn next_heap_chunk(&self, base: u32) -> Option<(u32, Slot, Slot)> {
        self.heap.range(base + 1..).next().map(|(&b, &(p, t))| (b, p, t))
    }

    pub fn resolve_slot(&self, addr: u32) -> Option<Slot> {
        let upper = self.index.partition_point(|e| e.base <= addr);
        let floor = addr.saturating_sub(self.max_size);
        for e in self.index[..upper].iter().rev() {
            if e.base < floor {
                break;
            }
            if addr < e.end {
                return Some(Slot(e.slot));
            }
        }
        None
    }

    /// Innermost live object containing `addr`.
    pub fn resolve(&self, addr: u32) -> Option<LiveObject> {
        self.resolve_slot(addr).map(|s| self.get(s).clone())
    }

    /// The segment starting at `addr` and ending no later than `limit`.
    pub fn segment(&self, addr: u32, limit: u32) -> Segment {
        let slot = self.resolve_slot(addr);
        let mut end = limit;
        if let Some(s) = slot {
            end = end.min(self.get(s).end());
        }
        let next = self.index.partition_point(|e| e.base <= addr);
        if let Some(e) = self.index.get(next) {
            end = end.min(e.base);
        }
        Segment { start: addr, end, slot }
    }

    /// Splits `[addr, addr+len)` into maximal single-object segments.
    pub fn segments(&self, addr: u32, len: u32) -> SegmentIter<'_> {
        SegmentIter { table: self, cursor: u64::from(addr), end: u64::from(addr) + u64::from(len) }
    }

    /// Objects (innermost) intersecting `[addr, addr+len)`, in address order.
    pub fn intersecting(&self, addr: u32, len: u32) -> Vec<Slot> {
        let mut out: Vec<Slot> = Vec::new();
        for seg in self.segments(addr, len) {
            if let Some(s) = seg.slot {
                if !out.contains(&s) {
                    out.push(s);
                }
            }
        }
        out
    }

    /// Whether `ancestor` contains `slot`'s record through member nesting.
    pub fn is_ancestor(&self, ancestor: Slot, slot: Slot) -> bool {
        let a = self.get(ancestor);
        let mut cur = self.get(slot).record;
        while let Some(r) = cur {
            let parent = self.records[r].parent;
            if parent.is_some() && parent == a.record {
                let o = self.get(slot);
                return a.base <= o.base && o.end() <= a.end();
            }
            cur = parent;
        }
        false
    }

    /// Canonical dump of the records, one line each (used by golden tests).
    pub fn dump_records(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let loc = match r.location {
                Location::Address(a) => format!("{a:#010x}"),
                Location::FpOffset(o) => format!("fp{o:+}"),
                Location::Register(reg) => reg.to_string(),
            };
            let _ = writeln!(
                out,
                "{} {} {:?} {} size={} owner={} parent={}",
                r.id,
                r.name,
                r.region,
                loc,
                r.size,
                r.owner.as_deref().unwrap_or("-"),
                r.parent.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
            );
        }
        out
    }
}

pub struct SegmentIter<'a> {
    table: &'a ObjectTable,
    cursor: u64,
    end: u64,
}

impl Iterator for SegmentIter<'_> {
    type Item = Segment;

    fn next(&mut self) -> Option<Segment> {
        if self.cursor >= self.end {
            return None;
        }
        let addr = self.cursor as u32;
        let limit = self.end.min(u64::from(u32::MAX)) as u32;
        let mut seg = self.table.segment(addr, limit);
        if seg.end <= seg.start {
            // Only possible at the very top of the address space.
            seg.end = seg.start.saturating_add(1);
            self.cursor = self.end;
        } else {
            self.cursor = u64::from(seg.end);
        }
        Some(seg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const STRUCT_TABLE: &str = "\
# a struct with an array member and an int member
global rec 0x00002000 20
member rec buf 0 16
member rec count 16 4
global g_flag 0x00001000 4
global after 0x00001010 8
local f buf -20 16
local f n -24 4
";

    #[test]
    fn single_global_record() {
        let t = load_object_table("global g_flag 0x00001000 4").unwrap();
        assert_eq!(t.records().len(), 1);
        let r = &t.records()[0];
        assert_eq!(r.region, ObjectRegion::Global);
        assert_eq!(r.location, Location::Address(0x1000));
        assert_eq!(r.size, 4);
    }

    #[test]
    fn struct_members_become_child_records() {
        let t = load_object_table(STRUCT_TABLE).unwrap();
        let rec = t.record_by_name("rec").unwrap();
        let children: Vec<_> = t.records().iter().filter(|r| r.parent == Some(rec.id)).collect();
        assert_eq!(children.len(), 2);
        assert_eq!(children[0].location, Location::Address(0x2000));
        assert_eq!(children[1].location, Location::Address(0x2010));
        assert_eq!(children[0].nesting, 1);
    }

    #[test]
    fn golden_record_dump() {
        let t = load_object_table(STRUCT_TABLE).unwrap();
        let expected = "\
0 rec Global 0x00002000 size=20 owner=- parent=-
1 buf Global 0x00002000 size=16 owner=- parent=0
2 count Global 0x00002010 size=4 owner=- parent=0
3 g_flag Global 0x00001000 size=4 owner=- parent=-
4 after Global 0x00001010 size=8 owner=- parent=-
5 buf StackLocal fp-20 size=16 owner=f parent=-
6 n StackLocal fp-24 size=4 owner=f parent=-
";
        assert_eq!(t.dump_records(), expected);
    }

    #[test]
    fn member_past_parent_is_rejected() {
        let e = load_object_table("global s 0x2000 8\nmember s a 4 8").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(matches!(e.kind, ObjectTableErrorKind::MemberOutsideParent(..)));
    }

    #[test]
    fn overlapping_siblings_are_rejected() {
        let e = load_object_table("global s 0x2000 8\nmember s a 0 4\nmember s b 2 4").unwrap_err();
        assert!(matches!(e.kind, ObjectTableErrorKind::OverlappingSiblings(..)));
        let e = load_object_table("global a 0x2000 8\nglobal b 0x2004 8").unwrap_err();
        assert!(matches!(e.kind, ObjectTableErrorKind::OverlappingSiblings(..)));
        // Locals of different functions may share offsets.
        assert!(load_object_table("local f x -8 4\nlocal g y -8 4").is_ok());
    }

    #[test]
    fn syntax_errors_name_the_line() {
        let e = load_object_table("global ok 0x2000 4\n\nglobal bad zz 4").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(load_object_table("global z 0x2000 0").is_err());
        assert!(load_object_table("widget z 0x2000 4").is_err());
    }

    #[test]
    fn resolve_prefers_innermost_member() {
        let t = load_object_table(STRUCT_TABLE).unwrap();
        let name = |a: u32| t.resolve(a).map(|o| t.record(o.record.unwrap()).name.clone());
        assert_eq!(name(0x2005).as_deref(), Some("buf"));
        assert_eq!(name(0x2012).as_deref(), Some("count"));
        assert_eq!(name(0x1004), None); // gap between g_flag and after
        assert_eq!(name(0x1010).as_deref(), Some("after"));
    }

    #[test]
    fn enter_frame_resolves_against_fp() {
        let mut t = load_object_table(STRUCT_TABLE).unwrap();
        let objs = t.enter_frame("f", 0x000F_F000);
        let buf = objs.iter().find(|o| t.record(o.record.unwrap()).name == "buf").unwrap();
        assert_eq!(buf.base, 0x000F_EFEC);
        assert_eq!(buf.size, 16);
        assert_eq!(t.resolve(0x000F_EFEC + 3).unwrap().id, buf.id);
        assert!(t.enter_frame("nolocals", 0x000F_E000).is_empty());
    }

    #[test]
    fn frames_nest_and_exit_cleanly() {
        let mut t = load_object_table(STRUCT_TABLE).unwrap();
        let outer = t.enter_frame("f", 0x000F_F000);
        let inner = t.enter_frame("f", 0x000F_E000);
        let ob = outer.iter().find(|o| o.size == 16).unwrap().clone();
        let ib = inner.iter().find(|o| o.size == 16).unwrap().clone();
        assert_ne!(ob.id, ib.id);
        assert_ne!(ob.base, ib.base);
        // Exiting a non-deepest frame is refused.
        assert!(t.exit_frame(1).is_empty());
        assert_eq!(t.exit_frame(2).len(), 2);
        assert!(t.resolve(ib.base).is_none());
        assert_eq!(t.resolve(ob.base).unwrap().id, ob.id);
        assert_eq!(t.exit_frame(1).len(), 2);
        assert!(t.resolve(0x000F_F000 - 20).is_none());
        t.enter_frame("empty", 0x000F_0000);
        assert!(t.exit_frame(1).is_empty());
    }

    #[test]
    fn heap_objects_and_double_free() {
        let mut t = ObjectTable::empty();
        let [(_, payload), (_, tag)] = t.register_heap_object(0x0008_0008, 32);
        assert_eq!((payload.base, payload.size), (0x0008_0008, 32));
        assert_eq!((tag.base, tag.size, tag.control), (0x0008_0000, 8, Some(ControlKind::BoundaryTag)));
        assert!(t.unregister_heap_object(0x0008_0008).is_ok());
        assert_eq!(t.unregister_heap_object(0x0008_0008), Err(HeapError::DoubleFree(0x0008_0008)));
        assert!(t.resolve(0x0008_0010).is_none());
    }

    #[test]
    fn segments_split_at_object_edges() {
        let t = load_object_table(STRUCT_TABLE).unwrap();
        let segs: Vec<_> = t.segments(0x1ffe, 0x18).map(|s| (s.start, s.end, s.slot.is_some())).collect();
        assert_eq!(
            segs,
            vec![(0x1ffe, 0x2000, false), (0x2000, 0x2010, true), (0x2010, 0x2014, true), (0x2014, 0x2016, false)]
        );
    }

    #[test]
    fn exhaustive_sweep_matches_brute_force() {
        let t = load_object_table(STRUCT_TABLE).unwrap();
        let live: Vec<LiveObject> = t.live_objects().map(|(_, o)| o.clone()).collect();
        for addr in 0x0f00..0x2100u32 {
            let expected = live.iter().filter(|o| o.contains(addr)).max_by_key(|o| o.nesting).map(|o| o.id);
            assert_eq!(t.resolve(addr).map(|o| o.id), expected, "addr {addr:#x}");
            // repeated calls agree
            assert_eq!(t.resolve(addr).map(|o| o.id), expected);
        }
    }

    #[test]
    fn read_only_globals_are_flagged() {
        let t = load_object_table("global msg 0x00000100 8\nglobal g 0x00001000 4").unwrap();
        let flags: Vec<bool> = t.live_objects().map(|(_, o)| o.read_only).collect();
        assert_eq!(flags, vec![true, false]);
    }
}
