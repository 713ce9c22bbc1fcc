//! Exploit-detection policy: which input sources are untrusted, which
//! checks run, and the checks themselves.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::engine::{taint_chain, SourceSet, TagRef, Tracker};
use crate::isa::{Reg, SourceKind};
use crate::objects::{ObjectTable, Slot};
use crate::tags::{guarded_shadow_address, TAG_SPACE_BASE};
use crate::vm::{syscall, Control, Flow, Intrinsic, StepEvent, TargetSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Check {
    Branch,
    Format,
    Syscall,
    ControlData,
    NoncontrolBounds,
    /// Raised by the shadow-address guard; not switchable.
    ShadowGuard,
}

impl Check {
    pub const SWITCHABLE: [Check; 5] =
        [Check::Branch, Check::Format, Check::Syscall, Check::ControlData, Check::NoncontrolBounds];

    pub fn keyword(self) -> &'static str {
        match self {
            Check::Branch => "branch",
            Check::Format => "format",
            Check::Syscall => "syscall",
            Check::ControlData => "controldata",
            Check::NoncontrolBounds => "noncontrol",
            Check::ShadowGuard => "shadow",
        }
    }

    fn from_keyword(s: &str) -> Option<Check> {
        Check::SWITCHABLE.into_iter().find(|c| c.keyword() == s)
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

/// Ordered by precedence: CONTROL outranks NONCONTROL outranks SHADOW.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Shadow,
    Noncontrol,
    Control,
}

impl Severity {
    pub fn exit_code(self) -> i32 {
        match self {
            Severity::Control => 3,
            Severity::Noncontrol => 2,
            Severity::Shadow => 4,
        }
    }
}

/// Exit status for a finished run: 0 when nothing fired, otherwise the
/// code of the highest-severity report.
pub fn exit_code(reports: &[AttackReport]) -> i32 {
    reports.iter().map(|r| r.severity).max().map_or(0, Severity::exit_code)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyConfig {
    pub sources: SourceSet,
    checks: u8,
    pub watchlist: Vec<String>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { sources: SourceSet::ALL, checks: 0b1_1111, watchlist: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct PolicyError {
    pub line: usize,
    pub message: String,
}

impl PolicyConfig {
    pub fn none() -> PolicyConfig {
        PolicyConfig { sources: SourceSet::ALL, checks: 0, watchlist: Vec::new() }
    }

    pub fn enabled(&self, check: Check) -> bool {
        check == Check::ShadowGuard || self.checks & check.bit() != 0
    }

    pub fn set_check(&mut self, check: Check, on: bool) {
        if on {
            self.checks |= check.bit();
        } else {
            self.checks &= !check.bit();
        }
    }

    /// Parses a policy file. Starts from everything enabled; lines switch
    /// individual sources and checks.
    pub fn parse(text: &str) -> Result<PolicyConfig, PolicyError> {
        let mut cfg = PolicyConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| PolicyError { line, message };
            let switch = |s: &str| match s {
                "on" => Ok(true),
                "off" => Ok(false),
                other => Err(err(format!("expected on|off, got `{other}`"))),
            };
            let fields: Vec<&str> = content.split_whitespace().collect();
            match fields.as_slice() {
                ["source", kind, state] => {
                    let k = SourceKind::from_name(kind).ok_or_else(|| err(format!("unknown source `{kind}`")))?;
                    cfg.sources.set(k, switch(state)?);
                }
                ["check", name, state] => {
                    let c = Check::from_keyword(name).ok_or_else(|| err(format!("unknown check `{name}`")))?;
                    cfg.set_check(c, switch(state)?);
                }
                ["watch", name] => cfg.watchlist.push(name.to_string()),
                _ => return Err(err(format!("cannot parse `{content}`"))),
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReportObject {
    pub id: Option<u32>,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttackReport {
    pub policy: Check,
    pub severity: Severity,
    pub step: u64,
    pub pc: u32,
    pub instruction: String,
    pub objects: Vec<ReportObject>,
    pub taint_chain: Vec<String>,
    pub detail: String,
}

impl AttackReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn summary(&self) -> String {
        let objs: Vec<&str> = self.objects.iter().map(|o| o.name.as_str()).collect();
        format!(
            "{} [{}] step {} pc {}: {} ({}) objects: {}",
            self.severity_name(),
            self.policy,
            self.step,
            self.pc,
            self.detail,
            self.instruction,
            if objs.is_empty() { "-".to_string() } else { objs.join(", ") }
        )
    }

    fn severity_name(&self) -> &'static str {
        match self.severity {
            Severity::Control => "CONTROL",
            Severity::Noncontrol => "NONCONTROL",
            Severity::Shadow => "SHADOW",
        }
    }
}

/// What the checks can see of one step.
pub struct PolicyContext<'a> {
    pub table: &'a ObjectTable,
    pub tracker: &'a dyn Tracker,
    pub mem: &'a [u8],
    pub instruction: String,
}

impl PolicyContext<'_> {
    fn name_of(&self, r: TagRef) -> ReportObject {
        match r {
            TagRef::Reg(reg) => ReportObject { id: None, name: reg.to_string() },
            TagRef::Spill(a) => ReportObject { id: None, name: format!("spill@{a:#010x}") },
            TagRef::Object(id) => {
                let name = self
                    .table
                    .live_objects()
                    .find(|(_, o)| o.id == id)
                    .map(|(_, o)| self.table.describe(o))
                    .unwrap_or_else(|| format!("o{}", id.0));
                ReportObject { id: Some(id.0), name }
            }
        }
    }

    fn chain(&self, refs: &[TagRef]) -> Vec<String> {
        let log = self.tracker.provenance();
        let mut entries = Vec::new();
        for r in refs {
            for e in taint_chain(log, *r) {
                if !entries.contains(&e) {
                    entries.push(e);
                }
            }
        }
        entries.sort_by_key(|e| e.step);
        entries.iter().map(|e| e.to_string()).collect()
    }

    fn range_refs(&self, addr: u32, len: u32) -> Vec<TagRef> {
        self.tracker.range_sources(self.table, addr, len)
    }

    fn c_string_len(&self, addr: u32) -> u32 {
        let start = (addr as usize).min(self.mem.len());
        let rest = &self.mem[start..];
        rest.iter().position(|&b| b == 0).map_or(rest.len(), |n| n + 1) as u32
    }

    fn report(
        &self,
        ev: &StepEvent,
        policy: Check,
        severity: Severity,
        refs: &[TagRef],
        detail: String,
    ) -> AttackReport {
        AttackReport {
            policy,
            severity,
            step: ev.step,
            pc: ev.pc,
            instruction: self.instruction.clone(),
            objects: refs.iter().map(|r| self.name_of(*r)).collect(),
            taint_chain: self.chain(refs),
            detail,
        }
    }
}

/// Tainted indirect branch targets (JMP/CALL through a register or memory,
/// and every RET).
pub fn check_branch(ctx: &PolicyContext<'_>, ev: &StepEvent) -> Option<AttackReport> {
    let (via, what) = match ev.control? {
        Control::Jump { via, .. } => (via, "jump"),
        Control::Call { via, .. } => (via, "call"),
        Control::Return { ret_slot, .. } => (TargetSource::ReturnSlot { addr: ret_slot }, "return"),
        Control::Conditional { .. } => return None,
    };
    let refs = match via {
        TargetSource::Direct => return None,
        TargetSource::Reg(r) => {
            if !ctx.tracker.reg_tainted(r) {
                return None;
            }
            vec![TagRef::Reg(r)]
        }
        TargetSource::Mem { addr } | TargetSource::ReturnSlot { addr } => {
            if !ctx.tracker.range_tainted(ctx.table, addr, 4) {
                return None;
            }
            ctx.range_refs(addr, 4)
        }
    };
    Some(ctx.report(ev, Check::Branch, Severity::Control, &refs, format!("tainted {what} target")))
}

/// Tainted format strings, regardless of their content.
pub fn check_format(ctx: &PolicyContext<'_>, ev: &StepEvent) -> Option<AttackReport> {
    let Some(Intrinsic::Printf { fmt_addr, fmt_len, .. }) = ev.intrinsic else { return None };
    if !ctx.tracker.range_tainted(ctx.table, fmt_addr, fmt_len) {
        return None;
    }
    let refs = ctx.range_refs(fmt_addr, fmt_len);
    Some(ctx.report(ev, Check::Format, Severity::Control, &refs, "tainted format string".into()))
}

/// Tainted arguments to EXEC: the path register or the path string.
pub fn check_syscall(ctx: &PolicyContext<'_>, ev: &StepEvent) -> Option<AttackReport> {
    let Some(Intrinsic::Syscall { number, args }) = ev.intrinsic else { return None };
    if number != syscall::EXEC {
        return None;
    }
    let path_reg = Reg::gp(1);
    let mut refs = Vec::new();
    if ctx.tracker.reg_tainted(path_reg) {
        refs.push(TagRef::Reg(path_reg));
    }
    let len = ctx.c_string_len(args[0]);
    if len > 0 && ctx.tracker.range_tainted(ctx.table, args[0], len) {
        refs.extend(ctx.range_refs(args[0], len));
    }
    if refs.is_empty() {
        return None;
    }
    Some(ctx.report(ev, Check::Syscall, Severity::Control, &refs, "tainted exec argument".into()))
}

/// On FREE: tainted boundary tags of the chunk or its successor, and
/// frees of pointers that are not live chunks.
pub fn check_heap_free(ctx: &PolicyContext<'_>, ev: &StepEvent) -> Option<AttackReport> {
    let Some(Intrinsic::Free { base, valid, .. }) = ev.intrinsic else { return None };
    if !valid {
        return Some(ctx.report(
            ev,
            Check::ControlData,
            Severity::Control,
            &[],
            format!("free of {base:#010x}, which is not a live chunk (double free)"),
        ));
    }
    let mut tags: Vec<Slot> = Vec::new();
    if let Some((_, tag)) = ctx.table.heap_chunk(base) {
        tags.push(tag);
    }
    if let Some((_, _, tag)) = ctx.table.next_heap_chunk(base) {
        tags.push(tag);
    }
    let tainted: Vec<Slot> = tags.into_iter().filter(|&s| ctx.tracker.object_tainted(ctx.table, s)).collect();
    if tainted.is_empty() {
        return None;
    }
    let refs: Vec<TagRef> = tainted.iter().map(|&s| TagRef::Object(ctx.table.get(s).id)).collect();
    Some(ctx.report(ev, Check::ControlData, Severity::Control, &refs, "tainted heap boundary tag at free".into()))
}

/// Tainted writes that run past the object they start in, and tainted
/// writes into watched objects.
pub fn check_bounds_write(ctx: &PolicyContext<'_>, cfg: &PolicyConfig, ev: &StepEvent) -> Vec<AttackReport> {
    let mut out = Vec::new();
    for flow in &ev.flows {
        let (addr, len, srcs) = match *flow {
            Flow::RegToMem { addr, len, src } if ctx.tracker.reg_tainted(src) => (addr, len, vec![TagRef::Reg(src)]),
            Flow::MemToMem { dst, src, len } if ctx.tracker.range_tainted(ctx.table, src, len) => {
                (dst, len, ctx.range_refs(src, len))
            }
            Flow::MergeToMem { dst, len, src, src_len } if ctx.tracker.range_tainted(ctx.table, src, src_len) => {
                (dst, len, ctx.range_refs(src, src_len))
            }
            Flow::Input { addr, len, source } if cfg.sources.contains(source) => (addr, len, Vec::new()),
            _ => continue,
        };
        if len == 0 {
            continue;
        }
        let end = u64::from(addr) + u64::from(len);

        if let Some(a) = ctx.table.resolve_slot(addr) {
            let obj = ctx.table.get(a);
            if end > u64::from(obj.end()) && !whole_ancestor_write(ctx.table, a, addr, end) {
                let victims: Vec<Slot> = ctx.table.intersecting(obj.end(), (end - u64::from(obj.end())) as u32);
                if !victims.is_empty() {
                    let control = victims.iter().any(|&v| ctx.table.get(v).control.is_some());
                    let severity = if control { Severity::Control } else { Severity::Noncontrol };
                    let mut refs = srcs.clone();
                    refs.push(TagRef::Object(obj.id));
                    refs.extend(victims.iter().map(|&v| TagRef::Object(ctx.table.get(v).id)));
                    let detail = format!(
                        "tainted write of {len} bytes at {addr:#010x} overruns {} into {}",
                        ctx.table.describe(obj),
                        victims.iter().map(|&v| ctx.table.describe(ctx.table.get(v))).collect::<Vec<_>>().join(", ")
                    );
                    let mut r = ctx.report(ev, Check::NoncontrolBounds, severity, &refs, detail);
                    r.objects.retain(|o| o.id.is_some());
                    out.push(r);
                    continue;
                }
            }
        }

        for slot in ctx.table.intersecting(addr, len) {
            let o = ctx.table.get(slot);
            let watched = o.record.is_some_and(|r| cfg.watchlist.iter().any(|w| *w == ctx.table.record(r).name));
            if watched {
                let mut refs = srcs.clone();
                refs.push(TagRef::Object(o.id));
                let detail = format!("tainted write into watched object {}", ctx.table.describe(o));
                out.push(ctx.report(ev, Check::NoncontrolBounds, Severity::Noncontrol, &refs, detail));
            }
        }
    }
    out
}

/// The write exactly covers an ancestor of `slot` (a whole-struct write).
fn whole_ancestor_write(table: &ObjectTable, slot: Slot, start: u32, end: u64) -> bool {
    table.live_objects().any(|(s, o)| {
        s != slot && u64::from(o.base) == u64::from(start) && u64::from(o.end()) == end && table.is_ancestor(s, slot)
    })
}

/// A faulting access whose shadow address would wrap.
pub fn check_shadow_guard(ctx: &PolicyContext<'_>, ev: &StepEvent) -> Option<AttackReport> {
    let fault = ev.fault?;
    let err = guarded_shadow_address(fault.addr, TAG_SPACE_BASE).err()?;
    Some(ctx.report(ev, Check::ShadowGuard, Severity::Shadow, &[], err.to_string()))
}

/// Runs every enabled check that applies to the event.
pub fn evaluate(cfg: &PolicyConfig, ctx: &PolicyContext<'_>, ev: &StepEvent) -> Vec<AttackReport> {
    let mut out = Vec::new();
    if let Some(r) = check_shadow_guard(ctx, ev) {
        out.push(r);
    }
    if ev.fault.is_some() {
        return out;
    }
    if cfg.enabled(Check::Format) {
        out.extend(check_format(ctx, ev));
    }
    if cfg.enabled(Check::NoncontrolBounds) {
        out.extend(check_bounds_write(ctx, cfg, ev));
    }
    if cfg.enabled(Check::Syscall) {
        out.extend(check_syscall(ctx, ev));
    }
    if cfg.enabled(Check::ControlData) {
        out.extend(check_heap_free(ctx, ev));
    }
    if cfg.enabled(Check::Branch) {
        out.extend(check_branch(ctx, ev));
    }
    out
}
