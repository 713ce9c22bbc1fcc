//! Fixed address-space layout of the VM.
//!
//! ```text
//! 0x00000000 ┌──────────────┐ read-only data (constant strings)
//! 0x00001000 ├──────────────┤ globals (data image + bss)
//! 0x00080000 ├──────────────┤ heap (bump allocator, 8-byte boundary tags)
//! 0x000C0000 ├──────────────┤ stack, grows down from the top of memory
//!   mem_size └──────────────┘
//! ```

pub const RODATA_BASE: u32 = 0x0000_0000;
pub const GLOBALS_BASE: u32 = 0x0000_1000;
pub const HEAP_BASE: u32 = 0x0008_0000;
pub const STACK_BASE: u32 = 0x000C_0000;
pub const DEFAULT_MEM_SIZE: u32 = 1 << 20;

/// Bytes of allocator metadata in front of every heap chunk:
/// `[4-byte size][4-byte status]`.
pub const BOUNDARY_TAG_SIZE: u32 = 8;

/// Return address pushed by the boot call; returning to it halts.
pub const HALT_RETURN_ADDRESS: u32 = 0xFFFF_FFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    ReadOnly,
    Globals,
    Heap,
    Stack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub mem_size: u32,
}

impl Default for Layout {
    fn default() -> Self {
        Layout { mem_size: DEFAULT_MEM_SIZE }
    }
}

impl Layout {
    /// Memory must at least reach past the stack base.
    pub fn new(mem_size: u32) -> Option<Layout> {
        (mem_size > STACK_BASE + 0x1000).then_some(Layout { mem_size })
    }

    pub fn region_of(&self, addr: u32) -> Option<Region> {
        match addr {
            a if a < GLOBALS_BASE => Some(Region::ReadOnly),
            a if a < HEAP_BASE => Some(Region::Globals),
            a if a < STACK_BASE => Some(Region::Heap),
            a if a < self.mem_size => Some(Region::Stack),
            _ => None,
        }
    }

    pub fn is_read_only(&self, addr: u32) -> bool {
        addr < GLOBALS_BASE
    }

    pub fn stack_top(&self) -> u32 {
        self.mem_size
    }

    /// `[addr, addr+len)` lies inside memory.
    pub fn in_bounds(&self, addr: u32, len: u32) -> bool {
        u64::from(addr) + u64::from(len) <= u64::from(self.mem_size)
    }
}
