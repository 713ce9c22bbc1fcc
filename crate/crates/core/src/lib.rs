//! Object-granular dynamic taint analysis on a small deterministic VM.

pub mod asm;
pub mod bench;
pub mod corpus;
pub mod engine;
pub mod harness;
pub mod isa;
pub mod layout;
pub mod objects;
pub mod oracle;
pub mod policy;
pub mod session;
pub mod tags;
pub mod vm;
