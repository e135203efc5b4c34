//! Medical Processor Unit: instruction set, assembler, object store,
//! signature matching and the execution engine.

pub mod asm;
pub mod fixed;
pub mod hash;
pub mod isa;
pub mod object_store;
pub mod symptom;
pub mod dataset;
pub mod exec;
