//! Multiresilient FT-GMRES laboratory.
//!
//! A desk-scale reproduction of a multiresilience design for a flexible
//! inner/outer GMRES solver: a deterministic simulated message-passing
//! runtime with fail-stop processes and warm spares ([`runtime`]),
//! neighbour in-memory checkpointing ([`checkpoint`]), algorithm-level
//! silent-data-corruption detection and rollback ([`solver`]), seeded fault
//! injection ([`faultlab`]) and an experiment harness ([`harness`]).

// `!(a <= b)` comparisons are deliberate: they treat NaN as a violation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod faultlab;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod runtime;
pub mod solver;
