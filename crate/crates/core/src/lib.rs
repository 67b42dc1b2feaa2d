//! Analog circuit locking through layout-dependent effects.
//!
//! Transistor layout arrangements (baseline, side-poly, short-OD) shift
//! threshold voltage and transconductance by a few percent. Hiding the
//! correct arrangement of selected devices behind one-hot key bits turns
//! those shifts into a lock: wrong keys unbalance the circuit and miss spec.

pub mod attacks;
pub mod config;
pub mod engine;
pub mod lde;
pub mod locking;
pub mod metrics;
pub mod netlist;
pub mod sweep;
