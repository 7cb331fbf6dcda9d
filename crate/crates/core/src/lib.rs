//! Explicit-state model checking of UTXO contract templates.

pub mod contract;
pub mod explorer;
pub mod knowledge;
pub mod miniscript;
pub mod properties;
pub mod semantics;
pub mod tracenet;
pub mod txmodel;
