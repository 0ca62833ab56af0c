//! Oracles shared by the integration test targets; not every target uses all
//! of them.
#![allow(dead_code)]

pub mod fd;
pub mod fuzz;
pub mod oracle;
