//! Backdoor-trigger patching laboratory.
//!
//! Plants language-switching triggers into a small decoder-only transformer,
//! then localizes them with activation patching and compares trigger heads
//! against natural-language heads.

pub mod analyzer;
pub mod corpus;
pub mod error;
pub mod model;
pub mod numerics;
pub mod oracle_lab;
pub mod patcher;
pub mod pipeline;
pub mod trainer;

pub use error::{LabError, Result};
