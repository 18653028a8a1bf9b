#![allow(dead_code)]

pub mod checks;
pub mod gen;
pub mod harness;
pub mod lifecycle;
pub mod oracle;
