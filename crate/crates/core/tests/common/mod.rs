#![allow(dead_code)]

pub mod checks;
pub mod experiments;
pub mod gradcheck;
