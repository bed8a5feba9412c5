//! Shared fixtures and oracles for the integration tests. The oracles are
//! written independently of the library's implementations.
#![allow(dead_code)]

pub mod fixtures;
pub mod fuzz;
pub mod gradcheck;
pub mod metric_oracles;
pub mod replica;
pub mod toy;

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}
