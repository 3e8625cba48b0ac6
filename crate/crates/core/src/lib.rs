//! Building blocks for constructing multi-image quality-comparison
//! instruction data and for evaluating chat models on comparison
//! benchmarks.

pub mod assembler;
pub mod chat;
pub mod corpus;
pub mod distill;
pub mod evalkit;
pub mod grouper;
pub mod parallel;
pub mod remote;
pub mod prefagg;
pub mod review;
pub mod simfilter;
