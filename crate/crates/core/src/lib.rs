pub mod act;
pub mod cli;
pub mod config;
pub mod dapo;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod sft;
pub mod toy;
pub mod trace;
