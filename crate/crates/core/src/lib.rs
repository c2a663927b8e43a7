pub mod attack;
pub mod autodiff;
pub mod config;
pub mod container;
pub mod detector;
pub mod error;
pub mod eval;
pub mod events;
pub mod geometry;
pub mod optim;
pub mod pgm;
pub mod pipeline;
pub mod render;
pub mod scenarios;
pub mod selftest;
pub mod texture;
pub mod v2e;
pub mod viz;

pub use error::{Error, Result};
