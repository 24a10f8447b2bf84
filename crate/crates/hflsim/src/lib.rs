//! Desk-scale simulator for hierarchical federated learning over a wireless
//! edge deployment: cost model, device scheduling (random / VKC / IKC),
//! device assignment (geographic / HFEL search / learned policy), and
//! per-edge convex bandwidth + CPU-frequency allocation.

pub mod allocator;
pub mod assigner;
pub mod cost;
pub mod d3qn;
pub mod error;
pub mod fl;
pub mod harness;
pub mod scheduler;
pub mod topology;

pub use error::{Error, Result};
