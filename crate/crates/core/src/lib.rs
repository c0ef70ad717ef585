//! Real-time, adaptive domain-randomization data streaming.
//!
//! Producers sample randomized super-shape scenes, rasterize them, derive
//! box/class/visibility annotations and stream the result to a consumer over
//! a fair, backpressured, exactly-once transport. The consumer can steer the
//! class mix through a control channel.

pub mod adapt;
pub mod channel;
pub mod config;
pub mod eval;
pub mod launcher;
pub mod mock;
pub mod pipeline;
pub mod producer;
pub mod render;
pub mod scene;
pub mod shard;
pub mod wire;
