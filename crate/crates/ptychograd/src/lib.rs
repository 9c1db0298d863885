//! Tiled ptychographic reconstruction on a simulated mesh of message-passing
//! workers.
//!
//! The volume is decomposed into halo-extended tiles, one per worker. Each
//! worker accumulates per-probe image gradients for its tile and the mesh
//! equalizes the accumulated buffers through directional forward (ADD) and
//! backward (REPLACE) passes, pipelined across rows and columns without a
//! global barrier. A voxel copy-paste baseline, synthetic data generation,
//! verification oracles, and a small CLI round out the toolbox.
//!
//! Start with the runnable examples (`cargo run --example ...`); each one
//! demonstrates a major capability end to end.

pub mod baseline;
pub mod cli;
pub mod datastore;
pub mod fft;
pub mod geometry;
pub mod gradients;
pub mod optics;
pub mod runtime;
pub mod passes;
pub mod region;
pub mod verify;
