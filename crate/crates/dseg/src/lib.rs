//! Deep-dimple segmentation of SEM fractographs.
//!
//! A self-contained stack: a reverse-mode autodiff tensor engine, the
//! attention residual U-Net and a plain U-Net baseline, the composite
//! dice+BCE training loop with Adam, a 128x128 tiling pipeline with
//! leakage-free splits, and a deterministic CLI with a binary checkpoint
//! format. CPU only, bit-reproducible under a fixed seed.

pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
