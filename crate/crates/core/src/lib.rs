//! Cost analysis and reference numerics for CNN backbones built from dense
//! blocks and one-shot aggregation (OSA) modules.
//!
//! - [`graph`]: the layer-graph IR, validation, ordering and shape inference.
//! - [`zoo`]: OSA modules, dense and residual blocks, VoVNet and CIFAR networks.
//! - [`cost`]: memory access cost, FLOPs, parameters, activation footprint and
//!   measured efficiency (J/img, GFLOP/s).
//! - [`engine`]: deterministic forward/backward/SGD over the same graphs.
//! - [`data`]: CIFAR-10 binary batches and synthetic blobs.
//! - [`analysis`]: source-to-layer connectivity matrices from trained weights.

pub mod analysis;
pub mod cost;
pub mod data;
pub mod engine;
pub mod graph;
pub mod zoo;
