//! Hyperspectral segmentation co-design toolkit: preprocessing, a U-Net
//! compute graph, complexity analysis, structured pruning, power-of-two INT8
//! quantization and a staged pipeline executor.

pub mod bench;
pub mod complexity;
pub mod container;
pub mod data;
pub mod error;
pub mod metrics;
pub mod netgraph;
pub mod pipeline;
pub mod preprocess;
pub mod pruning;
pub mod quantization;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Layout, Tensor};
