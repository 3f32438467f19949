//! Desk-scale training of heterogeneous-bitwidth binarized networks:
//! layer execution with straight-through gradients, SGD, dataset loading,
//! and accuracy sweeps over bitwidth settings.

pub mod data;
pub mod error;
pub mod gemm;
pub mod network;
pub mod optim;
pub mod spec;
pub mod train;

pub use data::{Dataset, RawSplit, SyntheticParams};
pub use error::{Result, TrainError};
pub use network::{softmax_cross_entropy, Batch, MaskState, Mode, Network, ShadowWeights};
pub use optim::{sgd_step, LrSchedule, MaskRefresh, TrainConfig};
pub use spec::{four_layer_convnet, separable_convnet, LayerKind, LayerSpec, NetworkSpec, QuantSpec};
pub use train::{evaluate, packed_divergence, run_sweep, train, Precision, SweepPoint, SweepRow};
