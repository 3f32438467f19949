//! Heterogeneous-bitwidth binarization toolkit.
//!
//! Tensors are binarized with residual error binarization where every element
//! may carry its own bitwidth (a per-element mask), giving fractional average
//! bitwidths such as 1.4 bits. The crate covers:
//!
//! - [`tensor`]: dense tensors, seeded Gaussian generation, distance metrics.
//! - [`binarize`]: sign / scaled-sign / stochastic / residual / heterogeneous
//!   binarization, reconstruction and the straight-through gradient.
//! - [`bitalloc`]: bit distributions and the sorting heuristics that turn an
//!   average bitwidth into a mask.
//! - [`packed`]: word-packed bit-planes and xnor-popcount dot products.
//! - [`hwcost`]: FPGA / ASIC cost extrapolation from measured baselines.

pub mod binarize;
pub mod bitalloc;
pub mod error;
pub mod hwcost;
pub mod packed;
pub mod rng;
pub mod tensor;

pub use binarize::{BitMask, BitPlane, HeterogeneousBinaryTensor, MAX_BITS};
pub use bitalloc::{BitDistribution, DistPolicy, SortHeuristic};
pub use error::{Error, Result};
pub use packed::PackedPlanes;
pub use rng::RngStream;
pub use tensor::Tensor;
