// SPDX-License-Identifier: MIT OR Apache-2.0

//! Detects scale-invariant channels in residual convolutional networks and
//! tests their causal role in scale-robust classification.
//!
//! The pipeline:
//!
//! 1. [`netgraph`] wraps a residual network as addressable blocks with
//!    `In`, `Pre` and `Post` taps.
//! 2. [`featviz`] synthesizes center-neuron feature visualizations by
//!    regularized gradient ascent in image space.
//! 3. [`scalecrit`] applies the two scale-invariance criteria to each
//!    channel's visualization triple.
//! 4. [`ablate`] mean-ablates the passing channels and compares
//!    scale-transformed accuracy against screened random controls.
//! 5. [`report`] renders channel grids and ratio plots.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the production precision.

pub mod ablate;
pub mod config;
pub mod datahub;
pub mod error;
pub mod featviz;
pub mod imgops;
pub mod layers;
pub mod netgraph;
pub mod report;
pub mod scalar;
pub mod scalecrit;
pub mod tensor;

pub use error::{Error, Result};
pub use netgraph::{BlockAddress, NetworkHandle, TapPoint};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Network32 = netgraph::NetworkHandle<f32>;
pub type Network64 = netgraph::NetworkHandle<f64>;
pub type ResidualNet32 = netgraph::ResidualNet<f32>;
pub type ResidualNet64 = netgraph::ResidualNet<f64>;
pub type FeatureVisual32 = featviz::FeatureVisual<f32>;
pub type FeatureVisual64 = featviz::FeatureVisual<f64>;
pub type AblationSpec32 = ablate::AblationSpec<f32>;
pub type AblationSpec64 = ablate::AblationSpec<f64>;
