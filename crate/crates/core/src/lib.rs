//! Pool-based deep active learning at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`rng`]: a small deterministic f64 kernel and counter-based random streams.
//! * [`nn`]: a convolutional/dense classifier with a location regression head, trained with Adam.
//! * [`uncertainty`]: MC-dropout and ensemble predictive distributions, entropy and mutual
//!   information acquisition scores.
//! * [`al_loop`]: the query loop (seed set, scoring, top-k selection, oracle labeling, retraining).
//! * [`metrics`]: accuracy, localization MSE, calibration curves, sparsification error curves,
//!   class-distribution deltas and label-savings reports.
//! * [`datagen`]: synthetic pools, the region-proposal simulator and the on-disk dataset container.
//! * [`experiment`]: run orchestration and the CSV files consumed by reporting and plotting.

// Negated float comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod al_loop;
pub mod dataset;
pub mod datagen;
mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod uncertainty;

pub use al_loop::{LoopConfig, LoopOutcome, Oracle, PoolState, StopRule};
pub use dataset::{Batch, Dataset, LOC_DIM};
pub use error::{Error, Result};
pub use metrics::{CalibrationCurve, ErrorCurve, MetricsRecord};
pub use nn::{Network, NetworkConfig, NetworkParams, Prediction};
pub use rng::RngStream;
pub use tensor::Tensor;
pub use uncertainty::{AcquisitionScores, Committee, PredictiveSet, Strategy};
