//! Closed-loop training control for small networks.
//!
//! Three adaptive mechanisms run inside one control loop:
//!
//! - per-layer precision selection driven by an EMA of gradient variance
//!   ([`stats`], [`scheduler`]), with FP16/BF16 emulated in software
//!   ([`precision`]);
//! - sparse curvature probes (top-k Hessian eigenvalues by power iteration)
//!   that shrink per-layer learning rates and temporarily promote layers to
//!   FP32 ([`curvature`], [`net::hvp`]);
//! - a batch-size feedback controller acting on a simulated device memory
//!   model ([`memory`]).
//!
//! [`control`] ties them together around SGD with momentum, and [`harness`]
//! runs seeded baseline/ablation experiments and writes CSV telemetry.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod curvature;
pub mod error;
pub mod harness;
pub mod memory;
pub mod net;
pub mod precision;
pub mod scheduler;
pub mod stats;
pub mod task;

pub use error::{Error, Result};
pub use precision::{quantize, quantize_buffer, PrecisionMode};
