//! Trace-driven KV-cache compression engine.
//!
//! The crate replays recorded (or synthesized) decode-time attention
//! workloads through compressed KV caches and measures how far the
//! compressed attention drifts from a full-precision oracle.
//!
//! Layers, bottom-up:
//!
//! * [`tensor`]: dense f32 matrices, stable softmax and single-query attention.
//! * [`quant`]: asymmetric min/max group quantization to 2 or 4 bits with bit packing.
//! * [`policy`]: full-precision token selection (log-sparse, sliding window,
//!   sink + window, heavy hitter).
//! * [`cache`]: the compressed cache state machine that combines a policy with
//!   the quantizer in a position-agnostic storage layout.
//! * [`metrics`]: coverage, L1 attention error, compression ratio and the
//!   spike / instability analyses.
//! * [`trace`]: the binary trace format and the synthetic trace generator.
//! * [`harness`]: experiment configuration, sweeps and CSV output.

pub mod cache;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod policy;
pub mod quant;
pub mod tensor;
pub mod trace;

pub use cache::{CompressedKvCache, Footprint, ReleasePayload, StepResult};
pub use error::{Error, Result};
pub use harness::{Execution, ExperimentConfig, ExperimentOutput, MetricsRow};
pub use metrics::{attention_l1_error, compression_ratio, token_coverage, MetricsReport};
pub use policy::{Mode, PolicyConfig, PolicyKind, SelectionState};
pub use quant::{GroupAxis, QuantParams, QuantizedTensor};
pub use tensor::{attention, softmax, AttentionConfig, Matrix};
pub use trace::{SpikeModel, SyntheticSpec, Trace, TraceError, TraceHeader};
