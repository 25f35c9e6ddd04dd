//! Agentic beam prediction for UAV-to-ground mmWave links.
//!
//! - [`channel`]: geometric OFDM channel, ULA codebook, optimal-beam oracle
//! - [`scenario`]: synthetic flights, rendered frames, dataset files
//! - [`nn`]: reverse-mode tensor engine and neural primitives
//! - [`predictor`]: the hybrid numeric/image/multimodal beam predictor
//! - [`agents`]: task analysis, solution planning and assessment agents
//! - [`metrics`]: top-K, confusion matrices, latency and agent scoring

pub mod agents;
pub mod channel;
pub mod metrics;
pub mod nn;
pub mod predictor;
pub mod scenario;
