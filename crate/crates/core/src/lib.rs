//! Training-free prompt refinement for in-context segmentation.
//!
//! Query embeddings are pushed along the gradient of a mask decoder's logit
//! with Euler–Maruyama steps of an entropy-regularized KL gradient flow, the
//! top-k prompts are resampled from the refined similarity map, and the best
//! of the resulting candidate masks is picked by support/query similarity.
//!
//! Modules:
//! - [`flow`]: the flow's update rule, density-ratio identity, clipping and the Gaussian functional.
//! - [`decoder`]: a differentiable cosine-prototype stand-in for a promptable mask decoder.
//! - [`synth`]: synthetic support/query tasks, the encoder and IoU.
//! - [`refine`]: similarity maps, top-k prompts and the refinement loop.
//! - [`selection`]: top-1 and oracle candidate selection.
//! - [`lab`]: numerical checks of the convergence theory.
//! - [`harness`]: experiment configs, reports, sweeps and verification suites behind the CLI.

pub mod decoder;
pub mod error;
pub mod flow;
pub mod harness;
pub mod lab;
pub mod refine;
pub mod rng;
pub mod selection;
pub mod synth;

pub use decoder::{BinaryMask, DecoderParams, EmbeddingGrid, LogitMap};
pub use error::{Error, Result};
pub use flow::{FlowConfig, GaussianDensity, GradientVector};
pub use refine::{CandidateRecord, CandidateSet, PromptSet, SimilarityMap, SimilarityReduction};
pub use selection::{SelectionMode, SelectionResult};
pub use synth::{EncoderMode, ObjectKind, Sample, TaskSpec};
