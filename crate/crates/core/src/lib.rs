//! Term-ID generative recommendation pipeline.
//!
//! Items get identifiers made of standardized keywords ([`ctg`]); those
//! identifiers feed instruction-tuning exports ([`iift`]), and generated
//! keyword sequences are mapped back to catalog items ([`grounding`]) and
//! scored ([`eval`]).

pub mod corpus;
pub mod ctg;
pub mod eval;
pub mod grounding;
pub mod iift;
pub mod io;
pub mod pipeline;
pub mod services;
pub mod vocab;

pub use corpus::{Corpus, InteractionRecord, InteractionSequence, ItemRecord};
pub use ctg::{Term, TermIdSequence, TidMap};
pub use eval::{MetricsReport, RankedPrediction};
pub use grounding::{CandidateLibrary, GroundingResult, Track};
pub use iift::{EvalSample, TrainSample};
pub use pipeline::{PipelineConfig, PipelineError};
pub use services::{EmbeddingVector, GenerationRequest, ServiceConfig};
