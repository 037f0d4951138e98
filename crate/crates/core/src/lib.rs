//! Ensemble voting over per-token tag probabilities for medication-event
//! extraction, with IOB2 span decoding and strict/lenient span scoring.
//!
//! The flow mirrors the `evoting run` pipeline:
//!
//! 1. [`corpus`] parses notes and standoff gold annotations.
//! 2. [`tokenize`] tokenizes with exact offsets and projects gold to IOB2 tags.
//! 3. [`predictions`] loads one probability file per model.
//! 4. [`calibration`] computes ECE and derives ensemble weights.
//! 5. [`ensemble`] fuses members by soft, hard or weighted voting.
//! 6. [`decode`] turns tags back into spans, optionally collapsed to drugs.
//! 7. [`metrics`] scores spans with micro and macro P/R/F.

pub mod calibration;
pub mod corpus;
pub mod decode;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod pipeline;
pub mod predictions;
pub mod tokenize;

pub use corpus::{AnnotatedDocument, Document, EventClass, GoldSpan};
pub use decode::{PredictedSpan, SpanLabel};
pub use error::{Error, Result};
pub use exec::Execution;
pub use metrics::{MatchMode, MetricsReport, Task};
pub use predictions::{LabelSequence, PredictionSet};
pub use tokenize::{BioTag, TokenSpan, TokenizedCorpus};
