//! Federated training of a small autoregressive transformer LM, plus the
//! gradient-inversion attack that recovers client text from transmitted
//! gradients, three client-side defenses, and the recovery metrics.
//!
//! The crate is organized around the attack pipeline:
//!
//! * [`corpus`] — text loading, word-level tokenization, batching.
//! * [`model`] — the transformer LM with an explicit analytic backward pass.
//! * [`checkpoint`] — named-tensor binary container for params and gradients.
//! * [`fedsim`] — single-server/single-client protocol, defenses, transcripts.
//! * [`attack`] — bag-of-words extraction, beam search, prior-guided reordering.
//! * [`metrics`] — ROUGE-1/2/L, entity recovery ratio, token precision/recall.

pub mod attack;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod fedsim;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
