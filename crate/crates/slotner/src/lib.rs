//! Entity extraction by filling the position and type slots of multiple
//! parallel prompts in a single encoder pass.
//!
//! A sentence is prefixed with `M` two-slot prompts; one encoder pass plus a
//! few prompt-interaction layers yields, per prompt, a span (left/right word
//! probabilities) and a type distribution, decoded into an entity set in one
//! shot. Training assigns gold entities to prompts by solving a one-to-many
//! bipartite matching over a probability-based cost.
//!
//! Modules mirror the pipeline: [`nn`] (array engine + autograd), [`template`]
//! (prompt layout + attention mask), [`model`] (encoder, interaction layers,
//! decoding heads), [`matching`] (label assignment + losses), [`train`] /
//! [`eval`] (optimization and metrics), [`corpus`] (data + synthetic
//! benchmark), [`checkpoint`] and [`config`] (persistence).

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod gradsuite;
pub mod matching;
pub mod model;
pub mod nn;
pub mod template;
pub mod train;
