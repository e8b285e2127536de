//! Semantic column type detection.
//!
//! A table's columns pass through three increasingly expensive stages
//! (header matching, value lookup rules, a learned classifier). Each column
//! stops as soon as one stage is confident enough. Scores from a shared
//! global model and a per-tenant local model are blended per type, and
//! low-confidence columns abstain. Tenants adapt their local model from
//! feedback by inferring labeling functions from corrected columns.

pub mod classifier;
pub mod corpus;
pub mod dpbd;
pub mod ensemble;
pub mod eval;
pub mod header;
pub mod lookup;
pub mod ontology;
pub mod prediction;
pub mod state;
pub mod store;
pub mod table;
pub mod synth;
