//! Stimulus files, model backends, the sweep engine and reports for
//! measuring polarity illusions in causal language models.
//!
//! The numeric core (beam search, categorization, metrics) lives in
//! `polarity-core`; this crate adds everything that touches the file
//! system or a real model.

pub mod backend;
pub mod evaluate;
pub mod formats;
pub mod neox;
pub mod plot;
pub mod report;
pub mod shipped;
pub mod sweep;
