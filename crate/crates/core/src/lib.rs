//! Grounded compositional semantics over knowledge graphs.
//!
//! Questions are parsed by a differentiable CKY chart whose cells hold soft
//! denotations (entity sets, relations, truth values) computed against a
//! small knowledge graph. The whole pipeline is trained from question/answer
//! pairs alone.

pub mod autodiff;
pub mod chart;
pub mod composition;
pub mod datagen;
pub mod kg;
pub mod lexicon;
pub mod query;
pub mod semantics;
pub mod training;
