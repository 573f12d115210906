//! One-shot question answering against a trained model, as JSON.
//!
//! Shared by the command-line tool and the C interface.

use serde_json::{json, Value};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::chart::{build_chart, denotation_summary, ChartError};
use crate::kg::{parse_kg, tokenize, KgError, KnowledgeGraph};
use crate::lexicon::ModelParams;
use crate::semantics::Denotation;

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("invalid graph: {0}")]
    Graph(#[from] KgError),
    #[error("empty question")]
    EmptyQuestion,
    #[error(transparent)]
    Chart(#[from] ChartError),
}

/// Parses graph JSON against the model's relation inventory.
pub fn load_graph(params: &ModelParams, text: &str) -> Result<KnowledgeGraph, QueryError> {
    Ok(parse_kg(text, &params.vocab.relations)?)
}

fn tokens(question: &str) -> Result<Vec<String>, QueryError> {
    let t = tokenize(question);
    if t.is_empty() {
        return Err(QueryError::EmptyQuestion);
    }
    Ok(t)
}

/// Hard answer plus type probabilities and the soft grounding behind it.
pub fn answer_json(params: &ModelParams, kg: &KnowledgeGraph, question: &str) -> Result<Value, QueryError> {
    let tokens = tokens(question)?;
    let mut tape = Tape::new();
    let chart = build_chart(&mut tape, params, kg, &tokens)?;
    let ans = chart.answer(&tape)?;
    let answer = match &ans.denotation {
        Denotation::T(t) => json!(t.0 >= 0.5),
        Denotation::E(s) => json!(s
            .0
            .iter()
            .zip(&kg.entities)
            .filter(|(p, _)| **p >= 0.5)
            .map(|(_, e)| e.id.as_str())
            .collect::<Vec<_>>()),
        _ => unreachable!("answers are T or E"),
    };
    Ok(json!({
        "question": tokens.join(" "),
        "answer_type": ans.answer_type.name(),
        "p_type": { "T": ans.p_truth, "E": ans.p_entities },
        "answer": answer,
        "grounding": denotation_summary(&ans.denotation, kg),
    }))
}

/// Best derivation as a JSON tree, with its bracketed rendering alongside.
pub fn parse_json(params: &ModelParams, kg: &KnowledgeGraph, question: &str) -> Result<(Value, String), QueryError> {
    let tokens = tokens(question)?;
    let mut tape = Tape::new();
    let chart = build_chart(&mut tape, params, kg, &tokens)?;
    let tree = chart.best_parse(&tape, params)?;
    let ascii = format!("{}\n{}", tree.render(), tree.render_tree());
    Ok((tree.to_json(kg), ascii))
}
