//! Trainable parameters and per-token groundings.
//!
//! Every token gets a distribution over the leaf types {E, R, V, φ} and one
//! representation per type: a soft entity set, an expected adjacency matrix,
//! its vector bundle, or nothing (φ).

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Shape, Tape, Var};
use crate::kg::{KnowledgeGraph, Vocabulary};
use crate::semantics::{Denotation, EntitySet, RelationSet, VectorBundle, BUNDLE_LEN, NUM_RULES};

pub const WORD_DIM: usize = 64;
pub const ATTR_DIM: usize = 16;
/// Feature roles: word before the span, word after it, first and last word
/// of the left constituent, first and last word of the right constituent.
pub const NUM_ROLES: usize = 6;
/// Logit offsets for (E, R, V, φ) before the type softmax.
pub const TYPE_BIAS: [f64; 4] = [-1.0, 0.0, 0.0, 1.0];
pub const INIT_RANGE: f64 = 0.5;
/// Starting point for the E+E intersection weights: a soft AND, so that
/// chained adjectives intersect from the first epoch instead of waiting for
/// a gradient that barely reaches this rule early on.
pub const GLOBAL_EE_INIT: [f64; 3] = [4.0, 4.0, -6.0];

const CHECKPOINT_FORMAT: &str = "compsem-checkpoint-v1";

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("attribute value `{attribute}={value}` has no embedding")]
    UnseenAttribute { attribute: String, value: String },
    #[error("entity `{0}` lacks attribute `{1}`")]
    MissingAttribute(String, String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamIds {
    pub words: ParamId,
    pub types: ParamId,
    pub relations: ParamId,
    pub attributes: ParamId,
    pub bundles: ParamId,
    pub global: ParamId,
    pub theta: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub ids: ParamIds,
}

fn expected_shapes(vocab: &Vocabulary) -> Vec<(&'static str, Vec<usize>)> {
    let v = vocab.words.len();
    vec![
        ("word_embeddings", vec![v, WORD_DIM]),
        ("type_embeddings", vec![4, WORD_DIM]),
        ("relation_embeddings", vec![vocab.relations.len(), WORD_DIM]),
        ("attribute_embeddings", vec![vocab.attribute_values.len(), ATTR_DIM]),
        ("word_bundles", vec![v, BUNDLE_LEN]),
        ("global_ee", vec![3]),
        ("theta", vec![NUM_RULES, NUM_ROLES, v]),
    ]
}

impl ModelParams {
    fn from_store(store: ParamStore, vocab: Vocabulary) -> Self {
        let id = |n: &str| store.find(n).expect("parameter registered");
        let ids = ParamIds {
            words: id("word_embeddings"),
            types: id("type_embeddings"),
            relations: id("relation_embeddings"),
            attributes: id("attribute_embeddings"),
            bundles: id("word_bundles"),
            global: id("global_ee"),
            theta: id("theta"),
        };
        Self { store, vocab, ids }
    }

    /// Embeddings and bundles uniform in ±`INIT_RANGE`, the global vector at
    /// `GLOBAL_EE_INIT`, feature weights at zero.
    pub fn init<R: Rng>(vocab: Vocabulary, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        for (name, shape) in expected_shapes(&vocab) {
            let len = shape.iter().product();
            let data = match name {
                "theta" => vec![0.0; len],
                "global_ee" => GLOBAL_EE_INIT.to_vec(),
                _ => (0..len).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)).collect(),
            };
            store.add(name, shape, data);
        }
        Self::from_store(store, vocab)
    }

    pub fn zeros(vocab: Vocabulary) -> Self {
        let mut store = ParamStore::new();
        for (name, shape) in expected_shapes(&vocab) {
            let len = shape.iter().product();
            store.add(name, shape, vec![0.0; len]);
        }
        Self::from_store(store, vocab)
    }

    pub fn num_words(&self) -> usize {
        self.vocab.words.len()
    }

    /// Flat index of θ for (rule, role, word).
    pub fn theta_index(&self, rule: usize, role: usize, word: usize) -> usize {
        (rule * NUM_ROLES + role) * self.num_words() + word
    }

    pub fn word_row_mut(&mut self, word: usize) -> &mut [f64] {
        let data = &mut self.store.get_mut(self.ids.words).data;
        &mut data[word * WORD_DIM..(word + 1) * WORD_DIM]
    }

    pub fn bundle_mut(&mut self, word: usize) -> &mut [f64] {
        let data = &mut self.store.get_mut(self.ids.bundles).data;
        &mut data[word * BUNDLE_LEN..(word + 1) * BUNDLE_LEN]
    }

    pub fn global(&self) -> [f64; 3] {
        let g = &self.store.get(self.ids.global).data;
        [g[0], g[1], g[2]]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            vocab: self.vocab.clone(),
            params: self
                .store
                .iter()
                .map(|(_, t)| {
                    (
                        t.name.clone(),
                        TensorRecord {
                            shape: t.shape.clone(),
                            data: t.data.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, LexiconError> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(LexiconError::Checkpoint(format!("unsupported format `{}`", ck.format)));
        }
        let mut vocab = ck.vocab;
        vocab.reindex();
        let mut params = ck.params;
        let mut store = ParamStore::new();
        for (name, shape) in expected_shapes(&vocab) {
            let rec = params
                .remove(name)
                .ok_or_else(|| LexiconError::Checkpoint(format!("missing parameter `{name}`")))?;
            if rec.shape != shape {
                return Err(LexiconError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    rec.shape, shape
                )));
            }
            if rec.data.len() != shape.iter().product::<usize>() {
                return Err(LexiconError::Checkpoint(format!(
                    "parameter `{name}` has {} values for shape {:?}",
                    rec.data.len(),
                    shape
                )));
            }
            store.add(name, shape, rec.data);
        }
        if let Some(extra) = params.keys().next() {
            return Err(LexiconError::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self::from_store(store, vocab))
    }

    pub fn save(&self, path: &Path) -> Result<(), LexiconError> {
        let text = serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| LexiconError::Checkpoint(format!("malformed checkpoint: {e}")))?;
        Self::from_checkpoint(ck)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk checkpoint: vocabulary tables plus named tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub vocab: Vocabulary,
    pub params: BTreeMap<String, TensorRecord>,
}

/// Per-example tape inputs derived from the knowledge graph.
#[derive(Clone, Copy, Debug)]
pub struct GraphContext {
    pub n: usize,
    entity_matrix: Var,
    relation_matrix: Option<Var>,
    stacked_adjacency: Option<Var>,
}

impl GraphContext {
    pub fn build(tape: &mut Tape, params: &ModelParams, kg: &KnowledgeGraph) -> Result<Self, LexiconError> {
        let n = kg.len();
        let vocab = &params.vocab;
        let mut idx = Vec::with_capacity(n * WORD_DIM);
        for e in &kg.entities {
            for a in &vocab.attribute_names {
                let value = e
                    .attributes
                    .get(a)
                    .ok_or_else(|| LexiconError::MissingAttribute(e.id.clone(), a.clone()))?;
                let vid = vocab.value_id(a, value).ok_or_else(|| LexiconError::UnseenAttribute {
                    attribute: a.clone(),
                    value: value.clone(),
                })?;
                idx.extend(vid * ATTR_DIM..(vid + 1) * ATTR_DIM);
            }
        }
        let width = ATTR_DIM * vocab.attribute_names.len();
        if width != WORD_DIM {
            return Err(LexiconError::Checkpoint(format!(
                "entity vectors have {width} dimensions, word vectors {WORD_DIM}"
            )));
        }
        let entity_matrix = tape.gather(&params.store, params.ids.attributes, &idx, Shape::Matrix(n, WORD_DIM))?;
        let r = vocab.relations.len();
        let (relation_matrix, stacked_adjacency) = if r == 0 {
            (None, None)
        } else {
            let ridx: Vec<usize> = (0..r * WORD_DIM).collect();
            let rm = tape.gather(&params.store, params.ids.relations, &ridx, Shape::Matrix(r, WORD_DIM))?;
            let mut stacked = vec![0.0; n * n * r];
            for (ri, name) in vocab.relations.iter().enumerate() {
                let adj = kg
                    .adjacency(name)
                    .map_err(|e| LexiconError::Checkpoint(e.to_string()))?;
                for (cell, &b) in adj.bits.iter().enumerate() {
                    if b {
                        stacked[cell * r + ri] = 1.0;
                    }
                }
            }
            let sa = tape.constant(Shape::Matrix(n * n, r), &stacked)?;
            (Some(rm), Some(sa))
        };
        Ok(Self {
            n,
            entity_matrix,
            relation_matrix,
            stacked_adjacency,
        })
    }
}

/// Tape handles for one token's leaf groundings.
#[derive(Clone, Copy, Debug)]
pub struct LeafGrounding {
    /// Log-probabilities over (E, R, V, φ).
    pub log_types: Var,
    pub entity: Var,
    /// Expected adjacency, flattened row-major.
    pub relation: Var,
    pub bundle: Var,
}

pub fn ground_token(
    tape: &mut Tape,
    params: &ModelParams,
    ctx: &GraphContext,
    word: usize,
) -> Result<LeafGrounding, LexiconError> {
    let w = tape.param_row(&params.store, params.ids.words, word)?;
    let tidx: Vec<usize> = (0..4 * WORD_DIM).collect();
    let types = tape.gather(&params.store, params.ids.types, &tidx, Shape::Matrix(4, WORD_DIM))?;
    let logits = tape.matvec(types, w)?;
    let bias = tape.vector(&TYPE_BIAS);
    let biased = tape.add(logits, bias)?;
    let log_types = tape.log_softmax(biased);

    let e_logits = tape.matvec(ctx.entity_matrix, w)?;
    let entity = tape.sigmoid(e_logits);

    let relation = match (ctx.relation_matrix, ctx.stacked_adjacency) {
        (Some(rm), Some(sa)) => {
            let r_logits = tape.matvec(rm, w)?;
            let p = tape.softmax(r_logits);
            tape.matvec(sa, p)?
        }
        _ => tape.vector(&vec![0.0; ctx.n * ctx.n]),
    };
    let bundle = tape.param_row(&params.store, params.ids.bundles, word)?;
    Ok(LeafGrounding {
        log_types,
        entity,
        relation,
        bundle,
    })
}

/// p(t | word) over (E, R, V, φ).
pub fn type_distribution(params: &ModelParams, word: &str) -> [f64; 4] {
    let mut tape = Tape::new();
    let w = params.vocab.word_id(word);
    let kg = KnowledgeGraph::new(Vec::new(), Vec::new());
    let ctx = GraphContext {
        n: kg.len(),
        entity_matrix: tape.constant(Shape::Matrix(0, WORD_DIM), &[]).expect("empty matrix"),
        relation_matrix: None,
        stacked_adjacency: None,
    };
    let g = ground_token(&mut tape, params, &ctx, w).expect("type distribution needs no graph");
    let lp = tape.value(g.log_types);
    [lp[0].exp(), lp[1].exp(), lp[2].exp(), lp[3].exp()]
}

pub fn ground_entity_set(params: &ModelParams, word: &str, kg: &KnowledgeGraph) -> Result<EntitySet, LexiconError> {
    let mut tape = Tape::new();
    let ctx = GraphContext::build(&mut tape, params, kg)?;
    let g = ground_token(&mut tape, params, &ctx, params.vocab.word_id(word))?;
    Ok(EntitySet(tape.value(g.entity).to_vec()))
}

pub fn ground_relation_set(params: &ModelParams, word: &str, kg: &KnowledgeGraph) -> Result<RelationSet, LexiconError> {
    let mut tape = Tape::new();
    let ctx = GraphContext::build(&mut tape, params, kg)?;
    let g = ground_token(&mut tape, params, &ctx, params.vocab.word_id(word))?;
    Ok(RelationSet::new(kg.len(), tape.value(g.relation).to_vec()))
}

pub fn vector_bundle(params: &ModelParams, word: &str) -> VectorBundle {
    let w = params.vocab.word_id(word);
    let data = &params.store.get(params.ids.bundles).data;
    let mut b = [0.0; BUNDLE_LEN];
    b.copy_from_slice(&data[w * BUNDLE_LEN..(w + 1) * BUNDLE_LEN]);
    VectorBundle(b)
}

pub fn phi_denotation() -> Denotation {
    Denotation::PHI
}
