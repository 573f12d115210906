#![allow(dead_code)]
pub mod naive;
pub mod oracle;

use compsem::kg::{Adjacency, Answer, Entity, Example, KnowledgeGraph, Vocabulary};
use compsem::lexicon::ModelParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn entity(id: &str, shape: &str, color: &str, size: &str, material: &str) -> Entity {
    Entity {
        id: id.into(),
        attributes: [
            ("shape", shape),
            ("color", color),
            ("size", size),
            ("material", material),
        ]
        .iter()
        .map(|(a, v)| (a.to_string(), v.to_string()))
        .collect(),
    }
}

/// Three objects in a row: a red cube, a blue cylinder, a green sphere.
pub fn scene() -> KnowledgeGraph {
    let mut kg = KnowledgeGraph::new(
        vec![
            entity("o0", "cube", "red", "large", "metal"),
            entity("o1", "cylinder", "blue", "small", "rubber"),
            entity("o2", "sphere", "green", "large", "rubber"),
        ],
        ["left", "right", "above", "beneath"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    );
    let mut left = Adjacency::zeros(3);
    left.set(0, 1);
    left.set(0, 2);
    left.set(1, 2);
    let mut above = Adjacency::zeros(3);
    above.set(2, 0);
    above.set(2, 1);
    above.set(0, 1);
    kg.set_relation("right", left.transpose()).unwrap();
    kg.set_relation("left", left).unwrap();
    kg.set_relation("beneath", above.transpose()).unwrap();
    kg.set_relation("above", above).unwrap();
    kg
}

pub fn toks(q: &str) -> Vec<String> {
    q.split_whitespace().map(String::from).collect()
}

pub fn vocab(kg: &KnowledgeGraph, words: &str) -> Vocabulary {
    let mut v = Vocabulary::clevr();
    v.observe(&Example {
        tokens: toks(words),
        answer: Answer::Bool(true),
        kg: kg.clone(),
        template: None,
        length: None,
    });
    v.freeze();
    v
}

/// Random parameters with enough spread that every module matters.
pub fn random_params(vocab: Vocabulary, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(vocab, &mut rng);
    let ids: Vec<_> = p.store.ids().collect();
    for id in ids {
        let scale = match p.store.get(id).name.as_str() {
            "word_embeddings" | "type_embeddings" => 1.2,
            "attribute_embeddings" | "relation_embeddings" => 0.6,
            "word_bundles" | "global_ee" => 2.0,
            _ => 0.5,
        };
        for x in p.store.get_mut(id).data.iter_mut() {
            *x = rng.gen_range(-scale..=scale);
        }
    }
    p
}
