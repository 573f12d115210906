//! Knowledge graphs, question/answer examples and JSON-lines ingestion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ATTRIBUTES_PER_ENTITY: usize = 4;
pub const UNK: &str = "<unk>";
pub const BOUNDARY: &str = "<s>";
pub const UNK_ID: usize = 0;
pub const BOUNDARY_ID: usize = 1;

pub const CLEVR_RELATIONS: [&str; 4] = ["left", "right", "above", "beneath"];

#[derive(Debug, Error)]
pub enum KgError {
    #[error("line {line}: {reason}")]
    Record { line: usize, reason: String },
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub id: String,
    pub attributes: BTreeMap<String, String>,
}

/// Dense boolean adjacency, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    pub n: usize,
    pub bits: Vec<bool>,
}

impl Adjacency {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.n + j] = true;
    }

    pub fn to_dense(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                if self.get(i, j) {
                    t.set(j, i);
                }
            }
        }
        t
    }

    pub fn edges(&self) -> Vec<[usize; 2]> {
        (0..self.n)
            .flat_map(|i| (0..self.n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.get(i, j))
            .map(|(i, j)| [i, j])
            .collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Entities with four categorical attributes plus named binary relations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraph {
    pub entities: Vec<Entity>,
    /// Relation vocabulary this graph is interpreted against.
    pub relation_names: Vec<String>,
    relations: BTreeMap<String, Adjacency>,
}

impl KnowledgeGraph {
    pub fn new(entities: Vec<Entity>, relation_names: Vec<String>) -> Self {
        Self {
            entities,
            relation_names,
            relations: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entity_index(&self, id: &str) -> Option<usize> {
        self.entities.iter().position(|e| e.id == id)
    }

    pub fn set_relation(&mut self, name: &str, adj: Adjacency) -> Result<(), KgError> {
        if !self.relation_names.iter().any(|r| r == name) {
            return Err(KgError::UnknownRelation(name.to_string()));
        }
        if adj.n != self.len() {
            return Err(KgError::Invalid(format!(
                "relation `{name}` has dimension {} but the graph has {} entities",
                adj.n,
                self.len()
            )));
        }
        self.relations.insert(name.to_string(), adj);
        Ok(())
    }

    /// Hard adjacency of `relation`; a vocabulary relation absent from the
    /// scene is the zero matrix.
    pub fn adjacency(&self, relation: &str) -> Result<Adjacency, KgError> {
        if !self.relation_names.iter().any(|r| r == relation) {
            return Err(KgError::UnknownRelation(relation.to_string()));
        }
        Ok(self
            .relations
            .get(relation)
            .cloned()
            .unwrap_or_else(|| Adjacency::zeros(self.len())))
    }

    pub fn attribute(&self, entity: usize, name: &str) -> Option<&str> {
        self.entities[entity].attributes.get(name).map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Answer {
    Bool(bool),
    Entities(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<String>,
    pub answer: Answer,
    pub kg: KnowledgeGraph,
    /// Generator template, when the record came from the synthetic generator.
    pub template: Option<String>,
    pub length: Option<usize>,
}

impl Example {
    /// Gold answer as a 0/1 membership vector, for entity-set answers.
    pub fn answer_mask(&self) -> Option<Vec<bool>> {
        match &self.answer {
            Answer::Bool(_) => None,
            Answer::Entities(ids) => {
                let set: HashSet<&str> = ids.iter().map(String::as_str).collect();
                Some(self.kg.entities.iter().map(|e| set.contains(e.id.as_str())).collect())
            }
        }
    }

    pub fn question(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Word, attribute-value and relation tables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<String>,
    /// Attribute names in canonical (sorted) order; entity vectors concatenate in this order.
    pub attribute_names: Vec<String>,
    /// `attribute=value` keys.
    pub attribute_values: Vec<String>,
    pub relations: Vec<String>,
    #[serde(skip)]
    word_index: HashMap<String, usize>,
    #[serde(skip)]
    value_index: HashMap<String, usize>,
    #[serde(skip, default)]
    frozen: bool,
}

impl Vocabulary {
    pub fn new(relations: &[&str]) -> Self {
        let mut v = Self {
            words: Vec::new(),
            attribute_names: Vec::new(),
            attribute_values: Vec::new(),
            relations: relations.iter().map(|s| s.to_string()).collect(),
            word_index: HashMap::new(),
            value_index: HashMap::new(),
            frozen: false,
        };
        v.add_word(UNK);
        v.add_word(BOUNDARY);
        v
    }

    pub fn clevr() -> Self {
        Self::new(&CLEVR_RELATIONS)
    }

    /// Rebuilds lookup maps after deserialization and freezes the tables.
    pub fn reindex(&mut self) {
        self.word_index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        self.value_index = self
            .attribute_values
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        self.frozen = true;
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn add_word(&mut self, w: &str) {
        if !self.word_index.contains_key(w) {
            self.word_index.insert(w.to_string(), self.words.len());
            self.words.push(w.to_string());
        }
    }

    /// Word id, falling back to UNK.
    pub fn word_id(&self, w: &str) -> usize {
        self.word_index.get(w).copied().unwrap_or(UNK_ID)
    }

    pub fn value_key(attribute: &str, value: &str) -> String {
        format!("{attribute}={value}")
    }

    pub fn value_id(&self, attribute: &str, value: &str) -> Option<usize> {
        self.value_index.get(&Self::value_key(attribute, value)).copied()
    }

    pub fn relation_id(&self, r: &str) -> Option<usize> {
        self.relations.iter().position(|x| x == r)
    }

    /// Adds the words and attribute values of `ex` unless frozen.
    pub fn observe(&mut self, ex: &Example) {
        if self.frozen {
            return;
        }
        for t in &ex.tokens {
            self.add_word(t);
        }
        for e in &ex.kg.entities {
            if self.attribute_names.is_empty() {
                self.attribute_names = e.attributes.keys().cloned().collect();
            }
            for (a, v) in &e.attributes {
                let key = Self::value_key(a, v);
                if !self.value_index.contains_key(&key) {
                    self.value_index.insert(key.clone(), self.attribute_values.len());
                    self.attribute_values.push(key);
                }
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AnswerRepr {
    Bool(bool),
    Ids(Vec<String>),
}

#[derive(Serialize, Deserialize)]
struct EntityRepr {
    id: String,
    attributes: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct KgRepr {
    entities: Vec<EntityRepr>,
    #[serde(default)]
    relations: BTreeMap<String, Vec<[usize; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct RecordRepr {
    question: String,
    answer: AnswerRepr,
    kg: KgRepr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    length: Option<usize>,
}

/// Lowercases and splits a question; trailing punctuation is dropped.
pub fn tokenize(question: &str) -> Vec<String> {
    question
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| matches!(c, '?' | '.' | ',' | '!' | ';' | ':'))
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn record_err(line: usize, reason: impl Into<String>) -> KgError {
    KgError::Record {
        line,
        reason: reason.into(),
    }
}

/// Parses and validates one JSON-lines record (1-based `line` for errors).
fn build_kg(repr: &KgRepr, relations: &[String]) -> Result<KnowledgeGraph, String> {
    let mut ids = HashSet::new();
    let mut entities = Vec::with_capacity(repr.entities.len());
    let mut attr_names: Option<Vec<&String>> = None;
    for e in &repr.entities {
        if e.attributes.len() != ATTRIBUTES_PER_ENTITY {
            return Err(format!(
                "entity `{}` has {} attributes, expected {ATTRIBUTES_PER_ENTITY}",
                e.id,
                e.attributes.len()
            ));
        }
        let names: Vec<&String> = e.attributes.keys().collect();
        match &attr_names {
            None => attr_names = Some(names),
            Some(prev) if *prev != names => return Err(format!("entity `{}` uses a different attribute schema", e.id)),
            _ => {}
        }
        if !ids.insert(e.id.clone()) {
            return Err(format!("duplicate entity id `{}`", e.id));
        }
        entities.push(Entity {
            id: e.id.clone(),
            attributes: e.attributes.clone(),
        });
    }
    let mut kg = KnowledgeGraph::new(entities, relations.to_vec());
    let n = kg.len();
    for (name, edges) in &repr.relations {
        let mut adj = Adjacency::zeros(n);
        for &[i, j] in edges {
            if i >= n || j >= n {
                return Err(format!("relation `{name}` edge [{i},{j}] out of range"));
            }
            adj.set(i, j);
        }
        kg.set_relation(name, adj).map_err(|e| e.to_string())?;
    }
    Ok(kg)
}

/// Parses a standalone graph (`{"entities": [...], "relations": {...}}`).
pub fn parse_kg(text: &str, relations: &[String]) -> Result<KnowledgeGraph, KgError> {
    let repr: KgRepr =
        serde_json::from_str(text).map_err(|e| KgError::Invalid(format!("malformed graph JSON: {e}")))?;
    build_kg(&repr, relations).map_err(KgError::Invalid)
}

pub fn parse_record(text: &str, line: usize, relations: &[String]) -> Result<Example, KgError> {
    let rec: RecordRepr = serde_json::from_str(text).map_err(|e| record_err(line, format!("malformed JSON: {e}")))?;
    let tokens = tokenize(&rec.question);
    if tokens.is_empty() {
        return Err(record_err(line, "empty question"));
    }
    let kg = build_kg(&rec.kg, relations).map_err(|r| record_err(line, r))?;
    let ids: HashSet<&str> = kg.entities.iter().map(|e| e.id.as_str()).collect();
    let answer = match rec.answer {
        AnswerRepr::Bool(b) => Answer::Bool(b),
        AnswerRepr::Ids(list) => {
            if let Some(bad) = list.iter().find(|id| !ids.contains(id.as_str())) {
                return Err(record_err(line, format!("answer entity `{bad}` is not in the graph")));
            }
            Answer::Entities(list)
        }
    };
    Ok(Example {
        tokens,
        answer,
        kg,
        template: rec.template,
        length: rec.length,
    })
}

/// Serializes an example as one JSON-lines record.
pub fn to_json_line(ex: &Example) -> String {
    let rec = RecordRepr {
        question: ex.question(),
        answer: match &ex.answer {
            Answer::Bool(b) => AnswerRepr::Bool(*b),
            Answer::Entities(ids) => AnswerRepr::Ids(ids.clone()),
        },
        kg: KgRepr {
            entities: ex
                .kg
                .entities
                .iter()
                .map(|e| EntityRepr {
                    id: e.id.clone(),
                    attributes: e.attributes.clone(),
                })
                .collect(),
            relations: ex
                .kg
                .relations
                .iter()
                .map(|(k, adj)| (k.clone(), adj.edges()))
                .collect(),
        },
        template: ex.template.clone(),
        length: ex.length,
    };
    serde_json::to_string(&rec).expect("records always serialize")
}

/// Loads a JSON-lines dataset, validating every record against the relation
/// vocabulary of `vocab` and accumulating words and attribute values into it.
pub fn load_dataset(path: &Path, vocab: &mut Vocabulary) -> Result<Vec<Example>, KgError> {
    let file = File::open(path).map_err(|source| KgError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| KgError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_record(&line, i + 1, &vocab.relations)?;
        if !vocab.attribute_names.is_empty() {
            if let Some(e) = ex.kg.entities.first() {
                let names: Vec<String> = e.attributes.keys().cloned().collect();
                if names != vocab.attribute_names {
                    return Err(record_err(i + 1, "attribute names differ from the rest of the dataset"));
                }
            }
        }
        vocab.observe(&ex);
        out.push(ex);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<(), KgError> {
    let io = |source| KgError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(File::create(path).map_err(io)?);
    for ex in examples {
        writeln!(f, "{}", to_json_line(ex)).map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCENE: &str = r#"{"entities":[
        {"id":"e1","attributes":{"shape":"cube","color":"red","size":"large","material":"metal"}},
        {"id":"e2","attributes":{"shape":"sphere","color":"blue","size":"small","material":"rubber"}},
        {"id":"e3","attributes":{"shape":"cylinder","color":"red","size":"small","material":"metal"}}],
        "relations":{"left":[[0,1],[0,2],[2,1]],"right":[[1,0],[2,0],[1,2]]}}"#;

    fn record(answer: &str) -> String {
        format!(
            r#"{{"question":"What is red?","answer":{answer},"kg":{}}}"#,
            SCENE.replace('\n', " ")
        )
    }

    fn rels() -> Vec<String> {
        CLEVR_RELATIONS.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn entity_answer_record() {
        let ex = parse_record(&record(r#"["e1"]"#), 1, &rels()).unwrap();
        assert_eq!(ex.tokens, vec!["what", "is", "red"]);
        assert_eq!(ex.answer, Answer::Entities(vec!["e1".into()]));
        assert_eq!(ex.answer_mask().unwrap(), vec![true, false, false]);
    }

    #[test]
    fn boolean_record() {
        let ex = parse_record(&record("true"), 1, &rels()).unwrap();
        assert_eq!(ex.answer, Answer::Bool(true));
    }

    #[test]
    fn dangling_answer_reports_line() {
        let err = parse_record(&record(r#"["e9"]"#), 7, &rels()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("line 7:") && msg.contains("e9"), "{msg}");
    }

    #[test]
    fn unknown_relation_rejected() {
        let text = record("true").replace("\"right\"", "\"behind\"");
        let err = parse_record(&text, 3, &rels()).unwrap_err();
        assert!(err.to_string().contains("behind"));
    }

    #[test]
    fn malformed_json_rejected() {
        assert!(matches!(
            parse_record("{not json", 2, &rels()),
            Err(KgError::Record { line: 2, .. })
        ));
    }

    #[test]
    fn wrong_attribute_count_rejected() {
        let text = record("true").replace(
            ",\"material\":\"metal\"}},\n        {\"id\":\"e2\"",
            "}},{\"id\":\"e2\"",
        );
        let text = text.replacen(",\"material\":\"metal\"", "", 1);
        assert!(parse_record(&text, 1, &rels()).is_err());
    }

    #[test]
    fn adjacency_lookup() {
        let ex = parse_record(&record("true"), 1, &rels()).unwrap();
        let left = ex.kg.adjacency("left").unwrap();
        assert!(left.get(0, 1) && !left.get(1, 0));
        assert_eq!(ex.kg.adjacency("above").unwrap().count(), 0);
        assert!(ex.kg.adjacency("behind").is_err());
        assert_eq!(ex.kg.adjacency("right").unwrap(), left.transpose());
    }

    #[test]
    fn two_entity_left_matrix() {
        let text = r#"{"question":"is anything left of a cube","answer":true,"kg":{"entities":[
            {"id":"a","attributes":{"shape":"cube","color":"red","size":"large","material":"metal"}},
            {"id":"b","attributes":{"shape":"cube","color":"red","size":"large","material":"metal"}}],
            "relations":{"left":[[0,1]]}}}"#
            .replace('\n', " ");
        let ex = parse_record(&text, 1, &rels()).unwrap();
        assert_eq!(ex.kg.adjacency("left").unwrap().to_dense(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn json_line_round_trip() {
        let ex = parse_record(&record(r#"["e1","e3"]"#), 1, &rels()).unwrap();
        let again = parse_record(&to_json_line(&ex), 1, &rels()).unwrap();
        assert_eq!(ex, again);
    }

    #[test]
    fn vocabulary_accumulates_and_maps_unknowns() {
        let mut v = Vocabulary::clevr();
        let ex = parse_record(&record("true"), 1, &rels()).unwrap();
        v.observe(&ex);
        assert_eq!(v.attribute_names, vec!["color", "material", "shape", "size"]);
        assert!(v.word_id("red") > BOUNDARY_ID);
        assert_eq!(v.word_id("zebra"), UNK_ID);
        assert!(v.value_id("color", "red").is_some());
        v.freeze();
        let before = v.words.len();
        let mut other = ex.clone();
        other.tokens.push("zebra".into());
        v.observe(&other);
        assert_eq!(v.words.len(), before);
    }
}
