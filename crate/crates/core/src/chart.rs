//! Differentiable CKY chart.
//!
//! Potentials are kept in log space: each (span, type) stores log ψ and the
//! expected denotation, a softmax-weighted mixture of every composition that
//! yields that type. Mixture weights are ratios of potentials, so working in
//! log space is exact and never under- or overflows.

use serde_json::{json, Value};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::composition::{apply_rule, apply_rule_tape, CompositionError, DenVar};
use crate::kg::{KnowledgeGraph, BOUNDARY_ID};
use crate::lexicon::{ground_token, GraphContext, LexiconError, ModelParams, NUM_ROLES};
use crate::semantics::{rule_table, Denotation, SemanticType, RULES};

#[derive(Debug, Error)]
pub enum ChartError {
    #[error("empty question")]
    EmptyQuestion,
    #[error("unanswerable parse: the root has neither a truth value nor an entity set")]
    Unanswerable,
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, ChartError>;

#[derive(Clone, Copy, Debug)]
pub struct Entry {
    pub log_psi: Var,
    pub den: DenVar,
}

type Cell = [Option<Entry>; 8];

/// Test and diagnostic hooks for chart construction.
#[derive(Clone, Debug, Default)]
pub struct ChartOptions {
    /// Added to every leaf log-potential of the given token.
    pub leaf_log_offsets: Vec<(usize, f64)>,
}

pub struct Chart {
    tokens: Vec<String>,
    words: Vec<usize>,
    entities: usize,
    cells: Vec<Cell>,
}

/// θ indices for composing `[i..=k]` with `[k+1..=j]` under `rule`.
pub fn feature_indices(
    params: &ModelParams,
    words: &[usize],
    rule: usize,
    i: usize,
    k: usize,
    j: usize,
) -> [usize; NUM_ROLES] {
    let before = if i == 0 { BOUNDARY_ID } else { words[i - 1] };
    let after = if j + 1 >= words.len() {
        BOUNDARY_ID
    } else {
        words[j + 1]
    };
    let roles = [before, after, words[i], words[k], words[k + 1], words[j]];
    std::array::from_fn(|r| params.theta_index(rule, r, roles[r]))
}

/// θ·f for one composition, off the tape.
pub fn feature_sum(params: &ModelParams, words: &[usize], rule: usize, i: usize, k: usize, j: usize) -> f64 {
    let theta = &params.store.get(params.ids.theta).data;
    feature_indices(params, words, rule, i, k, j)
        .iter()
        .map(|&x| theta[x])
        .sum()
}

pub fn build_chart(tape: &mut Tape, params: &ModelParams, kg: &KnowledgeGraph, tokens: &[String]) -> Result<Chart> {
    build_chart_with(tape, params, kg, tokens, &ChartOptions::default())
}

pub fn build_chart_with(
    tape: &mut Tape,
    params: &ModelParams,
    kg: &KnowledgeGraph,
    tokens: &[String],
    opts: &ChartOptions,
) -> Result<Chart> {
    let n = tokens.len();
    if n == 0 {
        return Err(ChartError::EmptyQuestion);
    }
    let words: Vec<usize> = tokens.iter().map(|t| params.vocab.word_id(t)).collect();
    let ctx = GraphContext::build(tape, params, kg)?;
    let global = tape.gather(
        &params.store,
        params.ids.global,
        &[0, 1, 2],
        crate::autodiff::Shape::Vector(3),
    )?;
    let mut cells: Vec<Cell> = vec![[None; 8]; n * n];

    for (i, &w) in words.iter().enumerate() {
        let g = ground_token(tape, params, &ctx, w)?;
        let offset: f64 = opts
            .leaf_log_offsets
            .iter()
            .filter(|(t, _)| *t == i)
            .map(|(_, c)| c)
            .sum();
        for (slot, ty) in SemanticType::LEAF.iter().enumerate() {
            let mut lp = tape.element(g.log_types, slot)?;
            if offset != 0.0 {
                let c = tape.scalar(offset);
                lp = tape.add(lp, c)?;
            }
            let den = match ty {
                SemanticType::E => DenVar::E(g.entity),
                SemanticType::R => DenVar::R(g.relation),
                SemanticType::V => DenVar::V(g.bundle),
                _ => DenVar::PHI,
            };
            cells[i * n + i][ty.index()] = Some(Entry { log_psi: lp, den });
        }
    }

    let table = rule_table();
    let mut scores: [Vec<Var>; 8] = Default::default();
    let mut outs: [Vec<DenVar>; 8] = Default::default();
    for len in 2..=n {
        for i in 0..=n - len {
            let j = i + len - 1;
            for v in scores.iter_mut() {
                v.clear();
            }
            for v in outs.iter_mut() {
                v.clear();
            }
            for k in i..j {
                let left = cells[i * n + k];
                let right = cells[(k + 1) * n + j];
                for (lt, l) in left.iter().enumerate() {
                    let Some(l) = l else { continue };
                    for (rt, r) in right.iter().enumerate() {
                        let Some(r) = r else { continue };
                        for &rid in &table[lt][rt] {
                            let rule = &RULES[rid];
                            let idx = feature_indices(params, &words, rid, i, k, j);
                            let feat = tape.gather_sum(&params.store, params.ids.theta, &idx)?;
                            let score = tape.add_n(&[l.log_psi, r.log_psi, feat])?;
                            let out = apply_rule_tape(tape, rule, l.den, r.den, global)?;
                            scores[rule.output.index()].push(score);
                            outs[rule.output.index()].push(out);
                        }
                    }
                }
            }
            for t in SemanticType::ALL {
                let (s, o) = (&scores[t.index()], &outs[t.index()]);
                let entry = match s.len() {
                    0 => continue,
                    1 => Entry {
                        log_psi: s[0],
                        den: o[0],
                    },
                    _ => {
                        let log_psi = tape.log_sum_exp(s)?;
                        let grounded = match o[0].grounded() {
                            Some(_) => {
                                let items: Vec<Var> = o.iter().map(|d| d.grounded().expect("same type")).collect();
                                Some(tape.softmax_mix(s, &items)?)
                            }
                            None => None,
                        };
                        let bundle = match o[0].bundle() {
                            Some(_) => {
                                let items: Vec<Var> = o.iter().map(|d| d.bundle().expect("same type")).collect();
                                Some(tape.softmax_mix(s, &items)?)
                            }
                            None => None,
                        };
                        Entry {
                            log_psi,
                            den: DenVar::with_parts(t, grounded, bundle),
                        }
                    }
                };
                cells[i * n + j][t.index()] = Some(entry);
            }
        }
    }
    Ok(Chart {
        tokens: tokens.to_vec(),
        words,
        entities: kg.len(),
        cells,
    })
}

/// Snapshot of one cell: potentials divided by their maximum, plus the
/// log of that maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct CellView {
    pub log_scale: f64,
    pub potentials: [f64; 8],
    pub denotations: Vec<Denotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnswerOutput {
    pub answer_type: SemanticType,
    /// p(T | q) and p(E | q).
    pub p_truth: f64,
    pub p_entities: f64,
    pub denotation: Denotation,
}

/// One node of the highest-scoring derivation.
#[derive(Clone, Debug, PartialEq)]
pub struct ParseNode {
    pub span: (usize, usize),
    pub ty: SemanticType,
    /// Rule id for internal nodes.
    pub rule: Option<usize>,
    /// Log-score of the best derivation of this node.
    pub score: f64,
    pub denotation: Denotation,
    pub token: Option<String>,
    pub children: Vec<ParseNode>,
}

#[derive(Clone, Copy)]
enum Back {
    Leaf,
    Split {
        k: usize,
        rule: usize,
        lt: usize,
        rt: usize,
    },
}

impl Chart {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn words(&self) -> &[usize] {
        &self.words
    }

    pub fn num_entities(&self) -> usize {
        self.entities
    }

    pub fn entry(&self, i: usize, j: usize, t: SemanticType) -> Option<Entry> {
        self.cells[i * self.len() + j][t.index()]
    }

    pub fn root(&self, t: SemanticType) -> Option<Entry> {
        self.entry(0, self.len() - 1, t)
    }

    pub fn log_potential(&self, tape: &Tape, i: usize, j: usize, t: SemanticType) -> Option<f64> {
        self.entry(i, j, t).map(|e| tape.scalar_value(e.log_psi))
    }

    pub fn denotation(&self, tape: &Tape, i: usize, j: usize, t: SemanticType) -> Option<Denotation> {
        self.entry(i, j, t).map(|e| e.den.to_denotation(tape, self.entities))
    }

    pub fn cell(&self, tape: &Tape, i: usize, j: usize) -> CellView {
        let logs: Vec<Option<f64>> = SemanticType::ALL
            .iter()
            .map(|&t| self.log_potential(tape, i, j, t))
            .collect();
        let log_scale = logs.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let potentials = std::array::from_fn(|t| logs[t].map_or(0.0, |l| (l - log_scale).exp()));
        let denotations = SemanticType::ALL
            .iter()
            .filter_map(|&t| self.denotation(tape, i, j, t))
            .collect();
        CellView {
            log_scale,
            potentials,
            denotations,
        }
    }

    /// log p(t | q) over the answer types {T, E}, on the tape.
    pub fn answer_type_log_prob(&self, tape: &mut Tape, t: SemanticType) -> Result<Option<Var>> {
        let (truth, ent) = (self.root(SemanticType::T), self.root(SemanticType::E));
        let Some(target) = self.root(t) else { return Ok(None) };
        let present: Vec<Var> = [truth, ent].iter().flatten().map(|e| e.log_psi).collect();
        if present.len() == 1 {
            return Ok(Some(tape.scalar(0.0)));
        }
        let z = tape.log_sum_exp(&present)?;
        Ok(Some(tape.sub(target.log_psi, z)?))
    }

    /// Picks the root type by p(t | q) restricted to {T, E}; ties go to T.
    pub fn answer(&self, tape: &Tape) -> Result<AnswerOutput> {
        let lt = self.root(SemanticType::T).map(|e| tape.scalar_value(e.log_psi));
        let le = self.root(SemanticType::E).map(|e| tape.scalar_value(e.log_psi));
        let (answer_type, p_truth, p_entities) = choose_answer_type(lt, le)?;
        let denotation = self
            .denotation(tape, 0, self.len() - 1, answer_type)
            .expect("chosen type is present");
        Ok(AnswerOutput {
            answer_type,
            p_truth,
            p_entities,
            denotation,
        })
    }

    /// Highest-scoring derivation rooted at the answer type.
    pub fn best_parse(&self, tape: &Tape, params: &ModelParams) -> Result<ParseNode> {
        let root_type = self.answer(tape)?.answer_type;
        self.best_parse_for(tape, params, root_type)
            .ok_or(ChartError::Unanswerable)?
    }

    /// Highest-scoring derivation of the whole question with root type `t`.
    pub fn best_parse_for(&self, tape: &Tape, params: &ModelParams, t: SemanticType) -> Option<Result<ParseNode>> {
        let n = self.len();
        let table = rule_table();
        let mut best: Vec<[Option<(f64, Back)>; 8]> = vec![[None; 8]; n * n];
        for i in 0..n {
            for ty in SemanticType::LEAF {
                if let Some(l) = self.log_potential(tape, i, i, ty) {
                    best[i * n + i][ty.index()] = Some((l, Back::Leaf));
                }
            }
        }
        for len in 2..=n {
            for i in 0..=n - len {
                let j = i + len - 1;
                let mut cell: [Option<(f64, Back)>; 8] = [None; 8];
                for k in i..j {
                    for lt in 0..8 {
                        let Some((ls, _)) = best[i * n + k][lt] else { continue };
                        for rt in 0..8 {
                            let Some((rs, _)) = best[(k + 1) * n + j][rt] else {
                                continue;
                            };
                            for &rid in &table[lt][rt] {
                                let s = ls + rs + feature_sum(params, &self.words, rid, i, k, j);
                                let slot = &mut cell[RULES[rid].output.index()];
                                if slot.is_none_or(|(b, _)| s > b) {
                                    *slot = Some((s, Back::Split { k, rule: rid, lt, rt }));
                                }
                            }
                        }
                    }
                }
                best[i * n + j] = cell;
            }
        }
        best[n - 1][t.index()]?;
        Some(self.rebuild(tape, params, &best, 0, n - 1, t.index()))
    }

    fn rebuild(
        &self,
        tape: &Tape,
        params: &ModelParams,
        best: &[[Option<(f64, Back)>; 8]],
        i: usize,
        j: usize,
        t: usize,
    ) -> Result<ParseNode> {
        let n = self.len();
        let (score, back) = best[i * n + j][t].expect("backpointer target exists");
        let ty = SemanticType::ALL[t];
        match back {
            Back::Leaf => Ok(ParseNode {
                span: (i, j),
                ty,
                rule: None,
                score,
                denotation: self.denotation(tape, i, i, ty).expect("leaf entry"),
                token: Some(self.tokens[i].clone()),
                children: Vec::new(),
            }),
            Back::Split { k, rule, lt, rt } => {
                let left = self.rebuild(tape, params, best, i, k, lt)?;
                let right = self.rebuild(tape, params, best, k + 1, j, rt)?;
                let denotation = apply_rule(&RULES[rule], &left.denotation, &right.denotation, params.global())?;
                Ok(ParseNode {
                    span: (i, j),
                    ty,
                    rule: Some(rule),
                    score,
                    denotation,
                    token: None,
                    children: vec![left, right],
                })
            }
        }
    }
}

/// Answer-type decision from the root log-potentials of T and E.
/// Returns the type with p(T|q) and p(E|q); ties go to T.
pub fn choose_answer_type(log_truth: Option<f64>, log_entities: Option<f64>) -> Result<(SemanticType, f64, f64)> {
    let (pt, pe) = match (log_truth, log_entities) {
        (None, None) => return Err(ChartError::Unanswerable),
        (Some(_), None) => (1.0, 0.0),
        (None, Some(_)) => (0.0, 1.0),
        (Some(a), Some(b)) => {
            let pt = crate::autodiff::sigmoid(a - b);
            (pt, 1.0 - pt)
        }
    };
    let t = if pt >= pe { SemanticType::T } else { SemanticType::E };
    Ok((t, pt, pe))
}

const TOP_K: usize = 5;

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Compact JSON summary of a denotation.
pub fn denotation_summary(d: &Denotation, kg: &KnowledgeGraph) -> Value {
    let entities = |p: &[f64]| {
        let mut ranked: Vec<(usize, f64)> = p.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
            .into_iter()
            .take(TOP_K)
            .map(|(i, p)| json!([kg.entities[i].id, round4(p)]))
            .collect::<Vec<_>>()
    };
    let edges = |r: &crate::semantics::RelationSet| {
        let mut ranked: Vec<(usize, f64)> = r.data.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
            .into_iter()
            .take(TOP_K)
            .map(|(c, p)| json!([kg.entities[c / r.n].id, kg.entities[c % r.n].id, round4(p)]))
            .collect::<Vec<_>>()
    };
    match d {
        Denotation::E(s) | Denotation::EV(s, _) => json!({ "entities": entities(&s.0) }),
        Denotation::R(r) | Denotation::RV(r, _) => json!({ "edges": edges(r) }),
        Denotation::T(t) | Denotation::TV(t, _) => json!({ "p_true": round4(t.0) }),
        Denotation::V(_) | Denotation::PHI => Value::Null,
    }
}

impl ParseNode {
    pub fn to_json(&self, kg: &KnowledgeGraph) -> Value {
        let mut node = json!({
            "span": [self.span.0, self.span.1],
            "type": self.ty.name(),
            "module": self.rule.map(|r| RULES[r].name()),
            "score": round4(self.score),
            "denotation": denotation_summary(&self.denotation, kg),
        });
        if let Some(tok) = &self.token {
            node["token"] = json!(tok);
        } else {
            node["children"] = Value::Array(self.children.iter().map(|c| c.to_json(kg)).collect());
        }
        node
    }

    /// Bracketed one-line rendering, e.g. `(E (V not) (E cylindrical))`.
    pub fn render(&self) -> String {
        match &self.token {
            Some(tok) => format!("({} {})", self.ty, tok),
            None => format!(
                "({} {} {})",
                self.ty,
                self.children[0].render(),
                self.children[1].render()
            ),
        }
    }

    /// Indented tree, one node per line.
    pub fn render_tree(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out, "", true, true);
        out
    }

    fn render_into(&self, out: &mut String, prefix: &str, last: bool, root: bool) {
        let branch = if root {
            ""
        } else if last {
            "`-- "
        } else {
            "|-- "
        };
        let label = match (&self.token, self.rule) {
            (Some(tok), _) => format!("{} \"{}\"", self.ty, tok),
            (None, Some(r)) => format!("{}  [{}]", self.ty, RULES[r].name()),
            (None, None) => self.ty.to_string(),
        };
        out.push_str(&format!("{prefix}{branch}{label}\n"));
        let child_prefix = if root {
            String::new()
        } else {
            format!("{prefix}{}", if last { "    " } else { "|   " })
        };
        for (idx, c) in self.children.iter().enumerate() {
            c.render_into(out, &child_prefix, idx + 1 == self.children.len(), false);
        }
    }

    pub fn leaves(&self) -> Vec<&ParseNode> {
        if self.children.is_empty() {
            vec![self]
        } else {
            self.children.iter().flat_map(|c| c.leaves()).collect()
        }
    }
}
