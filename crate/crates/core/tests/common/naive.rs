//! Plain recursive evaluation of the chart equations in probability space,
//! recomputing every sub-span from scratch.

use compsem::autodiff::Tape;
use compsem::chart::{build_chart, build_chart_with, ChartOptions};
use compsem::composition::apply_rule;
use compsem::kg::{KnowledgeGraph, BOUNDARY_ID};
use compsem::lexicon::{
    ground_entity_set, ground_relation_set, type_distribution, vector_bundle, ModelParams, NUM_ROLES,
};
use compsem::semantics::{applicable_modules, Denotation, EntitySet, RelationSet, SemanticType, Truth, VectorBundle};

pub struct Naive<'a> {
    pub params: &'a ModelParams,
    pub kg: &'a KnowledgeGraph,
    pub words: Vec<usize>,
    pub tokens: Vec<String>,
}

type Slot = Option<(f64, Denotation)>;

impl Naive<'_> {
    fn theta(&self, rule: usize, i: usize, k: usize, j: usize) -> f64 {
        let v = self.params.vocab.words.len();
        let n = self.words.len();
        let ctx = [
            if i == 0 { BOUNDARY_ID } else { self.words[i - 1] },
            if j + 1 == n { BOUNDARY_ID } else { self.words[j + 1] },
            self.words[i],
            self.words[k],
            self.words[k + 1],
            self.words[j],
        ];
        let theta = &self.params.store.get(self.params.ids.theta).data;
        (0..NUM_ROLES).map(|r| theta[(rule * NUM_ROLES + r) * v + ctx[r]]).sum()
    }

    fn leaf(&self, i: usize) -> Vec<Slot> {
        let tok = &self.tokens[i];
        let p = type_distribution(self.params, tok);
        let mut out: Vec<Slot> = vec![None; 8];
        out[SemanticType::E.index()] = Some((
            p[0],
            Denotation::E(ground_entity_set(self.params, tok, self.kg).unwrap()),
        ));
        out[SemanticType::R.index()] = Some((
            p[1],
            Denotation::R(ground_relation_set(self.params, tok, self.kg).unwrap()),
        ));
        out[SemanticType::V.index()] = Some((p[2], Denotation::V(vector_bundle(self.params, tok))));
        out[SemanticType::PHI.index()] = Some((p[3], Denotation::PHI));
        out
    }

    pub fn span(&self, i: usize, j: usize) -> Vec<Slot> {
        if i == j {
            return self.leaf(i);
        }
        let mut acc: Vec<Vec<(f64, Denotation)>> = vec![Vec::new(); 8];
        for k in i..j {
            let left = self.span(i, k);
            let right = self.span(k + 1, j);
            for l in left.iter().flatten() {
                for r in right.iter().flatten() {
                    for rule in applicable_modules(l.1.semantic_type(), r.1.semantic_type()) {
                        let w = l.0 * r.0 * self.theta(rule.id, i, k, j).exp();
                        let d = apply_rule(rule, &l.1, &r.1, self.params.global()).unwrap();
                        acc[rule.output.index()].push((w, d));
                    }
                }
            }
        }
        acc.into_iter().map(|items| mix(&items)).collect()
    }
}

fn mix(items: &[(f64, Denotation)]) -> Slot {
    if items.is_empty() {
        return None;
    }
    let psi: f64 = items.iter().map(|x| x.0).sum();
    let avg = |get: &dyn Fn(&Denotation) -> Vec<f64>| -> Vec<f64> {
        let mut out = vec![0.0; get(&items[0].1).len()];
        for (w, d) in items {
            for (o, x) in out.iter_mut().zip(get(d)) {
                *o += w / psi * x;
            }
        }
        out
    };
    let g = avg(&|d| d.grounded_values());
    let b = avg(&|d| d.bundle().map(|b| b.0.to_vec()).unwrap_or_default());
    let bundle = || VectorBundle(b.clone().try_into().unwrap());
    let n = |len: usize| (len as f64).sqrt() as usize;
    let d = match items[0].1.semantic_type() {
        SemanticType::E => Denotation::E(EntitySet(g)),
        SemanticType::R => Denotation::R(RelationSet::new(n(g.len()), g)),
        SemanticType::T => Denotation::T(Truth(g[0])),
        SemanticType::V => Denotation::V(bundle()),
        SemanticType::EV => Denotation::EV(EntitySet(g), bundle()),
        SemanticType::RV => Denotation::RV(RelationSet::new(n(g.len()), g.clone()), bundle()),
        SemanticType::TV => Denotation::TV(Truth(g[0]), bundle()),
        SemanticType::PHI => Denotation::PHI,
    };
    Some((psi, d))
}

fn close(a: &[f64], b: &[f64], tol: f64, what: &str) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("{what}: lengths {} vs {}", a.len(), b.len()));
    }
    for (x, y) in a.iter().zip(b) {
        if (x - y).abs() > tol * (1.0 + y.abs()) {
            return Err(format!("{what}: {x} vs {y}"));
        }
    }
    Ok(())
}

/// Compares every (span, type) cell of the memoized chart with the naive
/// recursion: potentials and expected denotations, relative to `tol`.
pub fn compare_with_naive(
    params: &ModelParams,
    kg: &KnowledgeGraph,
    tokens: &[String],
    tol: f64,
) -> Result<(), String> {
    let mut tape = Tape::new();
    let chart = build_chart(&mut tape, params, kg, tokens).map_err(|e| e.to_string())?;
    let naive = Naive {
        params,
        kg,
        words: tokens.iter().map(|t| params.vocab.word_id(t)).collect(),
        tokens: tokens.to_vec(),
    };
    let n = tokens.len();
    for i in 0..n {
        for j in i..n {
            let want = naive.span(i, j);
            for t in SemanticType::ALL {
                match (&want[t.index()], chart.log_potential(&tape, i, j, t)) {
                    (None, None) => {}
                    (Some((psi, d)), Some(lp)) => {
                        close(&[lp.exp()], &[*psi], tol, &format!("psi({i},{j},{t})"))?;
                        let got = chart.denotation(&tape, i, j, t).unwrap();
                        close(
                            &got.grounded_values(),
                            &d.grounded_values(),
                            tol,
                            &format!("denotation({i},{j},{t})"),
                        )?;
                        let gb = got.bundle().map(|b| b.0.to_vec()).unwrap_or_default();
                        let wb = d.bundle().map(|b| b.0.to_vec()).unwrap_or_default();
                        close(&gb, &wb, tol, &format!("bundle({i},{j},{t})"))?;
                    }
                    (w, g) => return Err(format!("cell ({i},{j},{t}) present {} vs {}", w.is_some(), g.is_some())),
                }
            }
        }
    }
    Ok(())
}

/// Multiplies the leaf potentials of `token` by `c` and checks that root
/// potentials move by exactly `c` while root denotations and the answer
/// distribution stay put.
pub fn compare_rescaled(
    params: &ModelParams,
    kg: &KnowledgeGraph,
    tokens: &[String],
    token: usize,
    c: f64,
    tol: f64,
) -> Result<(), String> {
    let mut t0 = Tape::new();
    let base = build_chart(&mut t0, params, kg, tokens).map_err(|e| e.to_string())?;
    let mut t1 = Tape::new();
    let opts = ChartOptions {
        leaf_log_offsets: vec![(token, c.ln())],
    };
    let scaled = build_chart_with(&mut t1, params, kg, tokens, &opts).map_err(|e| e.to_string())?;
    let n = tokens.len();
    for t in SemanticType::ALL {
        let (a, b) = (
            base.log_potential(&t0, 0, n - 1, t),
            scaled.log_potential(&t1, 0, n - 1, t),
        );
        match (a, b) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                if ((b - a) - c.ln()).abs() > tol {
                    return Err(format!("root {t}: log potential moved by {} not {}", b - a, c.ln()));
                }
                let (da, db) = (
                    base.denotation(&t0, 0, n - 1, t).unwrap(),
                    scaled.denotation(&t1, 0, n - 1, t).unwrap(),
                );
                for (x, y) in da.grounded_values().iter().zip(db.grounded_values()) {
                    if (x - y).abs() > tol {
                        return Err(format!("root {t} denotation {x} vs {y}"));
                    }
                }
            }
            _ => return Err(format!("root {t} presence changed")),
        }
    }
    let (a, b) = (
        base.answer(&t0).map_err(|e| e.to_string())?,
        scaled.answer(&t1).map_err(|e| e.to_string())?,
    );
    if a.answer_type != b.answer_type
        || (a.p_truth - b.p_truth).abs() > tol
        || (a.p_entities - b.p_entities).abs() > tol
    {
        return Err(format!(
            "answer moved: {:?}/{} vs {:?}/{}",
            a.answer_type, a.p_truth, b.answer_type, b.p_truth
        ));
    }
    close(
        &a.denotation.grounded_values(),
        &b.denotation.grounded_values(),
        tol,
        "answer denotation",
    )
}
