//! Objective, SGD, curriculum and evaluation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{gradient_check, AutodiffError, GradCheckReport, Gradients, ParamStore, Shape, Tape};
use crate::chart::{build_chart, ChartError};
use crate::kg::{Answer, Example, Vocabulary};
use crate::lexicon::ModelParams;
use crate::semantics::SemanticType;

pub const PROB_FLOOR: f64 = 1e-7;
pub const PHASE1_TEMPLATES: [&str; 3] = ["attribute-match", "attribute-existence", "boolean-composition"];
pub const LENGTH_PHASES: usize = 5;

/// Named random sub-streams derived from the single run seed.
pub mod streams {
    pub const DATAGEN: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
}

pub fn rng_stream(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter `{0}`")]
    NonFinite(String),
    #[error("curriculum needs a template tag on every record; record {0} has none")]
    Untagged(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty training set")]
    Empty,
    #[error(transparent)]
    Chart(#[from] ChartError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurriculumMode {
    /// Two phases by template family.
    Templates,
    /// Five nested phases by question length.
    Length,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// L2 weight on θ for the training set as a whole; each example's
    /// loss carries `reg / N` of it.
    pub reg: f64,
    pub curriculum: CurriculumMode,
    /// Epochs for every phase but the last.
    pub phase_epochs: usize,
    /// The last phase runs until validation accuracy stops improving for
    /// this many epochs, or `max_epochs` is reached.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            batch_size: 4,
            reg: 0.3,
            curriculum: CurriculumMode::Templates,
            phase_epochs: 5,
            patience: 3,
            max_epochs: 30,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be a finite non-negative number");
        }
        if !(self.reg.is_finite() && self.reg >= 0.0) {
            return bad("reg must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be positive");
        }
        if self.workers == 0 {
            return bad("workers must be positive");
        }
        Ok(())
    }
}

/// Per-example objective terms (maximized).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub boolean: f64,
    pub entity: f64,
    /// log p(gold answer type | q).
    pub answer_type: f64,
    pub penalty: f64,
}

fn theta_penalty(params: &ModelParams, reg: f64) -> f64 {
    0.5 * reg
        * params
            .store
            .get(params.ids.theta)
            .data
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
}

/// Objective for one example; accumulates its gradient into `grads` when given.
/// The θ penalty and its gradient are added analytically.
pub fn example_loss(
    params: &ModelParams,
    ex: &Example,
    reg: f64,
    grads: Option<&mut Gradients>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let chart = build_chart(&mut tape, params, &ex.kg, &ex.tokens)?;
    let floor = PROB_FLOOR.ln();
    let mut terms = Vec::with_capacity(2);
    let mut out = LossBreakdown::default();

    let gold_type = match ex.answer {
        Answer::Bool(_) => SemanticType::T,
        Answer::Entities(_) => SemanticType::E,
    };
    match (&ex.answer, chart.root(gold_type)) {
        (Answer::Bool(a), Some(root)) => {
            let p = root.den.grounded().expect("truth value");
            let p = tape.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR);
            let q = if *a {
                p
            } else {
                let one = tape.scalar(1.0);
                tape.sub(one, p)?
            };
            let lb = tape.log(q);
            out.boolean = tape.scalar_value(lb);
            terms.push(lb);
        }
        (Answer::Entities(_), Some(root)) => {
            let n = ex.kg.len();
            let mask: Vec<f64> = ex
                .answer_mask()
                .expect("entity answer")
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect();
            let inv: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
            let p = root.den.grounded().expect("entity set");
            let p = tape.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR);
            let ones = tape.constant(Shape::Vector(n), &vec![1.0; n])?;
            let q = tape.sub(ones, p)?;
            let (lp, lq) = (tape.log(p), tape.log(q));
            let (m, im) = (tape.vector(&mask), tape.vector(&inv));
            let a = tape.dot(m, lp)?;
            let b = tape.dot(im, lq)?;
            let s = tape.add(a, b)?;
            let le = tape.scale(s, 1.0 / n as f64);
            out.entity = tape.scalar_value(le);
            terms.push(le);
        }
        (Answer::Bool(_), None) => out.boolean = floor,
        (Answer::Entities(_), None) => out.entity = floor,
    }
    match chart.answer_type_log_prob(&mut tape, gold_type)? {
        Some(lt) => {
            out.answer_type = tape.scalar_value(lt);
            terms.push(lt);
        }
        None => out.answer_type = floor,
    }
    out.penalty = theta_penalty(params, reg);
    out.total = out.boolean + out.entity + out.answer_type - out.penalty;

    if let Some(grads) = grads {
        if !terms.is_empty() {
            let root = tape.add_n(&terms)?;
            tape.backward(root, grads)?;
        }
        let theta = &params.store.get(params.ids.theta).data;
        for (g, t) in grads.get_mut(params.ids.theta).iter_mut().zip(theta) {
            *g -= reg * t;
        }
    }
    Ok(out)
}

/// Ascent step `p += lr * g`; `grads` are zeroed afterwards.
pub fn sgd_step(store: &mut ParamStore, grads: &mut Gradients, lr: f64) -> Result<()> {
    for (id, g) in grads.iter() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFinite(store.get(id).name.clone()));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let g = grads.get(id);
        for (p, d) in store.get_mut(id).data.iter_mut().zip(g) {
            *p += lr * d;
        }
    }
    grads.zero();
    Ok(())
}

/// Batch-averaged gradient of the objective, merged in example order.
pub fn batch_gradient(params: &ModelParams, batch: &[&Example], reg: f64) -> Result<(Gradients, f64)> {
    let parts: Vec<Result<(Gradients, f64)>> = batch
        .par_iter()
        .map(|ex| {
            let mut g = params.store.zero_grads();
            let l = example_loss(params, ex, reg, Some(&mut g))?;
            Ok((g, l.total))
        })
        .collect();
    let mut total = params.store.zero_grads();
    let mut loss = 0.0;
    for part in parts {
        let (g, l) = part?;
        total.add_assign(&g);
        loss += l;
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((total, loss))
}

/// Finite-difference check of every parameter against the analytic gradient.
pub fn gradcheck_example(params: &ModelParams, ex: &Example, reg: f64, h: f64) -> Result<GradCheckReport> {
    let mut work = params.clone();
    let mut failure = None;
    let report = gradient_check(&mut work.store, h, |store, grads| {
        let p = ModelParams {
            store: store.clone(),
            vocab: params.vocab.clone(),
            ids: params.ids,
        };
        match example_loss(&p, ex, reg, grads) {
            Ok(l) => l.total,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// A random question over a random scene with parameters spread wide
/// enough that every module contributes to the gradient.
pub fn gradcheck_case(tokens: usize, entities: usize, seed: u64) -> Result<(ModelParams, Example)> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = crate::datagen::SceneSpec {
        min_entities: entities,
        max_entities: entities,
        grid: entities.max(16),
    };
    let kg = crate::datagen::gen_scene(&spec, &mut rng).map_err(|e| TrainError::Config(e.to_string()))?;
    let lexicon = crate::datagen::lexicon_words();
    let words: Vec<String> = (0..tokens).map(|_| lexicon.choose(&mut rng).unwrap().clone()).collect();
    let answer = if rng.gen_bool(0.5) {
        Answer::Bool(rng.gen_bool(0.5))
    } else {
        Answer::Entities(
            kg.entities
                .iter()
                .filter(|_| rng.gen_bool(0.5))
                .map(|e| e.id.clone())
                .collect(),
        )
    };
    let ex = Example {
        length: Some(words.len()),
        tokens: words,
        answer,
        kg,
        template: None,
    };
    let mut vocab = Vocabulary::clevr();
    vocab.observe(&ex);
    vocab.freeze();
    let mut params = ModelParams::init(vocab, &mut rng);
    let ids: Vec<_> = params.store.ids().collect();
    for id in ids {
        let scale = match params.store.get(id).name.as_str() {
            "word_bundles" | "global_ee" => 1.5,
            "theta" => 0.3,
            _ => 0.5,
        };
        for x in params.store.get_mut(id).data.iter_mut() {
            *x = rng.gen_range(-scale..=scale);
        }
    }
    Ok((params, ex))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Phase {
    pub name: String,
    pub indices: Vec<usize>,
}

pub fn curriculum(data: &[Example], mode: CurriculumMode) -> Result<Vec<Phase>> {
    let all: Vec<usize> = (0..data.len()).collect();
    match mode {
        CurriculumMode::Templates => {
            let mut first = Vec::new();
            for (i, ex) in data.iter().enumerate() {
                let t = ex.template.as_deref().ok_or(TrainError::Untagged(i))?;
                if PHASE1_TEMPLATES.contains(&t) {
                    first.push(i);
                }
            }
            Ok(vec![
                Phase {
                    name: "simple".into(),
                    indices: first,
                },
                Phase {
                    name: "all".into(),
                    indices: all,
                },
            ])
        }
        CurriculumMode::Length => {
            let len = |ex: &Example| ex.length.unwrap_or(ex.tokens.len());
            let mut sorted: Vec<usize> = data.iter().map(len).collect();
            sorted.sort_unstable();
            let mut phases = Vec::with_capacity(LENGTH_PHASES);
            for p in 1..=LENGTH_PHASES {
                let cutoff = if sorted.is_empty() {
                    0
                } else {
                    sorted[(sorted.len() * p).div_ceil(LENGTH_PHASES) - 1]
                };
                let indices = if p == LENGTH_PHASES {
                    all.clone()
                } else {
                    all.iter().copied().filter(|&i| len(&data[i]) <= cutoff).collect()
                };
                phases.push(Phase {
                    name: format!("length<={cutoff}"),
                    indices,
                });
            }
            Ok(phases)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_overall: Option<f64>,
    pub val_bool: Option<f64>,
    pub val_entity: Option<f64>,
    pub val_relation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize)]
pub struct Prediction {
    /// Argmax root type; the answer is read from this type's denotation.
    pub answer_type: Option<SemanticType>,
    /// Truth value at the T root, when the chart has one.
    pub p_true: Option<f64>,
    /// Thresholded E-root attentions, when the chart has one.
    pub entities: Option<Vec<bool>>,
}

pub fn predict(params: &ModelParams, ex: &Example) -> Result<Prediction> {
    use crate::semantics::Denotation;
    let mut tape = Tape::new();
    let chart = build_chart(&mut tape, params, &ex.kg, &ex.tokens)?;
    let last = chart.len() - 1;
    let p_true = match chart.denotation(&tape, 0, last, SemanticType::T) {
        Some(Denotation::T(t)) => Some(t.0),
        _ => None,
    };
    let entities = match chart.denotation(&tape, 0, last, SemanticType::E) {
        Some(Denotation::E(s)) => Some(s.0.iter().map(|&p| p >= 0.5).collect()),
        _ => None,
    };
    let answer_type = match chart.answer(&tape) {
        Ok(a) => Some(a.answer_type),
        Err(ChartError::Unanswerable) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(Prediction {
        answer_type,
        p_true,
        entities,
    })
}

/// Exact-match scoring: attentions thresholded at 0.5 must equal the gold set.
pub fn is_correct(pred: &Prediction, ex: &Example) -> bool {
    match &ex.answer {
        Answer::Bool(a) => pred.answer_type == Some(SemanticType::T) && pred.p_true.map(|p| p >= 0.5) == Some(*a),
        Answer::Entities(_) => pred.answer_type == Some(SemanticType::E) && pred.entities == ex.answer_mask(),
    }
}

pub fn is_relation_question(ex: &Example) -> bool {
    ex.template.as_deref().is_some_and(|t| t.starts_with("relation"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Score {
    pub correct: usize,
    pub total: usize,
}

impl Score {
    pub fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += ok as usize;
    }

    /// Percentage, or `None` when empty.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub boolean: Score,
    pub entity: Score,
    pub relation: Score,
    pub non_relation: Score,
    pub overall: Score,
}

pub fn evaluate(params: &ModelParams, data: &[Example]) -> Result<EvalReport> {
    let verdicts: Vec<Result<bool>> = data
        .par_iter()
        .map(|ex| Ok(is_correct(&predict(params, ex)?, ex)))
        .collect();
    let mut r = EvalReport::default();
    for (ex, ok) in data.iter().zip(verdicts) {
        let ok = ok?;
        r.overall.add(ok);
        if is_relation_question(ex) {
            r.relation.add(ok);
        } else {
            r.non_relation.add(ok);
            match ex.answer {
                Answer::Bool(_) => r.boolean.add(ok),
                Answer::Entities(_) => r.entity.add(ok),
            }
        }
    }
    Ok(r)
}

/// Accuracy of always answering the most common answer: the majority
/// boolean for boolean questions, and the most frequent exact entity set
/// (as an id set) for entity questions.
pub fn majority_baseline(train: &[Example], test: &[Example]) -> f64 {
    let trues = train.iter().filter(|e| e.answer == Answer::Bool(true)).count();
    let falses = train.iter().filter(|e| e.answer == Answer::Bool(false)).count();
    let majority = trues >= falses;
    let mut counts: std::collections::BTreeMap<BTreeSet<String>, usize> = Default::default();
    for ex in train {
        if let Answer::Entities(ids) = &ex.answer {
            *counts.entry(ids.iter().cloned().collect()).or_default() += 1;
        }
    }
    let best_set = counts.into_iter().max_by_key(|(_, c)| *c).map(|(s, _)| s);
    if test.is_empty() {
        return 0.0;
    }
    let correct = test
        .iter()
        .filter(|ex| match &ex.answer {
            Answer::Bool(a) => *a == majority,
            Answer::Entities(ids) => best_set.as_ref() == Some(&ids.iter().cloned().collect()),
        })
        .count();
    100.0 * correct as f64 / test.len() as f64
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
}

/// Runs the curriculum. The returned parameters are those with the best
/// validation accuracy during the final phase (the last epoch when there
/// is no validation set).
pub fn train(
    data: &[Example],
    val: &[Example],
    vocab: Vocabulary,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) + Send,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    pool.install(|| {
        let mut params = ModelParams::init(vocab, &mut rng_stream(cfg.seed, streams::INIT));
        // the penalty is one term for the whole training set, so each
        // example carries 1/N of it
        let reg = cfg.reg / data.len() as f64;
        let mut shuffle = rng_stream(cfg.seed, streams::SHUFFLE);
        let phases = curriculum(data, cfg.curriculum)?;
        let mut metrics = Vec::new();
        let mut best: Option<(f64, ParamStore)> = None;
        for (pi, phase) in phases.iter().enumerate() {
            let last = pi + 1 == phases.len();
            let mut since_best = 0;
            let epochs = if last { cfg.max_epochs } else { cfg.phase_epochs };
            if phase.indices.is_empty() {
                continue;
            }
            for epoch in 0..epochs {
                let mut order = phase.indices.clone();
                order.shuffle(&mut shuffle);
                let mut loss = 0.0;
                for chunk in order.chunks(cfg.batch_size) {
                    let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
                    let (mut g, l) = batch_gradient(&params, &batch, reg)?;
                    loss += l;
                    sgd_step(&mut params.store, &mut g, cfg.lr)?;
                }
                let report = if val.is_empty() {
                    None
                } else {
                    Some(evaluate(&params, val)?)
                };
                let m = EpochMetrics {
                    phase: pi + 1,
                    epoch: epoch + 1,
                    train_loss: -loss / order.len() as f64,
                    val_overall: report.as_ref().and_then(|r| r.overall.accuracy()),
                    val_bool: report.as_ref().and_then(|r| r.boolean.accuracy()),
                    val_entity: report.as_ref().and_then(|r| r.entity.accuracy()),
                    val_relation: report.as_ref().and_then(|r| r.relation.accuracy()),
                };
                on_epoch(&m);
                metrics.push(m.clone());
                if last {
                    let Some(acc) = m.val_overall else { continue };
                    if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                        best = Some((acc, params.store.clone()));
                        since_best = 0;
                    } else {
                        since_best += 1;
                        if since_best >= cfg.patience {
                            break;
                        }
                    }
                    if acc >= 100.0 {
                        break;
                    }
                }
            }
        }
        if let Some((_, store)) = best {
            params.store = store;
        }
        Ok(TrainOutcome { params, metrics })
    })
}
