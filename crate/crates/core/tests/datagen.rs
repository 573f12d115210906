mod common;

use std::collections::{BTreeMap, HashSet};

use common::{entity, oracle};
use compsem::datagen::*;
use compsem::kg::{Answer, Example, KnowledgeGraph};
use compsem::training::{rng_stream, streams};
use proptest::prelude::*;

fn small_sizes() -> Sizes {
    Sizes {
        train: 700,
        val: 140,
        short_test: 140,
        complex_test: 120,
    }
}

fn splits(seed: u64) -> Splits {
    gen_dataset(
        &SceneSpec::default(),
        &small_sizes(),
        &mut rng_stream(seed, streams::DATAGEN),
    )
    .unwrap()
}

fn all_examples(s: &Splits) -> impl Iterator<Item = &Example> {
    s.named().into_iter().flat_map(|(_, d)| d.iter())
}

#[test]
fn oracle_agrees_with_every_generated_answer() {
    let s = splits(5);
    let mut n = 0;
    for ex in all_examples(&s) {
        let got =
            oracle::answer(&ex.kg, &ex.tokens).unwrap_or_else(|| panic!("oracle cannot read {:?}", ex.question()));
        assert_eq!(got, ex.answer, "{:?}", ex.question());
        n += 1;
    }
    assert!(n > 1000);
}

#[test]
fn oracle_examples_by_hand() {
    // two cubes and a sphere, in a row left to right
    let ents = vec![
        entity("a", "cube", "red", "large", "metal"),
        entity("b", "sphere", "red", "small", "rubber"),
        entity("c", "cube", "blue", "small", "rubber"),
    ];
    let kg = scene_from_coordinates(ents, &[0, 1, 2], &[2, 0, 1]);
    let q = |s: &str| {
        let toks: Vec<String> = s.split(' ').map(String::from).collect();
        let mine = oracle::answer(&kg, &toks).unwrap();
        let theirs = parse_surface(&toks).unwrap().eval(&kg);
        assert_eq!(mine, theirs, "{s}");
        mine
    };
    let ids = |v: &[&str]| Answer::Entities(v.iter().map(|s| s.to_string()).collect());
    assert_eq!(q("what is not spherical"), ids(&["a", "c"]));
    assert_eq!(q("is anything red and large"), Answer::Bool(true));
    assert_eq!(q("is anything blue and large"), Answer::Bool(false));
    // a is above both others; c is above b, which is no cube
    assert_eq!(q("what is above a cube"), ids(&["a"]));
    assert_eq!(q("what is left of and above a cube"), ids(&["a"]));
    assert_eq!(q("what is right of or beneath a red thing"), ids(&["b", "c"]));
    assert_eq!(q("are two cubes red"), Answer::Bool(false));
    assert_eq!(q("are two things small"), Answer::Bool(true));
    assert_eq!(q("is every cube metal"), Answer::Bool(false));
    assert_eq!(q("is no sphere blue"), Answer::Bool(true));
    assert_eq!(q("what is a cube that is not red"), ids(&["c"]));
    assert_eq!(q("what is red or not small"), ids(&["a", "b"]));
    assert_eq!(
        q("what is a thing that is beneath a cube that is left of a sphere"),
        ids(&["b", "c"])
    );
    assert_eq!(
        q("is anything green or is there a sphere or is anything small"),
        Answer::Bool(true)
    );
}

#[test]
fn booleans_are_balanced_per_template() {
    let s = splits(8);
    for (name, data) in s.named() {
        let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for ex in data {
            if let Answer::Bool(b) = ex.answer {
                let c = counts.entry(ex.template.as_deref().unwrap()).or_default();
                if b {
                    c.0 += 1
                } else {
                    c.1 += 1
                }
            }
        }
        assert!(!counts.is_empty());
        for (t, (tr, fa)) in counts {
            let frac = tr as f64 / (tr + fa) as f64;
            assert!((0.45..=0.55).contains(&frac), "{name}/{t}: {tr} true, {fa} false");
        }
    }
}

#[test]
fn complex_questions_are_longer_than_training_ones() {
    let s = splits(2);
    let mut longest: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in &s.train {
        let fam = template_family(ex.template.as_deref().unwrap());
        let e = longest.entry(fam).or_default();
        *e = (*e).max(ex.tokens.len());
    }
    assert!(!s.complex_test.is_empty());
    for ex in &s.complex_test {
        let fam = template_family(ex.template.as_deref().unwrap());
        assert!(ex.tokens.len() > longest[fam], "{}", ex.question());
        assert!(!s.train.iter().any(|t| t.tokens == ex.tokens));
    }
}

#[test]
fn no_duplicate_pairs_across_splits() {
    let s = splits(4);
    let mut seen = HashSet::new();
    for ex in all_examples(&s) {
        assert!(
            seen.insert((ex.question(), format!("{:?}", ex.answer))),
            "{}",
            ex.question()
        );
    }
}

#[test]
fn relation_answers_need_the_relation() {
    let s = splits(6);
    for ex in all_examples(&s) {
        let Some(Query::Select(set)) = parse_surface(&ex.tokens) else {
            continue;
        };
        if !set.has_relation() {
            continue;
        }
        let gold = set.eval(&ex.kg);
        for r in set.attribute_only_readings() {
            assert_ne!(r.eval(&ex.kg), gold, "{}", ex.question());
        }
    }
}

#[test]
fn filter_rebalances_skewed_templates() {
    let kg = scene_from_coordinates(vec![entity("a", "cube", "red", "large", "metal")], &[0], &[0]);
    let mk = |q: &str, b: bool| Example {
        tokens: q.split(' ').map(String::from).collect(),
        answer: Answer::Bool(b),
        kg: kg.clone(),
        template: Some("attribute-existence".into()),
        length: None,
    };
    let colors = [
        "red", "blue", "green", "gray", "brown", "purple", "cyan", "yellow", "metal", "rubber",
    ];
    let data: Vec<Example> = colors
        .iter()
        .enumerate()
        .map(|(i, c)| mk(&format!("is anything {c}"), i != 0))
        .collect();
    let out = bias_filter(data);
    let t = out.iter().filter(|e| e.answer == Answer::Bool(true)).count();
    assert_eq!((t, out.len()), (1, 2));
}

#[test]
fn filter_drops_relation_questions_answerable_without_the_relation() {
    // a sphere on the left and on top, a cube to its right and below
    let ents = vec![
        entity("a", "sphere", "red", "large", "metal"),
        entity("b", "cube", "red", "large", "metal"),
    ];
    let kg = scene_from_coordinates(ents, &[0, 1], &[1, 0]);
    let ex = |q: &str, ids: &[&str]| Example {
        tokens: q.split(' ').map(String::from).collect(),
        answer: Answer::Entities(ids.iter().map(|s| s.to_string()).collect()),
        kg: kg.clone(),
        template: Some("relation".into()),
        length: None,
    };
    // {a} is neither "a cube" nor "a thing", so the relation matters
    let keep = ex("what is left of a cube", &["a"]);
    // {b} is just "a cube"
    let drop = ex("what is a cube that is beneath a sphere", &["b"]);
    let out = bias_filter(vec![keep.clone(), drop, keep.clone()]);
    assert_eq!(out, vec![keep]);
}

#[test]
fn filter_is_idempotent_on_generated_data() {
    let s = splits(9);
    let mut data = s.train.clone();
    data.extend(s.train.iter().take(50).cloned());
    let once = bias_filter(data);
    let twice = bias_filter(once.clone());
    assert_eq!(once, twice);
}

#[test]
fn seeded_generation_repeats() {
    let a = splits(12);
    let b = splits(12);
    let c = splits(13);
    for ((_, x), (_, y)) in a.named().into_iter().zip(b.named()) {
        assert_eq!(x, y);
    }
    assert_ne!(a.train, c.train);
}

#[test]
fn written_splits_load_back() {
    let s = splits(1);
    let dir = tempfile::tempdir().unwrap();
    s.write(dir.path()).unwrap();
    let mut v = compsem::kg::Vocabulary::clevr();
    for (name, data) in s.named() {
        let back = compsem::kg::load_dataset(&dir.path().join(format!("{name}.jsonl")), &mut v).unwrap();
        assert_eq!(&back, data);
    }
}

#[test]
fn too_many_entities_for_the_grid() {
    let spec = SceneSpec {
        min_entities: 4,
        max_entities: 20,
        grid: 8,
    };
    assert!(matches!(
        gen_scene(&spec, &mut rng_stream(0, 1)),
        Err(DatagenError::GridTooSmall { .. })
    ));
}

fn relation_pairs_hold(kg: &KnowledgeGraph) {
    let n = kg.len();
    let adj = |r| kg.adjacency(r).unwrap();
    let (l, r, a, b) = (adj("left"), adj("right"), adj("above"), adj("beneath"));
    assert_eq!(l.count(), n * (n - 1) / 2);
    for i in 0..n {
        assert!(!l.get(i, i) && !r.get(i, i) && !a.get(i, i) && !b.get(i, i));
        for j in 0..n {
            if i != j {
                assert!(l.get(i, j) ^ r.get(i, j));
                assert!(a.get(i, j) ^ b.get(i, j));
            }
            assert_eq!(l.get(i, j), r.get(j, i));
            assert_eq!(a.get(i, j), b.get(j, i));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scenes_keep_their_relation_invariants(seed in any::<u64>(), lo in 1usize..6, extra in 0usize..6) {
        let spec = SceneSpec { min_entities: lo, max_entities: lo + extra, grid: 16 };
        let kg = gen_scene(&spec, &mut rng_stream(seed, streams::DATAGEN)).unwrap();
        prop_assert!((lo..=lo + extra).contains(&kg.len()));
        relation_pairs_hold(&kg);
    }

    #[test]
    fn single_questions_match_the_oracle(seed in any::<u64>(), t in 0usize..10) {
        let all: Vec<Template> = Template::SHORT.iter().chain(&COMPLEX_TEMPLATES).copied().collect();
        let template = all[t];
        let mut rng = rng_stream(seed, streams::DATAGEN);
        let kg = gen_scene(&SceneSpec::default(), &mut rng).unwrap();
        if let Some(ex) = gen_question(template, &kg, &mut rng) {
            prop_assert_eq!(oracle::answer(&ex.kg, &ex.tokens), Some(ex.answer.clone()), "{}", ex.question());
            prop_assert_eq!(ex.length, Some(ex.tokens.len()));
        }
    }
}
