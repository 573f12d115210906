//! A second, deliberately naive reading of generated questions. It works on
//! raw token slices and index sets and shares no code with the generator.

use std::collections::BTreeSet;

use compsem::kg::{Answer, KnowledgeGraph};

type Set = BTreeSet<usize>;

fn all(kg: &KnowledgeGraph) -> Set {
    (0..kg.len()).collect()
}

fn with(kg: &KnowledgeGraph, attr: &str, value: &str) -> Set {
    (0..kg.len())
        .filter(|&i| kg.attribute(i, attr) == Some(value))
        .collect()
}

fn adjective(kg: &KnowledgeGraph, w: &str) -> Option<Set> {
    let (attr, value) = match w {
        "cubical" => ("shape", "cube"),
        "spherical" => ("shape", "sphere"),
        "cylindrical" => ("shape", "cylinder"),
        "large" | "small" => ("size", w),
        "metal" | "rubber" => ("material", w),
        "gray" | "red" | "blue" | "green" | "brown" | "purple" | "cyan" | "yellow" => ("color", w),
        _ => return None,
    };
    Some(with(kg, attr, value))
}

fn noun(kg: &KnowledgeGraph, w: &str) -> Option<Set> {
    match w.trim_end_matches('s') {
        "thing" => Some(all(kg)),
        s @ ("cube" | "sphere" | "cylinder") => Some(with(kg, "shape", s)),
        _ => None,
    }
}

/// adjectives followed by exactly one noun
fn noun_phrase(kg: &KnowledgeGraph, t: &[&str]) -> Option<Set> {
    let (last, adjs) = t.split_last()?;
    let mut s = noun(kg, last)?;
    for a in adjs {
        s = &s & &adjective(kg, a)?;
    }
    Some(s)
}

fn base_relation(t: &[&str]) -> Option<&'static str> {
    match t {
        ["left", "of"] => Some("left"),
        ["right", "of"] => Some("right"),
        ["above"] => Some("above"),
        ["beneath"] => Some("beneath"),
        _ => None,
    }
}

/// Pairs (i, j) with i standing in the (possibly compound) relation to j.
fn relation(kg: &KnowledgeGraph, t: &[&str]) -> Option<BTreeSet<(usize, usize)>> {
    let edges = |r: &str| -> BTreeSet<(usize, usize)> {
        let adj = kg.adjacency(r).unwrap();
        let n = kg.len();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| adj.get(i, j))
            .collect()
    };
    if let Some(r) = base_relation(t) {
        return Some(edges(r));
    }
    let k = t.iter().position(|w| *w == "and" || *w == "or")?;
    let a = edges(base_relation(&t[..k])?);
    let b = edges(base_relation(&t[k + 1..])?);
    Some(if t[k] == "and" { &a & &b } else { &a | &b })
}

/// `REL a NP [that is REL a NP ...]`
fn chain(kg: &KnowledgeGraph, t: &[&str]) -> Option<Set> {
    let segments = split_on(t, &["that", "is"]);
    let mut inner: Option<Set> = None;
    for seg in segments.iter().rev() {
        let a = seg.iter().position(|w| *w == "a")?;
        let rel = relation(kg, &seg[..a])?;
        let mut target = noun_phrase(kg, &seg[a + 1..])?;
        if let Some(s) = inner {
            target = &target & &s;
        }
        inner = Some(
            rel.iter()
                .filter(|(_, j)| target.contains(j))
                .map(|&(i, _)| i)
                .collect(),
        );
    }
    inner
}

fn split_on<'a>(t: &'a [&'a str], sep: &[&str]) -> Vec<&'a [&'a str]> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i + sep.len() <= t.len() {
        if &t[i..i + sep.len()] == sep {
            out.push(&t[start..i]);
            i += sep.len();
            start = i;
        } else {
            i += 1;
        }
    }
    out.push(&t[start..]);
    out
}

fn complement(kg: &KnowledgeGraph, s: &Set) -> Set {
    &all(kg) - s
}

/// Everything after "what is".
fn predicate(kg: &KnowledgeGraph, t: &[&str]) -> Option<Set> {
    match t {
        ["not", a] => Some(complement(kg, &adjective(kg, a)?)),
        [a, op @ ("and" | "or"), "not", b] => {
            let x = adjective(kg, a)?;
            let y = complement(kg, &adjective(kg, b)?);
            Some(if *op == "and" { &x & &y } else { &x | &y })
        }
        [a] => adjective(kg, a),
        ["a", rest @ ..] => {
            let parts = split_on(rest, &["that", "is"]);
            let head = noun_phrase(kg, parts[0])?;
            if parts.len() == 1 {
                return Some(head);
            }
            let tail = &rest[parts[0].len() + 2..];
            if let ["not", a] = tail {
                return Some(&head & &complement(kg, &adjective(kg, a)?));
            }
            Some(&head & &chain(kg, tail)?)
        }
        _ => chain(kg, t),
    }
}

fn clause(kg: &KnowledgeGraph, t: &[&str]) -> Option<bool> {
    match t {
        ["is", "there", "a", np @ ..] => Some(!noun_phrase(kg, np)?.is_empty()),
        ["is", q @ ("every" | "no"), rest @ ..] => {
            let (adj, np) = rest.split_last()?;
            let a = noun_phrase(kg, np)?;
            let b = adjective(kg, adj)?;
            Some(if *q == "every" {
                a.is_subset(&b)
            } else {
                a.is_disjoint(&b)
            })
        }
        ["is", "anything", a] => Some(!adjective(kg, a)?.is_empty()),
        ["is", "anything", a, op @ ("and" | "or"), b] if adjective(kg, a).is_some() => {
            let (x, y) = (adjective(kg, a)?, adjective(kg, b)?);
            let s = if *op == "and" { &x & &y } else { &x | &y };
            Some(!s.is_empty())
        }
        ["is", "anything", rest @ ..] => Some(!chain(kg, rest)?.is_empty()),
        _ => None,
    }
}

/// The answer a question has over `kg`, or `None` if the words do not parse.
pub fn answer(kg: &KnowledgeGraph, tokens: &[String]) -> Option<Answer> {
    let t: Vec<&str> = tokens.iter().map(String::as_str).collect();
    match t.as_slice() {
        ["what", "is", rest @ ..] => {
            let s = predicate(kg, rest)?;
            Some(Answer::Entities(
                s.into_iter().map(|i| kg.entities[i].id.clone()).collect(),
            ))
        }
        ["are", k, rest @ ..] => {
            let k = ["two", "three", "four", "five"].iter().position(|w| w == k)? + 2;
            let (adj, np) = rest.split_last()?;
            let s = &noun_phrase(kg, np)? & &adjective(kg, adj)?;
            Some(Answer::Bool(s.len() >= k))
        }
        _ => {
            // clauses are joined by a connective directly followed by "is"
            let cut: Vec<usize> = (1..t.len())
                .filter(|&i| (t[i] == "and" || t[i] == "or") && t.get(i + 1) == Some(&"is"))
                .collect();
            let mut start = 0;
            let mut values = Vec::new();
            for &c in &cut {
                values.push(clause(kg, &t[start..c])?);
                start = c + 1;
            }
            values.push(clause(kg, &t[start..])?);
            let ops: BTreeSet<&str> = cut.iter().map(|&c| t[c]).collect();
            match ops.len() {
                0 => Some(Answer::Bool(values[0])),
                1 if ops.contains("and") => Some(Answer::Bool(values.iter().all(|&v| v))),
                1 => Some(Answer::Bool(values.iter().any(|&v| v))),
                _ => None,
            }
        }
    }
}
