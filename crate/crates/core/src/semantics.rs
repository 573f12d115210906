//! Semantic types, denotation values and the composition rule table.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Semantic category of a span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SemanticType {
    E,
    R,
    T,
    V,
    EV,
    RV,
    TV,
    PHI,
}

impl SemanticType {
    pub const ALL: [SemanticType; 8] = [
        SemanticType::E,
        SemanticType::R,
        SemanticType::T,
        SemanticType::V,
        SemanticType::EV,
        SemanticType::RV,
        SemanticType::TV,
        SemanticType::PHI,
    ];

    /// Types a single token may take, in the order used by type distributions.
    pub const LEAF: [SemanticType; 4] = [SemanticType::E, SemanticType::R, SemanticType::V, SemanticType::PHI];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_leaf_type(self) -> bool {
        Self::LEAF.contains(&self)
    }

    pub fn is_partial(self) -> bool {
        matches!(self, SemanticType::EV | SemanticType::RV | SemanticType::TV)
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticType::E => "E",
            SemanticType::R => "R",
            SemanticType::T => "T",
            SemanticType::V => "V",
            SemanticType::EV => "EV",
            SemanticType::RV => "RV",
            SemanticType::TV => "TV",
            SemanticType::PHI => "PHI",
        }
    }
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Soft entity set: one membership probability per entity.
#[derive(Clone, Debug, PartialEq)]
pub struct EntitySet(pub Vec<f64>);

/// Soft adjacency matrix, row-major, `n × n`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationSet {
    pub n: usize,
    pub data: Vec<f64>,
}

impl RelationSet {
    pub fn new(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n, "relation data must be n*n");
        Self { n, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Soft boolean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Truth(pub f64);

pub const BUNDLE_LEN: usize = 14;
/// Offsets of v1..v4 inside a flattened bundle.
pub const V1: usize = 0;
pub const V2: usize = 2;
pub const V3: usize = 5;
pub const V4: usize = 9;

/// The four ungrounded vectors of a function word: v1 ∈ ℝ², v2 ∈ ℝ³,
/// v3 ∈ ℝ⁴, v4 ∈ ℝ⁵, stored back to back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VectorBundle(pub [f64; BUNDLE_LEN]);

impl VectorBundle {
    pub fn from_parts(v1: [f64; 2], v2: [f64; 3], v3: [f64; 4], v4: [f64; 5]) -> Self {
        let mut b = [0.0; BUNDLE_LEN];
        b[V1..V2].copy_from_slice(&v1);
        b[V2..V3].copy_from_slice(&v2);
        b[V3..V4].copy_from_slice(&v3);
        b[V4..].copy_from_slice(&v4);
        Self(b)
    }

    pub fn v1(&self) -> &[f64] {
        &self.0[V1..V2]
    }
    pub fn v2(&self) -> &[f64] {
        &self.0[V2..V3]
    }
    pub fn v3(&self) -> &[f64] {
        &self.0[V3..V4]
    }
    pub fn v4(&self) -> &[f64] {
        &self.0[V4..]
    }

    pub fn dims() -> [usize; 4] {
        [V2 - V1, V3 - V2, V4 - V3, BUNDLE_LEN - V4]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Denotation {
    E(EntitySet),
    R(RelationSet),
    T(Truth),
    V(VectorBundle),
    EV(EntitySet, VectorBundle),
    RV(RelationSet, VectorBundle),
    TV(Truth, VectorBundle),
    PHI,
}

impl Denotation {
    pub fn semantic_type(&self) -> SemanticType {
        match self {
            Denotation::E(_) => SemanticType::E,
            Denotation::R(_) => SemanticType::R,
            Denotation::T(_) => SemanticType::T,
            Denotation::V(_) => SemanticType::V,
            Denotation::EV(..) => SemanticType::EV,
            Denotation::RV(..) => SemanticType::RV,
            Denotation::TV(..) => SemanticType::TV,
            Denotation::PHI => SemanticType::PHI,
        }
    }

    /// Every grounded component, flattened.
    pub fn grounded_values(&self) -> Vec<f64> {
        match self {
            Denotation::E(s) | Denotation::EV(s, _) => s.0.clone(),
            Denotation::R(r) | Denotation::RV(r, _) => r.data.clone(),
            Denotation::T(t) | Denotation::TV(t, _) => vec![t.0],
            Denotation::V(_) | Denotation::PHI => Vec::new(),
        }
    }

    pub fn bundle(&self) -> Option<&VectorBundle> {
        match self {
            Denotation::V(b) | Denotation::EV(_, b) | Denotation::RV(_, b) | Denotation::TV(_, b) => Some(b),
            _ => None,
        }
    }
}

/// Which trainable vector parameterizes a module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ParamSource {
    Global,
    V1,
    V2,
    V3,
    V4,
    None,
}

/// Which side of a binary composition a value comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Side {
    Left,
    Right,
}

/// The functional family a rule belongs to. `Side` marks the child that
/// carries the word vector (the V or partially grounded child) or, for
/// union and φ rules, the child that is passed through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ModuleKind {
    /// E+E→E with the global `[w1, w2, b]`.
    Intersect,
    /// V+E→E with v1.
    Complement,
    /// EV+E→E, E+EV→E, TV+T→T, T+TV→T, RV+R→R, R+RV→R with v2.
    Threshold(Side),
    /// R+E→E, parameter free.
    RelationImage,
    /// V+E→T with v3.
    Count,
    /// EV+E→T, E+EV→T with v4.
    Quantify(Side),
    /// X+V→XV or V+X→XV; `Side` is the grounded child.
    Union(Side),
    /// t+φ→t or φ+t→t; `Side` is the child passed through.
    Identity(Side),
}

/// A composition rule `left + right → output`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rule {
    pub id: usize,
    pub left: SemanticType,
    pub right: SemanticType,
    pub output: SemanticType,
    pub kind: ModuleKind,
    pub params: ParamSource,
}

impl Rule {
    pub fn name(&self) -> String {
        format!("{}+{}->{}", self.left, self.right, self.output)
    }
}

use ModuleKind::*;
use SemanticType::*;

macro_rules! rule {
    ($id:expr, $l:expr, $r:expr, $o:expr, $k:expr, $p:expr) => {
        Rule {
            id: $id,
            left: $l,
            right: $r,
            output: $o,
            kind: $k,
            params: $p,
        }
    };
}

/// The complete, fixed rule inventory. A rule's position is its id.
pub static RULES: [Rule; 33] = [
    rule!(0, E, E, E, Intersect, ParamSource::Global),
    rule!(1, V, E, E, Complement, ParamSource::V1),
    rule!(2, EV, E, E, Threshold(Side::Left), ParamSource::V2),
    rule!(3, E, EV, E, Threshold(Side::Right), ParamSource::V2),
    rule!(4, R, E, E, RelationImage, ParamSource::None),
    rule!(5, V, E, T, Count, ParamSource::V3),
    rule!(6, EV, E, T, Quantify(Side::Left), ParamSource::V4),
    rule!(7, E, EV, T, Quantify(Side::Right), ParamSource::V4),
    rule!(8, TV, T, T, Threshold(Side::Left), ParamSource::V2),
    rule!(9, T, TV, T, Threshold(Side::Right), ParamSource::V2),
    rule!(10, RV, R, R, Threshold(Side::Left), ParamSource::V2),
    rule!(11, R, RV, R, Threshold(Side::Right), ParamSource::V2),
    rule!(12, E, V, EV, Union(Side::Left), ParamSource::None),
    rule!(13, V, E, EV, Union(Side::Right), ParamSource::None),
    rule!(14, R, V, RV, Union(Side::Left), ParamSource::None),
    rule!(15, V, R, RV, Union(Side::Right), ParamSource::None),
    rule!(16, T, V, TV, Union(Side::Left), ParamSource::None),
    rule!(17, V, T, TV, Union(Side::Right), ParamSource::None),
    rule!(18, E, PHI, E, Identity(Side::Left), ParamSource::None),
    rule!(19, R, PHI, R, Identity(Side::Left), ParamSource::None),
    rule!(20, T, PHI, T, Identity(Side::Left), ParamSource::None),
    rule!(21, V, PHI, V, Identity(Side::Left), ParamSource::None),
    rule!(22, EV, PHI, EV, Identity(Side::Left), ParamSource::None),
    rule!(23, RV, PHI, RV, Identity(Side::Left), ParamSource::None),
    rule!(24, TV, PHI, TV, Identity(Side::Left), ParamSource::None),
    rule!(25, PHI, PHI, PHI, Identity(Side::Left), ParamSource::None),
    rule!(26, PHI, E, E, Identity(Side::Right), ParamSource::None),
    rule!(27, PHI, R, R, Identity(Side::Right), ParamSource::None),
    rule!(28, PHI, T, T, Identity(Side::Right), ParamSource::None),
    rule!(29, PHI, V, V, Identity(Side::Right), ParamSource::None),
    rule!(30, PHI, EV, EV, Identity(Side::Right), ParamSource::None),
    rule!(31, PHI, RV, RV, Identity(Side::Right), ParamSource::None),
    rule!(32, PHI, TV, TV, Identity(Side::Right), ParamSource::None),
];

pub const NUM_RULES: usize = RULES.len();

/// Rules whose input types are exactly `(left, right)`.
pub fn applicable_modules(left: SemanticType, right: SemanticType) -> Vec<&'static Rule> {
    RULES.iter().filter(|r| r.left == left && r.right == right).collect()
}

/// Same as [`applicable_modules`], precomputed for every type pair.
pub fn rule_table() -> &'static [[Vec<usize>; 8]; 8] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[[Vec<usize>; 8]; 8]> = OnceLock::new();
    TABLE.get_or_init(|| {
        std::array::from_fn(|l| {
            std::array::from_fn(|r| {
                applicable_modules(SemanticType::ALL[l], SemanticType::ALL[r])
                    .into_iter()
                    .map(|rule| rule.id)
                    .collect()
            })
        })
    })
}
