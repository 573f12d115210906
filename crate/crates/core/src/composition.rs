//! Composition modules: value-level reference functions plus their tape
//! counterparts used inside the chart.
//!
//! Mirrored modules (E+EV, T+TV, R+RV) use the same equation as their
//! left-headed twin with arguments taken in textual order.

use thiserror::Error;

use crate::autodiff::{kernels, AutodiffError, Tape, Var};
use crate::semantics::{
    Denotation, EntitySet, ModuleKind, ParamSource, RelationSet, Rule, SemanticType, Side, Truth, VectorBundle, V1, V2,
    V3, V4,
};

pub type ModuleDescriptor = Rule;

#[derive(Debug, Error, PartialEq)]
pub enum CompositionError {
    #[error("length mismatch: left has {left} entries, right has {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("expected a grounded E, R or T denotation, got {0}")]
    NotGrounded(SemanticType),
    #[error("rule {rule} cannot take ({left}, {right})")]
    WrongTypes {
        rule: String,
        left: SemanticType,
        right: SemanticType,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, CompositionError>;

fn same_len(l: usize, r: usize) -> Result<()> {
    if l == r {
        Ok(())
    } else {
        Err(CompositionError::LengthMismatch { left: l, right: r })
    }
}

pub fn compose_ee_e(left: &EntitySet, right: &EntitySet, global: [f64; 3]) -> Result<EntitySet> {
    same_len(left.0.len(), right.0.len())?;
    Ok(EntitySet(kernels::affine_sigmoid(&global, &[&left.0, &right.0])))
}

pub fn compose_ve_e(v1: &[f64], right: &EntitySet) -> EntitySet {
    EntitySet(kernels::affine_sigmoid(&v1[..2], &[&right.0]))
}

pub fn compose_eve_e(left: &EntitySet, v2: &[f64], right: &EntitySet) -> Result<EntitySet> {
    same_len(left.0.len(), right.0.len())?;
    Ok(EntitySet(kernels::affine_sigmoid(&v2[..3], &[&left.0, &right.0])))
}

pub fn compose_re_e(rel: &RelationSet, right: &EntitySet) -> Result<EntitySet> {
    same_len(rel.n, right.0.len())?;
    Ok(EntitySet(kernels::noisy_or(&rel.data, &right.0, rel.n)))
}

pub fn compose_ve_t(v3: &[f64], right: &EntitySet) -> Truth {
    Truth(kernels::count_sigmoid(&v3[..4], &right.0))
}

pub fn compose_eve_t(left: &EntitySet, v4: &[f64], right: &EntitySet) -> Result<Truth> {
    same_len(left.0.len(), right.0.len())?;
    Ok(Truth(kernels::nested_sigmoid(&v4[..5], &left.0, &right.0)))
}

pub fn compose_tvt_t(left: Truth, v2: &[f64], right: Truth) -> Truth {
    Truth(kernels::affine_sigmoid(&v2[..3], &[&[left.0], &[right.0]])[0])
}

pub fn compose_rvr_r(left: &RelationSet, v2: &[f64], right: &RelationSet) -> Result<RelationSet> {
    same_len(left.n, right.n)?;
    Ok(RelationSet::new(
        left.n,
        kernels::affine_sigmoid(&v2[..3], &[&left.data, &right.data]),
    ))
}

pub fn compose_union(grounded: Denotation, bundle: VectorBundle) -> Result<Denotation> {
    match grounded {
        Denotation::E(s) => Ok(Denotation::EV(s, bundle)),
        Denotation::R(r) => Ok(Denotation::RV(r, bundle)),
        Denotation::T(t) => Ok(Denotation::TV(t, bundle)),
        other => Err(CompositionError::NotGrounded(other.semantic_type())),
    }
}

pub fn compose_phi(x: Denotation) -> Denotation {
    x
}

fn wrong(rule: &Rule, l: SemanticType, r: SemanticType) -> CompositionError {
    CompositionError::WrongTypes {
        rule: rule.name(),
        left: l,
        right: r,
    }
}

/// Value-level application of `rule`.
pub fn apply_rule(rule: &Rule, left: &Denotation, right: &Denotation, global: [f64; 3]) -> Result<Denotation> {
    use Denotation as D;
    let err = || wrong(rule, left.semantic_type(), right.semantic_type());
    if left.semantic_type() != rule.left || right.semantic_type() != rule.right {
        return Err(err());
    }
    Ok(match (rule.kind, left, right) {
        (ModuleKind::Intersect, D::E(l), D::E(r)) => D::E(compose_ee_e(l, r, global)?),
        (ModuleKind::Complement, D::V(b), D::E(r)) => D::E(compose_ve_e(b.v1(), r)),
        (ModuleKind::Threshold(Side::Left), D::EV(l, b), D::E(r)) => D::E(compose_eve_e(l, b.v2(), r)?),
        (ModuleKind::Threshold(Side::Right), D::E(l), D::EV(r, b)) => D::E(compose_eve_e(l, b.v2(), r)?),
        (ModuleKind::Threshold(Side::Left), D::TV(l, b), D::T(r)) => D::T(compose_tvt_t(*l, b.v2(), *r)),
        (ModuleKind::Threshold(Side::Right), D::T(l), D::TV(r, b)) => D::T(compose_tvt_t(*l, b.v2(), *r)),
        (ModuleKind::Threshold(Side::Left), D::RV(l, b), D::R(r)) => D::R(compose_rvr_r(l, b.v2(), r)?),
        (ModuleKind::Threshold(Side::Right), D::R(l), D::RV(r, b)) => D::R(compose_rvr_r(l, b.v2(), r)?),
        (ModuleKind::RelationImage, D::R(a), D::E(r)) => D::E(compose_re_e(a, r)?),
        (ModuleKind::Count, D::V(b), D::E(r)) => D::T(compose_ve_t(b.v3(), r)),
        (ModuleKind::Quantify(Side::Left), D::EV(l, b), D::E(r)) => D::T(compose_eve_t(l, b.v4(), r)?),
        (ModuleKind::Quantify(Side::Right), D::E(l), D::EV(r, b)) => D::T(compose_eve_t(l, b.v4(), r)?),
        (ModuleKind::Union(Side::Left), g, D::V(b)) => compose_union(g.clone(), *b)?,
        (ModuleKind::Union(Side::Right), D::V(b), g) => compose_union(g.clone(), *b)?,
        (ModuleKind::Identity(Side::Left), x, D::PHI) => compose_phi(x.clone()),
        (ModuleKind::Identity(Side::Right), D::PHI, x) => compose_phi(x.clone()),
        _ => return Err(err()),
    })
}

/// A denotation living on the tape. Bundles are `Vector(14)` handles;
/// relations are flattened `Vector(n*n)`; truths are scalars.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenVar {
    E(Var),
    R(Var),
    T(Var),
    V(Var),
    EV(Var, Var),
    RV(Var, Var),
    TV(Var, Var),
    PHI,
}

impl DenVar {
    pub fn semantic_type(&self) -> SemanticType {
        match self {
            DenVar::E(_) => SemanticType::E,
            DenVar::R(_) => SemanticType::R,
            DenVar::T(_) => SemanticType::T,
            DenVar::V(_) => SemanticType::V,
            DenVar::EV(..) => SemanticType::EV,
            DenVar::RV(..) => SemanticType::RV,
            DenVar::TV(..) => SemanticType::TV,
            DenVar::PHI => SemanticType::PHI,
        }
    }

    /// The grounded component, if any.
    pub fn grounded(&self) -> Option<Var> {
        match *self {
            DenVar::E(v) | DenVar::R(v) | DenVar::T(v) => Some(v),
            DenVar::EV(v, _) | DenVar::RV(v, _) | DenVar::TV(v, _) => Some(v),
            DenVar::V(_) | DenVar::PHI => None,
        }
    }

    pub fn bundle(&self) -> Option<Var> {
        match *self {
            DenVar::V(b) | DenVar::EV(_, b) | DenVar::RV(_, b) | DenVar::TV(_, b) => Some(b),
            _ => None,
        }
    }

    /// Rebuilds a value of the same type from grounded and bundle parts.
    pub fn with_parts(ty: SemanticType, grounded: Option<Var>, bundle: Option<Var>) -> Self {
        match ty {
            SemanticType::E => DenVar::E(grounded.expect("grounded part")),
            SemanticType::R => DenVar::R(grounded.expect("grounded part")),
            SemanticType::T => DenVar::T(grounded.expect("grounded part")),
            SemanticType::V => DenVar::V(bundle.expect("bundle part")),
            SemanticType::EV => DenVar::EV(grounded.expect("grounded part"), bundle.expect("bundle part")),
            SemanticType::RV => DenVar::RV(grounded.expect("grounded part"), bundle.expect("bundle part")),
            SemanticType::TV => DenVar::TV(grounded.expect("grounded part"), bundle.expect("bundle part")),
            SemanticType::PHI => DenVar::PHI,
        }
    }

    /// Reads the current values off the tape.
    pub fn to_denotation(&self, tape: &Tape, n: usize) -> Denotation {
        let bundle = |b: Var| {
            let mut out = [0.0; crate::semantics::BUNDLE_LEN];
            out.copy_from_slice(tape.value(b));
            VectorBundle(out)
        };
        let set = |v: Var| EntitySet(tape.value(v).to_vec());
        let rel = |v: Var| RelationSet::new(n, tape.value(v).to_vec());
        let truth = |v: Var| Truth(tape.scalar_value(v));
        match *self {
            DenVar::E(v) => Denotation::E(set(v)),
            DenVar::R(v) => Denotation::R(rel(v)),
            DenVar::T(v) => Denotation::T(truth(v)),
            DenVar::V(b) => Denotation::V(bundle(b)),
            DenVar::EV(v, b) => Denotation::EV(set(v), bundle(b)),
            DenVar::RV(v, b) => Denotation::RV(rel(v), bundle(b)),
            DenVar::TV(v, b) => Denotation::TV(truth(v), bundle(b)),
            DenVar::PHI => Denotation::PHI,
        }
    }
}

/// Tape application of `rule`. `global` is the `[w1, w2, b]` vector.
pub fn apply_rule_tape(tape: &mut Tape, rule: &Rule, left: DenVar, right: DenVar, global: Var) -> Result<DenVar> {
    use DenVar as D;
    let err = || wrong(rule, left.semantic_type(), right.semantic_type());
    if left.semantic_type() != rule.left || right.semantic_type() != rule.right {
        return Err(err());
    }
    let offset = match rule.params {
        ParamSource::V1 => V1,
        ParamSource::V2 => V2,
        ParamSource::V3 => V3,
        ParamSource::V4 => V4,
        ParamSource::Global | ParamSource::None => 0,
    };
    Ok(match (rule.kind, left, right) {
        (ModuleKind::Intersect, D::E(l), D::E(r)) => D::E(tape.affine_sigmoid(global, 0, &[l, r])?),
        (ModuleKind::Complement, D::V(b), D::E(r)) => D::E(tape.affine_sigmoid(b, offset, &[r])?),
        (ModuleKind::Threshold(Side::Left), l, r) => {
            let b = l.bundle().ok_or_else(err)?;
            let out = tape.affine_sigmoid(
                b,
                offset,
                &[l.grounded().ok_or_else(err)?, r.grounded().ok_or_else(err)?],
            )?;
            D::with_parts(rule.output, Some(out), None)
        }
        (ModuleKind::Threshold(Side::Right), l, r) => {
            let b = r.bundle().ok_or_else(err)?;
            let out = tape.affine_sigmoid(
                b,
                offset,
                &[l.grounded().ok_or_else(err)?, r.grounded().ok_or_else(err)?],
            )?;
            D::with_parts(rule.output, Some(out), None)
        }
        (ModuleKind::RelationImage, D::R(a), D::E(p)) => D::E(tape.noisy_or(a, p)?),
        (ModuleKind::Count, D::V(b), D::E(r)) => D::T(tape.count_sigmoid(b, offset, r)?),
        (ModuleKind::Quantify(Side::Left), D::EV(l, b), D::E(r)) => D::T(tape.nested_sigmoid(b, offset, l, r)?),
        (ModuleKind::Quantify(Side::Right), D::E(l), D::EV(r, b)) => D::T(tape.nested_sigmoid(b, offset, l, r)?),
        (ModuleKind::Union(Side::Left), g, D::V(b)) => D::with_parts(rule.output, g.grounded(), Some(b)),
        (ModuleKind::Union(Side::Right), D::V(b), g) => D::with_parts(rule.output, g.grounded(), Some(b)),
        (ModuleKind::Identity(Side::Left), x, D::PHI) => x,
        (ModuleKind::Identity(Side::Right), D::PHI, x) => x,
        _ => return Err(err()),
    })
}
