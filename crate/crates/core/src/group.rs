//! Finite planar symmetry groups: cyclic rotation groups `C_n`, their dihedral
//! extensions `D_n`, and the axiom/representation checks used by the verifier.
//!
//! Every element carries a 2×2 orthogonal matrix (its planar representation).
//! Rotation angles are always built from an integer index `k` of `2πk/n`, and
//! quarter turns are snapped to exact `0/±1` entries, so composing elements of
//! `C_4`/`D_4` is exact in floating point.

use std::f64::consts::PI;
use std::fmt;

use crate::error::{EspError, Result};

pub type Vec2 = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

pub const IDENTITY_MAT: Mat2 = [[1.0, 0.0], [0.0, 1.0]];
pub const FLIP_X_MAT: Mat2 = [[1.0, 0.0], [0.0, -1.0]];

/// Tolerance used when matching a matrix product to a group element.
const MATCH_TOL: f64 = 1e-9;

pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

#[inline]
pub fn mat_vec(m: &Mat2, v: &Vec2) -> Vec2 {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

pub fn transpose(m: &Mat2) -> Mat2 {
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

pub fn det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Max-norm distance between two matrices.
pub fn mat_dist(a: &Mat2, b: &Mat2) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            d = d.max((a[i][j] - b[i][j]).abs());
        }
    }
    d
}

/// `R(θ) = [[cos θ, −sin θ], [sin θ, cos θ]]`.
pub fn rotation_matrix(theta: f64) -> Result<Mat2> {
    if !theta.is_finite() {
        return Err(EspError::invalid(format!("rotation angle must be finite, got {theta}")));
    }
    let (s, c) = theta.sin_cos();
    Ok([[c, -s], [s, c]])
}

/// Rotation by `2πk/n`, exact for multiples of a quarter turn.
fn exact_rotation(k: usize, n: usize) -> Mat2 {
    let k = k % n;
    if (4 * k).is_multiple_of(n) {
        match (4 * k) / n {
            0 => IDENTITY_MAT,
            1 => [[0.0, -1.0], [1.0, 0.0]],
            2 => [[-1.0, 0.0], [0.0, -1.0]],
            _ => [[0.0, 1.0], [-1.0, 0.0]],
        }
    } else {
        let theta = 2.0 * PI * k as f64 / n as f64;
        let (s, c) = theta.sin_cos();
        [[c, -s], [s, c]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupFamily {
    Cyclic,
    Dihedral,
    /// Built from an explicit table (test fixtures, user-supplied groups).
    Table,
}

/// Identifies which group an element belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupTag {
    pub family: GroupFamily,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementKind {
    Identity,
    Rotation {
        theta: f64,
    },
    /// Reflection across the line through the origin at `axis_angle` radians
    /// from the x-axis. `axis_angle = 0` is the flip around the x-axis.
    Reflection {
        axis_angle: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupElement {
    id: usize,
    tag: GroupTag,
    kind: ElementKind,
    linear_rep: Mat2,
    name: String,
}

impl GroupElement {
    /// Builds a free-standing element. Used for table-defined groups.
    pub fn new(id: usize, tag: GroupTag, kind: ElementKind, linear_rep: Mat2, name: impl Into<String>) -> Self {
        GroupElement { id, tag, kind, linear_rep, name: name.into() }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tag(&self) -> GroupTag {
        self.tag
    }

    pub fn kind(&self) -> ElementKind {
        self.kind
    }

    pub fn linear_rep(&self) -> &Mat2 {
        &self.linear_rep
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, ElementKind::Identity)
    }

    #[inline]
    pub fn apply_vec2(&self, v: &Vec2) -> Vec2 {
        mat_vec(&self.linear_rep, v)
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

fn rotation_name(k: usize, n: usize) -> String {
    if k == 0 {
        return "e".to_string();
    }
    if (360 * k).is_multiple_of(n) {
        format!("r{}", 360 * k / n)
    } else {
        format!("r{k}of{n}")
    }
}

#[derive(Clone, Debug)]
pub struct Group {
    tag: GroupTag,
    elements: Vec<GroupElement>,
    cayley: Vec<Vec<usize>>,
}

impl Group {
    /// Assembles a group from raw parts without validation. Use
    /// [`check_group_axioms`] to inspect the result.
    pub fn from_table(elements: Vec<GroupElement>, cayley: Vec<Vec<usize>>) -> Self {
        let tag = elements.first().map(|e| e.tag).unwrap_or(GroupTag { family: GroupFamily::Table, n: 0 });
        Group { tag, elements, cayley }
    }

    /// Builds the Cayley table by matching every matrix product to an element.
    fn from_elements(tag: GroupTag, elements: Vec<GroupElement>) -> Result<Self> {
        let n = elements.len();
        let mut cayley = vec![vec![0usize; n]; n];
        for (i, a) in elements.iter().enumerate() {
            for (j, b) in elements.iter().enumerate() {
                let prod = mat_mul(&a.linear_rep, &b.linear_rep);
                cayley[i][j] =
                    elements.iter().position(|e| mat_dist(&e.linear_rep, &prod) < MATCH_TOL).ok_or_else(|| {
                        EspError::invalid(format!("product {}·{} is not in the element set", a.name, b.name))
                    })?;
            }
        }
        Ok(Group { tag, elements, cayley })
    }

    pub fn tag(&self) -> GroupTag {
        self.tag
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn elements(&self) -> &[GroupElement] {
        &self.elements
    }

    pub fn cayley(&self) -> &[Vec<usize>] {
        &self.cayley
    }

    pub fn element(&self, id: usize) -> Result<&GroupElement> {
        self.elements.get(id).ok_or_else(|| {
            EspError::invalid(format!("element id {id} out of range for group of order {}", self.order()))
        })
    }

    pub fn identity(&self) -> &GroupElement {
        self.elements.iter().find(|e| e.is_identity()).unwrap_or(&self.elements[0])
    }

    pub fn non_identity(&self) -> impl Iterator<Item = &GroupElement> {
        self.elements.iter().filter(|e| !e.is_identity())
    }

    /// Looks an element up by name (`"e"`/`"identity"`, `"r90"`, `"flipx"`, ...).
    pub fn by_name(&self, name: &str) -> Result<&GroupElement> {
        let name = if name == "identity" { "e" } else { name };
        self.elements.iter().find(|e| e.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.elements.iter().map(|e| e.name.as_str()).collect();
            EspError::invalid(format!("no element named `{name}` in group (known: {})", known.join(", ")))
        })
    }

    fn check_member(&self, g: &GroupElement) -> Result<()> {
        if g.tag != self.tag || g.id >= self.order() || self.elements[g.id] != *g {
            return Err(EspError::invalid(format!("element `{}` does not belong to this group", g.name)));
        }
        Ok(())
    }

    /// `g1 ∘ g2`: apply `g2` first, then `g1`.
    pub fn compose(&self, g1: &GroupElement, g2: &GroupElement) -> Result<GroupElement> {
        self.check_member(g1)?;
        self.check_member(g2)?;
        Ok(self.elements[self.cayley[g1.id][g2.id]].clone())
    }

    pub fn inverse(&self, g: &GroupElement) -> Result<GroupElement> {
        self.check_member(g)?;
        let e = self.identity().id;
        let inv = self.cayley[g.id]
            .iter()
            .position(|&p| p == e)
            .ok_or_else(|| EspError::invalid(format!("element `{}` has no inverse", g.name)))?;
        Ok(self.elements[inv].clone())
    }

    /// Max over all pairs of `‖ρ(g1∘g2) − ρ(g1)ρ(g2)‖∞`.
    pub fn representation_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.elements.iter().enumerate() {
            for (j, b) in self.elements.iter().enumerate() {
                let Some(c) = self.cayley.get(i).and_then(|row| row.get(j)).and_then(|&k| self.elements.get(k)) else {
                    return f64::INFINITY;
                };
                worst = worst.max(mat_dist(&c.linear_rep, &mat_mul(&a.linear_rep, &b.linear_rep)));
            }
        }
        worst
    }

    /// Max over elements of `‖RᵀR − I‖∞`.
    pub fn orthogonality_defect(&self) -> f64 {
        self.elements
            .iter()
            .map(|e| mat_dist(&mat_mul(&transpose(&e.linear_rep), &e.linear_rep), &IDENTITY_MAT))
            .fold(0.0, f64::max)
    }

    fn is_cyclic_rotation_group(&self) -> bool {
        self.tag.family == GroupFamily::Cyclic
            && self.elements.iter().all(|e| matches!(e.kind, ElementKind::Identity | ElementKind::Rotation { .. }))
    }
}

/// `C_n = {R(2πk/n) : k = 0..n}`.
pub fn cyclic_group(n: usize) -> Result<Group> {
    if n == 0 {
        return Err(EspError::invalid("cyclic group order must be at least 1"));
    }
    let tag = GroupTag { family: GroupFamily::Cyclic, n };
    let elements = (0..n)
        .map(|k| {
            let kind = if k == 0 {
                ElementKind::Identity
            } else {
                ElementKind::Rotation { theta: 2.0 * PI * k as f64 / n as f64 }
            };
            GroupElement::new(k, tag, kind, exact_rotation(k, n), rotation_name(k, n))
        })
        .collect();
    Group::from_elements(tag, elements)
}

/// Extends `C_n` with the flip around the x-axis, giving `D_n` (order `2n`).
///
/// Element `n + k` is `flip ∘ R(2πk/n)` (rotate first, then flip).
pub fn dihedral_extension(group: &Group) -> Result<Group> {
    let report = check_group_axioms(group);
    if !report.all_passed() {
        return Err(EspError::invalid(format!("input group fails the group axioms:\n{report}")));
    }
    if !group.is_cyclic_rotation_group() {
        return Err(EspError::invalid("dihedral extension requires a cyclic rotation group"));
    }
    let n = group.order();
    let tag = GroupTag { family: GroupFamily::Dihedral, n };
    let mut elements: Vec<GroupElement> = group.elements.iter().map(|e| GroupElement { tag, ..e.clone() }).collect();
    for k in 0..n {
        let rep = mat_mul(&FLIP_X_MAT, &exact_rotation(k, n));
        let theta = 2.0 * PI * k as f64 / n as f64;
        let axis_angle = (-theta / 2.0).rem_euclid(PI);
        let name = if k == 0 { "flipx".to_string() } else { format!("flipx_{}", rotation_name(k, n)) };
        elements.push(GroupElement::new(n + k, tag, ElementKind::Reflection { axis_angle }, rep, name));
    }
    Group::from_elements(tag, elements)
}

/// Parses a group name: `c<n>` or `d<n>` (case-insensitive), e.g. `"c4"`, `"d4"`.
pub fn group_by_name(name: &str) -> Result<Group> {
    let lower = name.trim().to_ascii_lowercase();
    let (family, digits) = lower.split_at(lower.len().min(1));
    let n: usize =
        digits.parse().map_err(|_| EspError::invalid(format!("unknown group `{name}` (expected c<n> or d<n>)")))?;
    match family {
        "c" => cyclic_group(n),
        "d" => dihedral_extension(&cyclic_group(n)?),
        _ => Err(EspError::invalid(format!("unknown group `{name}` (expected c<n> or d<n>)"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AxiomResult {
    pub passed: bool,
    pub counterexample: Option<String>,
}

impl AxiomResult {
    fn pass() -> Self {
        AxiomResult { passed: true, counterexample: None }
    }

    fn fail(msg: String) -> Self {
        AxiomResult { passed: false, counterexample: Some(msg) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AxiomReport {
    pub closure: AxiomResult,
    pub identity: AxiomResult,
    pub inverse: AxiomResult,
    pub associativity: AxiomResult,
}

impl AxiomReport {
    pub fn all_passed(&self) -> bool {
        self.closure.passed && self.identity.passed && self.inverse.passed && self.associativity.passed
    }

    fn entries(&self) -> [(&'static str, &AxiomResult); 4] {
        [
            ("closure", &self.closure),
            ("identity", &self.identity),
            ("inverse", &self.inverse),
            ("associativity", &self.associativity),
        ]
    }
}

impl fmt::Display for AxiomReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, r) in self.entries() {
            write!(f, "  {name:<14} {}", if r.passed { "pass" } else { "FAIL" })?;
            if let Some(c) = &r.counterexample {
                write!(f, " ({c})")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Checks closure, identity, inverse and associativity on the Cayley table.
/// Failures are reported with the first counterexample, never as errors.
pub fn check_group_axioms(group: &Group) -> AxiomReport {
    let n = group.order();
    let table = &group.cayley;
    let entry = |i: usize, j: usize| table.get(i).and_then(|r| r.get(j)).copied().filter(|&k| k < n);

    let closure = (|| {
        if table.len() != n {
            return AxiomResult::fail(format!("table has {} rows for {n} elements", table.len()));
        }
        for i in 0..n {
            if table[i].len() != n {
                return AxiomResult::fail(format!("row {i} has {} entries", table[i].len()));
            }
            for j in 0..n {
                if entry(i, j).is_none() {
                    return AxiomResult::fail(format!("{i}∘{j} = {} is not an element id", table[i][j]));
                }
            }
        }
        AxiomResult::pass()
    })();

    let identity_id = (0..n).find(|&e| (0..n).all(|g| entry(e, g) == Some(g) && entry(g, e) == Some(g)));
    let identity = match identity_id {
        Some(_) => AxiomResult::pass(),
        None if n == 0 => AxiomResult::fail("empty group".to_string()),
        None => AxiomResult::fail("no element acts as a two-sided identity".to_string()),
    };

    let inverse = match identity_id {
        None => AxiomResult::fail("no identity, inverses undefined".to_string()),
        Some(e) => (0..n)
            .find_map(|g| {
                let count = (0..n).filter(|&h| entry(g, h) == Some(e)).count();
                (count != 1).then(|| format!("row {g} contains the identity {count} times"))
            })
            .map_or_else(AxiomResult::pass, AxiomResult::fail),
    };

    let associativity = (|| {
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let left = entry(a, b).and_then(|ab| entry(ab, c));
                    let right = entry(b, c).and_then(|bc| entry(a, bc));
                    if left.is_none() || left != right {
                        return AxiomResult::fail(format!("({a}∘{b})∘{c} = {left:?} but {a}∘({b}∘{c}) = {right:?}"));
                    }
                }
            }
        }
        AxiomResult::pass()
    })();

    AxiomReport { closure, identity, inverse, associativity }
}

/// Action-level properties measured on random vectors.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct VectorPropertyReport {
    pub samples: usize,
    /// Max of `‖(g1∘g2)·v − g1·(g2·v)‖∞`.
    pub homomorphism: f64,
    /// Max of `‖g⁻¹·(g·v) − v‖∞`.
    pub round_trip: f64,
}

/// Draws `samples` vectors uniformly from `[-10, 10]²` with random element
/// pairs and measures the homomorphism and round-trip defects.
pub fn check_vector_properties(group: &Group, samples: usize, seed: u64) -> Result<VectorPropertyReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = group.order();
    let (mut hom, mut rt): (f64, f64) = (0.0, 0.0);
    for _ in 0..samples {
        let v = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
        let g1 = &group.elements[rng.random_range(0..n)];
        let g2 = &group.elements[rng.random_range(0..n)];
        let composed = group.compose(g1, g2)?.apply_vec2(&v);
        let stepwise = g1.apply_vec2(&g2.apply_vec2(&v));
        hom = hom.max((composed[0] - stepwise[0]).abs()).max((composed[1] - stepwise[1]).abs());
        let back = group.inverse(g1)?.apply_vec2(&g1.apply_vec2(&v));
        rt = rt.max((back[0] - v[0]).abs()).max((back[1] - v[1]).abs());
    }
    Ok(VectorPropertyReport { samples, homomorphism: hom, round_trip: rt })
}
