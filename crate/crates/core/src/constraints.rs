//! State-dependent feasible action sets.
//!
//! A feasible set is always the intersection of the action box
//! `[-a_max, a_max]`, an optional polytope `A a <= b` (rows stored with unit
//! norm) and at most one ellipsoid `(a - c)^T Q (a - c) <= bound`.
//!
//! [`ConstraintSpec`] names one of the catalog families and turns joint
//! angles/velocities into a concrete [`ConstraintInstance`].

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Matrix, Vector};

/// Largest dimension for which sign-pattern expansion is allowed.
pub const MAX_SIGN_PATTERN_DIM: usize = 8;

const DEDUP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    a_max: Vec<f64>,
}

impl ActionSpace {
    pub fn new(a_max: Vec<f64>) -> Result<Self> {
        if a_max.is_empty() {
            return Err(Error::InvalidSpec("action space must have d >= 1".into()));
        }
        if a_max.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::InvalidSpec("box half-widths must be positive".into()));
        }
        Ok(Self { a_max })
    }

    /// The `[-1, 1]^d` box.
    pub fn unit(d: usize) -> Self {
        Self { a_max: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.a_max.len()
    }

    pub fn a_max(&self) -> &[f64] {
        &self.a_max
    }

    pub fn contains(&self, a: &Vector, tol: f64) -> bool {
        a.iter().zip(&self.a_max).all(|(x, m)| x.abs() <= m + tol)
    }

    pub fn clip(&self, a: &Vector) -> Vector {
        Vector::from_iterator(
            a.len(),
            a.iter().zip(&self.a_max).map(|(x, m)| x.clamp(-m, *m)),
        )
    }
}

/// Halfspaces `A a <= b` with unit-norm rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraints {
    a: Matrix,
    b: Vector,
}

impl LinearConstraints {
    /// Normalizes every row to unit norm and merges duplicate rows.
    pub fn new(a: Matrix, b: Vector) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::DimensionMismatch { expected: a.nrows(), got: b.len() });
        }
        let d = a.ncols();
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(a.nrows());
        for i in 0..a.nrows() {
            let norm = a.row(i).norm();
            if !(norm > 0.0) {
                return Err(Error::InvalidSpec(format!("row {i} of A is zero")));
            }
            let row: Vec<f64> = a.row(i).iter().map(|x| x / norm).collect();
            let rhs = b[i] / norm;
            let duplicate = rows.iter_mut().find(|(r, _)| {
                r.iter().zip(&row).all(|(x, y)| (x - y).abs() <= DEDUP_TOL)
            });
            match duplicate {
                // identical normals: keep the tighter bound
                Some((_, existing)) => *existing = existing.min(rhs),
                None => rows.push((row, rhs)),
            }
        }
        let k = rows.len();
        let a = DMatrix::from_fn(k, d, |i, j| rows[i].0[j]);
        let b = DVector::from_iterator(k, rows.iter().map(|(_, r)| *r));
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    /// `b_i - A_i x` for every row.
    pub fn slacks(&self, x: &Vector) -> Vector {
        &self.b - &self.a * x
    }
}

/// `(a - center)^T Q (a - center) <= bound` with `Q` strictly positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipticalConstraint {
    q: Matrix,
    center: Vector,
    bound: f64,
}

impl EllipticalConstraint {
    pub fn new(q: Matrix, center: Vector, bound: f64) -> Result<Self> {
        let d = center.len();
        if q.nrows() != d || q.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: q.nrows() });
        }
        if !(bound >= 0.0) {
            return Err(Error::InvalidSpec("ellipse bound must be nonnegative".into()));
        }
        let asym = (&q - q.transpose()).amax();
        if asym > 1e-12 * (1.0 + q.amax()) {
            return Err(Error::InvalidSpec("ellipse matrix is not symmetric".into()));
        }
        let min_eig = SymmetricEigen::new(q.clone()).eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(Error::InvalidSpec(
                "ellipse matrix must be positive definite (use `regularized`)".into(),
            ));
        }
        Ok(Self { q, center, bound })
    }

    /// Accepts a PSD matrix and stores `Q + eps I` with `eps = 1e-6 tr(Q) / d`.
    /// The bound is left unchanged, so the stored set is a subset of the
    /// requested one.
    pub fn regularized(q: Matrix, center: Vector, bound: f64) -> Result<Self> {
        let d = center.len();
        let eps = 1e-6 * q.trace() / d as f64;
        let q = (&q + q.transpose()) * 0.5 + Matrix::identity(d, d) * eps;
        Self::new(q, center, bound)
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn center(&self) -> &Vector {
        &self.center
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn value(&self, a: &Vector) -> f64 {
        let y = a - &self.center;
        y.dot(&(&self.q * &y))
    }

    /// Gradient of `value`, i.e. `2 Q (a - c)`.
    pub fn gradient(&self, a: &Vector) -> Vector {
        (&self.q * (a - &self.center)) * 2.0
    }
}

/// Identifies one piece of the boundary of a feasible set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Boundary {
    BoxUpper(usize),
    BoxLower(usize),
    Facet(usize),
    Ellipse,
}

/// Result of shooting a ray from an interior point to the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct RayHit {
    pub point: Vector,
    /// Distance from the origin of the ray to `point`.
    pub r0: f64,
    pub binding: Boundary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintInstance {
    space: ActionSpace,
    linear: Option<LinearConstraints>,
    ellipse: Option<EllipticalConstraint>,
    center: Option<Vector>,
}

impl ConstraintInstance {
    pub fn new(
        space: ActionSpace,
        linear: Option<LinearConstraints>,
        ellipse: Option<EllipticalConstraint>,
    ) -> Result<Self> {
        let d = space.dim();
        if let Some(lin) = &linear {
            if lin.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: lin.dim() });
            }
        }
        if let Some(e) = &ellipse {
            if e.center.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: e.center.len() });
            }
        }
        let linear = linear.filter(|l| !l.is_empty());
        Ok(Self { space, linear, ellipse, center: None })
    }

    pub fn box_only(space: ActionSpace) -> Self {
        Self { space, linear: None, ellipse: None, center: None }
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn linear(&self) -> Option<&LinearConstraints> {
        self.linear.as_ref()
    }

    pub fn ellipse(&self) -> Option<&EllipticalConstraint> {
        self.ellipse.as_ref()
    }

    pub fn center(&self) -> Option<&Vector> {
        self.center.as_ref()
    }

    /// True when the feasible set is exactly the action box.
    pub fn is_box_only(&self) -> bool {
        self.linear.is_none() && self.ellipse.is_none()
    }

    /// Attaches a cached interior anchor. The point must be strictly feasible.
    pub fn with_center(mut self, center: Vector) -> Result<Self> {
        self.check_dim(&center)?;
        if !(self.min_slack(&center) > 0.0) {
            return Err(Error::NotStrictlyFeasible);
        }
        self.center = Some(center);
        Ok(self)
    }

    fn check_dim(&self, a: &Vector) -> Result<()> {
        if a.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: a.len() });
        }
        Ok(())
    }

    /// Feasibility test with additive tolerance on every constraint.
    pub fn contains(&self, a: &Vector, tol: f64) -> bool {
        if a.len() != self.dim() || a.iter().any(|x| !x.is_finite()) {
            return false;
        }
        if !self.space.contains(a, tol) {
            return false;
        }
        self.contains_non_box(a, tol)
    }

    /// Feasibility with respect to the linear and ellipse parts only.
    pub fn contains_non_box(&self, a: &Vector, tol: f64) -> bool {
        if let Some(lin) = &self.linear {
            if lin.slacks(a).iter().any(|&s| s < -tol) {
                return false;
            }
        }
        if let Some(e) = &self.ellipse {
            if e.value(a) - e.bound > tol {
                return false;
            }
        }
        true
    }

    /// Smallest constraint slack (negative when infeasible). Linear slacks are
    /// Euclidean distances because rows have unit norm.
    pub fn min_slack(&self, a: &Vector) -> f64 {
        let mut m = f64::INFINITY;
        for (x, am) in a.iter().zip(self.space.a_max()) {
            m = m.min(am - x.abs());
        }
        if let Some(lin) = &self.linear {
            m = m.min(lin.slacks(a).min());
        }
        if let Some(e) = &self.ellipse {
            m = m.min(e.bound - e.value(a));
        }
        m
    }

    /// Largest constraint violation (0 when feasible).
    pub fn max_violation(&self, a: &Vector) -> f64 {
        (-self.min_slack(a)).max(0.0)
    }

    /// All polyhedral rows, box faces first, as `(boundary, normal, rhs)`.
    pub fn halfspaces(&self) -> Vec<(Boundary, Vector, f64)> {
        let d = self.dim();
        let mut out = Vec::with_capacity(2 * d + self.linear.as_ref().map_or(0, |l| l.len()));
        for (i, &m) in self.space.a_max().iter().enumerate() {
            let mut n = Vector::zeros(d);
            n[i] = 1.0;
            out.push((Boundary::BoxUpper(i), n.clone(), m));
            n[i] = -1.0;
            out.push((Boundary::BoxLower(i), n, m));
        }
        if let Some(lin) = &self.linear {
            for i in 0..lin.len() {
                out.push((Boundary::Facet(i), lin.a.row(i).transpose(), lin.b[i]));
            }
        }
        out
    }

    /// Outward unit normal of a boundary piece at `point`.
    pub fn outward_normal(&self, which: Boundary, point: &Vector) -> Vector {
        let d = self.dim();
        match which {
            Boundary::BoxUpper(i) => {
                let mut n = Vector::zeros(d);
                n[i] = 1.0;
                n
            }
            Boundary::BoxLower(i) => {
                let mut n = Vector::zeros(d);
                n[i] = -1.0;
                n
            }
            Boundary::Facet(i) => self.linear.as_ref().expect("facet without linear part").a.row(i).transpose(),
            Boundary::Ellipse => {
                let g = self.ellipse.as_ref().expect("ellipse boundary without ellipse").gradient(point);
                let n = g.norm();
                g / n
            }
        }
    }

    /// Smallest `lambda > 0` such that `origin + lambda * v` reaches the
    /// boundary, together with the binding constraint. `v` need not be unit.
    /// Ties resolve to the first candidate in the order box, facets, ellipse.
    pub fn ray_scale(&self, origin: &Vector, v: &Vector) -> Result<(f64, Boundary)> {
        let mut best = f64::INFINITY;
        let mut which = None;
        let mut consider = |lam: f64, b: Boundary| {
            if lam < best {
                best = lam;
                which = Some(b);
            }
        };
        for (i, (&m, (&o, &vi))) in self.space.a_max().iter().zip(origin.iter().zip(v.iter())).enumerate() {
            if vi > 0.0 {
                consider((m - o) / vi, Boundary::BoxUpper(i));
            } else if vi < 0.0 {
                consider((-m - o) / vi, Boundary::BoxLower(i));
            }
        }
        if let Some(lin) = &self.linear {
            let av = &lin.a * v;
            let slack = lin.slacks(origin);
            for i in 0..lin.len() {
                if av[i] > 0.0 {
                    consider(slack[i] / av[i], Boundary::Facet(i));
                }
            }
        }
        if let Some(e) = &self.ellipse {
            let y = origin - &e.center;
            let qv = &e.q * v;
            let qa = v.dot(&qv);
            let qb = 2.0 * y.dot(&qv);
            let qc = y.dot(&(&e.q * &y)) - e.bound;
            if qa > 0.0 {
                let disc = (qb * qb - 4.0 * qa * qc).max(0.0).sqrt();
                let lam = if qb >= 0.0 { -2.0 * qc / (qb + disc) } else { (-qb + disc) / (2.0 * qa) };
                consider(lam, Boundary::Ellipse);
            }
        }
        match which {
            Some(b) if best.is_finite() && best > 0.0 => Ok((best, b)),
            Some(_) => Err(Error::NotStrictlyFeasible),
            None => Err(Error::Geometry("zero ray direction".into())),
        }
    }

    /// Where the ray from a strictly feasible `origin` along `direction`
    /// leaves the feasible set.
    pub fn ray_boundary_intersection(&self, origin: &Vector, direction: &Vector) -> Result<RayHit> {
        self.check_dim(origin)?;
        self.check_dim(direction)?;
        if !(self.min_slack(origin) > 0.0) {
            return Err(Error::NotStrictlyFeasible);
        }
        let norm = direction.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Geometry("ray direction must be nonzero".into()));
        }
        let u = direction / norm;
        let (r0, binding) = self.ray_scale(origin, &u)?;
        Ok(RayHit { point: origin + &u * r0, r0, binding })
    }

    /// Violation measure used by the penalized variants: the norm of the
    /// positive part of the linear residual plus the ellipse excess in
    /// trace-normalized form. The box is not penalized.
    pub fn violation_penalty(&self, a: &Vector) -> f64 {
        let mut p = 0.0;
        if let Some(lin) = &self.linear {
            let r = lin.slacks(a);
            p += r.iter().map(|&s| (-s).max(0.0).powi(2)).sum::<f64>().sqrt();
        }
        if let Some(e) = &self.ellipse {
            let (q, bound) = normalized_ellipse(e);
            let y = a - &e.center;
            let v = y.dot(&(&q * &y)).max(0.0);
            p += (v.sqrt() - bound.sqrt()).max(0.0);
        }
        p
    }

    /// Gradient of [`violation_penalty`](Self::violation_penalty) with respect
    /// to the action (zero where the penalty is zero).
    pub fn violation_penalty_grad(&self, a: &Vector) -> Vector {
        let mut g = Vector::zeros(self.dim());
        if let Some(lin) = &self.linear {
            let r = lin.slacks(a).map(|s| (-s).max(0.0));
            let n = r.norm();
            if n > 0.0 {
                g += lin.a.transpose() * r / n;
            }
        }
        if let Some(e) = &self.ellipse {
            let (q, bound) = normalized_ellipse(e);
            let y = a - &e.center;
            let qy = &q * &y;
            let v = y.dot(&qy);
            if v > 0.0 && v.sqrt() > bound.sqrt() {
                g += qy / v.sqrt();
            }
        }
        g
    }
}

/// Rescales `(Q, bound)` so that `tr Q = d`.
fn normalized_ellipse(e: &EllipticalConstraint) -> (Matrix, f64) {
    let d = e.center.len() as f64;
    let s = d / e.q.trace();
    (&e.q * s, e.bound * s)
}

/// Angles and angular velocities of the joints a constraint family reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
}

impl JointState {
    pub fn new(theta: Vec<f64>, omega: Vec<f64>) -> Self {
        Self { theta, omega }
    }
}

/// Catalog of constraint families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    /// No constraint beyond the box.
    N,
    /// `sum a_i^2 <= radius2`.
    L2,
    /// `sum |w_i a_i| <= budget`.
    O,
    /// `sum max(w_i a_i, 0) <= budget`.
    M,
    /// Two-link arm quadratic `a1^2 + 2 a1 (a1 + a2) cos th2 + (a1 + a2)^2 <= bound`.
    T,
    /// `O` together with `sum a_i^2 sin^2 th_i <= bound`.
    #[serde(rename = "O+S")]
    OS,
    /// `w_1 a_1 sin(sum th_first) + w_k a_k sin(sum th_second) <= budget`, the
    /// joints split into two halves each driven through its first joint.
    MA,
}

impl Family {
    pub const ALL: [Family; 7] = [Family::N, Family::L2, Family::O, Family::M, Family::T, Family::OS, Family::MA];

    pub fn name(&self) -> &'static str {
        match self {
            Family::N => "N",
            Family::L2 => "L2",
            Family::O => "O",
            Family::M => "M",
            Family::T => "T",
            Family::OS => "O+S",
            Family::MA => "MA",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidSpec(format!("unknown family `{s}`")))
    }

    fn default_params(&self) -> &'static [(&'static str, f64)] {
        match self {
            Family::N => &[],
            Family::L2 => &[("radius2", 0.05)],
            Family::O | Family::M | Family::MA => &[("budget", 1.0)],
            Family::T => &[("bound", 0.05)],
            Family::OS => &[("budget", 1.0), ("bound", 0.1)],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A constraint family plus its scalar parameters, e.g.
/// `{"family": "O", "params": {"budget": 0.3}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub family: Family,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl ConstraintSpec {
    pub fn new(family: Family) -> Self {
        Self { family, params: BTreeMap::new() }
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    /// Parameter value, falling back to the family default.
    pub fn param(&self, name: &str) -> Result<f64> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        self.family
            .default_params()
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::InvalidSpec(format!("family {} has no parameter `{name}`", self.family)))
    }

    /// Checks parameter names and signs.
    pub fn validate(&self) -> Result<()> {
        let known = self.family.default_params();
        for (name, v) in &self.params {
            if !known.iter().any(|(n, _)| n == name) {
                return Err(Error::InvalidSpec(format!("family {} has no parameter `{name}`", self.family)));
            }
            if !(*v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidSpec(format!("parameter `{name}` must be positive")));
            }
        }
        Ok(())
    }

    /// Evaluates the family at a joint state.
    pub fn instantiate(&self, space: &ActionSpace, joints: &JointState) -> Result<ConstraintInstance> {
        self.validate()?;
        let d = space.dim();
        let needs_joints = !matches!(self.family, Family::N | Family::L2);
        if needs_joints && (joints.theta.len() != d || joints.omega.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: joints.theta.len().min(joints.omega.len()) });
        }
        let inst = match self.family {
            Family::N => ConstraintInstance::box_only(space.clone()),
            Family::L2 => {
                let e = EllipticalConstraint::new(Matrix::identity(d, d), Vector::zeros(d), self.param("radius2")?)?;
                ConstraintInstance::new(space.clone(), None, Some(e))?
            }
            Family::O => {
                let lin = abs_budget_rows(&joints.omega, self.param("budget")?)?;
                ConstraintInstance::new(space.clone(), lin, None)?
            }
            Family::M => {
                let lin = positive_part_rows(&joints.omega, self.param("budget")?)?;
                ConstraintInstance::new(space.clone(), lin, None)?
            }
            Family::T => {
                if d != 2 {
                    return Err(Error::InvalidSpec("family T is defined for two joints".into()));
                }
                let c = joints.theta[1].cos();
                let q = DMatrix::from_row_slice(2, 2, &[2.0 + 2.0 * c, 1.0 + c, 1.0 + c, 1.0]);
                let e = EllipticalConstraint::regularized(q, Vector::zeros(2), self.param("bound")?)?;
                ConstraintInstance::new(space.clone(), None, Some(e))?
            }
            Family::OS => {
                let lin = abs_budget_rows(&joints.omega, self.param("budget")?)?;
                let diag = Vector::from_iterator(d, joints.theta.iter().map(|t| t.sin().powi(2)));
                let ellipse = if diag.sum() > 0.0 {
                    Some(EllipticalConstraint::regularized(
                        Matrix::from_diagonal(&diag),
                        Vector::zeros(d),
                        self.param("bound")?,
                    )?)
                } else {
                    None
                };
                ConstraintInstance::new(space.clone(), lin, ellipse)?
            }
            Family::MA => {
                let half = d.div_ceil(2);
                let mut row = vec![0.0; d];
                let first: f64 = joints.theta[..half].iter().sum();
                row[0] = joints.omega[0] * first.sin();
                if d > 1 {
                    let second: f64 = joints.theta[half..].iter().sum();
                    row[half] = joints.omega[half] * second.sin();
                }
                let lin = if row.iter().any(|&x| x != 0.0) {
                    Some(LinearConstraints::new(
                        DMatrix::from_row_slice(1, d, &row),
                        DVector::from_element(1, self.param("budget")?),
                    )?)
                } else {
                    None
                };
                ConstraintInstance::new(space.clone(), lin, None)?
            }
        };
        if !(inst.min_slack(&Vector::zeros(d)) > 0.0) {
            return Err(Error::EmptyInterior);
        }
        Ok(inst)
    }
}

/// `sum |w_i a_i| <= budget` as the halfspaces `sum s_i w_i a_i <= budget`
/// over all sign patterns of the nonzero weights.
fn abs_budget_rows(w: &[f64], budget: f64) -> Result<Option<LinearConstraints>> {
    let d = w.len();
    if d > MAX_SIGN_PATTERN_DIM {
        return Err(Error::TooManyFacets { dim: d });
    }
    let active: Vec<usize> = (0..d).filter(|&i| w[i] != 0.0).collect();
    if active.is_empty() {
        return Ok(None);
    }
    let k = active.len();
    let mut data = Vec::with_capacity((1 << k) * d);
    for pattern in 0..(1usize << k) {
        let mut row = vec![0.0; d];
        for (bit, &i) in active.iter().enumerate() {
            let s = if pattern >> bit & 1 == 1 { -1.0 } else { 1.0 };
            row[i] = s * w[i];
        }
        data.extend(row);
    }
    let n = 1 << k;
    Ok(Some(LinearConstraints::new(
        DMatrix::from_row_slice(n, d, &data),
        DVector::from_element(n, budget),
    )?))
}

/// `sum max(w_i a_i, 0) <= budget` as `sum_{i in S} w_i a_i <= budget` over all
/// nonempty subsets `S` of the nonzero weights.
fn positive_part_rows(w: &[f64], budget: f64) -> Result<Option<LinearConstraints>> {
    let d = w.len();
    if d > MAX_SIGN_PATTERN_DIM {
        return Err(Error::TooManyFacets { dim: d });
    }
    let active: Vec<usize> = (0..d).filter(|&i| w[i] != 0.0).collect();
    if active.is_empty() {
        return Ok(None);
    }
    let k = active.len();
    let n = (1usize << k) - 1;
    let mut data = Vec::with_capacity(n * d);
    for subset in 1..(1usize << k) {
        let mut row = vec![0.0; d];
        for (bit, &i) in active.iter().enumerate() {
            if subset >> bit & 1 == 1 {
                row[i] = w[i];
            }
        }
        data.extend(row);
    }
    Ok(Some(LinearConstraints::new(
        DMatrix::from_row_slice(n, d, &data),
        DVector::from_element(n, budget),
    )?))
}
