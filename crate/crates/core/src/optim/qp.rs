//! Euclidean projection onto `box ∩ {A a <= b} ∩ ellipse`.
//!
//! The polyhedral part uses the dual active-set method of Goldfarb and
//! Idnani: start from the unconstrained minimizer, repeatedly add the most
//! violated row and drop rows whose multipliers would turn negative. An
//! ellipse that binds together with the polyhedron is handled through its
//! multiplier `mu`: for fixed `mu` the problem
//! `min |x - q|^2 + mu (x - c)^T Q (x - c)` over the polyhedron is again a
//! polyhedral QP, and the ellipse value of its solution decreases in `mu`, so
//! a safeguarded root search on `mu` finds the projection.

use nalgebra::SymmetricEigen;

use crate::constraints::{Boundary, ConstraintInstance, EllipticalConstraint};
use crate::error::{Error, Result};
use crate::{Matrix, Vector};

/// Iteration cap for the search on the ellipse multiplier.
pub const ELLIPSE_SEARCH_MAX_ITER: usize = 300;

/// Projected point with its certified KKT data.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub point: Vector,
    pub query: Vector,
    /// Constraints tight at `point`, each with its nonnegative multiplier.
    pub active: Vec<(Boundary, f64)>,
}

impl ProjectionResult {
    pub fn is_interior(&self) -> bool {
        self.active.is_empty()
    }
}

/// Relative threshold below which a slack counts as tight.
pub(crate) fn activity_tol(inst: &ConstraintInstance) -> f64 {
    let mut bmax = inst.space().a_max().iter().fold(0.0f64, |m, a| m.max(*a));
    if let Some(lin) = inst.linear() {
        bmax = bmax.max(lin.b().amax());
    }
    if let Some(e) = inst.ellipse() {
        bmax = bmax.max(e.bound());
    }
    1e-8 * (1.0 + bmax)
}

struct Polyhedron {
    // each row is a unit normal
    normals: Vec<Vector>,
    rhs: Vec<f64>,
    labels: Vec<Boundary>,
}

impl Polyhedron {
    fn of(inst: &ConstraintInstance) -> Self {
        let hs = inst.halfspaces();
        let mut normals = Vec::with_capacity(hs.len());
        let mut rhs = Vec::with_capacity(hs.len());
        let mut labels = Vec::with_capacity(hs.len());
        for (b, n, r) in hs {
            labels.push(b);
            normals.push(n);
            rhs.push(r);
        }
        Self { normals, rhs, labels }
    }

    fn slack(&self, j: usize, x: &Vector) -> f64 {
        self.rhs[j] - self.normals[j].dot(x)
    }
}

/// Dual active-set projection onto the polyhedron. Returns the point and
/// `(row index, multiplier)` for rows in the final working set.
fn project_polyhedron(poly: &Polyhedron, query: &Vector) -> Result<(Vector, Vec<(usize, f64)>)> {
    let d = query.len();
    dual_active_set(poly, query.clone(), Matrix::identity(d, d))
}

/// Minimizes `x^T H x / 2 - lin^T x` over the polyhedron for positive
/// definite `H`.
fn minimize_over_polyhedron(poly: &Polyhedron, h: &Matrix, lin: &Vector) -> Result<(Vector, Vec<(usize, f64)>)> {
    let chol = h.clone().cholesky().ok_or_else(|| Error::Geometry("metric is not positive definite".into()))?;
    let x0 = chol.solve(lin);
    let l_inv = chol
        .l()
        .solve_lower_triangular(&Matrix::identity(h.nrows(), h.nrows()))
        .ok_or_else(|| Error::Geometry("singular metric".into()))?;
    dual_active_set(poly, x0, l_inv.transpose())
}

/// Goldfarb-Idnani iterations from the unconstrained minimizer `x` with
/// `j_mat = L^-T` for the Hessian factor `L`.
fn dual_active_set(poly: &Polyhedron, x: Vector, j_mat: Matrix) -> Result<(Vector, Vec<(usize, f64)>)> {
    let d = x.len();
    let m = poly.rhs.len();
    let scale = 1.0 + poly.rhs.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let feas_tol = 1e-13 * scale;
    let zero_tol = 1e-14;

    let mut x = x;
    let mut j_mat = j_mat;
    // R is upper triangular, stored as columns of length <= d
    let mut r_mat = Matrix::zeros(d, d);
    let mut active: Vec<usize> = Vec::with_capacity(d);
    let mut u: Vec<f64> = Vec::with_capacity(d);
    let mut in_active = vec![false; m];
    let max_iter = 50 * (m + d) + 100;
    let mut iter = 0;

    loop {
        // most violated row
        let mut p = None;
        let mut worst = -feas_tol;
        for j in 0..m {
            if in_active[j] {
                continue;
            }
            let s = poly.slack(j, &x);
            if s < worst {
                worst = s;
                p = Some(j);
            }
        }
        let Some(p) = p else {
            let mult = active.iter().copied().zip(u.iter().copied()).collect();
            return Ok((x, mult));
        };
        // constraint in ">=" form: c = -n, c^T x >= -rhs
        let np = -&poly.normals[p];
        let mut up = 0.0;
        loop {
            iter += 1;
            if iter > max_iter {
                return Err(Error::NotConverged { iterations: iter, residual: -poly.slack(p, &x) });
            }
            let q = active.len();
            let dvec = j_mat.transpose() * &np;
            // primal direction z = J2 d2, dual direction r = R^-1 d1
            let mut z = Vector::zeros(d);
            for k in q..d {
                z.axpy(dvec[k], &j_mat.column(k), 1.0);
            }
            let mut r = vec![0.0; q];
            for i in (0..q).rev() {
                let mut s = dvec[i];
                for k in i + 1..q {
                    s -= r_mat[(i, k)] * r[k];
                }
                r[i] = s / r_mat[(i, i)];
            }
            // partial step: largest t keeping multipliers nonnegative
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > zero_tol {
                    let t = u[k] / rk;
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            let zn = z.dot(&np);
            let t2 = if z.norm() > 1e-14 && zn > zero_tol {
                (-poly.slack(p, &x)).max(0.0) / zn
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(Error::Infeasible);
            }
            if !t2.is_finite() {
                // dual step only
                for (k, uk) in u.iter_mut().enumerate() {
                    *uk -= t * r[k];
                }
                up += t;
                let k = drop.expect("finite partial step");
                drop_constraint(k, &mut active, &mut u, &mut in_active, &mut j_mat, &mut r_mat);
                continue;
            }
            x.axpy(t, &z, 1.0);
            for (k, uk) in u.iter_mut().enumerate() {
                *uk -= t * r[k];
            }
            up += t;
            if t2 <= t1 {
                add_constraint(&np, &mut j_mat, &mut r_mat, active.len());
                active.push(p);
                u.push(up);
                in_active[p] = true;
                break;
            }
            let k = drop.expect("partial step has a blocking multiplier");
            drop_constraint(k, &mut active, &mut u, &mut in_active, &mut j_mat, &mut r_mat);
        }
    }
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

fn add_constraint(np: &Vector, j_mat: &mut Matrix, r_mat: &mut Matrix, q: usize) {
    let d = j_mat.nrows();
    let mut dvec = j_mat.transpose() * np;
    for i in (q + 1..d).rev() {
        let (c, s, h) = givens(dvec[i - 1], dvec[i]);
        if s == 0.0 {
            continue;
        }
        dvec[i - 1] = h;
        dvec[i] = 0.0;
        for row in 0..d {
            let a = j_mat[(row, i - 1)];
            let b = j_mat[(row, i)];
            j_mat[(row, i - 1)] = c * a + s * b;
            j_mat[(row, i)] = -s * a + c * b;
        }
    }
    for i in 0..=q {
        r_mat[(i, q)] = dvec[i];
    }
}

fn drop_constraint(
    k: usize,
    active: &mut Vec<usize>,
    u: &mut Vec<f64>,
    in_active: &mut [bool],
    j_mat: &mut Matrix,
    r_mat: &mut Matrix,
) {
    let q = active.len();
    let d = j_mat.nrows();
    in_active[active[k]] = false;
    active.remove(k);
    u.remove(k);
    // shift columns of R left, leaving an upper Hessenberg block
    for col in k..q - 1 {
        for row in 0..d {
            r_mat[(row, col)] = r_mat[(row, col + 1)];
        }
    }
    for row in 0..d {
        r_mat[(row, q - 1)] = 0.0;
    }
    for i in k..q - 1 {
        let (c, s, h) = givens(r_mat[(i, i)], r_mat[(i + 1, i)]);
        if s == 0.0 {
            continue;
        }
        r_mat[(i, i)] = h;
        r_mat[(i + 1, i)] = 0.0;
        for col in i + 1..q - 1 {
            let a = r_mat[(i, col)];
            let b = r_mat[(i + 1, col)];
            r_mat[(i, col)] = c * a + s * b;
            r_mat[(i + 1, col)] = -s * a + c * b;
        }
        for row in 0..d {
            let a = j_mat[(row, i)];
            let b = j_mat[(row, i + 1)];
            j_mat[(row, i)] = c * a + s * b;
            j_mat[(row, i + 1)] = -s * a + c * b;
        }
    }
}

/// Closed-form projection onto a single ellipsoid. Returns the point and the
/// multiplier of `(x-c)^T Q (x-c) - bound <= 0` (zero when inside).
pub fn project_ellipsoid(e: &EllipticalConstraint, query: &Vector) -> (Vector, f64) {
    if e.value(query) <= e.bound() {
        return (query.clone(), 0.0);
    }
    let eig = SymmetricEigen::new(e.q().clone());
    let y = query - e.center();
    let z = eig.eigenvectors.transpose() * &y;
    let lam = &eig.eigenvalues;
    let beta = e.bound();
    let f = |mu: f64| -> (f64, f64) {
        let mut v = -beta;
        let mut dv = 0.0;
        for i in 0..z.len() {
            let den = 1.0 + mu * lam[i];
            v += lam[i] * z[i] * z[i] / (den * den);
            dv -= 2.0 * lam[i] * lam[i] * z[i] * z[i] / (den * den * den);
        }
        (v, dv)
    };
    // f is convex and decreasing, so Newton from the left never overshoots
    let mut mu = 0.0;
    for _ in 0..200 {
        let (v, dv) = f(mu);
        if v <= 1e-15 * beta.max(1e-300) || dv == 0.0 {
            break;
        }
        let step = v / dv;
        mu -= step;
        if step.abs() <= 1e-16 * mu.abs() {
            break;
        }
    }
    let w = Vector::from_iterator(z.len(), (0..z.len()).map(|i| z[i] / (1.0 + mu * lam[i])));
    let x = e.center() + &eig.eigenvectors * w;
    (x, mu / 2.0)
}

/// Euclidean projection of `query` onto the feasible set of `inst`.
pub fn project(query: &Vector, inst: &ConstraintInstance) -> Result<ProjectionResult> {
    let d = inst.dim();
    if query.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: query.len() });
    }
    if query.iter().any(|v| !v.is_finite()) {
        return Err(Error::Geometry("non-finite query".into()));
    }
    let poly = Polyhedron::of(inst);
    let tol = activity_tol(inst);

    let Some(e) = inst.ellipse() else {
        let (x, mult) = project_polyhedron(&poly, query)?;
        return Ok(certify(inst, &poly, query, x, Known::Polyhedral(&mult), tol));
    };

    let (xp, mult) = project_polyhedron(&poly, query)?;
    if e.value(&xp) <= e.bound() {
        return Ok(certify(inst, &poly, query, xp, Known::Polyhedral(&mult), tol));
    }
    let (xe, lam_e) = project_ellipsoid(e, query);
    if (0..poly.rhs.len()).all(|j| poly.slack(j, &xe) >= 0.0) {
        return Ok(certify(inst, &poly, query, xe, Known::Ellipse(lam_e), tol));
    }

    let x = project_with_ellipse(&poly, e, query, xp)?;
    Ok(certify(inst, &poly, query, x, Known::Unknown, tol))
}

/// Root search on the ellipse multiplier. `x_free` is the polyhedral
/// projection, known to lie outside the ellipse.
fn project_with_ellipse(poly: &Polyhedron, e: &EllipticalConstraint, query: &Vector, x_free: Vector) -> Result<Vector> {
    let d = query.len();
    let qc = e.q() * e.center();
    let solve = |mu: f64| -> Result<(Vector, f64)> {
        let h = Matrix::identity(d, d) + e.q() * mu;
        let lin = query + &qc * mu;
        let (x, _) = minimize_over_polyhedron(poly, &h, &lin)?;
        let phi = e.value(&x) - e.bound();
        Ok((x, phi))
    };
    let (mut lo, mut phi_lo) = (0.0, e.value(&x_free) - e.bound());
    let (mut hi, mut x_hi, mut phi_hi) = {
        let mut mu = 1.0;
        loop {
            let (x, phi) = solve(mu)?;
            if phi <= 0.0 {
                break (mu, x, phi);
            }
            lo = mu;
            phi_lo = phi;
            mu *= 4.0;
            if mu > 1e15 {
                return Err(Error::NotConverged { iterations: 0, residual: phi });
            }
        }
    };
    // Illinois false position; the bracket end with phi <= 0 is feasible
    let tol = 1e-14 * (1.0 + e.bound());
    let mut side = 0i8;
    let mut gap = -phi_hi;
    for _ in 0..ELLIPSE_SEARCH_MAX_ITER {
        if gap <= tol || hi - lo <= 1e-15 * hi {
            return Ok(x_hi);
        }
        let mut mu = hi - phi_hi * (hi - lo) / (phi_hi - phi_lo);
        if !(mu > lo && mu < hi) {
            mu = 0.5 * (lo + hi);
        }
        let (x, phi) = solve(mu)?;
        if phi <= 0.0 {
            hi = mu;
            x_hi = x;
            phi_hi = phi;
            gap = -phi;
            if side == -1 {
                phi_lo *= 0.5;
            }
            side = -1;
        } else {
            lo = mu;
            phi_lo = phi;
            if side == 1 {
                phi_hi *= 0.5;
            }
            side = 1;
        }
    }
    Ok(x_hi)
}

/// Multipliers already known from the solver that produced a point.
enum Known<'a> {
    /// Working set of the polyhedral solver.
    Polyhedral(&'a [(usize, f64)]),
    /// Multiplier of the ellipse alone.
    Ellipse(f64),
    /// Recover from stationarity.
    Unknown,
}

/// Builds the reported active set: every constraint tight within `tol`,
/// each with a nonnegative multiplier.
fn certify(
    inst: &ConstraintInstance,
    poly: &Polyhedron,
    query: &Vector,
    point: Vector,
    known: Known<'_>,
    tol: f64,
) -> ProjectionResult {
    let tight: Vec<usize> = (0..poly.rhs.len()).filter(|&j| poly.slack(j, &point) <= tol).collect();
    let ellipse_tight = inst.ellipse().is_some_and(|e| e.bound() - e.value(&point) <= tol);
    let mut active: Vec<(Boundary, f64)> = Vec::with_capacity(tight.len() + 1);
    match known {
        Known::Polyhedral(working) => {
            for &j in &tight {
                let m = working.iter().find(|(w, _)| *w == j).map_or(0.0, |(_, m)| m.max(0.0));
                active.push((poly.labels[j], m));
            }
            if ellipse_tight {
                active.push((Boundary::Ellipse, 0.0));
            }
        }
        Known::Ellipse(lam) => {
            for &j in &tight {
                active.push((poly.labels[j], 0.0));
            }
            if ellipse_tight {
                active.push((Boundary::Ellipse, lam));
            }
        }
        Known::Unknown => {
            let mut grads: Vec<(Boundary, Vector)> =
                tight.iter().map(|&j| (poly.labels[j], poly.normals[j].clone())).collect();
            if ellipse_tight {
                grads.push((Boundary::Ellipse, inst.ellipse().unwrap().gradient(&point)));
            }
            let d = point.len();
            let resid = query - &point;
            let g = Matrix::from_fn(d, grads.len(), |r, c| grads[c].1[r]);
            let mult = if grads.is_empty() {
                Vector::zeros(0)
            } else {
                let gtg = g.transpose() * &g;
                let rhs = g.transpose() * &resid;
                match gtg.clone().cholesky() {
                    Some(c) => c.solve(&rhs),
                    None => gtg.pseudo_inverse(1e-12).map(|p| p * &rhs).unwrap_or_else(|_| Vector::zeros(grads.len())),
                }
            };
            for (i, (b, _)) in grads.into_iter().enumerate() {
                active.push((b, mult[i].max(0.0)));
            }
        }
    }
    ProjectionResult { point, query: query.clone(), active }
}
