//! Derivative of the projection with respect to the query, by implicit
//! differentiation of the KKT conditions.
//!
//! With constraints `g_j(x) <= 0` the optimality conditions are
//!
//! ```text
//!     x - q + sum_j lambda_j grad g_j(x) = 0
//!     lambda_j g_j(x) = 0
//! ```
//!
//! and differentiating both with respect to `q` gives the linear system
//!
//! ```text
//!     [ I + sum lambda_j H_j    G^T     ] [dx]   [I]
//!     [ diag(lambda) G          diag(g) ] [dl] = [0]
//! ```
//!
//! over every constraint (active or not), which is what a differentiable
//! optimization layer factors. [`projection_jacobian_reduced`] solves the
//! equivalent system restricted to the active set.

use crate::constraints::{Boundary, ConstraintInstance};
use crate::error::{Error, Result};
use crate::optim::qp::ProjectionResult;
use crate::{Matrix, Vector};

/// Multipliers at or below this are treated as weakly active.
pub const STRICT_COMPLEMENTARITY_TOL: f64 = 1e-8;

fn multiplier_of(res: &ProjectionResult, b: Boundary) -> Option<f64> {
    res.active.iter().find(|(a, _)| *a == b).map(|(_, m)| *m)
}

fn check_strict(res: &ProjectionResult) -> Result<()> {
    if res.active.iter().any(|(_, m)| *m <= STRICT_COMPLEMENTARITY_TOL) {
        return Err(Error::DegenerateJacobian);
    }
    Ok(())
}

/// Jacobian of the projection from the full KKT system.
pub fn projection_jacobian(res: &ProjectionResult, inst: &ConstraintInstance) -> Result<Matrix> {
    let d = inst.dim();
    check_strict(res)?;
    let x = &res.point;
    let hs = inst.halfspaces();
    let n_ell = usize::from(inst.ellipse().is_some());
    let m = hs.len() + n_ell;
    let n = d + m;
    let mut k = Matrix::zeros(n, n);
    let mut hess = Matrix::identity(d, d);

    let add_row = |j: usize, grad: &Vector, lam: f64, g: f64, k: &mut Matrix| {
        for r in 0..d {
            k[(r, d + j)] = grad[r];
            k[(d + j, r)] = lam * grad[r];
        }
        k[(d + j, d + j)] = g;
    };
    for (j, (b, normal, rhs)) in hs.iter().enumerate() {
        let (lam, g) = match multiplier_of(res, *b) {
            Some(l) => (l, 0.0),
            None => (0.0, normal.dot(x) - rhs),
        };
        add_row(j, normal, lam, g, &mut k);
    }
    if let Some(e) = inst.ellipse() {
        let grad = e.gradient(x);
        let (lam, g) = match multiplier_of(res, Boundary::Ellipse) {
            Some(l) => (l, 0.0),
            None => (0.0, e.value(x) - e.bound()),
        };
        hess += e.q() * (2.0 * lam);
        add_row(hs.len(), &grad, lam, g, &mut k);
    }
    k.view_mut((0, 0), (d, d)).copy_from(&hess);

    let mut rhs = Matrix::zeros(n, d);
    rhs.view_mut((0, 0), (d, d)).fill_with_identity();
    let lu = k.lu();
    let sol = lu.solve(&rhs).ok_or(Error::DegenerateJacobian)?;
    let jac = sol.view((0, 0), (d, d)).into_owned();
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateJacobian);
    }
    Ok(jac)
}

/// Same derivative from the active set only:
/// `[H G_A^T; G_A 0] [dx; dl] = [I; 0]`.
pub fn projection_jacobian_reduced(res: &ProjectionResult, inst: &ConstraintInstance) -> Result<Matrix> {
    let d = inst.dim();
    check_strict(res)?;
    let x = &res.point;
    let mut hess = Matrix::identity(d, d);
    let mut grads = Vec::with_capacity(res.active.len());
    for (b, lam) in &res.active {
        match b {
            Boundary::Ellipse => {
                let e = inst.ellipse().ok_or(Error::DegenerateJacobian)?;
                hess += e.q() * (2.0 * lam);
                grads.push(e.gradient(x));
            }
            other => grads.push(inst.outward_normal(*other, x)),
        }
    }
    let k = grads.len();
    if k > d {
        return Err(Error::DegenerateJacobian);
    }
    let n = d + k;
    let mut sys = Matrix::zeros(n, n);
    sys.view_mut((0, 0), (d, d)).copy_from(&hess);
    for (j, g) in grads.iter().enumerate() {
        for r in 0..d {
            sys[(r, d + j)] = g[r];
            sys[(d + j, r)] = g[r];
        }
    }
    // rank check on the active gradients
    if k > 0 {
        let gm = Matrix::from_fn(d, k, |r, c| grads[c][r]);
        let sv = gm.singular_values();
        if sv.min() <= 1e-10 * sv.max().max(1.0) {
            return Err(Error::DegenerateJacobian);
        }
    }
    let mut rhs = Matrix::zeros(n, d);
    rhs.view_mut((0, 0), (d, d)).fill_with_identity();
    let sol = sys.lu().solve(&rhs).ok_or(Error::DegenerateJacobian)?;
    Ok(sol.view((0, 0), (d, d)).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{ActionSpace, ConstraintSpec, Family, JointState, LinearConstraints};
    use crate::optim::project;
    use approx::assert_relative_eq;

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    fn halfplanes(rows: &[[f64; 2]], rhs: &[f64]) -> ConstraintInstance {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let lin = LinearConstraints::new(Matrix::from_row_slice(rows.len(), 2, &flat), v(rhs)).unwrap();
        ConstraintInstance::new(ActionSpace::unit(2), Some(lin), None).unwrap()
    }

    fn fd_jacobian(q: &Vector, inst: &ConstraintInstance) -> Matrix {
        let d = q.len();
        let h = 1e-5;
        let mut j = Matrix::zeros(d, d);
        for c in 0..d {
            let mut qp = q.clone();
            qp[c] += h;
            let mut qm = q.clone();
            qm[c] -= h;
            let col = (project(&qp, inst).unwrap().point - project(&qm, inst).unwrap().point) / (2.0 * h);
            j.set_column(c, &col);
        }
        j
    }

    #[test]
    fn interior_point_gives_identity() {
        let inst = halfplanes(&[[1.0, 1.0]], &[1.0]);
        let res = project(&v(&[0.1, 0.2]), &inst).unwrap();
        assert_relative_eq!(projection_jacobian(&res, &inst).unwrap(), Matrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn single_facet_gives_tangent_projector() {
        let inst = halfplanes(&[[1.0, 1.0]], &[1.0]);
        let q = v(&[1.0, 1.0]);
        let res = project(&q, &inst).unwrap();
        let j = projection_jacobian(&res, &inst).unwrap();
        let expected = Matrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert_relative_eq!(j, expected, epsilon = 1e-12);
        assert_relative_eq!(j, fd_jacobian(&q, &inst), epsilon = 1e-8);
        assert_relative_eq!(projection_jacobian_reduced(&res, &inst).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn corner_gives_zero_matrix() {
        let inst = halfplanes(&[[1.0, 0.0], [0.0, 1.0]], &[0.2, 0.3]);
        let res = project(&v(&[0.9, 0.8]), &inst).unwrap();
        let j = projection_jacobian(&res, &inst).unwrap();
        assert!(j.amax() < 1e-12);
    }

    #[test]
    fn weakly_active_is_flagged() {
        let inst = halfplanes(&[[1.0, 1.0]], &[1.0]);
        // exactly on the facet: tight with zero multiplier
        let res = project(&v(&[0.5, 0.5]), &inst).unwrap();
        assert_eq!(res.active.len(), 1);
        assert_eq!(projection_jacobian(&res, &inst).unwrap_err(), Error::DegenerateJacobian);
    }

    #[test]
    fn ellipse_curvature_enters() {
        let inst = ConstraintSpec::new(Family::T)
            .instantiate(&ActionSpace::unit(2), &JointState::new(vec![0.0, 1.3], vec![0.0; 2]))
            .unwrap();
        let q = v(&[0.4, -0.1]);
        let res = project(&q, &inst).unwrap();
        assert_eq!(res.active.len(), 1);
        let j = projection_jacobian(&res, &inst).unwrap();
        assert_relative_eq!(j, fd_jacobian(&q, &inst), epsilon = 1e-6);
        assert_relative_eq!(j, projection_jacobian_reduced(&res, &inst).unwrap(), epsilon = 1e-10);
    }
}
