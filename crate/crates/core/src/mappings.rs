//! Maps from the action box onto a state-dependent feasible set.
//!
//! All three mappings are used as policy output layers, so each one reports
//! its Jacobian (the closest-point one only on request). Radial squashing is
//! a bijection onto the interior and also reports `log|det J|`.

use serde::{Deserialize, Serialize};

use crate::constraints::{ActionSpace, Boundary, ConstraintInstance};
use crate::error::{Error, Result};
use crate::optim::{chebyshev_center, project, projection_jacobian};
use crate::{Matrix, Vector};

/// Below this distance from the anchor the radial map returns its limit.
pub const CENTER_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MappingKind {
    ClosestPoint,
    AlphaProjection,
    RadialSquashing,
    /// Only valid when the feasible set is the whole box.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingOutput {
    pub action: Vector,
    pub jacobian: Option<Matrix>,
    pub logdet: Option<f64>,
    /// Gradient of `logdet` with respect to the input.
    pub logdet_grad: Option<Vector>,
    pub on_boundary: bool,
    /// Constraint that determined the output, if any.
    pub binding: Option<Boundary>,
    /// Another constraint bound at the same scale (alpha-projection only).
    pub tied: bool,
}

impl MappingOutput {
    fn unchanged(a: &Vector, logdet: Option<f64>) -> Self {
        let d = a.len();
        Self {
            action: a.clone(),
            jacobian: Some(Matrix::identity(d, d)),
            logdet,
            logdet_grad: logdet.map(|_| Vector::zeros(d)),
            on_boundary: false,
            binding: None,
            tied: false,
        }
    }
}

impl MappingKind {
    /// Applies the mapping. `center` is only read by the ray-based mappings.
    pub fn apply(
        self,
        a: &Vector,
        inst: &ConstraintInstance,
        center: &Vector,
        want_jacobian: bool,
    ) -> Result<MappingOutput> {
        match self {
            MappingKind::ClosestPoint => map_closest(a, inst, want_jacobian),
            MappingKind::AlphaProjection => map_alpha(a, inst, center),
            MappingKind::RadialSquashing => map_radial(a, inst, center),
            MappingKind::Identity => {
                if !inst.is_box_only() {
                    return Err(Error::InvalidSpec("identity mapping on a constrained instance".into()));
                }
                Ok(MappingOutput::unchanged(a, None))
            }
        }
    }

    /// Whether the mapping needs an interior anchor.
    pub fn uses_center(self) -> bool {
        matches!(self, MappingKind::AlphaProjection | MappingKind::RadialSquashing)
    }
}

/// Euclidean projection. The Jacobian is `None` when not requested or when
/// the active set is degenerate.
pub fn map_closest(a: &Vector, inst: &ConstraintInstance, want_jacobian: bool) -> Result<MappingOutput> {
    let res = project(a, inst)?;
    let jacobian = if want_jacobian { projection_jacobian(&res, inst).ok() } else { None };
    Ok(MappingOutput {
        on_boundary: !res.active.is_empty(),
        binding: res.active.first().map(|(b, _)| *b),
        action: res.point,
        jacobian,
        logdet: None,
        logdet_grad: None,
        tied: false,
    })
}

/// Scale along `v` from `center` to the boundary and the outward normal
/// there. Also reports whether a different constraint binds at the same
/// scale.
fn ray_geometry(inst: &ConstraintInstance, center: &Vector, v: &Vector) -> Result<(f64, Boundary, Vector, bool)> {
    let (lam, binding) = inst.ray_scale(center, v)?;
    let b = center + v * lam;
    let normal = inst.outward_normal(binding, &b);
    // a tie shows up as a second constraint with near-zero slack at b
    let tol = 1e-9 * (1.0 + b.amax());
    let mut tight = 0;
    for (_, n, rhs) in inst.halfspaces() {
        if (rhs - n.dot(&b)).abs() <= tol {
            tight += 1;
        }
    }
    if let Some(e) = inst.ellipse() {
        if (e.bound() - e.value(&b)).abs() <= tol {
            tight += 1;
        }
    }
    Ok((lam, binding, normal, tight > 1))
}

/// Moves `a` toward `center` until it is feasible.
pub fn map_alpha(a: &Vector, inst: &ConstraintInstance, center: &Vector) -> Result<MappingOutput> {
    if inst.contains(a, 0.0) {
        return Ok(MappingOutput::unchanged(a, Some(0.0)));
    }
    let v = a - center;
    if v.norm() < CENTER_GUARD {
        return Ok(MappingOutput::unchanged(a, Some(0.0)));
    }
    let (lam, binding, n, tied) = ray_geometry(inst, center, &v)?;
    if lam >= 1.0 {
        // numerically on the boundary already
        return Ok(MappingOutput::unchanged(a, Some(0.0)));
    }
    let action = center + &v * lam;
    // d lambda / d a = -lambda n / (n.v)
    let nv = n.dot(&v);
    let mut jac = Matrix::identity(v.len(), v.len()) * lam;
    jac -= (&v * n.transpose()) * (lam / nv);
    Ok(MappingOutput {
        action,
        jacobian: Some(jac),
        logdet: None,
        logdet_grad: None,
        on_boundary: true,
        binding: Some(binding),
        tied,
    })
}

/// `tanh(L) / L`, even and smooth at 0.
fn tanh_ratio(l: f64) -> f64 {
    if l < 1e-4 {
        1.0 - l * l / 3.0
    } else {
        l.tanh() / l
    }
}

/// Derivative of [`tanh_ratio`].
fn tanh_ratio_deriv(l: f64) -> f64 {
    if l < 1e-4 {
        -2.0 * l / 3.0
    } else {
        (sech2(l) * l - l.tanh()) / (l * l)
    }
}

fn sech2(l: f64) -> f64 {
    let c = l.abs().min(350.0).cosh();
    1.0 / (c * c)
}

/// `ln sech^2(L)` without overflow.
pub(crate) fn log_sech2(l: f64) -> f64 {
    let l = l.abs();
    2.0 * (std::f64::consts::LN_2 - l - (-2.0 * l).exp().ln_1p())
}

/// `log|det|` of the radial Jacobian at scale `L` in dimension `d`, with its
/// derivative in `L`.
pub(crate) fn radial_logdet(l: f64, d: usize) -> (f64, f64) {
    let k = (d - 1) as f64;
    let (ln_g, dln_g) = if l < 1e-4 {
        (-l * l / 3.0, -2.0 * l / 3.0)
    } else {
        // d/dL ln(tanh L / L) = 2 / sinh(2L) - 1/L
        let s = (2.0 * l).min(700.0).sinh();
        ((l.tanh() / l).ln(), 2.0 / s - 1.0 / l)
    };
    (k * ln_g + log_sech2(l), k * dln_g - 2.0 * l.tanh())
}

/// Radial squashing: `c + tanh(L) (b - c)` with `b` the boundary point on the
/// ray through `a` and `L = |a - c| / |b - c|`.
pub fn map_radial(a: &Vector, inst: &ConstraintInstance, center: &Vector) -> Result<MappingOutput> {
    let d = a.len();
    let v = a - center;
    if v.norm() < CENTER_GUARD {
        return Ok(MappingOutput::unchanged(center, Some(0.0)));
    }
    let (lam, binding, n, _) = ray_geometry(inst, center, &v)?;
    let l = 1.0 / lam;
    let g = tanh_ratio(l);
    let action = center + &v * g;
    // L is 1-homogeneous in v: grad L = n / (lambda n.v)
    let grad_l = &n / (lam * n.dot(&v));
    let mut jac = Matrix::identity(d, d) * g;
    jac += (&v * grad_l.transpose()) * tanh_ratio_deriv(l);
    let (logdet, dlogdet) = radial_logdet(l, d);
    Ok(MappingOutput {
        action,
        jacobian: Some(jac),
        logdet: Some(logdet),
        logdet_grad: Some(grad_l * dlogdet),
        on_boundary: false,
        binding: Some(binding),
        tied: false,
    })
}

/// Per-coordinate `a_max * tanh(u)`.
pub fn squash_box(u: &Vector, space: &ActionSpace) -> Vector {
    Vector::from_iterator(u.len(), u.iter().zip(space.a_max()).map(|(x, m)| m * x.tanh()))
}

/// Interior anchor for the ray-based mappings.
///
/// Polytopes use their Chebyshev center. With an ellipse the ellipse center is
/// used when it is strictly inside the polyhedral part; otherwise the anchor
/// is the midpoint of the part of the segment between the ellipse center and
/// the Chebyshev center that lies in both sets.
pub fn select_center(inst: &ConstraintInstance) -> Result<Vector> {
    if let Some(c) = inst.center() {
        return Ok(c.clone());
    }
    if inst.is_box_only() {
        return Ok(Vector::zeros(inst.dim()));
    }
    let Some(e) = inst.ellipse() else {
        return Ok(chebyshev_center(inst)?.0);
    };
    let ce = e.center();
    if inst.min_slack(ce) > 0.0 {
        return Ok(ce.clone());
    }
    let (xc, _) = chebyshev_center(inst)?;
    let dir = &xc - ce;
    // ellipse side: t in [0, t_e]
    let t_e = match inst.ellipse() {
        Some(e) => {
            let qd = e.q() * &dir;
            let qa = dir.dot(&qd);
            if qa > 0.0 { (e.bound() / qa).sqrt() } else { f64::INFINITY }
        }
        None => f64::INFINITY,
    };
    // polyhedral side: t in [t_p, 1], found by bisection on the slack
    let poly_slack = |t: f64| {
        let x = ce + &dir * t;
        let mut m = f64::INFINITY;
        for (_, n, rhs) in inst.halfspaces() {
            m = m.min(rhs - n.dot(&x));
        }
        m
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if poly_slack(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let t = 0.5 * (hi + t_e.min(1.0));
    let x = ce + &dir * t;
    if hi < t_e && inst.min_slack(&x) > 0.0 {
        Ok(x)
    } else if inst.min_slack(&Vector::zeros(inst.dim())) > 0.0 {
        Ok(Vector::zeros(inst.dim()))
    } else {
        Err(Error::EmptyInterior)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{ConstraintSpec, EllipticalConstraint, Family, JointState, LinearConstraints};
    use approx::assert_relative_eq;

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    fn facet() -> ConstraintInstance {
        let lin = LinearConstraints::new(Matrix::from_row_slice(1, 2, &[1.0, 1.0]), v(&[1.0])).unwrap();
        ConstraintInstance::new(ActionSpace::unit(2), Some(lin), None).unwrap()
    }

    fn ball(r2: f64) -> ConstraintInstance {
        let e = EllipticalConstraint::new(Matrix::identity(2, 2), Vector::zeros(2), r2).unwrap();
        ConstraintInstance::new(ActionSpace::unit(2), None, Some(e)).unwrap()
    }

    fn fd_jacobian(f: impl Fn(&Vector) -> Vector, a: &Vector) -> Matrix {
        let h = 1e-5;
        let d = a.len();
        let mut j = Matrix::zeros(d, d);
        for c in 0..d {
            let mut p = a.clone();
            p[c] += h;
            let mut m = a.clone();
            m[c] -= h;
            j.set_column(c, &((f(&p) - f(&m)) / (2.0 * h)));
        }
        j
    }

    #[test]
    fn closest_point_examples() {
        let inst = facet();
        let out = map_closest(&v(&[1.0, 1.0]), &inst, true).unwrap();
        assert_relative_eq!(out.action, v(&[0.5, 0.5]), epsilon = 1e-12);
        assert!(out.on_boundary);

        let out = map_closest(&v(&[0.1, -0.3]), &inst, true).unwrap();
        assert_eq!(out.action, v(&[0.1, -0.3]));
        assert_relative_eq!(out.jacobian.unwrap(), Matrix::identity(2, 2), epsilon = 1e-12);
        assert!(map_closest(&v(&[0.1, -0.3]), &inst, false).unwrap().jacobian.is_none());
    }

    #[test]
    fn closest_point_corner_has_zero_jacobian() {
        // box corner: every query in the outer quadrant lands on (1, 1)
        let inst = ConstraintInstance::box_only(ActionSpace::unit(2));
        let a = map_closest(&v(&[1.5, 1.2]), &inst, true).unwrap();
        let b = map_closest(&v(&[2.0, 3.0]), &inst, true).unwrap();
        assert_eq!(a.action, b.action);
        assert!(a.jacobian.unwrap().amax() < 1e-12);
    }

    #[test]
    fn alpha_examples() {
        let c = Vector::zeros(2);
        let out = map_alpha(&v(&[1.0, 1.0]), &facet(), &c).unwrap();
        assert_relative_eq!(out.action, v(&[0.5, 0.5]), epsilon = 1e-12);
        assert!(out.on_boundary);

        let out = map_alpha(&v(&[0.2, 0.1]), &facet(), &c).unwrap();
        assert_eq!(out.action, v(&[0.2, 0.1]));
        assert_eq!(out.jacobian.unwrap(), Matrix::identity(2, 2));
        assert!(!out.on_boundary);

        let a = v(&[0.8, -0.9]);
        let out = map_alpha(&a, &ball(0.05), &c).unwrap();
        let lam = 0.05f64.sqrt() / a.norm();
        assert_relative_eq!(lam, 0.18570, epsilon = 1e-5);
        assert_relative_eq!(out.action, &a * lam, epsilon = 1e-12);
        assert_relative_eq!(out.action, v(&[0.14856, -0.16713]), epsilon = 1e-5);
        assert_relative_eq!(out.action.norm_squared(), 0.05, epsilon = 1e-12);
        assert_relative_eq!(out.action[0] * a[1] - out.action[1] * a[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn alpha_single_facet_jacobian_closed_form() {
        let inst = facet();
        let c = v(&[-0.2, 0.1]);
        let a = v(&[0.9, 0.4]);
        let out = map_alpha(&a, &inst, &c).unwrap();
        let n = inst.linear().unwrap().a().row(0).transpose();
        let w = &a - &c;
        let lam = (inst.linear().unwrap().b()[0] - n.dot(&c)) / n.dot(&w);
        let expected = (Matrix::identity(2, 2) - (&w * n.transpose()) / n.dot(&w)) * lam;
        assert_relative_eq!(out.jacobian.clone().unwrap(), expected, epsilon = 1e-12);
        let fd = fd_jacobian(|x| map_alpha(x, &inst, &c).unwrap().action, &a);
        assert_relative_eq!(out.jacobian.unwrap(), fd, epsilon = 1e-8);
    }

    #[test]
    fn alpha_ellipse_jacobian_matches_fd() {
        let inst = ConstraintSpec::new(Family::T)
            .instantiate(&ActionSpace::unit(2), &JointState::new(vec![0.0, 0.7], vec![0.0; 2]))
            .unwrap();
        let c = Vector::zeros(2);
        let a = v(&[0.5, -0.3]);
        let out = map_alpha(&a, &inst, &c).unwrap();
        assert_eq!(out.binding, Some(Boundary::Ellipse));
        let fd = fd_jacobian(|x| map_alpha(x, &inst, &c).unwrap().action, &a);
        assert_relative_eq!(out.jacobian.unwrap(), fd, epsilon = 1e-7);
    }

    #[test]
    fn radial_examples() {
        let c = Vector::zeros(2);
        let out = map_radial(&v(&[1.0, 1.0]), &facet(), &c).unwrap();
        let t2 = 2f64.tanh();
        assert_relative_eq!(t2, 0.964_027_580_075_817, epsilon = 1e-14);
        assert_relative_eq!(out.action, v(&[0.5 * t2, 0.5 * t2]), epsilon = 1e-12);
        assert_relative_eq!(out.action[0], 0.48201, epsilon = 1e-5);

        let at = map_radial(&c, &facet(), &c).unwrap();
        assert_eq!(at.action, c);
        assert_eq!(at.jacobian.unwrap(), Matrix::identity(2, 2));
        assert_eq!(at.logdet, Some(0.0));
    }

    #[test]
    fn radial_jacobian_and_logdet_match_fd() {
        let inst = facet();
        let c = v(&[-0.3, -0.2]);
        for a in [v(&[1.0, 1.0]), v(&[0.1, 0.05]), v(&[-3.0, 0.5]), v(&[2.5, -4.0])] {
            let out = map_radial(&a, &inst, &c).unwrap();
            let j = out.jacobian.clone().unwrap();
            let fd = fd_jacobian(|x| map_radial(x, &inst, &c).unwrap().action, &a);
            assert_relative_eq!(j, fd, epsilon = 1e-7, max_relative = 1e-4);
            assert_relative_eq!(out.logdet.unwrap(), fd.determinant().abs().ln(), epsilon = 1e-6);
            let grad_fd = {
                let h = 1e-5;
                Vector::from_fn(2, |i, _| {
                    let mut p = a.clone();
                    p[i] += h;
                    let mut m = a.clone();
                    m[i] -= h;
                    (map_radial(&p, &inst, &c).unwrap().logdet.unwrap()
                        - map_radial(&m, &inst, &c).unwrap().logdet.unwrap())
                        / (2.0 * h)
                })
            };
            assert_relative_eq!(out.logdet_grad.unwrap(), grad_fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn radial_logdet_is_stable_far_out() {
        let (ld, dld) = radial_logdet(800.0, 3);
        assert!(ld.is_finite() && dld.is_finite());
        assert_relative_eq!(ld, 2.0 * (-(800f64).ln()) + 2.0 * (2f64.ln() - 800.0), epsilon = 1e-9);
        let (ld0, d0) = radial_logdet(0.0, 4);
        assert_eq!((ld0, d0), (0.0, 0.0));
    }

    #[test]
    fn squash_box_values() {
        let space = ActionSpace::unit(2);
        assert_eq!(squash_box(&Vector::zeros(2), &space), Vector::zeros(2));
        let s = squash_box(&v(&[1.0, -1.0]), &space);
        assert_relative_eq!(s, v(&[0.76159, -0.76159]), epsilon = 1e-5);
        assert_relative_eq!(s[0], 1f64.tanh(), epsilon = 1e-15);
        let wide = ActionSpace::new(vec![2.0, 0.5]).unwrap();
        assert_eq!(squash_box(&v(&[40.0, -40.0]), &wide), v(&[2.0, -0.5]));
    }

    #[test]
    fn identity_rejects_constrained_instance() {
        let c = Vector::zeros(2);
        assert!(MappingKind::Identity.apply(&c, &facet(), &c, true).is_err());
        let boxed = ConstraintInstance::box_only(ActionSpace::unit(2));
        let out = MappingKind::Identity.apply(&v(&[0.3, 0.4]), &boxed, &c, true).unwrap();
        assert_eq!(out.action, v(&[0.3, 0.4]));
    }

    #[test]
    fn center_selection() {
        let c = select_center(&facet()).unwrap();
        assert!(facet().min_slack(&c) > 0.0);
        let half = LinearConstraints::new(Matrix::from_row_slice(1, 2, &[1.0, 0.0]), v(&[0.0])).unwrap();
        let inst = ConstraintInstance::new(ActionSpace::unit(2), Some(half.clone()), None).unwrap();
        assert_relative_eq!(select_center(&inst).unwrap(), v(&[-0.5, 0.0]), epsilon = 1e-9);
        // ellipse center outside the polytope: anchor lies in both
        let e = EllipticalConstraint::new(Matrix::identity(2, 2), v(&[0.1, 0.0]), 0.09).unwrap();
        let both = ConstraintInstance::new(ActionSpace::unit(2), Some(half), Some(e)).unwrap();
        let c = select_center(&both).unwrap();
        assert!(both.min_slack(&c) > 0.0, "{c}");
        // ellipse center strictly feasible: used as is
        let os = ConstraintSpec::new(Family::OS)
            .instantiate(&ActionSpace::unit(2), &JointState::new(vec![0.4, 1.0], vec![0.5, -1.0]))
            .unwrap();
        assert_eq!(select_center(&os).unwrap(), Vector::zeros(2));
    }
}
