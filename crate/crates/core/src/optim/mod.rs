//! Small exact convex solvers: linear programs over the polyhedral part of a
//! feasible set, Euclidean projection, and the projection's Jacobian.

mod kkt;
mod lp;
mod qp;

pub use kkt::{projection_jacobian, projection_jacobian_reduced, STRICT_COMPLEMENTARITY_TOL};
pub use lp::{chebyshev_center, linear_maximize, solve_lp, LpSolution};
pub use qp::{project, project_ellipsoid, ProjectionResult, ELLIPSE_SEARCH_MAX_ITER};
