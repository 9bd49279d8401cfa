//! Dense two-phase tableau simplex with Bland's rule.
//!
//! Problems here have at most a few dozen rows, so the tableau is stored
//! densely and rebuilt per call.

use crate::constraints::ConstraintInstance;
use crate::error::{Error, Result};
use crate::{Matrix, Vector};

const PIVOT_TOL: f64 = 1e-11;
const MAX_PIVOTS: usize = 50_000;

/// Optimal point of a linear program.
#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vector,
    pub value: f64,
    /// No other optimal basic solution exists (no zero reduced cost among
    /// nonbasic columns).
    pub unique: bool,
}

/// `maximize c^T x` subject to `G x <= h` and `x >= lower`.
#[derive(Debug, Clone)]
pub(crate) struct InequalityLp {
    pub c: Vector,
    pub g: Matrix,
    pub h: Vector,
    pub lower: Vector,
}

struct Tableau {
    rows: usize,
    cols: usize,
    // rows x (cols + 1), last column is the right-hand side
    t: Vec<f64>,
    basis: Vec<usize>,
    // reduced costs (maximize), last entry is -objective value
    z: Vec<f64>,
    banned: Vec<bool>,
}

impl Tableau {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * (self.cols + 1) + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.t[i * (self.cols + 1) + self.cols]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.cols + 1;
        let p = self.t[r * w + c];
        for j in 0..w {
            self.t[r * w + j] /= p;
        }
        for i in 0..self.rows {
            if i == r {
                continue;
            }
            let f = self.t[i * w + c];
            if f != 0.0 {
                for j in 0..w {
                    self.t[i * w + j] -= f * self.t[r * w + j];
                }
            }
        }
        let f = self.z[c];
        if f != 0.0 {
            for j in 0..w {
                self.z[j] -= f * self.t[r * w + j];
            }
        }
        self.basis[r] = c;
    }

    fn set_objective(&mut self, cost: &[f64]) {
        let w = self.cols + 1;
        self.z = vec![0.0; w];
        self.z[..cost.len()].copy_from_slice(cost);
        for i in 0..self.rows {
            let cb = self.z_cost(cost, self.basis[i]);
            if cb != 0.0 {
                for j in 0..w {
                    self.z[j] -= cb * self.t[i * w + j];
                }
            }
        }
    }

    fn z_cost(&self, cost: &[f64], j: usize) -> f64 {
        cost.get(j).copied().unwrap_or(0.0)
    }

    /// Runs simplex iterations until optimal. Bland: lowest-index entering
    /// column, lowest basis index among tied ratios.
    fn optimize(&mut self, pivots: &mut usize) -> Result<()> {
        loop {
            let scale = 1.0 + self.z.iter().take(self.cols).fold(0.0f64, |m, v| m.max(v.abs()));
            let entering = (0..self.cols).find(|&j| !self.banned[j] && self.z[j] > PIVOT_TOL * scale);
            let Some(c) = entering else { return Ok(()) };
            let mut best: Option<(f64, usize)> = None;
            for i in 0..self.rows {
                let a = self.at(i, c);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i) / a;
                    best = match best {
                        None => Some((ratio, i)),
                        Some((br, bi)) => {
                            let tie = (ratio - br).abs() <= 1e-12 * (1.0 + br.abs());
                            if ratio < br && !tie || tie && self.basis[i] < self.basis[bi] {
                                Some((ratio, i))
                            } else {
                                Some((br, bi))
                            }
                        }
                    };
                }
            }
            let Some((_, r)) = best else { return Err(Error::Unbounded) };
            self.pivot(r, c);
            *pivots += 1;
            if *pivots > MAX_PIVOTS {
                return Err(Error::NotConverged { iterations: *pivots, residual: f64::NAN });
            }
        }
    }
}

impl InequalityLp {
    pub(crate) fn solve(&self) -> Result<LpSolution> {
        let n = self.c.len();
        let m = self.h.len();
        // shift x = y + lower so that y >= 0
        let hs = &self.h - &self.g * &self.lower;
        let negative: Vec<usize> = (0..m).filter(|&i| hs[i] < 0.0).collect();
        let n_art = negative.len();
        let cols = n + m + n_art;
        let w = cols + 1;
        let mut t = vec![0.0; m * w];
        let mut basis = vec![0; m];
        let mut art = 0;
        for i in 0..m {
            let sign = if hs[i] < 0.0 { -1.0 } else { 1.0 };
            for j in 0..n {
                t[i * w + j] = sign * self.g[(i, j)];
            }
            t[i * w + n + i] = sign;
            t[i * w + cols] = sign * hs[i];
            if sign < 0.0 {
                t[i * w + n + m + art] = 1.0;
                basis[i] = n + m + art;
                art += 1;
            } else {
                basis[i] = n + i;
            }
        }
        let mut tab = Tableau { rows: m, cols, t, basis, z: vec![0.0; w], banned: vec![false; cols] };
        let mut pivots = 0;

        if n_art > 0 {
            let mut phase1 = vec![0.0; cols];
            for a in 0..n_art {
                phase1[n + m + a] = -1.0;
            }
            tab.set_objective(&phase1);
            tab.optimize(&mut pivots)?;
            let infeas: f64 = (0..m).filter(|&i| tab.basis[i] >= n + m).map(|i| tab.rhs(i)).sum();
            let scale = 1.0 + hs.amax();
            if infeas > 1e-9 * scale {
                return Err(Error::Infeasible);
            }
            // drive zero-level artificials out of the basis
            for i in 0..m {
                if tab.basis[i] >= n + m {
                    if let Some(j) = (0..n + m).find(|&j| tab.at(i, j).abs() > 1e-9) {
                        tab.pivot(i, j);
                    }
                }
            }
            for a in 0..n_art {
                tab.banned[n + m + a] = true;
            }
        }

        let mut cost = vec![0.0; cols];
        cost[..n].copy_from_slice(self.c.as_slice());
        tab.set_objective(&cost);
        tab.optimize(&mut pivots)?;

        let mut y = vec![0.0; cols];
        for i in 0..m {
            y[tab.basis[i]] = tab.rhs(i);
        }
        let x = Vector::from_iterator(n, (0..n).map(|j| y[j] + self.lower[j]));
        let value = self.c.dot(&x);
        let in_basis: Vec<bool> = {
            let mut b = vec![false; cols];
            for &j in &tab.basis {
                b[j] = true;
            }
            b
        };
        let scale = 1.0 + self.c.amax();
        let unique = (0..cols).all(|j| in_basis[j] || tab.banned[j] || tab.z[j] < -1e-9 * scale);
        Ok(LpSolution { x, value, unique })
    }
}

/// Linear maximization over the polyhedral part (box and halfspaces) of an
/// instance. Among multiple optimal vertices the smallest one is returned,
/// comparing coordinates from the last to the first.
pub fn solve_lp(objective: &Vector, inst: &ConstraintInstance) -> Result<LpSolution> {
    let d = inst.dim();
    if objective.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: objective.len() });
    }
    let (g, h) = polyhedral_rows(inst);
    let lower = Vector::from_iterator(d, inst.space().a_max().iter().map(|m| -m));
    let lp = InequalityLp { c: objective.clone(), g, h, lower };
    let sol = lp.solve()?;
    if sol.unique {
        return Ok(sol);
    }
    lexicographic_refine(lp, sol)
}

/// Linear maximization over the whole feasible set, ellipse included.
///
/// Without an ellipse this is [`solve_lp`]. With one, supporting hyperplanes
/// of the ellipse are added as cuts until the LP optimum satisfies it to a
/// relative tolerance of `1e-9`.
pub fn linear_maximize(objective: &Vector, inst: &ConstraintInstance) -> Result<Vector> {
    let Some(e) = inst.ellipse() else {
        return Ok(solve_lp(objective, inst)?.x);
    };
    let d = inst.dim();
    if objective.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: objective.len() });
    }
    let (mut g, mut h) = polyhedral_rows(inst);
    let lower = Vector::from_iterator(d, inst.space().a_max().iter().map(|m| -m));
    let tol = 1e-9 * (1.0 + e.bound());
    let mut last = Vector::zeros(d);
    for _ in 0..MAX_CUTS {
        let lp = InequalityLp { c: objective.clone(), g: g.clone(), h: h.clone(), lower: lower.clone() };
        let sol = lp.clone().solve()?;
        let sol = if sol.unique { sol } else { lexicographic_refine(lp, sol)? };
        let x = sol.x;
        let val = e.value(&x);
        if val <= e.bound() + tol {
            return Ok(x);
        }
        // tangent plane where the ray from the ellipse center through x exits
        let y = e.center() + (&x - e.center()) * (e.bound() / val).sqrt();
        let n = e.gradient(&y);
        let scale = n.norm();
        let r = g.nrows();
        g = g.insert_row(r, 0.0);
        for j in 0..d {
            g[(r, j)] = n[j] / scale;
        }
        let k = h.len();
        h = h.insert_row(k, n.dot(&y) / scale);
        last = x;
    }
    Err(Error::NotConverged { iterations: MAX_CUTS, residual: e.value(&last) - e.bound() })
}

const MAX_CUTS: usize = 500;

/// Successively minimizes `x_{d-1}, x_{d-2}, ...` over the optimal face.
fn lexicographic_refine(lp: InequalityLp, sol: LpSolution) -> Result<LpSolution> {
    let d = lp.c.len();
    let value = sol.value;
    let slack = 1e-12 * (1.0 + value.abs());
    let mut g = lp.g.clone();
    let mut h = lp.h.clone();
    // -c^T x <= -(v* - slack)
    let r = g.nrows();
    g = g.insert_row(r, 0.0);
    for j in 0..d {
        g[(r, j)] = -lp.c[j];
    }
    let n = h.len();
    h = h.insert_row(n, -(value - slack));
    let mut x = sol.x;
    for k in (0..d).rev() {
        let mut c = Vector::zeros(d);
        c[k] = -1.0;
        let sub = InequalityLp { c, g: g.clone(), h: h.clone(), lower: lp.lower.clone() };
        x = sub.solve()?.x;
        // fix coordinate k at its minimum
        let r = g.nrows();
        g = g.insert_row(r, 0.0);
        g[(r, k)] = 1.0;
        let n = h.len();
        h = h.insert_row(n, x[k] + 1e-13 * (1.0 + x[k].abs()));
    }
    let value = lp.c.dot(&x);
    Ok(LpSolution { x, value, unique: false })
}

/// Stacks box faces and linear rows as `G x <= h`.
pub(crate) fn polyhedral_rows(inst: &ConstraintInstance) -> (Matrix, Vector) {
    let hs = inst.halfspaces();
    let d = inst.dim();
    let g = Matrix::from_fn(hs.len(), d, |i, j| hs[i].1[j]);
    let h = Vector::from_iterator(hs.len(), hs.iter().map(|(_, _, r)| *r));
    (g, h)
}

/// Center and radius of the largest ball inside the polyhedral part.
///
/// When the optimal center is not unique, the result is the average of the
/// coordinate-wise extremes over the optimal centers, which is itself optimal and
/// symmetric for symmetric sets.
pub fn chebyshev_center(inst: &ConstraintInstance) -> Result<(Vector, f64)> {
    let d = inst.dim();
    let (g, h) = polyhedral_rows(inst);
    let m = g.nrows();
    // variables (x, r); rows have unit norm so the distance term is r itself
    let mut gg = Matrix::zeros(m, d + 1);
    gg.view_mut((0, 0), (m, d)).copy_from(&g);
    for i in 0..m {
        gg[(i, d)] = 1.0;
    }
    let mut lower = Vector::zeros(d + 1);
    for (j, a) in inst.space().a_max().iter().enumerate() {
        lower[j] = -a;
    }
    let mut c = Vector::zeros(d + 1);
    c[d] = 1.0;
    let lp = InequalityLp { c, g: gg.clone(), h: h.clone(), lower: lower.clone() };
    let sol = lp.solve()?;
    let radius = sol.value;
    if !(radius > 0.0) {
        return Err(Error::EmptyInterior);
    }
    if sol.unique {
        return Ok((sol.x.rows(0, d).into_owned(), radius));
    }
    // r >= r* - tol, then extreme x_k in both directions
    let tol = 1e-10 * (1.0 + radius);
    let gg = gg.insert_row(m, 0.0);
    let mut gg = gg;
    gg[(m, d)] = -1.0;
    let hh = h.clone().insert_row(m, -(radius - tol));
    let mut acc = Vector::zeros(d);
    for k in 0..d {
        for sign in [-1.0, 1.0] {
            let mut c = Vector::zeros(d + 1);
            c[k] = sign;
            let sub = InequalityLp { c, g: gg.clone(), h: hh.clone(), lower: lower.clone() };
            acc[k] += sub.solve()?.x[k];
        }
    }
    let center = acc * 0.5;
    let r = inst_polyhedral_slack(&g, &h, &center);
    if !(r > 0.0) {
        return Err(Error::EmptyInterior);
    }
    // the averaged center is optimal up to the relaxation above
    Ok((center, if r >= radius - 2.0 * tol { radius } else { r }))
}

fn inst_polyhedral_slack(g: &Matrix, h: &Vector, x: &Vector) -> f64 {
    (h - g * x).min()
}
