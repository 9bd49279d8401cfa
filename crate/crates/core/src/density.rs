//! Log-densities of Gaussian policies pushed through squashing and feasible
//! action mappings.
//!
//! Every density is reported together with its partial derivatives in the
//! Gaussian mean, the log standard deviation, and the pre-map sample `x`.
//! Under the reparametrization `x = mean + std * eps` the total gradient is
//! assembled by [`LogProbParts::reparam_grads`].
//!
//! The alpha-projection pushes the mass of every infeasible sample onto the
//! boundary, so its density has an interior part (the base Gaussian) and a
//! boundary part obtained by integrating the Gaussian along each ray from the
//! anchor beyond the boundary crossing.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::constraints::{ActionSpace, ConstraintInstance};
use crate::error::{Error, Result};
use crate::mappings::{log_sech2, map_alpha, map_radial, squash_box, MappingOutput, CENTER_GUARD};
use crate::Vector;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const LN_SQRT_PI_OVER_2: f64 = -0.120_782_237_635_245_22;

/// Diagonal Gaussian over pre-map actions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mean: Vector,
    pub log_std: Vector,
}

impl GaussianHead {
    /// Clamps `log_std` into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn new(mean: Vector, log_std: Vector) -> Self {
        let log_std = log_std.map(|s| s.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Self { mean, log_std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vector {
        self.log_std.map(f64::exp)
    }

    pub fn sample(&self, eps: &Vector) -> Vector {
        &self.mean + self.std().component_mul(eps)
    }

    pub fn log_prob(&self, x: &Vector) -> f64 {
        gaussian_parts(self, x).value
    }
}

/// A log-density and its partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbParts {
    pub value: f64,
    pub d_mean: Vector,
    pub d_log_std: Vector,
    pub d_x: Vector,
}

impl LogProbParts {
    /// Total derivatives in `(mean, log_std)` when `x = mean + std * eps`.
    pub fn reparam_grads(&self, head: &GaussianHead, eps: &Vector) -> (Vector, Vector) {
        let d_mean = &self.d_mean + &self.d_x;
        let d_log_std = &self.d_log_std + self.d_x.component_mul(&head.std().component_mul(eps));
        (d_mean, d_log_std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Support {
    /// `d`-dimensional density on the interior.
    Interior,
    /// `(d-1)`-dimensional density on the boundary.
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedDensityValue {
    pub log_prob: f64,
    pub support: Support,
}

/// Knobs for the alpha-projection boundary density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundaryDensityOptions {
    /// Exponent of `r0` in the solid-angle element; `None` means `d - 1`.
    pub kappa: Option<f64>,
    /// Relative weight of boundary measure against interior volume.
    pub boundary_weight: f64,
}

impl Default for BoundaryDensityOptions {
    fn default() -> Self {
        Self { kappa: None, boundary_weight: 1.0 }
    }
}

/// Plain diagonal Gaussian log-density.
pub fn gaussian_parts(head: &GaussianHead, x: &Vector) -> LogProbParts {
    let d = head.dim();
    let mut value = -0.5 * LN_2PI * d as f64;
    let mut d_mean = Vector::zeros(d);
    let mut d_log_std = Vector::zeros(d);
    for i in 0..d {
        let s = head.log_std[i];
        let sigma = s.exp();
        let z = (x[i] - head.mean[i]) / sigma;
        value += -0.5 * z * z - s;
        d_mean[i] = z / sigma;
        d_log_std[i] = z * z - 1.0;
    }
    let d_x = -&d_mean;
    LogProbParts { value, d_mean, d_log_std, d_x }
}

/// Gaussian pushed through `a_max * tanh(x)`.
pub fn squashed_gaussian_parts(head: &GaussianHead, x: &Vector, space: &ActionSpace) -> LogProbParts {
    let mut parts = gaussian_parts(head, x);
    for (i, (&xi, &m)) in x.iter().zip(space.a_max()).enumerate() {
        parts.value -= log_sech2(xi) + m.ln();
        parts.d_x[i] += 2.0 * xi.tanh();
    }
    parts
}

/// Log-density of `a_max * tanh(x)` with `x` drawn from `head`.
pub fn squashed_gaussian_logprob(head: &GaussianHead, pre_tanh: &Vector, space: &ActionSpace) -> f64 {
    squashed_gaussian_parts(head, pre_tanh, space).value
}

/// Gaussian, then box squashing, then radial squashing. Returns the density
/// parts together with the radial mapping output for the sample.
pub fn radial_parts(
    head: &GaussianHead,
    x: &Vector,
    inst: &ConstraintInstance,
    center: &Vector,
) -> Result<(LogProbParts, MappingOutput)> {
    let space = inst.space();
    let mut parts = squashed_gaussian_parts(head, x, space);
    let a = squash_box(x, space);
    let out = map_radial(&a, inst, center)?;
    parts.value -= out.logdet.unwrap_or(0.0);
    if let Some(g) = &out.logdet_grad {
        for i in 0..x.len() {
            let da_dx = space.a_max()[i] * log_sech2(x[i]).exp();
            parts.d_x[i] -= g[i] * da_dx;
        }
    }
    Ok((parts, out))
}

/// Log-density after radial squashing, for a sample `pre_map_action` that
/// already went through the box squashing stage.
pub fn radial_logprob(
    head: &GaussianHead,
    pre_map_action: &Vector,
    inst: &ConstraintInstance,
    center: &Vector,
) -> Result<f64> {
    let x = Vector::from_iterator(
        pre_map_action.len(),
        pre_map_action.iter().zip(inst.space().a_max()).map(|(a, m)| (a / m).atanh()),
    );
    Ok(radial_parts(head, &x, inst, center)?.0.value)
}

/// `ln(erfc(t) exp(t^2))`.
fn ln_erfcx(t: f64) -> f64 {
    if t < 8.0 {
        erfc(t).ln() + t * t
    } else {
        // continued fraction 1 / (t + (1/2) / (t + 1 / (t + (3/2) / ...)))
        let mut f = t;
        for k in (1..=80).rev() {
            f = t + 0.5 * k as f64 / f;
        }
        -(PI.sqrt() * f).ln()
    }
}

/// `H_j = int_0^inf s^j exp(-s^2 - 2 t s) ds` for `j = 0..=n`, divided by
/// `H_0`, together with `ln H_0`.
fn scaled_tail_moments(n: usize, t: f64) -> (Vec<f64>, f64) {
    let ln_h0 = LN_SQRT_PI_OVER_2 + ln_erfcx(t);
    let mut h = vec![0.0; n + 1];
    h[0] = 1.0;
    if n == 0 {
        return (h, ln_h0);
    }
    // recurrence: 2 H_{j+1} + 2 t H_j = j H_{j-1}, and 2 H_1 + 2 t H_0 = 1
    if t < 1.0 {
        // forward is stable here: H is the dominant solution
        h[1] = 0.5 * ((-ln_h0).exp() - 2.0 * t);
        for j in 1..n {
            h[j + 1] = 0.5 * (j as f64 * h[j - 1] - 2.0 * t * h[j]);
        }
    } else {
        // backward (Miller) for the recessive solution
        let top = n + 300;
        let mut f = vec![0.0; top + 2];
        f[top] = 1.0;
        for j in (1..=top).rev() {
            f[j - 1] = (2.0 * f[j + 1] + 2.0 * t * f[j]) / j as f64;
            let m = f[j - 1].abs();
            if !(1e-200..=1e200).contains(&m) {
                let scale = 1.0 / m;
                for v in &mut f[j - 1..] {
                    *v *= scale;
                }
            }
        }
        for j in 0..=n {
            h[j] = f[j] / f[0];
        }
    }
    (h, ln_h0)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `ln int_{r0}^inf r^k exp(-(A r + B)^2) dr` for `k = 0..=n`.
pub fn ln_ray_moments(n: usize, a: f64, b: f64, r0: f64) -> Vec<f64> {
    assert!(a > 0.0 && r0 >= 0.0, "ray moment needs A > 0 and r0 >= 0");
    let t0 = a * r0 + b;
    let (h, ln_h0) = scaled_tail_moments(n, t0);
    // r^k = sum_j C(k, j) r0^(k-j) (r - r0)^j; every term is positive
    (0..=n)
        .map(|k| {
            let s: f64 = (0..=k)
                .map(|j| binomial(k, j) * r0.powi((k - j) as i32) * a.powi(-(j as i32 + 1)) * h[j])
                .sum();
            -t0 * t0 + ln_h0 + s.ln()
        })
        .collect()
}

/// `int_{r0}^inf r^n exp(-(A r + B)^2) dr` in closed form.
pub fn gaussian_ray_moment(n: usize, a: f64, b: f64, r0: f64) -> f64 {
    ln_ray_moments(n, a, b, r0)[n].exp()
}

/// Boundary log-density at the boundary point hit by the ray through `x`.
fn boundary_parts(
    head: &GaussianHead,
    x: &Vector,
    inst: &ConstraintInstance,
    center: &Vector,
    opts: &BoundaryDensityOptions,
) -> Result<LogProbParts> {
    let d = x.len();
    let dx = x - center;
    let rho = dx.norm();
    if rho < CENTER_GUARD {
        return Err(Error::Geometry("boundary density at the anchor".into()));
    }
    let u = dx / rho;
    let (r0, binding) = inst.ray_scale(center, &u)?;
    let bpt = center + &u * r0;
    let normal = inst.outward_normal(binding, &bpt);
    let cos = normal.dot(&u);
    if !(cos > 0.0) {
        return Err(Error::Geometry("ray does not exit through the boundary".into()));
    }
    let kappa = opts.kappa.unwrap_or((d - 1) as f64);

    // exponent along the ray: -(A r + B)^2 - C0 with C0 = D - B^2
    let sigma = head.std();
    let w = sigma.map(|s| 0.5 / (s * s));
    let delta = center - &head.mean;
    let a2: f64 = (0..d).map(|i| u[i] * u[i] * w[i]).sum();
    let a = a2.sqrt();
    let p: f64 = (0..d).map(|i| u[i] * delta[i] * w[i]).sum();
    let b = p / a;
    let dd: f64 = (0..d).map(|i| delta[i] * delta[i] * w[i]).sum();
    let n = d - 1;
    let lm = ln_ray_moments(n + 2, a, b, r0);
    let ln_m = lm[n];
    let value = cos.ln() - kappa * r0.ln() - dd + b * b - head.log_std.sum() - 0.5 * LN_2PI * d as f64
        + ln_m
        + opts.boundary_weight.ln();

    // d ln M / d(A, B, r0)
    let r1 = (lm[n + 1] - ln_m).exp();
    let r2 = (lm[n + 2] - ln_m).exp();
    let dm_db = -2.0 * a * r1 - 2.0 * b;
    let dm_da = -2.0 * a * r2 - 2.0 * b * r1;
    let t0 = a * r0 + b;
    let dm_dr0 = if r0 > 0.0 {
        -(n as f64 * r0.ln() - t0 * t0 - ln_m).exp()
    } else if n == 0 {
        -(-t0 * t0 - ln_m).exp()
    } else {
        0.0
    };
    let via_b = 2.0 * b + dm_db;

    let db_dmu = u.component_mul(&w) * (-1.0 / a);
    let d_mean = delta.component_mul(&w) * 2.0 + &db_dmu * via_b;

    let da_ds = u.component_mul(&u).component_mul(&w) * (-1.0 / a);
    let dp_ds = u.component_mul(&delta).component_mul(&w) * -2.0;
    let db_ds = &dp_ds / a - &da_ds * (p / a2);
    let dd_ds = delta.component_mul(&delta).component_mul(&w) * -2.0;
    let d_log_std = -dd_ds + &db_ds * via_b + &da_ds * dm_da - Vector::from_element(d, 1.0);

    // direction: r0 is (-1)-homogeneous with grad -r0 n / (n.u)
    let grad_r0 = &normal * (-r0 / cos);
    let mut dcos_du = normal.clone();
    if let (crate::Boundary::Ellipse, Some(e)) = (binding, inst.ellipse()) {
        let g = e.gradient(&bpt);
        let tangential = &u - &normal * cos;
        let m = e.q() * tangential * (2.0 / g.norm());
        dcos_du += &m * r0 + &grad_r0 * u.dot(&m);
    }
    let da_du = u.component_mul(&w) / a;
    let dp_du = delta.component_mul(&w);
    let db_du = &dp_du / a - &da_du * (p / a2);
    let dlog_du =
        dcos_du / cos - &grad_r0 * (kappa / r0) + db_du * via_b + da_du * dm_da + &grad_r0 * dm_dr0;
    let d_x = (&dlog_du - &u * u.dot(&dlog_du)) / rho;
    Ok(LogProbParts { value, d_mean, d_log_std, d_x })
}

/// Log-density of the alpha-projected Gaussian at the boundary point `b`.
pub fn alpha_boundary_logprob(
    head: &GaussianHead,
    b: &Vector,
    inst: &ConstraintInstance,
    center: &Vector,
) -> Result<f64> {
    alpha_boundary_logprob_with(head, b, inst, center, &BoundaryDensityOptions::default())
}

pub fn alpha_boundary_logprob_with(
    head: &GaussianHead,
    b: &Vector,
    inst: &ConstraintInstance,
    center: &Vector,
    opts: &BoundaryDensityOptions,
) -> Result<f64> {
    if inst.max_violation(b) > 1e-6 || inst.min_slack(b) > 1e-6 {
        return Err(Error::Geometry("point is not on the boundary".into()));
    }
    Ok(boundary_parts(head, b, inst, center, opts)?.value)
}

/// Density parts for a Gaussian sample `x` mapped by the alpha-projection.
/// The Gaussian is placed directly on the action space; there is no box
/// squashing stage, since the projection already bounds the output.
pub fn alpha_parts(
    head: &GaussianHead,
    x: &Vector,
    inst: &ConstraintInstance,
    center: &Vector,
    opts: &BoundaryDensityOptions,
) -> Result<(LogProbParts, MappingOutput, Support)> {
    let out = map_alpha(x, inst, center)?;
    if out.on_boundary {
        Ok((boundary_parts(head, x, inst, center, opts)?, out, Support::Boundary))
    } else {
        Ok((gaussian_parts(head, x), out, Support::Interior))
    }
}

pub fn alpha_logprob(
    head: &GaussianHead,
    x: &Vector,
    inst: &ConstraintInstance,
    center: &Vector,
) -> Result<MixedDensityValue> {
    let (parts, _, support) = alpha_parts(head, x, inst, center, &BoundaryDensityOptions::default())?;
    Ok(MixedDensityValue { log_prob: parts.value, support })
}


#[cfg(test)]
mod tests {
    use super::quad::{integrate, integrate_to_inf};
    use super::*;
    use crate::constraints::{ConstraintSpec, EllipticalConstraint, Family, JointState, LinearConstraints};
    use crate::Matrix;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    fn head(mean: &[f64], log_std: &[f64]) -> GaussianHead {
        GaussianHead::new(v(mean), v(log_std))
    }

    #[test]
    fn erfcx_branches_agree() {
        for t in [2.0, 3.5, 6.0, 9.0, 30.0] {
            let reference = match t {
                2.0 => 0.255_395_676_310_505_8,
                3.5 => 0.155_293_655_608_894_3,
                6.0 => 0.092_776_567_800_538_36,
                9.0 => 0.062_307_724_037_774_684,
                _ => 0.018_795_888_861_416_754,
            };
            assert_relative_eq!(ln_erfcx(t).exp(), reference, max_relative = 1e-13);
        }
        // both sides of the switch to the continued fraction
        assert_relative_eq!(ln_erfcx(8.0 - 1e-12), ln_erfcx(8.0), max_relative = 1e-13);
        assert_relative_eq!(ln_erfcx(-30.0), 2f64.ln() + 900.0, max_relative = 1e-15);
    }

    #[test]
    fn moment_examples() {
        assert_relative_eq!(gaussian_ray_moment(0, 1.0, 0.0, 0.0), PI.sqrt() / 2.0, max_relative = 1e-14);
        assert_relative_eq!(gaussian_ray_moment(0, 1.0, 0.0, 0.0), 0.88623, epsilon = 1e-5);
        assert_relative_eq!(gaussian_ray_moment(1, 1.0, 0.0, 0.0), 0.5, max_relative = 1e-14);
        // high-precision quadrature reference values
        let cases = [
            ((3, 1.3, -0.4, 0.7), 0.414_454_443_764_169_89),
            ((8, 0.1, -3.0, 0.0), 38_105_209_891_969.248),
            ((8, 0.1, 3.0, 3.0), 88.600_151_424_853_951),
            ((5, 5.0, 3.0, 3.0), 2.644_228_464_779_365_9e-141),
            ((2, 0.3, -2.5, 1.2), 443.108_521_647_569_46),
            ((0, 5.0, 3.0, 3.0), 1.078_286_161_338_165_2e-143),
            ((8, 5.0, -3.0, 0.2), 0.019_509_866_733_977_356),
            ((8, 1.0, 0.95, 0.05), 0.070_089_530_348_945_504),
            ((4, 2.0, -1.0, 0.3), 0.262_147_055_253_614_23),
        ];
        for ((n, a, b, r0), want) in cases {
            assert_relative_eq!(gaussian_ray_moment(n, a, b, r0), want, max_relative = 1e-10);
        }
    }

    #[test]
    fn moments_match_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(0..=8);
            let a = rng.random_range(0.1..5.0);
            let b = rng.random_range(-3.0..3.0);
            let r0 = rng.random_range(0.0..3.0);
            let f = |r: f64| r.powi(n as i32) * (-(a * r + b).powi(2)).exp();
            // split at the peak so the quadrature resolves it
            let peak = (-b / a).max(r0);
            let q = if peak > r0 { integrate(&f, r0, peak, 1e-13) } else { 0.0 }
                + integrate_to_inf(&f, peak, 1e-13);
            let m = gaussian_ray_moment(n, a, b, r0);
            assert_relative_eq!(m, q, max_relative = 1e-10);
        }
    }

    #[test]
    fn forward_and_backward_recurrences_agree() {
        // evaluate both branches near the switch point
        for t in [0.9, 0.99] {
            let (fwd, _) = scaled_tail_moments(8, t);
            let top = 8 + 300;
            let mut f = vec![0.0; top + 2];
            f[top] = 1.0;
            for j in (1..=top).rev() {
                f[j - 1] = (2.0 * f[j + 1] + 2.0 * t * f[j]) / j as f64;
            }
            for j in 0..=8 {
                assert_relative_eq!(fwd[j], f[j] / f[0], max_relative = 1e-11);
            }
        }
    }

    #[test]
    fn forward_recurrence_matches_reference() {
        let want = [
            1.0,
            0.393_633_138_774_418_95,
            0.263_820_116_735_348_64,
            0.235_341_068_733_209_78,
            0.254_525_533_863_097_09,
            0.317_966_817_148_561_3,
            0.445_533_744_368_605_96,
            0.686_580_204_824_520_35,
            1.147_419_982_395_408_7,
        ];
        let (h, _) = scaled_tail_moments(8, 0.6);
        for j in 0..=8 {
            assert_relative_eq!(h[j], want[j], max_relative = 1e-13);
        }
    }

    #[test]
    fn squashed_gaussian_examples() {
        let h = head(&[0.0], &[0.0]);
        let lp = squashed_gaussian_logprob(&h, &v(&[0.0]), &ActionSpace::unit(1));
        assert_relative_eq!(lp, -0.5 * (2.0 * PI).ln(), epsilon = 1e-15);
        assert_relative_eq!(lp, -0.91894, epsilon = 1e-5);

        let h2 = head(&[0.3, -0.2], &[-0.5, 0.1]);
        let u = v(&[0.7, -1.1]);
        let wide = ActionSpace::new(vec![2.0, 2.0]).unwrap();
        let diff = squashed_gaussian_logprob(&h2, &u, &ActionSpace::unit(2)) - squashed_gaussian_logprob(&h2, &u, &wide);
        assert_relative_eq!(diff, 2.0 * 2f64.ln(), epsilon = 1e-12);

        let h0 = head(&[0.0, 0.0], &[0.2, 0.2]);
        let plus = squashed_gaussian_logprob(&h0, &v(&[0.4, 0.9]), &ActionSpace::unit(2));
        let minus = squashed_gaussian_logprob(&h0, &v(&[-0.4, -0.9]), &ActionSpace::unit(2));
        assert_eq!(plus, minus);
        // stays finite far into the tails
        assert!(squashed_gaussian_logprob(&h0, &v(&[40.0, -40.0]), &ActionSpace::unit(2)).is_finite());
    }

    #[test]
    fn log_std_is_clamped() {
        let h = head(&[0.0], &[-50.0]);
        assert_eq!(h.log_std[0], LOG_STD_MIN);
        let h = head(&[0.0], &[5.0]);
        assert_eq!(h.log_std[0], LOG_STD_MAX);
    }

    fn facet_instance() -> ConstraintInstance {
        let lin = LinearConstraints::new(Matrix::from_row_slice(1, 2, &[1.0, 1.0]), v(&[1.0])).unwrap();
        ConstraintInstance::new(ActionSpace::unit(2), Some(lin), None).unwrap()
    }

    #[test]
    fn radial_logprob_at_center_is_base_density() {
        let inst = facet_instance();
        let c = v(&[-0.2, -0.1]);
        let h = head(&[0.1, 0.2], &[-0.3, -0.6]);
        let x = c.map(f64::atanh);
        let base = squashed_gaussian_logprob(&h, &x, inst.space());
        assert_relative_eq!(radial_logprob(&h, &c, &inst, &c).unwrap(), base, epsilon = 1e-12);
    }

    #[test]
    fn radial_logprob_is_rotation_invariant_on_ball() {
        let e = EllipticalConstraint::new(Matrix::identity(2, 2), Vector::zeros(2), 0.25).unwrap();
        let inst = ConstraintInstance::new(ActionSpace::unit(2), None, Some(e)).unwrap();
        let c = Vector::zeros(2);
        let (parts_a, _) = radial_parts(&head(&[0.0, 0.0], &[0.0, 0.0]), &v(&[0.3, 0.0]), &inst, &c).unwrap();
        let (lp, _) = radial_parts(&head(&[0.0, 0.0], &[0.0, 0.0]), &v(&[0.0, 0.3]), &inst, &c).unwrap();
        assert_relative_eq!(parts_a.value, lp.value, epsilon = 1e-14);
    }

    /// Total derivative of `value` in (mean, log_std) under reparametrization,
    /// checked against finite differences.
    fn check_reparam(
        f: &dyn Fn(&GaussianHead, &Vector) -> LogProbParts,
        h: &GaussianHead,
        eps: &Vector,
        tol: f64,
    ) {
        let parts = f(h, &h.sample(eps));
        let (gm, gs) = parts.reparam_grads(h, eps);
        let step = 1e-6;
        let d = h.dim();
        for i in 0..d {
            let mut hp = h.clone();
            hp.mean[i] += step;
            let mut hm = h.clone();
            hm.mean[i] -= step;
            let fd = (f(&hp, &hp.sample(eps)).value - f(&hm, &hm.sample(eps)).value) / (2.0 * step);
            assert_relative_eq!(gm[i], fd, epsilon = tol, max_relative = tol);
            let mut hp = h.clone();
            hp.log_std[i] += step;
            let mut hm = h.clone();
            hm.log_std[i] -= step;
            let fd = (f(&hp, &hp.sample(eps)).value - f(&hm, &hm.sample(eps)).value) / (2.0 * step);
            assert_relative_eq!(gs[i], fd, epsilon = tol, max_relative = tol);
        }
    }

    #[test]
    fn reparam_gradients_match_fd() {
        let inst = facet_instance();
        let c = v(&[-0.3, -0.2]);
        let opts = BoundaryDensityOptions::default();
        let t_inst = ConstraintSpec::new(Family::T)
            .instantiate(&ActionSpace::unit(2), &JointState::new(vec![0.0, 0.9], vec![0.0; 2]))
            .unwrap();
        let zero = Vector::zeros(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..25 {
            let h = head(
                &[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                &[rng.random_range(-1.5..0.5), rng.random_range(-1.5..0.5)],
            );
            let eps = v(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
            check_reparam(&|h, x| gaussian_parts(h, x), &h, &eps, 1e-6);
            check_reparam(&|h, x| squashed_gaussian_parts(h, x, inst.space()), &h, &eps, 1e-6);
            check_reparam(&|h, x| radial_parts(h, x, &inst, &c).unwrap().0, &h, &eps, 1e-5);
            check_reparam(&|h, x| alpha_parts(h, x, &inst, &c, &opts).unwrap().0, &h, &eps, 1e-5);
            check_reparam(&|h, x| alpha_parts(h, x, &t_inst, &zero, &opts).unwrap().0, &h, &eps, 1e-5);
        }
    }

    #[test]
    fn boundary_density_in_one_dimension_is_tail_mass() {
        let lin = LinearConstraints::new(Matrix::from_row_slice(1, 1, &[1.0]), v(&[0.4])).unwrap();
        let inst = ConstraintInstance::new(ActionSpace::unit(1), Some(lin), None).unwrap();
        let h = head(&[0.1], &[-0.7]);
        let q = alpha_boundary_logprob(&h, &v(&[0.4]), &inst, &v(&[0.0])).unwrap().exp();
        let sigma = (-0.7f64).exp();
        let tail = 0.5 * erfc((0.4 - 0.1) / (sigma * 2f64.sqrt()));
        assert_relative_eq!(q, tail, max_relative = 1e-12);
    }

    fn ball_instance(d: usize, r0: f64) -> ConstraintInstance {
        let e = EllipticalConstraint::new(Matrix::identity(d, d), Vector::zeros(d), r0 * r0).unwrap();
        ConstraintInstance::new(ActionSpace::new(vec![2.0; d]).unwrap(), None, Some(e)).unwrap()
    }

    #[test]
    fn ball_boundary_mass_is_chi_tail() {
        // standard Gaussian at the anchor: q is constant on the sphere and
        // integrates to P(|X| >= r0)
        for d in [2usize, 3, 4] {
            let r0 = 0.9;
            let inst = ball_instance(d, r0);
            let h = GaussianHead::new(Vector::zeros(d), Vector::zeros(d));
            let mut b = Vector::zeros(d);
            b[0] = r0;
            let q = alpha_boundary_logprob(&h, &b, &inst, &Vector::zeros(d)).unwrap().exp();
            let area = 2.0 * PI.powf(d as f64 / 2.0) / statrs::function::gamma::gamma(d as f64 / 2.0)
                * r0.powi(d as i32 - 1);
            let tail = 1.0 - ChiSquared::new(d as f64).unwrap().cdf(r0 * r0);
            assert_relative_eq!(q * area, tail, max_relative = 1e-10);
        }
    }

    #[test]
    fn solid_angle_exponent_matters_above_two_dimensions() {
        let d = 3;
        let r0 = 0.6;
        let inst = ball_instance(d, r0);
        let h = GaussianHead::new(Vector::zeros(d), Vector::zeros(d));
        let b = v(&[0.0, 0.0, r0]);
        let z = Vector::zeros(d);
        let area = 4.0 * PI * r0 * r0;
        let tail = 1.0 - ChiSquared::new(3.0).unwrap().cdf(r0 * r0);
        let default = alpha_boundary_logprob(&h, &b, &inst, &z).unwrap().exp() * area;
        let opts = BoundaryDensityOptions { kappa: Some(1.0), ..Default::default() };
        let kappa_one = alpha_boundary_logprob_with(&h, &b, &inst, &z, &opts).unwrap().exp() * area;
        assert_relative_eq!(default, tail, max_relative = 1e-10);
        assert_relative_eq!(kappa_one, tail * r0, max_relative = 1e-10);
    }

    #[test]
    fn boundary_weight_shifts_log_density() {
        let inst = facet_instance();
        let h = head(&[0.4, 0.5], &[-0.5, -0.5]);
        let c = v(&[-0.2, -0.2]);
        let b = v(&[0.5, 0.5]);
        let base = alpha_boundary_logprob(&h, &b, &inst, &c).unwrap();
        let opts = BoundaryDensityOptions { boundary_weight: 2.0, ..Default::default() };
        let scaled = alpha_boundary_logprob_with(&h, &b, &inst, &c, &opts).unwrap();
        assert_relative_eq!(scaled - base, 2f64.ln(), epsilon = 1e-12);
        assert!(alpha_boundary_logprob(&h, &v(&[0.1, 0.1]), &inst, &c).is_err());
    }

    #[test]
    fn alpha_logprob_branches() {
        let inst = facet_instance();
        let c = v(&[-0.2, -0.2]);
        let h = head(&[0.2, 0.1], &[-0.4, -0.2]);
        let inside = alpha_logprob(&h, &v(&[0.1, 0.0]), &inst, &c).unwrap();
        assert_eq!(inside.support, Support::Interior);
        assert_eq!(inside.log_prob, h.log_prob(&v(&[0.1, 0.0])));
        let out = alpha_logprob(&h, &v(&[0.9, 0.8]), &inst, &c).unwrap();
        assert_eq!(out.support, Support::Boundary);
        assert!(out.log_prob.is_finite());
    }

    /// Interior Monte-Carlo mass plus boundary integral of q over a polygon.
    fn total_mass_2d(h: &GaussianHead, inst: &ConstraintInstance, c: &Vector, samples: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let mut inside = 0usize;
        for _ in 0..samples {
            let eps = v(&[rng.sample(normal), rng.sample(normal)]);
            if inst.contains(&h.sample(&eps), 0.0) {
                inside += 1;
            }
        }
        let p = inside as f64 / samples as f64;
        let se = (p * (1.0 - p) / samples as f64).sqrt();
        // parametrize the boundary by the angle of the ray from c: the
        // arc-length element is r0 / cos(theta) d phi
        let q_dphi = |phi: f64| {
            let u = v(&[phi.cos(), phi.sin()]);
            let (r0, which) = inst.ray_scale(c, &u).unwrap();
            let b = c + &u * r0;
            let n = inst.outward_normal(which, &b);
            let q = alpha_boundary_logprob(h, &b, inst, c).unwrap().exp();
            q * r0 / n.dot(&u)
        };
        // split at the polygon vertices as seen from c
        let mut cuts = vec![0.0, 2.0 * PI];
        let mut prev = inst.ray_scale(c, &v(&[1.0, 0.0])).unwrap().1;
        let m = 4096;
        for k in 1..m {
            let phi = 2.0 * PI * k as f64 / m as f64;
            let (lo, hi) = (2.0 * PI * (k - 1) as f64 / m as f64, phi);
            let which = inst.ray_scale(c, &v(&[phi.cos(), phi.sin()])).unwrap().1;
            if which != prev {
                let (mut a, mut b) = (lo, hi);
                for _ in 0..60 {
                    let mid = 0.5 * (a + b);
                    if inst.ray_scale(c, &v(&[mid.cos(), mid.sin()])).unwrap().1 == prev {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                cuts.push(0.5 * (a + b));
                prev = which;
            }
        }
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let boundary: f64 = cuts.windows(2).map(|w| integrate(&q_dphi, w[0], w[1], 1e-9)).sum();
        (p + boundary, se)
    }

    #[test]
    fn alpha_density_normalizes_on_polygon() {
        let inst = ConstraintSpec::new(Family::O)
            .instantiate(&ActionSpace::unit(2), &JointState::new(vec![0.0; 2], vec![1.3, -0.8]))
            .unwrap();
        let c = crate::mappings::select_center(&inst).unwrap();
        let h = head(&[0.5, -0.2], &[-0.8, -0.3]);
        let (total, se) = total_mass_2d(&h, &inst, &c, 200_000, 3);
        assert!((total - 1.0).abs() <= 3.0 * se, "total {total}, se {se}");
    }
}
