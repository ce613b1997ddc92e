//! Closed-form infinite-horizon equilibrium for geometric Brownian motion
//! `dX = mu X dt + sigma X dW` with reward `f(x) = x`.
//!
//! With `rho = 2 mu / sigma^2 in (0, 1/2)` and threshold `b = 2 rho / (gamma (1 - rho))`,
//! the agent stops as soon as `X >= b`, and for `x < b`
//!
//! ```text
//! V(x) = (1 - gamma b / 2) b^rho x^(1-rho) + (gamma/2) b^(2 rho) x^(2 - 2 rho)
//! g(x) = b^rho x^(1-rho)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbmClosedForm {
    pub mu: f64,
    pub sigma_sq: f64,
    pub gamma: f64,
    pub rho: f64,
    pub threshold: f64,
}

impl GbmClosedForm {
    pub fn new(mu: f64, sigma_sq: f64, gamma: f64) -> Result<Self> {
        if !(sigma_sq > 0.0 && gamma > 0.0) {
            return Err(Error::InvalidProblem(format!(
                "closed form needs sigma^2 > 0 and gamma > 0, got {sigma_sq}, {gamma}"
            )));
        }
        let rho = 2.0 * mu / sigma_sq;
        if !(rho > 0.0 && rho < 0.5) {
            return Err(Error::InvalidGbm(rho));
        }
        Ok(GbmClosedForm {
            mu,
            sigma_sq,
            gamma,
            rho,
            threshold: 2.0 * rho / (gamma * (1.0 - rho)),
        })
    }

    fn continues(&self, x: f64, side: Side) -> bool {
        x < self.threshold || (x == self.threshold && side == Side::Left)
    }

    /// `(V(x), g(x))`.
    pub fn eval(&self, x: f64) -> Result<(f64, f64)> {
        if !(x > 0.0) {
            return Err(Error::NonPositiveState(x));
        }
        Ok((self.value(x, Side::Right), self.first_moment(x, Side::Right)))
    }

    /// `V(x)`, taking the branch selected by `side` at the threshold.
    pub fn value(&self, x: f64, side: Side) -> f64 {
        let (b, r, half) = (self.threshold, self.rho, 0.5 * self.gamma);
        if self.continues(x, side) {
            (1.0 - half * b) * b.powf(r) * x.powf(1.0 - r) + half * b.powf(2.0 * r) * x.powf(2.0 - 2.0 * r)
        } else {
            x
        }
    }

    pub fn first_moment(&self, x: f64, side: Side) -> f64 {
        if self.continues(x, side) {
            self.threshold.powf(self.rho) * x.powf(1.0 - self.rho)
        } else {
            x
        }
    }

    pub fn value_x(&self, x: f64, side: Side) -> f64 {
        let (b, r, g) = (self.threshold, self.rho, self.gamma);
        if self.continues(x, side) {
            (1.0 - r) * (1.0 - 0.5 * g * b) * b.powf(r) * x.powf(-r) + g * (1.0 - r) * b.powf(2.0 * r) * x.powf(1.0 - 2.0 * r)
        } else {
            1.0
        }
    }

    pub fn value_xx(&self, x: f64, side: Side) -> f64 {
        let (b, r, g) = (self.threshold, self.rho, self.gamma);
        if self.continues(x, side) {
            -r * (1.0 - r) * (1.0 - 0.5 * g * b) * b.powf(r) * x.powf(-r - 1.0)
                + g * (1.0 - r) * (1.0 - 2.0 * r) * b.powf(2.0 * r) * x.powf(-2.0 * r)
        } else {
            0.0
        }
    }

    pub fn first_moment_x(&self, x: f64, side: Side) -> f64 {
        if self.continues(x, side) {
            (1.0 - self.rho) * (self.threshold / x).powf(self.rho)
        } else {
            1.0
        }
    }

    pub fn first_moment_xx(&self, x: f64, side: Side) -> f64 {
        if self.continues(x, side) {
            -self.rho * (1.0 - self.rho) * self.threshold.powf(self.rho) * x.powf(-self.rho - 1.0)
        } else {
            0.0
        }
    }

    /// `L phi = mu x phi' + sigma^2 x^2 phi'' / 2` from given derivatives.
    pub fn generator(&self, x: f64, d1: f64, d2: f64) -> f64 {
        self.mu * x * d1 + 0.5 * self.sigma_sq * x * x * d2
    }

    /// `mu x - (gamma/2) sigma^2 x^2`, the stopped-branch value of `L V - (gamma/2)|sigma x g_x|^2`.
    pub fn stopped_branch_gap(&self, x: f64) -> f64 {
        self.mu * x - 0.5 * self.gamma * self.sigma_sq * x * x
    }

    /// `z -> (gamma/2) b z^(2 rho - 1) + (1 - gamma b/2) z^rho`; increasing on `[1, inf)` with value 1 at 1.
    pub fn margin_function(&self, z: f64) -> f64 {
        let half_b = 0.5 * self.gamma * self.threshold;
        half_b * z.powf(2.0 * self.rho - 1.0) + (1.0 - half_b) * z.powf(self.rho)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EllipticReport {
    /// Max of `|L V - (gamma/2)|sigma x g_x|^2|` on continuation nodes.
    pub continuation_value_residual: f64,
    /// Max of `|L g|` on continuation nodes.
    pub continuation_moment_residual: f64,
    /// Max of `L V - (gamma/2) sigma^2 x^2` on stopped nodes (should be <= 0).
    pub stopped_max: f64,
    /// Min of `V + (gamma/2)(x - g)^2 - x` on continuation nodes (should be > 0).
    pub obstacle_margin_min: f64,
    /// Min of `margin_function(b/x) - 1` on continuation nodes (should be >= 0).
    pub margin_function_min: f64,
    pub continuation_nodes: usize,
    pub stopped_nodes: usize,
}

impl EllipticReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.continuation_value_residual <= tol
            && self.continuation_moment_residual <= tol
            && self.stopped_max <= tol
            && (self.continuation_nodes == 0 || self.obstacle_margin_min > 0.0)
    }
}

/// Checks the stationary system at the given positive abscissae using the
/// analytic derivatives.
pub fn verify_elliptic_system(cf: &GbmClosedForm, xs: &[f64]) -> Result<EllipticReport> {
    let mut rep = EllipticReport {
        stopped_max: f64::NEG_INFINITY,
        obstacle_margin_min: f64::INFINITY,
        margin_function_min: f64::INFINITY,
        ..Default::default()
    };
    for &x in xs {
        let (v, g) = cf.eval(x)?;
        let side = Side::Right;
        let lv = cf.generator(x, cf.value_x(x, side), cf.value_xx(x, side));
        let gx = cf.first_moment_x(x, side);
        let var = 0.5 * cf.gamma * cf.sigma_sq * x * x * gx * gx;
        if x < cf.threshold {
            rep.continuation_nodes += 1;
            let lg = cf.generator(x, gx, cf.first_moment_xx(x, side));
            rep.continuation_value_residual = rep.continuation_value_residual.max((lv - var).abs());
            rep.continuation_moment_residual = rep.continuation_moment_residual.max(lg.abs());
            let margin = v + 0.5 * cf.gamma * (x - g) * (x - g) - x;
            rep.obstacle_margin_min = rep.obstacle_margin_min.min(margin);
            rep.margin_function_min = rep.margin_function_min.min(cf.margin_function(cf.threshold / x) - 1.0);
        } else {
            rep.stopped_nodes += 1;
            rep.stopped_max = rep.stopped_max.max(lv - var);
        }
    }
    Ok(rep)
}

/// One-sided quantities at the threshold and the boundary inequality there.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryJump {
    pub generator_value_left: f64,
    pub generator_value_right: f64,
    pub moment_slope_left: f64,
    pub moment_slope_right: f64,
    /// `L V(b-) + L V(b+)`.
    pub lhs: f64,
    /// `gamma sigma^2 b^2 ((g'(b-) + g'(b+)) / 2)^2`.
    pub rhs: f64,
    /// `V'(b-) - V'(b+)`.
    pub smooth_fit_gap: f64,
    /// `sigma^2 b rho (2 - rho)`: an alternative closed expression for the
    /// left-hand side that does not agree with direct substitution.
    pub alternative_lhs: f64,
}

impl BoundaryJump {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs
    }
}

pub fn boundary_jump_quantities(cf: &GbmClosedForm) -> BoundaryJump {
    let b = cf.threshold;
    let lv = |side| cf.generator(b, cf.value_x(b, side), cf.value_xx(b, side));
    let gl = cf.first_moment_x(b, Side::Left);
    let gr = cf.first_moment_x(b, Side::Right);
    let (lvl, lvr) = (lv(Side::Left), lv(Side::Right));
    let avg = 0.5 * (gl + gr);
    BoundaryJump {
        generator_value_left: lvl,
        generator_value_right: lvr,
        moment_slope_left: gl,
        moment_slope_right: gr,
        lhs: lvl + lvr,
        rhs: cf.gamma * cf.sigma_sq * b * b * avg * avg,
        smooth_fit_gap: cf.value_x(b, Side::Left) - cf.value_x(b, Side::Right),
        alternative_lhs: cf.sigma_sq * b * cf.rho * (2.0 - cf.rho),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference() -> GbmClosedForm {
        GbmClosedForm::new(0.05, 0.5, 1.0).unwrap()
    }

    #[test]
    fn parameters() {
        let cf = reference();
        assert!((cf.rho - 0.2).abs() < 1e-15);
        assert!((cf.threshold - 0.5).abs() < 1e-15);
    }

    #[test]
    fn closed_form_values() {
        let cf = reference();
        // direct evaluation: b^rho = 0.5^0.2, x^(0.8) and x^(1.6) at x = 0.25
        let br = 0.5_f64.powf(0.2);
        let g = br * 0.25_f64.powf(0.8);
        let v = 0.75 * g + 0.5 * br * br * 0.25_f64.powf(1.6);
        let (cv, cg) = cf.eval(0.25).unwrap();
        assert!((cv - v).abs() < 1e-15 && (cg - g).abs() < 1e-15);
        // 30-digit reference values
        assert!((cv - 0.256_615_563_773_597).abs() < 1e-14);
        assert!((cg - 0.287_174_588_749_259).abs() < 1e-14);

        let (vb, gb) = cf.eval(0.5).unwrap();
        assert!((vb - 0.5).abs() < 1e-14 && (gb - 0.5).abs() < 1e-14);
        assert!((cf.value(0.5, Side::Left) - 0.5).abs() < 1e-14);
        assert!((cf.first_moment(0.5, Side::Left) - 0.5).abs() < 1e-14);
        assert_eq!(cf.eval(1.0).unwrap(), (1.0, 1.0));
        assert!(matches!(cf.eval(0.0), Err(Error::NonPositiveState(_))));
    }

    #[test]
    fn refuses_out_of_range_rho() {
        assert!(matches!(GbmClosedForm::new(0.2, 0.5, 1.0), Err(Error::InvalidGbm(_))));
        assert!(matches!(GbmClosedForm::new(-0.01, 0.5, 1.0), Err(Error::InvalidGbm(_))));
    }

    #[test]
    fn elliptic_system() {
        let cf = reference();
        let xs: Vec<f64> = (1..=300).map(|i| i as f64 * 0.01).collect();
        let rep = verify_elliptic_system(&cf, &xs).unwrap();
        assert!(rep.continuation_value_residual < 1e-10);
        assert!(rep.continuation_moment_residual < 1e-10);
        assert!(rep.stopped_max <= 0.0);
        assert!(rep.obstacle_margin_min > 0.0);
        assert!(rep.margin_function_min >= 0.0);
        assert!(rep.passes(1e-10));
        assert_eq!(cf.stopped_branch_gap(0.2), 0.0);
        let (v, g) = cf.eval(0.25).unwrap();
        let margin = v + 0.5 * (0.25 - g) * (0.25 - g) - 0.25;
        assert!((margin - 0.007_306_538_797_935).abs() < 1e-14, "{margin}");
    }

    #[test]
    fn jump_quantities() {
        let j = boundary_jump_quantities(&reference());
        assert!((j.moment_slope_left - 0.8).abs() < 1e-14);
        assert_eq!(j.moment_slope_right, 1.0);
        assert!((j.generator_value_left - 0.04).abs() < 1e-14);
        assert!((j.generator_value_right - 0.025).abs() < 1e-15);
        assert!((j.lhs - 0.065).abs() < 1e-14);
        assert!((j.rhs - 0.10125).abs() < 1e-14);
        assert!(j.smooth_fit_gap.abs() < 1e-12);
        assert!((j.alternative_lhs - 0.09).abs() < 1e-14);
        assert!(j.holds());
    }

    proptest! {
        #[test]
        fn boundary_inequality_has_positive_margin(rho in 0.05f64..0.45, sigma_sq in 0.05f64..2.0, gamma in 0.1f64..5.0) {
            let cf = GbmClosedForm::new(0.5 * rho * sigma_sq, sigma_sq, gamma).unwrap();
            let j = boundary_jump_quantities(&cf);
            prop_assert!(j.rhs - j.lhs > 0.0);
            prop_assert!(j.smooth_fit_gap.abs() < 1e-12 * (1.0 + j.rhs));
            prop_assert!((j.moment_slope_right - j.moment_slope_left - cf.rho).abs() < 1e-12);
        }

        #[test]
        fn margin_function_is_increasing(rho in 0.05f64..0.45, gamma in 0.1f64..5.0, z1 in 1.0f64..50.0, dz in 1e-3f64..10.0) {
            let cf = GbmClosedForm::new(0.25 * rho, 0.5, gamma).unwrap();
            prop_assert!(cf.margin_function(z1 + dz) > cf.margin_function(z1));
            prop_assert!(cf.margin_function(z1) >= 1.0 - 1e-12);
        }
    }
}
