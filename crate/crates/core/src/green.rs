//! Dirichlet Green's function, regular part and Robin function.
//!
//! Sign conventions: `G = Γ + g` with `Γ(r) = 1/((N-2)σ_N r^{N-2})`, so the
//! regular part `g` is negative and `φ(x) = g(x, x) < 0`. Ball formulas are
//! for a ball centred at the origin; [`Domain`] shifts points first.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::special::sigma_n;

/// Bounded domains handled by the lab.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Domain {
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    /// Axis-aligned box in ℝ³.
    Box {
        lo: [f64; 3],
        hi: [f64; 3],
    },
}

impl Domain {
    pub fn ball(n: usize, radius: f64) -> Self {
        Domain::Ball {
            center: vec![0.0; n],
            radius,
        }
    }

    pub fn unit_cube() -> Self {
        Domain::Box {
            lo: [0.0; 3],
            hi: [1.0; 3],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Ball { center, .. } => center.len(),
            Domain::Box { .. } => 3,
        }
    }

    /// Distance from `x` to the boundary; negative outside.
    pub fn dist_to_boundary(&self, x: &[f64]) -> f64 {
        match self {
            Domain::Ball { center, radius } => radius - norm_diff(x, center),
            Domain::Box { lo, hi } => (0..3)
                .map(|d| (x[d] - lo[d]).min(hi[d] - x[d]))
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && self.dist_to_boundary(x) > 0.0
    }

    pub fn diameter(&self) -> f64 {
        match self {
            Domain::Ball { radius, .. } => 2.0 * radius,
            Domain::Box { lo, hi } => (0..3).map(|d| (hi[d] - lo[d]).powi(2)).sum::<f64>().sqrt(),
        }
    }

    pub fn center(&self) -> Vec<f64> {
        match self {
            Domain::Ball { center, .. } => center.clone(),
            Domain::Box { lo, hi } => (0..3).map(|d| 0.5 * (lo[d] + hi[d])).collect(),
        }
    }

    /// Boxes have edges and corners, so boundary identities there fall
    /// outside the smooth-boundary setting.
    pub fn outside_smoothness_hypotheses(&self) -> bool {
        matches!(self, Domain::Box { .. })
    }

    pub fn require_interior(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(LabError::Domain(format!(
                "point has {} coordinates, domain has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        if !self.contains(x) {
            return Err(LabError::Domain(format!("point {x:?} is not interior")));
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `1/((N-2)σ_N)`.
pub fn newton_constant(n: f64) -> f64 {
    1.0 / ((n - 2.0) * sigma_n(n))
}

/// Fundamental solution `Γ(r)` of `-Δ` in ℝ^N.
pub fn fundamental(r: f64, n: f64) -> f64 {
    newton_constant(n) * r.powf(2.0 - n)
}

fn check_ball_point(x: &[f64], radius: f64) -> Result<()> {
    if !(radius > 0.0) {
        return Err(LabError::Domain(format!(
            "radius {radius} must be positive"
        )));
    }
    if dot(x, x).sqrt() >= radius {
        return Err(LabError::Domain(format!(
            "point {x:?} is not inside the ball of radius {radius}"
        )));
    }
    Ok(())
}

/// `|x|²|y|²/R² - 2x·y + R²`, the squared distance of `y` to the image of `x`
/// scaled by `|x|/R`. Stays positive when `x` is interior.
fn image_dist2(x: &[f64], y: &[f64], radius: f64) -> f64 {
    dot(x, x) * dot(y, y) / (radius * radius) - 2.0 * dot(x, y) + radius * radius
}

/// Regular part `g(x, y) = G(x, y) - Γ(|x - y|)` on the ball.
pub fn regular_ball(x: &[f64], y: &[f64], radius: f64, n: usize) -> Result<f64> {
    check_ball_point(x, radius)?;
    let nf = n as f64;
    Ok(-newton_constant(nf) * image_dist2(x, y, radius).powf((2.0 - nf) / 2.0))
}

/// Method-of-images Green's function of the ball of radius `radius`.
pub fn green_ball(x: &[f64], y: &[f64], radius: f64, n: usize) -> Result<f64> {
    let r = norm_diff(x, y);
    if r == 0.0 {
        return Err(LabError::Singularity("G(x, x) is infinite".into()));
    }
    // The closed ball, with a few ulps of slack for boundary samples.
    if dot(y, y).sqrt() > radius * (1.0 + 8.0 * f64::EPSILON) {
        return Err(LabError::Domain(format!("point {y:?} is outside the ball")));
    }
    Ok(fundamental(r, n as f64) + regular_ball(x, y, radius, n)?)
}

/// Robin function `φ(x) = g(x, x) = -((R² - |x|²)/R)^{2-N}/((N-2)σ_N)`.
pub fn robin_ball(x: &[f64], radius: f64, n: usize) -> Result<f64> {
    check_ball_point(x, radius)?;
    let nf = n as f64;
    let s = (radius * radius - dot(x, x)) / radius;
    Ok(-newton_constant(nf) * s.powf(2.0 - nf))
}

pub fn robin_ball_grad(x: &[f64], radius: f64, n: usize) -> Result<Vec<f64>> {
    check_ball_point(x, radius)?;
    let nf = n as f64;
    let s = (radius * radius - dot(x, x)) / radius;
    let f = -newton_constant(nf) * 2.0 * (nf - 2.0) / radius * s.powf(1.0 - nf);
    Ok(x.iter().map(|xi| f * xi).collect())
}

/// Outward normal derivative `∂G(x0, ·)/∂n` at a boundary point `y`.
pub fn normal_derivative_ball(x0: &[f64], y: &[f64], radius: f64, n: usize) -> Result<f64> {
    check_ball_point(x0, radius)?;
    let nf = n as f64;
    Ok(-(radius * radius - dot(x0, x0)) / (sigma_n(nf) * radius * norm_diff(x0, y).powf(nf)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn centred_values() {
        let g = green_ball(&[0.0; 3], &[0.5, 0.0, 0.0], 1.0, 3).unwrap();
        assert_relative_eq!(g, 1.0 / (4.0 * PI), epsilon = 1e-15);
        assert_relative_eq!(
            robin_ball(&[0.0; 3], 1.0, 3).unwrap(),
            -1.0 / (4.0 * PI),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            robin_ball(&[0.5, 0.0, 0.0], 1.0, 3).unwrap(),
            -1.0 / (3.0 * PI),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            robin_ball(&[0.0; 3], 2.0, 3).unwrap(),
            -1.0 / (8.0 * PI),
            epsilon = 1e-15
        );
    }

    #[test]
    fn errors() {
        assert!(matches!(
            green_ball(&[0.1; 3], &[0.1; 3], 1.0, 3),
            Err(LabError::Singularity(_))
        ));
        assert!(matches!(
            robin_ball(&[1.0, 0.0, 0.0], 1.0, 3),
            Err(LabError::Domain(_))
        ));
    }

    #[test]
    fn robin_gradient_matches_differences() {
        let x = [0.2, -0.3, 0.1, 0.05];
        let grad = robin_ball_grad(&x, 1.3, 4).unwrap();
        for d in 0..4 {
            let h = 1e-6;
            let (mut xp, mut xm) = (x, x);
            xp[d] += h;
            xm[d] -= h;
            let fd =
                (robin_ball(&xp, 1.3, 4).unwrap() - robin_ball(&xm, 1.3, 4).unwrap()) / (2.0 * h);
            assert_relative_eq!(grad[d], fd, max_relative = 1e-7, epsilon = 1e-10);
        }
    }

    #[test]
    fn domain_geometry() {
        let cube = Domain::unit_cube();
        assert!(cube.contains(&[0.5, 0.5, 0.5]));
        assert!(!cube.contains(&[1.0, 0.5, 0.5]));
        assert_relative_eq!(
            cube.dist_to_boundary(&[0.2, 0.5, 0.6]),
            0.2,
            epsilon = 1e-15
        );
        assert!(cube.outside_smoothness_hypotheses());
        let ball = Domain::Ball {
            center: vec![1.0, 0.0, 0.0],
            radius: 2.0,
        };
        assert_relative_eq!(ball.dist_to_boundary(&[2.0, 0.0, 0.0]), 1.0);
        assert!(ball.require_interior(&[0.0, 0.0]).is_err());
    }
}
