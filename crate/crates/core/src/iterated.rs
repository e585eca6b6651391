//! Iterated Green's function `G̃(x0, ·)`, solving `-Δ G̃ = G(x0, ·)^p` with
//! zero boundary data, for tail-subcritical `p`.
//!
//! Near the source `G̃ = c_p |y - x0|^{2-k} + φ̃(x0) + O(|y - x0|^{N-k})` with
//! `k = p(N-2)` and `c_p = c^p/((k-2)(N-k))`, `c = 1/((N-2)σ_N)`.
//!
//! Centred balls use the radial reduction and extract `φ̃` from shrinking
//! offsets. Off-centre points in three-dimensional balls use the
//! regularised volume formula
//!
//! `φ̃(x0) = ∫_Ω [G^{p+1} - 1_{B_ρ} Γ^{p+1}] - c^p ρ^{2-k}/((N-2)(k-2))`,
//!
//! obtained from `G̃(x0, y) = ∫ G(y, z) G(x0, z)^p dz` by splitting off the
//! Newton potential of `Γ^p` on `B_ρ(x0)`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::green::{dot, fundamental, green_ball, newton_constant, norm_diff, Domain};
use crate::quadrature::{gauss_legendre, richardson_table, sphere_rule};
use crate::special::sigma_n;

/// Checks `2/(N-2) < p < N/(N-2)`.
pub fn check_tilde_window(p: f64, n: f64) -> Result<()> {
    let lo = 2.0 / (n - 2.0);
    let hi = n / (n - 2.0);
    if !(p > lo && p < hi)
        || crate::hyperbola::classify_regime(p, n) != crate::Regime::TailSubcritical
    {
        return Err(LabError::Regime(format!(
            "the iterated Green's function needs 2/(N-2) < p < N/(N-2) = {hi}, got p = {p}"
        )));
    }
    Ok(())
}

/// `c_p`, the coefficient of `|y - x0|^{2-p(N-2)}` in `G̃`.
pub fn tilde_coefficient(p: f64, n: f64) -> f64 {
    let k = p * (n - 2.0);
    newton_constant(n).powf(p) / ((k - 2.0) * (n - k))
}

/// `κ` with `ĝ(x0, y) = g̃(x0, y) + κ |y - x0|^{N-k}` removing the first
/// non-smooth term of the regularised part; `phi = φ(x0)`.
pub fn correction_coefficient(p: f64, n: f64, phi: f64) -> f64 {
    let k = p * (n - 2.0);
    p * phi * newton_constant(n).powf(p - 1.0) / ((n - k) * (2.0 * n - k - 2.0))
}

/// Diagonal value recovered from shrinking offsets.
#[derive(Debug, Clone, Serialize)]
pub struct Extraction {
    pub value: f64,
    pub error: f64,
    pub offsets: Vec<f64>,
    pub samples: Vec<f64>,
}

/// Richardson extraction of `lim_{δ→0} f(δ)` along `δ_j = δ0 2^{-j}`.
///
/// Fails when the estimate gap exceeds `tol·max(1, |value|)`.
pub fn extract_limit<F: Fn(f64) -> f64>(
    f: F,
    delta0: f64,
    levels: usize,
    exponents: &[f64],
    tol: f64,
) -> Result<Extraction> {
    if levels < 4 {
        return Err(LabError::Domain(format!(
            "extraction needs at least 4 offsets, got {levels}"
        )));
    }
    let offsets: Vec<f64> = (0..levels)
        .map(|j| delta0 * 0.5f64.powi(j as i32))
        .collect();
    let samples: Vec<f64> = offsets.iter().map(|&d| f(d)).collect();
    let (value, error) = richardson_table(&samples, 2.0, exponents);
    if !(error <= tol * value.abs().max(1.0)) {
        return Err(LabError::Extraction(format!(
            "successive estimates differ by {error:e} (tolerance {tol:e})"
        )));
    }
    Ok(Extraction {
        value,
        error,
        offsets,
        samples,
    })
}

/// Radial `G̃(0, ·)` on the ball `|y| < R` in ℝ^N.
///
/// `G̃(r) = c_p (r^{2-k} - R^{2-k}) + ∫_r^R s^{1-N} M₁(s) ds` where `M₁` is the
/// part of `∫_0^s t^{N-1} G^p dt` beyond its leading power.
#[derive(Debug, Clone)]
pub struct RadialTilde {
    pub p: f64,
    pub n: f64,
    pub radius: f64,
    /// Composite Gauss–Legendre panels; the mesh that halving refines.
    pub panels: usize,
    k: f64,
    c: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

const PANEL_ORDER: usize = 8;

impl RadialTilde {
    pub fn new(p: f64, n: usize, radius: f64, panels: usize) -> Result<Self> {
        let nf = n as f64;
        check_tilde_window(p, nf)?;
        if !(radius > 0.0) || panels == 0 {
            return Err(LabError::Domain(
                "radius and panel count must be positive".into(),
            ));
        }
        let (nodes, weights) = gauss_legendre(PANEL_ORDER);
        Ok(Self {
            p,
            n: nf,
            radius,
            panels,
            k: p * (nf - 2.0),
            c: newton_constant(nf),
            nodes,
            weights,
        })
    }

    /// Composite rule of `f` over `[a, b] ⊂ [0, 1]` on the fixed panels.
    fn composite<F: Fn(f64) -> f64>(&self, a: f64, b: f64, f: F) -> f64 {
        let w = 1.0 / self.panels as f64;
        let mut sum = 0.0;
        for j in 0..self.panels {
            let (lo, hi) = ((j as f64 * w).max(a), ((j + 1) as f64 * w).min(b));
            if hi <= lo {
                continue;
            }
            let (m, h) = (0.5 * (lo + hi), 0.5 * (hi - lo));
            for (x, wt) in self.nodes.iter().zip(&self.weights) {
                sum += h * wt * f(m + h * x);
            }
        }
        sum
    }

    fn exponent(&self) -> f64 {
        1.0 / (self.n - self.k)
    }

    /// `M₁(s) = c^p ∫_0^s t^{N-1-k} [(1 - (t/R)^{N-2})^p - 1] dt`.
    fn m1(&self, s: f64) -> f64 {
        let (n, k, p, r) = (self.n, self.k, self.p, self.radius);
        let m = self.exponent();
        let inner = self.composite(0.0, 1.0, |v| {
            let x = (s * v.powf(m) / r).powf(n - 2.0);
            (p * (-x).ln_1p()).exp_m1()
        });
        self.c.powf(p) * s.powf(n - k) / (n - k) * inner
    }

    /// `∫_0^s t^{N-1} G(0, t)^p dt`.
    pub fn mass(&self, s: f64) -> f64 {
        self.c.powf(self.p) * s.powf(self.n - self.k) / (self.n - self.k) + self.m1(s)
    }

    /// `∫_r^R s^{1-N} M₁(s) ds` with `s = R w^{1/(N-k)}`.
    fn tail(&self, r: f64) -> f64 {
        let (n, rad) = (self.n, self.radius);
        let m = self.exponent();
        let w_r = (r / rad).powf(self.n - self.k);
        self.composite(w_r, 1.0, |w| {
            let s = rad * w.powf(m);
            s.powf(1.0 - n) * self.m1(s) * rad * m * w.powf(m - 1.0)
        })
    }

    pub fn value(&self, r: f64) -> f64 {
        let cp = tilde_coefficient(self.p, self.n);
        cp * (r.powf(2.0 - self.k) - self.radius.powf(2.0 - self.k)) + self.tail(r)
    }

    /// `G̃ - c_p r^{2-k}` at radius `r`.
    pub fn regular_part(&self, r: f64) -> f64 {
        -tilde_coefficient(self.p, self.n) * self.radius.powf(2.0 - self.k) + self.tail(r)
    }

    /// Closed-form limit of [`Self::regular_part`] at the centre.
    pub fn phi_t_direct(&self) -> f64 {
        self.regular_part(0.0)
    }

    /// Outward normal derivative on `|y| = R`: `-R^{1-N} ∫_0^R t^{N-1} G^p dt`.
    pub fn normal_derivative(&self) -> f64 {
        -self.radius.powf(1.0 - self.n) * self.mass(self.radius)
    }

    /// Exponents of the regular-part expansion `δ^{(N-k) + j(N-2)}`.
    pub fn expansion_exponents(&self, count: usize) -> Vec<f64> {
        (0..count)
            .map(|j| (self.n - self.k) + j as f64 * (self.n - 2.0))
            .collect()
    }

    /// `φ̃(0)` by extraction at `δ_j = 0.1 R 2^{-j}`.
    pub fn extract_phi_t(&self, levels: usize, tol: f64) -> Result<Extraction> {
        let exps = self.expansion_exponents(levels);
        extract_limit(
            |d| self.regular_part(d),
            0.1 * self.radius,
            levels,
            &exps,
            tol,
        )
    }
}

/// Quadrature nodes `(z, weight, inside B_ρ)` for integrals over a ball in
/// ℝ³ in spherical coordinates about `x0`. Inside `B_ρ(x0)` the radius is
/// `s = ρ v^{1/(N-k)}`, which absorbs the `s^{-k}` singularity.
#[derive(Debug, Clone)]
pub struct RayRule {
    pub x0: [f64; 3],
    pub radius: f64,
    pub rho: f64,
    pub nodes: Vec<([f64; 3], f64, bool)>,
}

/// Angular and radial resolution of a [`RayRule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RayMesh {
    pub n_theta: usize,
    pub n_phi: usize,
    /// Gauss–Legendre panels per radial segment.
    pub panels: usize,
}

impl RayMesh {
    pub fn refined(&self) -> Self {
        Self {
            n_theta: 2 * self.n_theta,
            n_phi: 2 * self.n_phi,
            panels: 2 * self.panels,
        }
    }

    /// Half the resolution, keeping the azimuthal count even.
    pub fn coarsened(&self) -> Self {
        Self {
            n_theta: (self.n_theta / 2).max(2),
            n_phi: (2 * (self.n_phi / 4)).max(2),
            panels: (self.panels / 2).max(1),
        }
    }
}

impl Default for RayMesh {
    fn default() -> Self {
        Self {
            n_theta: 24,
            n_phi: 48,
            panels: 3,
        }
    }
}

impl RayRule {
    pub fn new(x0: [f64; 3], radius: f64, rho: f64, k: f64, mesh: RayMesh) -> Self {
        let m = 1.0 / (3.0 - k);
        let (gx, gw) = gauss_legendre(PANEL_ORDER);
        let panel = |a: f64, b: f64| -> Vec<(f64, f64)> {
            let h = (b - a) / mesh.panels as f64;
            (0..mesh.panels)
                .flat_map(|j| {
                    let (lo, hi) = (a + j as f64 * h, a + (j + 1) as f64 * h);
                    let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
                    gx.iter()
                        .zip(&gw)
                        .map(move |(x, w)| (mid + half * x, half * w))
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        let inner = panel(0.0, 1.0);
        let mut nodes = Vec::new();
        let r2 = dot(&x0, &x0);
        for (dir, wd) in sphere_rule(mesh.n_theta, mesh.n_phi) {
            let b = dot(&x0, &dir);
            let len = -b + (b * b + radius * radius - r2).sqrt();
            for &(v, wv) in &inner {
                let s = rho * v.powf(m);
                let ds = rho * m * v.powf(m - 1.0);
                nodes.push((
                    [0, 1, 2].map(|d| x0[d] + s * dir[d]),
                    wd * wv * s * s * ds,
                    true,
                ));
            }
            for (s, ws) in panel(rho, len) {
                nodes.push((
                    [0, 1, 2].map(|d| x0[d] + s * dir[d]),
                    wd * ws * s * s,
                    false,
                ));
            }
        }
        Self {
            x0,
            radius,
            rho,
            nodes,
        }
    }
}

fn as3(x: &[f64]) -> Result<[f64; 3]> {
    x.try_into().map_err(|_| {
        LabError::Domain(format!(
            "expected a point in ℝ³, got {} coordinates",
            x.len()
        ))
    })
}

/// `φ̃(x0)` on the ball `|x| < R` in ℝ³ from the regularised volume formula.
pub fn phi_t_volume(p: f64, x0: &[f64], radius: f64, mesh: RayMesh) -> Result<f64> {
    check_tilde_window(p, 3.0)?;
    let x0 = as3(x0)?;
    let dist = radius - dot(&x0, &x0).sqrt();
    if dist <= 0.0 {
        return Err(LabError::Domain(format!("{x0:?} is not inside the ball")));
    }
    phi_t_volume_rho(p, x0, radius, 0.5 * dist, mesh)
}

fn phi_t_volume_rho(p: f64, x0: [f64; 3], radius: f64, rho: f64, mesh: RayMesh) -> Result<f64> {
    let k = p;
    let rule = RayRule::new(x0, radius, rho, k, mesh);
    let c = newton_constant(3.0);
    let terms: Vec<f64> = rule
        .nodes
        .par_iter()
        .map(|(z, w, inner)| {
            let s = norm_diff(z, &x0);
            let gam = fundamental(s, 3.0);
            let g = crate::green::regular_ball(&x0, z, radius, 3).unwrap_or(f64::NAN);
            let big = (gam + g).max(0.0);
            if *inner {
                w * gam.powf(p + 1.0) * ((p + 1.0) * (g / gam).ln_1p()).exp_m1()
            } else {
                w * big.powf(p + 1.0)
            }
        })
        .collect();
    // Sequential sum keeps the result independent of the thread count.
    let sum: f64 = terms.iter().sum();
    Ok(sum - c.powf(p) * rho.powf(2.0 - k) / (k - 2.0))
}

/// Outward normal derivative of `G̃(x0, ·)` at boundary points `ys` of the
/// ball in ℝ³, via `∂_n G̃(x0, y) = -∫ P(z, y) G(x0, z)^p dz` with the
/// Poisson kernel `P`.
pub fn tilde_normal_derivatives_volume(
    p: f64,
    x0: &[f64],
    radius: f64,
    ys: &[[f64; 3]],
    mesh: RayMesh,
) -> Result<Vec<f64>> {
    check_tilde_window(p, 3.0)?;
    let x0 = as3(x0)?;
    let dist = radius - dot(&x0, &x0).sqrt();
    if dist <= 0.0 {
        return Err(LabError::Domain(format!("{x0:?} is not inside the ball")));
    }
    let rule = RayRule::new(x0, radius, 0.5 * dist, p, mesh);
    let src: Vec<([f64; 3], f64, f64)> = rule
        .nodes
        .iter()
        .map(|(z, w, _)| {
            let gz = green_ball(&x0, z, radius, 3).unwrap_or(0.0).max(0.0);
            (*z, *w * gz.powf(p), radius * radius - dot(z, z))
        })
        .collect();
    let sig = sigma_n(3.0);
    Ok(ys
        .par_iter()
        .map(|y| {
            -src.iter()
                .map(|(z, wf, d)| wf * d / (sig * radius * norm_diff(z, y).powi(3)))
                .sum::<f64>()
        })
        .collect())
}

/// Gradient of the regular part `ĝ(x0, ·)` at `y = x0` on the ball
/// `|x| < R` in ℝ³: `∫ ∇_y G(y, z)|_{y=x0} G(x0, z)^p dz` as a principal
/// value. The ray rule is antipodally symmetric, so every term radial about
/// `x0`, singular ones included, cancels shell by shell.
pub fn tilde_partial_gradient_volume(
    p: f64,
    x0: &[f64],
    radius: f64,
    mesh: RayMesh,
) -> Result<[f64; 3]> {
    check_tilde_window(p, 3.0)?;
    let x0 = as3(x0)?;
    let dist = radius - dot(&x0, &x0).sqrt();
    if dist <= 0.0 {
        return Err(LabError::Domain(format!("{x0:?} is not inside the ball")));
    }
    if mesh.n_phi % 2 != 0 {
        return Err(LabError::Precondition(
            "the azimuthal node count must be even".into(),
        ));
    }
    let rule = RayRule::new(x0, radius, 0.5 * dist, p, mesh);
    let c = newton_constant(3.0);
    let r2 = radius * radius;
    let xx = dot(&x0, &x0);
    let parts: Vec<[f64; 3]> = rule
        .nodes
        .par_iter()
        .map(|(z, w, _)| {
            let f = green_ball(&x0, z, radius, 3)
                .unwrap_or(0.0)
                .max(0.0)
                .powf(p);
            let s = norm_diff(&x0, z);
            let zz = dot(z, z);
            let img = xx * zz / r2 - 2.0 * dot(&x0, z) + r2;
            [0, 1, 2].map(|i| {
                let grad =
                    -c * (x0[i] - z[i]) / s.powi(3) + c * img.powf(-1.5) * (x0[i] * zz / r2 - z[i]);
                w * f * grad
            })
        })
        .collect();
    Ok(parts.iter().fold([0.0; 3], |acc, v| {
        [acc[0] + v[0], acc[1] + v[1], acc[2] + v[2]]
    }))
}

/// `φ̃(x0)`, `∇φ̃(x0)` and their error estimates.
///
/// `grad_phi_t` is the gradient of the corrected regular part `ĝ(x0, ·)`
/// at `x0`; it is what the vector boundary identity returns.
#[derive(Debug, Clone, Serialize)]
pub struct TildeRobin {
    pub phi_t: f64,
    pub phi_t_error: f64,
    pub grad_phi_t: Vec<f64>,
    pub grad_error: f64,
    pub method: &'static str,
    pub extraction: Option<Extraction>,
}

#[derive(Debug, Clone, Copy)]
pub struct TildeOptions {
    pub radial_panels: usize,
    pub levels: usize,
    pub extraction_tol: f64,
    pub mesh: RayMesh,
    /// Interior nodes per axis for box solves.
    pub box_nodes: usize,
}

impl Default for TildeOptions {
    fn default() -> Self {
        Self {
            radial_panels: 32,
            levels: 6,
            extraction_tol: 1e-6,
            mesh: RayMesh::default(),
            box_nodes: 63,
        }
    }
}

/// `φ̃(x0)` and `∇φ̃(x0)` on a ball or box.
pub fn tilde_robin(domain: &Domain, p: f64, x0: &[f64], opts: &TildeOptions) -> Result<TildeRobin> {
    domain.require_interior(x0)?;
    let n = domain.dim();
    check_tilde_window(p, n as f64)?;
    match domain {
        Domain::Ball { center, radius } => {
            let rel: Vec<f64> = x0.iter().zip(center).map(|(a, b)| a - b).collect();
            let centred = rel.iter().all(|v| *v == 0.0);
            if centred {
                let rt = RadialTilde::new(p, n, *radius, opts.radial_panels)?;
                let ex = rt.extract_phi_t(opts.levels, opts.extraction_tol)?;
                let fine = RadialTilde::new(p, n, *radius, 2 * opts.radial_panels)?;
                let quad_err = (fine.phi_t_direct() - rt.phi_t_direct()).abs();
                // Radial symmetry about the centre.
                let (grad, gerr) = (vec![0.0; n], 0.0);
                Ok(TildeRobin {
                    phi_t: ex.value,
                    phi_t_error: ex.error + quad_err,
                    grad_phi_t: grad,
                    grad_error: gerr,
                    method: "radial-extraction",
                    extraction: Some(ex),
                })
            } else {
                if n != 3 {
                    return Err(LabError::Precondition(
                        "off-centre iterated Green's functions are implemented in three dimensions"
                            .into(),
                    ));
                }
                let x = as3(&rel)?;
                let dist = radius - dot(&x, &x).sqrt();
                let rho = 0.5 * dist;
                let coarse = phi_t_volume_rho(p, x, *radius, rho, opts.mesh)?;
                let fine = phi_t_volume_rho(p, x, *radius, rho, opts.mesh.refined())?;
                let gc = tilde_partial_gradient_volume(p, &x, *radius, opts.mesh)?;
                let gf = tilde_partial_gradient_volume(p, &x, *radius, opts.mesh.refined())?;
                let gerr = (0..3).map(|d| (gf[d] - gc[d]).abs()).fold(0.0, f64::max);
                let grad = gf.to_vec();
                Ok(TildeRobin {
                    phi_t: fine,
                    phi_t_error: (fine - coarse).abs(),
                    grad_phi_t: grad,
                    grad_error: gerr,
                    method: "volume-formula",
                    extraction: None,
                })
            }
        }
        Domain::Box { .. } => crate::boxgreen::tilde_robin_box(domain, p, x0, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn coefficient_for_three_dimensions() {
        assert_relative_eq!(
            tilde_coefficient(2.5, 3.0),
            4.0 / (4.0 * PI).powf(2.5),
            max_relative = 1e-14
        );
    }

    #[test]
    fn window() {
        assert!(matches!(
            check_tilde_window(3.0, 3.0),
            Err(LabError::Regime(_))
        ));
        assert!(matches!(
            check_tilde_window(5.0, 3.0),
            Err(LabError::Regime(_))
        ));
        assert!(check_tilde_window(2.5, 3.0).is_ok());
    }

    #[test]
    fn radial_mass_matches_beta_function() {
        // ∫_0^1 t²(1/t - 1)^{5/2} dt = B(1/2, 7/2).
        let rt = RadialTilde::new(2.5, 3, 1.0, 32).unwrap();
        let beta = PI * 15.0 / 8.0 / 6.0;
        let c = 1.0 / (4.0 * PI);
        assert_relative_eq!(rt.mass(1.0), c.powf(2.5) * beta, max_relative = 1e-10);
    }
}
