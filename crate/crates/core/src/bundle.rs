//! Field and summary bundle for `G(x0, ·)` and `G̃(x0, ·)`.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::boxgreen::{solve_box, BoxSolve};
use crate::error::{LabError, Result};
use crate::green::{dot, green_ball, norm_diff, robin_ball, robin_ball_grad, Domain};
use crate::hyperbola::{classify_regime, critical_q, Regime};
use crate::identities::{boundary_identity_check, Identity, IdentityOptions, IdentityReport};
use crate::iterated::{
    check_tilde_window, tilde_robin, RadialTilde, RayMesh, RayRule, TildeOptions,
};

/// One sample of the exported field.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FieldSample {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "Gt")]
    pub gt: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BundleTolerances {
    pub identity_i: f64,
    pub identity_ii: f64,
    pub identity_vec: f64,
    pub extraction: f64,
    pub box_identities: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BundleErrors {
    pub phi: f64,
    pub phi_t: Option<f64>,
    pub grad_phi_t: Option<f64>,
}

/// Summary of the Green's-function computation at one source point.
#[derive(Debug, Clone, Serialize)]
pub struct GreenBundle {
    pub domain: Domain,
    pub x0: Vec<f64>,
    pub phi: f64,
    pub grad_phi: Vec<f64>,
    pub phi_t: Option<f64>,
    pub grad_phi_t: Option<Vec<f64>>,
    pub p: Option<f64>,
    pub q: Option<f64>,
    pub residuals: BTreeMap<String, IdentityReport>,
    pub outside_smoothness_hypotheses: bool,
    pub method: String,
    pub errors: BundleErrors,
    pub tolerance: BundleTolerances,
    #[serde(skip)]
    pub field: Vec<FieldSample>,
}

impl GreenBundle {
    pub fn all_identities_pass(&self) -> bool {
        self.residuals.values().all(|r| r.pass)
    }

    /// Writes the field as CSV with header `x,y,z,G,Gt`; `Gt` is empty when
    /// not computed.
    pub fn write_field_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "z", "G", "Gt"])
            .map_err(csv_err)?;
        for s in &self.field {
            let gt = s.gt.map(|v| format!("{v:.17e}")).unwrap_or_default();
            w.write_record([
                format!("{:.17e}", s.x),
                format!("{:.17e}", s.y),
                format!("{:.17e}", s.z),
                format!("{:.17e}", s.g),
                gt,
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> LabError {
    LabError::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, Copy)]
pub struct BundleOptions {
    /// Lattice points per axis of the field export.
    pub field_points: usize,
    pub identities: bool,
    pub tilde: TildeOptions,
    /// Largest acceptable self-convergence error of off-centre `G̃` samples.
    pub field_tol: f64,
}

impl Default for BundleOptions {
    fn default() -> Self {
        Self {
            field_points: 9,
            identities: true,
            tilde: TildeOptions::default(),
            field_tol: 1e-2,
        }
    }
}

/// Lattice in the span of the first three axes through the domain centre,
/// keeping interior points away from `x0`.
pub fn field_points(domain: &Domain, x0: &[f64], m: usize) -> Vec<Vec<f64>> {
    let c = domain.center();
    let (lo, hi): (Vec<f64>, Vec<f64>) = match domain {
        Domain::Ball { radius, .. } => (
            c.iter().map(|v| v - radius).collect(),
            c.iter().map(|v| v + radius).collect(),
        ),
        Domain::Box { lo, hi } => (lo.to_vec(), hi.to_vec()),
    };
    let m = m.max(2);
    let mut out = Vec::new();
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                let mut y = c.clone();
                for (d, idx) in [i, j, k].into_iter().enumerate().take(y.len()) {
                    let t = (idx as f64 + 0.5) / m as f64;
                    y[d] = lo[d] + t * (hi[d] - lo[d]);
                }
                if domain.dist_to_boundary(&y) > 1e-9 && norm_diff(&y, x0) > 1e-9 {
                    out.push(y);
                }
            }
        }
    }
    out
}

/// `G̃(x0, y)` on the ball `|x| < R` in ℝ³ for off-centre `x0`, from
/// `∫ G(y, z)(f(z) - f(y)) dz + f(y)(R² - |y|²)/6` with `f = G(x0, ·)^p`.
fn tilde_ball_volume(
    p: f64,
    x0: [f64; 3],
    radius: f64,
    ys: &[Vec<f64>],
    mesh: RayMesh,
) -> Vec<f64> {
    let dist = radius - dot(&x0, &x0).sqrt();
    let rule = RayRule::new(x0, radius, 0.5 * dist, p, mesh);
    let src: Vec<([f64; 3], f64, f64)> = rule
        .nodes
        .iter()
        .map(|(z, w, _)| {
            (
                *z,
                *w,
                green_ball(&x0, z, radius, 3)
                    .unwrap_or(0.0)
                    .max(0.0)
                    .powf(p),
            )
        })
        .collect();
    ys.par_iter()
        .map(|y| {
            let fy = green_ball(&x0, y, radius, 3)
                .unwrap_or(0.0)
                .max(0.0)
                .powf(p);
            let body: f64 = src
                .iter()
                .map(|(z, w, fz)| {
                    let gyz = green_ball(y, z, radius, 3).unwrap_or(0.0);
                    w * gyz * (fz - fy)
                })
                .sum();
            body + fy * (radius * radius - dot(y, y)) / 6.0
        })
        .collect()
}

/// Samples of `G̃(x0, ·)` at `points`.
pub fn iterated_green(
    domain: &Domain,
    p: f64,
    x0: &[f64],
    points: &[Vec<f64>],
    opts: &BundleOptions,
) -> Result<Vec<f64>> {
    domain.require_interior(x0)?;
    check_tilde_window(p, domain.dim() as f64)?;
    for y in points {
        if !domain.contains(y) {
            return Err(LabError::Domain(format!(
                "evaluation point {y:?} is outside the domain"
            )));
        }
        if norm_diff(y, x0) == 0.0 {
            return Err(LabError::Singularity(
                "G̃ is infinite at the source point".into(),
            ));
        }
    }
    match domain {
        Domain::Ball { center, radius } => {
            let rel =
                |y: &[f64]| -> Vec<f64> { y.iter().zip(center).map(|(a, b)| a - b).collect() };
            let x0r = rel(x0);
            if x0r.iter().all(|v| *v == 0.0) {
                let rt = RadialTilde::new(p, domain.dim(), *radius, opts.tilde.radial_panels)?;
                Ok(points
                    .iter()
                    .map(|y| rt.value(dot(&rel(y), &rel(y)).sqrt()))
                    .collect())
            } else {
                let x: [f64; 3] = x0r.as_slice().try_into().map_err(|_| {
                    LabError::Precondition(
                        "off-centre iterated Green's functions are implemented in three dimensions"
                            .into(),
                    )
                })?;
                let ys: Vec<Vec<f64>> = points.iter().map(|y| rel(y)).collect();
                // The gap to a half-resolution pass bounds the error from above.
                let coarse = tilde_ball_volume(p, x, *radius, &ys, opts.tilde.mesh.coarsened());
                let fine = tilde_ball_volume(p, x, *radius, &ys, opts.tilde.mesh);
                let scale = fine.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
                let err = coarse
                    .iter()
                    .zip(&fine)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
                    / scale;
                if err > opts.field_tol {
                    return Err(LabError::Resolution(format!(
                        "self-convergence error {err:e} of G̃ samples, relative to their maximum, exceeds {:e}",
                        opts.field_tol
                    )));
                }
                Ok(fine)
            }
        }
        Domain::Box { .. } => {
            let x: [f64; 3] = x0
                .try_into()
                .map_err(|_| LabError::Domain("box points have 3 coordinates".into()))?;
            let solve = solve_box(domain, x, opts.tilde.box_nodes, Some(p))?;
            let t = solve
                .tilde
                .as_ref()
                .ok_or_else(|| LabError::Regime("no iterated solve".into()))?;
            Ok(points
                .iter()
                .map(|y| t.value(x, [y[0], y[1], y[2]]))
                .collect())
        }
    }
}

fn box_phi(domain: &Domain, x0: [f64; 3], nodes: usize) -> Result<(BoxSolve, f64, f64)> {
    let coarse = solve_box(domain, x0, nodes, None)?;
    let fine = solve_box(domain, x0, 2 * nodes + 1, None)?;
    let (pc, pf) = (coarse.green.phi, fine.green.phi);
    Ok((fine, (4.0 * pf - pc) / 3.0, (pf - pc).abs() / 3.0))
}

/// Builds the bundle: `φ`, `∇φ`, and when `p` is in the subcritical window
/// also `φ̃`, `∇φ̃`; optionally the boundary identities and a field sample.
pub fn build_bundle(
    domain: &Domain,
    x0: &[f64],
    p: Option<f64>,
    opts: &BundleOptions,
) -> Result<GreenBundle> {
    domain.require_interior(x0)?;
    let n = domain.dim();
    let nf = n as f64;
    let q = p.map(|p| critical_q(p, nf)).transpose()?;
    let tilde_p = p.filter(|&p| classify_regime(p, nf) == Regime::TailSubcritical);

    let (phi, grad_phi, phi_err, method, box_solve) = match domain {
        Domain::Ball { center, radius } => {
            let rel: Vec<f64> = x0.iter().zip(center).map(|(a, b)| a - b).collect();
            (
                robin_ball(&rel, *radius, n)?,
                robin_ball_grad(&rel, *radius, n)?,
                0.0,
                "ball-images",
                None,
            )
        }
        Domain::Box { .. } => {
            let x: [f64; 3] = x0
                .try_into()
                .map_err(|_| LabError::Domain("box points have 3 coordinates".into()))?;
            let (fine, phi, err) = box_phi(domain, x, opts.tilde.box_nodes)?;
            let grad = fine.green.grad_phi().to_vec();
            (phi, grad, err, "box-finite-difference", Some(fine))
        }
    };

    let tr = tilde_p
        .map(|p| tilde_robin(domain, p, x0, &opts.tilde))
        .transpose()?;

    let mut residuals = BTreeMap::new();
    if opts.identities {
        let mut kinds = vec![Identity::I, Identity::Vec];
        if tilde_p.is_some() {
            kinds.insert(1, Identity::Ii);
        }
        for which in kinds {
            let io = IdentityOptions {
                tilde: opts.tilde,
                ..IdentityOptions::for_identity(which)
            };
            let rep = boundary_identity_check(domain, x0, which, tilde_p, &io)?;
            residuals.insert(which.name().to_string(), rep);
        }
    }

    let pts = field_points(domain, x0, opts.field_points);
    let g_vals: Vec<f64> = match (domain, &box_solve) {
        (Domain::Ball { center, radius }, _) => pts
            .iter()
            .map(|y| {
                let (a, b): (Vec<f64>, Vec<f64>) = (
                    x0.iter().zip(center).map(|(u, v)| u - v).collect(),
                    y.iter().zip(center).map(|(u, v)| u - v).collect(),
                );
                green_ball(&a, &b, *radius, n)
            })
            .collect::<Result<_>>()?,
        (_, Some(s)) => pts
            .iter()
            .map(|y| s.green.green([y[0], y[1], y[2]]))
            .collect(),
        _ => unreachable!("box solves are always present for boxes"),
    };
    let gt_vals = match tilde_p {
        Some(p) => Some(iterated_green(domain, p, x0, &pts, opts)?),
        None => None,
    };
    let field = pts
        .iter()
        .enumerate()
        .map(|(i, y)| FieldSample {
            x: y[0],
            y: y[1],
            z: y[2],
            g: g_vals[i],
            gt: gt_vals.as_ref().map(|v| v[i]),
        })
        .collect();

    let defaults_ii = IdentityOptions::for_identity(Identity::Ii);
    let defaults_i = IdentityOptions::for_identity(Identity::I);
    Ok(GreenBundle {
        domain: domain.clone(),
        x0: x0.to_vec(),
        phi,
        grad_phi,
        phi_t: tr.as_ref().map(|t| t.phi_t),
        grad_phi_t: tr.as_ref().map(|t| t.grad_phi_t.clone()),
        p,
        q,
        residuals,
        outside_smoothness_hypotheses: domain.outside_smoothness_hypotheses(),
        method: method.into(),
        errors: BundleErrors {
            phi: phi_err,
            phi_t: tr.as_ref().map(|t| t.phi_t_error),
            grad_phi_t: tr.as_ref().map(|t| t.grad_error),
        },
        tolerance: BundleTolerances {
            identity_i: defaults_i.tol,
            identity_ii: defaults_ii.tol,
            identity_vec: IdentityOptions::for_identity(Identity::Vec).tol,
            extraction: opts.tilde.extraction_tol,
            box_identities: defaults_i.box_tol,
        },
        field,
    })
}
