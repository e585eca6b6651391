//! Boundary identities tying normal derivatives of `G`, `G̃` to `φ`, `φ̃`.
//!
//! - `i`:   `∫_{∂Ω} (∂G/∂n)² (n, y - x0) = -(N-2) φ(x0)`
//! - `ii`:  `∫_{∂Ω} (∂G̃/∂n)(∂G/∂n)(n, y - x0) = -(N/(q+1)) φ̃(x0)`
//! - `vec`: `∫_{∂Ω} (∂G/∂n)² n = -∇φ(x0)` and, with `p`,
//!   `∫_{∂Ω} (∂G̃/∂n)(∂G/∂n) n = -∇φ̃(x0)`.

use serde::{Deserialize, Serialize};

use crate::boxgreen::{
    default_gradient_offset, face_integrals, solve_box, tilde_gradient_two_grids,
};
use crate::error::{LabError, Result};
use crate::green::{dot, normal_derivative_ball, robin_ball, robin_ball_grad, Domain};
use crate::hyperbola::critical_q;
use crate::iterated::{
    tilde_normal_derivatives_volume, tilde_robin, RadialTilde, TildeOptions, TildeRobin,
};
use crate::quadrature::sphere_rule;
use crate::special::sigma_n;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Identity {
    I,
    Ii,
    Vec,
}

impl Identity {
    pub fn name(&self) -> &'static str {
        match self {
            Identity::I => "identity_i",
            Identity::Ii => "identity_ii",
            Identity::Vec => "identity_vec",
        }
    }
}

impl std::str::FromStr for Identity {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i" => Ok(Identity::I),
            "ii" => Ok(Identity::Ii),
            "vec" => Ok(Identity::Vec),
            other => Err(LabError::Domain(format!(
                "unknown identity {other:?}; expected i, ii or vec"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub check: String,
    pub x0: Vec<f64>,
    pub p: Option<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub abs_residual: f64,
    /// Residual relative to `|rhs|`, or absolute when `|rhs|` is below
    /// `abs_floor`.
    pub residual: f64,
    /// Estimated quadrature error of the left-hand side.
    pub quadrature_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub outside_smoothness_hypotheses: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct IdentityOptions {
    pub n_theta: usize,
    pub n_phi: usize,
    /// Pass threshold on the residual.
    pub tol: f64,
    /// Largest acceptable surface-quadrature error estimate, relative.
    pub quad_tol: f64,
    pub abs_floor: f64,
    /// Doublings of the ball surface rule allowed before giving up.
    pub max_refinements: usize,
    /// Pass threshold floor on boxes, whose corners fall outside the
    /// smooth-boundary setting and limit the face quadrature to first order.
    pub box_tol: f64,
    pub tilde: TildeOptions,
}

impl Default for IdentityOptions {
    fn default() -> Self {
        Self {
            n_theta: 48,
            n_phi: 96,
            tol: 1e-6,
            quad_tol: 1e-6,
            abs_floor: 1e-12,
            max_refinements: 2,
            box_tol: 1e-2,
            tilde: TildeOptions::default(),
        }
    }
}

impl IdentityOptions {
    /// Default pass thresholds: `1e-6` for `i`, `1e-3` for `ii`, `1e-6`
    /// for `vec`.
    pub fn for_identity(which: Identity) -> Self {
        let tol = match which {
            Identity::Ii => 1e-3,
            _ => 1e-6,
        };
        Self {
            tol,
            quad_tol: tol,
            ..Default::default()
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn report(
    which: Identity,
    x0: &[f64],
    p: Option<f64>,
    lhs: Vec<f64>,
    rhs: Vec<f64>,
    quad: f64,
    opts: &IdentityOptions,
    outside: bool,
) -> IdentityReport {
    let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    let abs_residual = norm(&diff);
    let scale = norm(&rhs);
    let residual = if scale > opts.abs_floor {
        abs_residual / scale
    } else {
        abs_residual
    };
    IdentityReport {
        check: which.name().into(),
        x0: x0.to_vec(),
        p,
        lhs,
        rhs,
        abs_residual,
        residual,
        quadrature_error: quad,
        tolerance: opts.tol,
        pass: residual <= opts.tol,
        outside_smoothness_hypotheses: outside,
    }
}

/// Surface nodes `(y, n, weight)` on the sphere `|y - c| = R` in ℝ³.
fn ball_surface(
    center: &[f64],
    radius: f64,
    n_theta: usize,
    n_phi: usize,
) -> Vec<([f64; 3], [f64; 3], f64)> {
    sphere_rule(n_theta, n_phi)
        .into_iter()
        .map(|(d, w)| {
            (
                [0, 1, 2].map(|i| center[i] + radius * d[i]),
                d,
                w * radius * radius,
            )
        })
        .collect()
}

type Lhs = (f64, [f64; 3], Option<f64>, Option<[f64; 3]>);

/// Left-hand sides on the ball for one surface rule: `(i, vec_i, ii, vec_ii)`.
fn ball_lhs(
    rel: &[f64],
    radius: f64,
    n_theta: usize,
    n_phi: usize,
    tilde_dn: Option<&dyn Fn(&[[f64; 3]]) -> Result<Vec<f64>>>,
) -> Result<Lhs> {
    let surf = ball_surface(&[0.0; 3], radius, n_theta, n_phi);
    let ys: Vec<[f64; 3]> = surf.iter().map(|s| s.0).collect();
    let dt = tilde_dn.map(|f| f(&ys)).transpose()?;
    let (mut i1, mut v1, mut i2, mut v2) = (0.0, [0.0; 3], 0.0, [0.0; 3]);
    for (m, (y, nrm, w)) in surf.iter().enumerate() {
        let dg = normal_derivative_ball(rel, y, radius, 3)?;
        let xn: f64 = (0..3).map(|d| nrm[d] * (y[d] - rel[d])).sum();
        i1 += w * dg * dg * xn;
        for d in 0..3 {
            v1[d] += w * dg * dg * nrm[d];
        }
        if let Some(dt) = &dt {
            i2 += w * dt[m] * dg * xn;
            for d in 0..3 {
                v2[d] += w * dt[m] * dg * nrm[d];
            }
        }
    }
    Ok((i1, v1, dt.as_ref().map(|_| i2), dt.as_ref().map(|_| v2)))
}

/// Evaluates one boundary identity at `x0`.
pub fn boundary_identity_check(
    domain: &Domain,
    x0: &[f64],
    which: Identity,
    p: Option<f64>,
    opts: &IdentityOptions,
) -> Result<IdentityReport> {
    domain.require_interior(x0)?;
    let n = domain.dim();
    let nf = n as f64;
    if which == Identity::Ii && p.is_none() {
        return Err(LabError::Precondition(
            "identity ii needs the exponent p".into(),
        ));
    }
    let with_tilde = p.is_some() && which != Identity::I;
    match domain {
        Domain::Ball { center, radius } => {
            let rel: Vec<f64> = x0.iter().zip(center).map(|(a, b)| a - b).collect();
            let centred = rel.iter().all(|v| *v == 0.0);
            let tr: Option<TildeRobin> = if with_tilde {
                Some(tilde_robin(
                    &Domain::ball(n, *radius),
                    p.unwrap_or(f64::NAN),
                    &rel,
                    &opts.tilde,
                )?)
            } else {
                None
            };
            if n != 3 {
                if !centred {
                    return Err(LabError::Precondition(
                        "off-centre boundary identities are implemented in three dimensions".into(),
                    ));
                }
                // Centred source: ∂G/∂n = -1/(σ_N R^{N-1}) is constant on the sphere.
                let sig = sigma_n(nf);
                let dg = -1.0 / (sig * radius.powf(nf - 1.0));
                let area = sig * radius.powf(nf - 1.0);
                let zero = vec![0.0; n];
                return Ok(match which {
                    Identity::I => report(
                        which,
                        x0,
                        p,
                        vec![area * dg * dg * radius],
                        vec![-(nf - 2.0) * robin_ball(&rel, *radius, n)?],
                        0.0,
                        opts,
                        false,
                    ),
                    Identity::Ii => {
                        let pp = p.unwrap_or(f64::NAN);
                        let rt = RadialTilde::new(pp, n, *radius, opts.tilde.radial_panels)?;
                        let q = critical_q(pp, nf)?;
                        let lhs = area * rt.normal_derivative() * dg * radius;
                        let phi_t = tr.as_ref().map_or(f64::NAN, |t| t.phi_t);
                        report(
                            which,
                            x0,
                            p,
                            vec![lhs],
                            vec![-(nf / (q + 1.0)) * phi_t],
                            0.0,
                            opts,
                            false,
                        )
                    }
                    Identity::Vec => report(which, x0, p, zero.clone(), zero, 0.0, opts, false),
                });
            }
            let r = *radius;
            let pp = p.unwrap_or(f64::NAN);
            let dn_tilde = |ys: &[[f64; 3]]| -> Result<Vec<f64>> {
                if centred {
                    let rt = RadialTilde::new(pp, 3, r, opts.tilde.radial_panels)?;
                    Ok(vec![rt.normal_derivative(); ys.len()])
                } else {
                    tilde_normal_derivatives_volume(pp, &rel, r, ys, opts.tilde.mesh)
                }
            };
            let tilde_fn: Option<&dyn Fn(&[[f64; 3]]) -> Result<Vec<f64>>> =
                if with_tilde { Some(&dn_tilde) } else { None };
            let select = |l: &Lhs| -> Vec<f64> {
                match which {
                    Identity::I => vec![l.0],
                    Identity::Ii => vec![l.2.unwrap_or(f64::NAN)],
                    Identity::Vec => {
                        let mut v = l.1.to_vec();
                        if let Some(v2) = l.3 {
                            v.extend(v2);
                        }
                        v
                    }
                }
            };
            let rhs: Vec<f64> = match which {
                Identity::I => vec![-(nf - 2.0) * robin_ball(&rel, r, 3)?],
                Identity::Ii => {
                    let q = critical_q(pp, nf)?;
                    vec![-(nf / (q + 1.0)) * tr.as_ref().map_or(f64::NAN, |t| t.phi_t)]
                }
                Identity::Vec => {
                    let mut v: Vec<f64> = robin_ball_grad(&rel, r, 3)?.iter().map(|g| -g).collect();
                    if let Some(t) = &tr {
                        v.extend(t.grad_phi_t.iter().map(|g| -g));
                    }
                    v
                }
            };
            // Double the surface rule until two successive passes agree.
            let scale = norm(&rhs).max(opts.abs_floor);
            let (mut nt, mut np) = (opts.n_theta, opts.n_phi);
            let mut coarse = select(&ball_lhs(&rel, r, nt / 2, np / 2, tilde_fn)?);
            let mut level = 0;
            let (lhs, quad) = loop {
                let fine = select(&ball_lhs(&rel, r, nt, np, tilde_fn)?);
                let quad = norm(
                    &fine
                        .iter()
                        .zip(&coarse)
                        .map(|(a, b)| a - b)
                        .collect::<Vec<_>>(),
                );
                if quad <= opts.quad_tol * scale.max(norm(&fine)) || quad <= opts.abs_floor {
                    break (fine, quad);
                }
                if level == opts.max_refinements {
                    return Err(LabError::Accuracy {
                        estimate: quad / scale,
                        tolerance: opts.quad_tol,
                    });
                }
                level += 1;
                (nt, np) = (2 * nt, 2 * np);
                coarse = fine;
            };
            Ok(report(which, x0, p, lhs, rhs, quad, opts, false))
        }
        Domain::Box { .. } => {
            let x: [f64; 3] = x0
                .try_into()
                .map_err(|_| LabError::Domain("box points have 3 coordinates".into()))?;
            let pp = if with_tilde { p } else { None };
            let nodes = opts.tilde.box_nodes;
            let coarse = solve_box(domain, x, nodes, pp)?;
            let fine = solve_box(domain, x, 2 * nodes + 1, pp)?;
            let (fc, ff) = (face_integrals(&coarse), face_integrals(&fine));
            let (lhs, cl, rhs): (Vec<f64>, Vec<f64>, Vec<f64>) = match which {
                Identity::I => (
                    vec![ff.identity_i],
                    vec![fc.identity_i],
                    vec![-(nf - 2.0) * fine.green.phi],
                ),
                Identity::Ii => {
                    let q = critical_q(p.unwrap_or(f64::NAN), nf)?;
                    let phi_t = fine.tilde.as_ref().map_or(f64::NAN, |t| t.phi_t);
                    (
                        vec![ff.identity_ii.unwrap_or(f64::NAN)],
                        vec![fc.identity_ii.unwrap_or(f64::NAN)],
                        vec![-(nf / (q + 1.0)) * phi_t],
                    )
                }
                Identity::Vec => {
                    let mut rhs: Vec<f64> = fine.green.grad_phi().iter().map(|g| -g).collect();
                    let mut lhs = ff.vec_i.to_vec();
                    let mut cl = fc.vec_i.to_vec();
                    if let (Some(v2), Some(c2)) = (ff.vec_ii, fc.vec_ii) {
                        lhs.extend(v2);
                        cl.extend(c2);
                        let s0 = default_gradient_offset(domain, x, &coarse);
                        rhs.extend(
                            tilde_gradient_two_grids(&coarse, &fine, x, s0)
                                .0
                                .iter()
                                .map(|g| -g),
                        );
                    }
                    (lhs, cl, rhs)
                }
            };
            let quad = norm(&lhs.iter().zip(&cl).map(|(a, b)| a - b).collect::<Vec<_>>());
            let loose = IdentityOptions {
                tol: opts.tol.max(opts.box_tol),
                ..*opts
            };
            Ok(report(which, x0, p, lhs, rhs, quad, &loose, true))
        }
    }
}

/// Convenience wrapper with the default thresholds for `which`.
pub fn check_identity(
    domain: &Domain,
    x0: &[f64],
    which: Identity,
    p: Option<f64>,
) -> Result<IdentityReport> {
    boundary_identity_check(domain, x0, which, p, &IdentityOptions::for_identity(which))
}
