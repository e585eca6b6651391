//! Nearly critical solutions on balls and boxes.
//!
//! Radial problems are solved by damped Newton on a finite-volume
//! discretisation of the coupled system, then polished by shooting from the
//! origin so that boundary traces carry ODE accuracy. Boxes use Newton–GMRES
//! on the 7-point Laplacian, preconditioned by the fast Poisson solver.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::boxgreen::{face_rule, grid_for, BoxField};
use crate::error::{LabError, Result};
use crate::green::Domain;
use crate::ground_state::{radial_rhs, series_radius, series_start, GroundState};
use crate::hyperbola::SystemParams;
use crate::linalg::{block_tridiag_solve, gmres, ordered_sum, solve};
use crate::ode::{integrate, Control, OdeOptions, Step};
use crate::poisson::{neg_laplacian, BoxGrid, DirichletPoisson};
use crate::quadrature::sphere_rule;
use crate::special::sigma_n;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// `-Δv = u^{q_ε}`; ε is the hyperbola defect.
    NearlyCriticalExponent,
    /// `-Δv = u^q + εu` at the critical `q`.
    LinearPerturbation,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::NearlyCriticalExponent => "nearly-critical-exponent",
            Mode::LinearPerturbation => "linear-perturbation",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponent" | "nearly-critical-exponent" => Ok(Mode::NearlyCriticalExponent),
            "perturbation" | "linear-perturbation" => Ok(Mode::LinearPerturbation),
            other => Err(LabError::Domain(format!("unknown mode '{other}'"))),
        }
    }
}

/// One boundary value problem: exponents, mode and the small parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Problem {
    /// Exponent mode: `params.eps == eps`. Perturbation mode: the critical
    /// pair.
    pub params: SystemParams,
    pub mode: Mode,
    pub eps: f64,
}

impl Problem {
    pub fn new(p: f64, n: f64, mode: Mode, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(LabError::Infeasible(format!(
                "eps = {eps}: no non-trivial solution for eps <= 0"
            )));
        }
        let params = match mode {
            Mode::NearlyCriticalExponent => SystemParams::new(p, n, eps)?,
            Mode::LinearPerturbation => SystemParams::critical(p, n)?,
        };
        if params.p * params.q_eps <= 1.0 {
            return Err(LabError::Infeasible(format!(
                "p·q_eps = {} <= 1",
                params.p * params.q_eps
            )));
        }
        Ok(Self { params, mode, eps })
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        Self::new(self.params.p, self.params.n, self.mode, eps)
    }

    /// Exponent of the `v` equation.
    pub fn q(&self) -> f64 {
        self.params.q_eps
    }

    /// Coefficient of the linear term in the `v` equation.
    pub fn linear(&self) -> f64 {
        match self.mode {
            Mode::NearlyCriticalExponent => 0.0,
            Mode::LinearPerturbation => self.eps,
        }
    }

    /// Power of μ in the length scale `μ^{1-ε/2}` (1 in perturbation mode).
    pub fn length_exponent(&self) -> f64 {
        match self.mode {
            Mode::NearlyCriticalExponent => 1.0 - 0.5 * self.eps,
            Mode::LinearPerturbation => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolutionGrid {
    Radial {
        r: Vec<f64>,
    },
    /// Values are stored on extended indices, boundary included.
    Box {
        grid: BoxGrid,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundaryNode {
    pub point: Vec<f64>,
    pub normal: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SolveLog {
    pub newton_iterations: usize,
    /// Scaled discrete residual at acceptance.
    pub residual: f64,
    pub linear_iterations: usize,
    pub polish_iterations: usize,
    /// Scaled boundary mismatch of the polishing shot.
    pub polish_residual: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct DomainSolution {
    pub params: SystemParams,
    pub mode: Mode,
    pub eps: f64,
    pub domain: Domain,
    pub grid: SolutionGrid,
    pub u_field: Vec<f64>,
    pub v_field: Vec<f64>,
    /// Radial derivatives on the grid (balls only).
    pub du_dr: Option<Vec<f64>>,
    pub dv_dr: Option<Vec<f64>>,
    pub u_max: f64,
    pub x_peak: Vec<f64>,
    /// `μ^{α_ε} u_max = 1`.
    pub mu: f64,
    pub boundary: Vec<BoundaryNode>,
    pub du_dn: Vec<f64>,
    pub dv_dn: Vec<f64>,
    pub int_u_q1: f64,
    pub log: SolveLog,
}

impl DomainSolution {
    pub fn problem(&self) -> Problem {
        Problem {
            params: self.params,
            mode: self.mode,
            eps: self.eps,
        }
    }

    pub fn q(&self) -> f64 {
        self.problem().q()
    }

    /// `μ^{1-ε/2}`, the width of the concentration region.
    pub fn length_scale(&self) -> f64 {
        self.mu.powf(self.problem().length_exponent())
    }

    pub fn radius(&self) -> Option<f64> {
        match &self.domain {
            Domain::Ball { radius, .. } => Some(*radius),
            Domain::Box { .. } => None,
        }
    }

    /// Radial values `(u, v)` at `r` by Hermite interpolation.
    pub fn eval_radial(&self, r: f64) -> Option<(f64, f64)> {
        let SolutionGrid::Radial { r: nodes } = &self.grid else {
            return None;
        };
        let (du, dv) = (self.du_dr.as_ref()?, self.dv_dr.as_ref()?);
        let last = *nodes.last()?;
        if !(0.0..=last * (1.0 + 1e-12)).contains(&r) {
            return None;
        }
        let i = nodes.partition_point(|&x| x <= r).clamp(1, nodes.len() - 1);
        Some((
            hermite(nodes, &self.u_field, du, i, r),
            hermite(nodes, &self.v_field, dv, i, r),
        ))
    }

    /// Box fields with boundary values.
    pub fn box_fields(&self) -> Option<(BoxField, BoxField)> {
        let SolutionGrid::Box { grid } = &self.grid else {
            return None;
        };
        Some((
            BoxField {
                grid: *grid,
                values: self.u_field.clone(),
            },
            BoxField {
                grid: *grid,
                values: self.v_field.clone(),
            },
        ))
    }

    /// `(u, v)` at a point of the domain.
    pub fn value_at(&self, x: &[f64]) -> Result<(f64, f64)> {
        match &self.domain {
            Domain::Ball { center, .. } => {
                let r = crate::green::norm_diff(x, center);
                self.eval_radial(r)
                    .ok_or_else(|| LabError::Domain(format!("radius {r} outside the ball")))
            }
            Domain::Box { lo, hi } => {
                if (0..3).any(|d| x[d] < lo[d] || x[d] > hi[d]) {
                    return Err(LabError::Domain("point outside the box".into()));
                }
                let (u, v) = self.box_fields().expect("box solution");
                let y = [x[0], x[1], x[2]];
                Ok((u.interp(y), v.interp(y)))
            }
        }
    }

    /// Local maxima of `u` above `rel_floor · u_max`.
    pub fn local_maxima(&self, rel_floor: f64) -> Vec<(Vec<f64>, f64)> {
        let floor = rel_floor * self.u_max;
        match &self.grid {
            SolutionGrid::Radial { r } => {
                let u = &self.u_field;
                let mut out = Vec::new();
                for i in 0..u.len().saturating_sub(1) {
                    let left = if i == 0 { f64::NEG_INFINITY } else { u[i - 1] };
                    if u[i] >= left && u[i] > u[i + 1] && u[i] > floor {
                        let mut x = self.center();
                        x[0] += r[i];
                        out.push((x, u[i]));
                    }
                }
                out
            }
            SolutionGrid::Box { grid } => {
                let d = grid.n.map(|n| n + 2);
                let at = |i: usize, j: usize, k: usize| self.u_field[(i * d[1] + j) * d[2] + k];
                let mut out = Vec::new();
                for i in 1..d[0] - 1 {
                    for j in 1..d[1] - 1 {
                        for k in 1..d[2] - 1 {
                            let c = at(i, j, k);
                            if c <= floor {
                                continue;
                            }
                            let mut is_max = true;
                            'nb: for a in [-1isize, 0, 1] {
                                for b in [-1isize, 0, 1] {
                                    for e in [-1isize, 0, 1] {
                                        if a == 0 && b == 0 && e == 0 {
                                            continue;
                                        }
                                        let nb = at(
                                            (i as isize + a) as usize,
                                            (j as isize + b) as usize,
                                            (k as isize + e) as usize,
                                        );
                                        // Ties are broken towards the lower index.
                                        let before = (a, b, e) < (0, 0, 0);
                                        if nb > c || (before && nb == c) {
                                            is_max = false;
                                            break 'nb;
                                        }
                                    }
                                }
                            }
                            if is_max {
                                out.push((
                                    vec![grid.coord(0, i), grid.coord(1, j), grid.coord(2, k)],
                                    c,
                                ));
                            }
                        }
                    }
                }
                out
            }
        }
    }

    fn center(&self) -> Vec<f64> {
        match &self.domain {
            Domain::Ball { center, .. } => center.clone(),
            Domain::Box { lo, hi } => (0..3).map(|d| 0.5 * (lo[d] + hi[d])).collect(),
        }
    }

    /// Writes `r,u,v` (ball) or `x,y,z,u,v` (box).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| LabError::Io(std::io::Error::other(e));
        match &self.grid {
            SolutionGrid::Radial { r } => {
                wr.write_record(["r", "u", "v"]).map_err(io)?;
                for i in 0..r.len() {
                    wr.serialize((r[i], self.u_field[i], self.v_field[i]))
                        .map_err(io)?;
                }
            }
            SolutionGrid::Box { grid } => {
                wr.write_record(["x", "y", "z", "u", "v"]).map_err(io)?;
                let d = grid.n.map(|n| n + 2);
                for i in 0..d[0] {
                    for j in 0..d[1] {
                        for k in 0..d[2] {
                            let idx = (i * d[1] + j) * d[2] + k;
                            wr.serialize((
                                grid.coord(0, i),
                                grid.coord(1, j),
                                grid.coord(2, k),
                                self.u_field[idx],
                                self.v_field[idx],
                            ))
                            .map_err(io)?;
                        }
                    }
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Scalar summary for manifests.
    pub fn summary_json(&self) -> serde_json::Value {
        let grid = match &self.grid {
            SolutionGrid::Radial { r } => json!({"kind": "radial", "nodes": r.len()}),
            SolutionGrid::Box { grid } => json!({"kind": "box", "nodes": grid.n.map(|n| n + 2)}),
        };
        json!({
            "p": self.params.p,
            "q": self.params.q,
            "q_eps": self.q(),
            "N": self.params.n,
            "eps": self.eps,
            "mode": self.mode.as_str(),
            "domain": self.domain,
            "grid": grid,
            "u_max": self.u_max,
            "x_peak": self.x_peak,
            "mu": self.mu,
            "int_u_q1": self.int_u_q1,
            "du_dn_mean": mean(&self.du_dn),
            "dv_dn_mean": mean(&self.dv_dn),
            "solve": self.log,
        })
    }
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

fn hermite(x: &[f64], y: &[f64], dy: &[f64], i: usize, t: f64) -> f64 {
    let h = x[i] - x[i - 1];
    let s = (t - x[i - 1]) / h;
    let (s2, s3) = (s * s, s * s * s);
    (2.0 * s3 - 3.0 * s2 + 1.0) * y[i - 1]
        + (s3 - 2.0 * s2 + s) * h * dy[i - 1]
        + (-2.0 * s3 + 3.0 * s2) * y[i]
        + (s3 - s2) * h * dy[i]
}

/// Weights of the derivative at `x0` of the interpolant through `xs`.
pub fn derivative_weights(x0: f64, xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    (0..n)
        .map(|j| {
            let mut sum = 0.0;
            for m in 0..n {
                if m == j {
                    continue;
                }
                let mut prod = 1.0 / (xs[j] - xs[m]);
                for l in 0..n {
                    if l != j && l != m {
                        prod *= (x0 - xs[l]) / (xs[j] - xs[l]);
                    }
                }
                sum += prod;
            }
            sum
        })
        .collect()
}

#[inline]
fn pos_pow(x: f64, e: f64) -> f64 {
    if x > 0.0 {
        x.powf(e)
    } else {
        0.0
    }
}

#[inline]
fn pos_dpow(x: f64, e: f64) -> f64 {
    if x > 0.0 {
        e * x.powf(e - 1.0)
    } else {
        0.0
    }
}

// ---------------------------------------------------------------- radial

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RadialMesh {
    Uniform,
    /// Twice the uniform density at the origin.
    Graded,
    /// `r = w sinh(ξ asinh(R/w))`: spacing near the origin proportional to
    /// the peak width `w`.
    Clustered {
        width: f64,
    },
    /// Uniform while the peak spans at least 40 cells, clustered at the
    /// estimated peak width otherwise.
    Auto,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RadialOptions {
    pub nodes: usize,
    pub mesh: RadialMesh,
    /// Scaled discrete residual accepted by Newton.
    pub tol: f64,
    pub max_newton: usize,
    /// Smallest Armijo step.
    pub damping_floor: f64,
    /// Refine the discrete solution by shooting from the origin.
    pub polish: bool,
    pub polish_tol: f64,
}

impl Default for RadialOptions {
    fn default() -> Self {
        Self {
            nodes: 2001,
            mesh: RadialMesh::Auto,
            tol: 1e-10,
            max_newton: 80,
            damping_floor: 2f64.powi(-10),
            polish: true,
            polish_tol: 1e-11,
        }
    }
}

pub fn radial_mesh(mesh: RadialMesh, nodes: usize, radius: f64) -> Result<Vec<f64>> {
    if nodes < 8 {
        return Err(LabError::Domain(format!(
            "{nodes} radial nodes are too few"
        )));
    }
    let m = (nodes - 1) as f64;
    let map: Box<dyn Fn(f64) -> f64> = match mesh {
        RadialMesh::Uniform | RadialMesh::Auto => Box::new(|x| radius * x),
        RadialMesh::Graded => Box::new(|x| radius * 0.5 * x * (1.0 + x)),
        RadialMesh::Clustered { width } => {
            if !(width > 0.0) {
                return Err(LabError::Domain("cluster width must be positive".into()));
            }
            let s = (radius / width).asinh();
            Box::new(move |x| width * (x * s).sinh())
        }
    };
    let mut r: Vec<f64> = (0..nodes).map(|i| map(i as f64 / m)).collect();
    r[0] = 0.0;
    r[nodes - 1] = radius;
    Ok(r)
}

/// Initial guess for [`solve_ball_radial`].
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    /// Scaled `cos(πr/2R)` bump with amplitude fitted to the residual.
    Bump,
    /// `μ^{-α_ε}U(r/μ^{1-ε/2})` with μ fitted to the residual.
    GroundState(&'a GroundState),
    /// Warm start from a neighbouring solution.
    Previous(&'a DomainSolution),
    /// Secant predictor through two solutions, linear in ε.
    Secant(&'a DomainSolution, &'a DomainSolution),
    /// Outward shot from the centre values given by [`scaling_start`].
    Shooting,
}

/// Finite-volume form of `-Δ` on a radial mesh: `L u_i = Σ cond (u_i - u_j)`
/// balanced against `vol_i f_i`.
struct RadialFv {
    vol: Vec<f64>,
    cond: Vec<f64>,
}

impl RadialFv {
    fn new(r: &[f64], n: f64) -> Self {
        let m = r.len();
        let faces: Vec<f64> = (0..m - 1).map(|i| 0.5 * (r[i] + r[i + 1])).collect();
        let vol = (0..m - 1)
            .map(|i| {
                let outer = faces[i].powf(n);
                let inner = if i == 0 { 0.0 } else { faces[i - 1].powf(n) };
                (outer - inner) / n
            })
            .collect();
        let cond = (0..m - 1)
            .map(|i| faces[i].powf(n - 1.0) / (r[i + 1] - r[i]))
            .collect();
        Self { vol, cond }
    }

    /// `L w` at unknown nodes `0..m-1` (w vanishes at the last node).
    fn apply(&self, w: &[f64], i: usize) -> f64 {
        let next = w.get(i + 1).copied().unwrap_or(0.0);
        let mut s = self.cond[i] * (w[i] - next);
        if i > 0 {
            s += self.cond[i - 1] * (w[i] - w[i - 1]);
        }
        s
    }
}

struct RadialSystem<'a> {
    fv: &'a RadialFv,
    p: f64,
    q: f64,
    e: f64,
}

impl RadialSystem<'_> {
    /// Residual pairs at unknown nodes.
    fn residual(&self, u: &[f64], v: &[f64]) -> Vec<[f64; 2]> {
        (0..self.fv.vol.len())
            .map(|i| {
                let vol = self.fv.vol[i];
                [
                    self.fv.apply(u, i) - vol * pos_pow(v[i], self.p),
                    self.fv.apply(v, i) - vol * (pos_pow(u[i], self.q) + self.e * u[i]),
                ]
            })
            .collect()
    }

    /// `Σ F²/vol`, a discrete L² norm of the strong residual.
    fn merit(&self, res: &[[f64; 2]]) -> f64 {
        res.iter()
            .zip(&self.fv.vol)
            .map(|(f, v)| (f[0] * f[0] + f[1] * f[1]) / v)
            .sum()
    }

    /// Largest strong residual relative to the largest source term.
    fn scaled(&self, res: &[[f64; 2]], u: &[f64], v: &[f64]) -> f64 {
        let umax = u.iter().copied().fold(0.0, f64::max);
        let vmax = v.iter().copied().fold(0.0, f64::max);
        let scale = pos_pow(vmax, self.p)
            .max(pos_pow(umax, self.q) + self.e * umax)
            .max(1e-300);
        res.iter()
            .zip(&self.fv.vol)
            .map(|(f, vol)| f[0].abs().max(f[1].abs()) / vol)
            .fold(0.0, f64::max)
            / scale
    }

    /// Residual relative to the size of its two parts, for guess fitting.
    fn relative(&self, u: &[f64], v: &[f64]) -> f64 {
        let res = self.residual(u, v);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..res.len() {
            let vol = self.fv.vol[i];
            let lu = self.fv.apply(u, i);
            let lv = self.fv.apply(v, i);
            num += (res[i][0] * res[i][0]) / vol / (u[0] * u[0]).max(1e-300)
                + (res[i][1] * res[i][1]) / vol / (v[0] * v[0]).max(1e-300);
            den += (lu * lu) / vol / (u[0] * u[0]).max(1e-300)
                + (lv * lv) / vol / (v[0] * v[0]).max(1e-300);
        }
        (num / den.max(1e-300)).sqrt()
    }

    fn newton_step(&self, u: &[f64], v: &[f64], res: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
        let m = res.len();
        let mut lower = vec![[0.0; 4]; m];
        let mut diag = vec![[0.0; 4]; m];
        let mut upper = vec![[0.0; 4]; m];
        for i in 0..m {
            let vol = self.fv.vol[i];
            let c_out = self.fv.cond[i];
            let c_in = if i > 0 { self.fv.cond[i - 1] } else { 0.0 };
            let a = c_out + c_in;
            diag[i] = [
                a,
                -vol * pos_dpow(v[i], self.p),
                -vol * (pos_dpow(u[i], self.q) + self.e),
                a,
            ];
            if i > 0 {
                lower[i] = [-c_in, 0.0, 0.0, -c_in];
            }
            if i + 1 < m {
                upper[i] = [-c_out, 0.0, 0.0, -c_out];
            }
        }
        let rhs: Vec<[f64; 2]> = res.iter().map(|f| [-f[0], -f[1]]).collect();
        block_tridiag_solve(&lower, &diag, &upper, &rhs)
    }
}

/// Minimises `f` over `ln t ∈ [lo, hi]` by a coarse scan plus golden
/// section.
fn fit_scale<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64) -> f64 {
    let k = 40;
    let xs: Vec<f64> = (0..=k)
        .map(|i| lo + (hi - lo) * i as f64 / k as f64)
        .collect();
    let vals: Vec<f64> = xs.iter().map(|&x| f(x.exp())).collect();
    let best = (0..=k)
        .filter(|&i| vals[i].is_finite())
        .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
        .unwrap_or(k / 2);
    let (mut a, mut b) = (xs[best.saturating_sub(1)], xs[(best + 1).min(k)]);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..40 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c.exp()) < f(d.exp()) {
            b = d;
        } else {
            a = c;
        }
    }
    (0.5 * (a + b)).exp()
}

fn ground_values(gs: &GroundState, r: f64) -> (f64, f64) {
    if let Some(x) = gs.profile.eval(r) {
        return x;
    }
    let sp = &gs.params;
    let v = gs.a * r.powf(2.0 - sp.n);
    let u = match sp.regime() {
        crate::hyperbola::Regime::TailLogarithmic => gs.b * r.powf(2.0 - sp.n) * r.ln(),
        _ => gs.b * r.powf(-sp.u_tail_exponent()),
    };
    (u, v)
}

/// Ground-state profile values `(U, V)` at any radius, using the tail
/// asymptotics past the sampled range.
pub fn ground_state_values(gs: &GroundState, r: f64) -> (f64, f64) {
    ground_values(gs, r)
}

fn initial_guess(
    problem: &Problem,
    sys: &RadialSystem,
    r: &[f64],
    radius: f64,
    init: Init,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let sp = &problem.params;
    match init {
        Init::Shooting => {
            let (u0, v0) = scaling_start(problem, radius)?;
            let (rs, y0) = outward_start(problem, u0, v0, 0.5 * r[1]);
            let (_, states) =
                variational_leg(problem, rs, radius, y0, &r[1..], [f64::INFINITY; 2])?;
            let (mut u, mut v) = (vec![u0], vec![v0]);
            let mut k = 0;
            for &ri in &r[1..] {
                let y = if ri <= rs {
                    series_start(sp.n, sp.p, problem.q(), problem.linear(), u0, v0, ri)
                } else {
                    k += 1;
                    let s = states[k - 1];
                    [s[0], s[1], s[2], s[3]]
                };
                u.push(y[0].max(0.0));
                v.push(y[2].max(0.0));
            }
            Ok((u, v))
        }
        Init::Previous(prev) => {
            let mut u = Vec::with_capacity(r.len());
            let mut v = Vec::with_capacity(r.len());
            let prev_r = prev
                .radius()
                .ok_or_else(|| LabError::Precondition("warm start needs a ball solution".into()))?;
            for &ri in r {
                let (a, b) = prev
                    .eval_radial(ri * prev_r / radius)
                    .ok_or_else(|| LabError::Precondition("warm start outside its grid".into()))?;
                u.push(a);
                v.push(b);
            }
            Ok((u, v))
        }
        Init::Secant(older, newer) => {
            let (u1, v1) = initial_guess(problem, sys, r, radius, Init::Previous(newer))?;
            let (u0, v0) = initial_guess(problem, sys, r, radius, Init::Previous(older))?;
            let t = (problem.eps - newer.eps) / (newer.eps - older.eps);
            let lin = |a: &[f64], b: &[f64]| -> Vec<f64> {
                a.iter()
                    .zip(b)
                    .map(|(x1, x0)| (x1 + t * (x1 - x0)).max(0.0))
                    .collect()
            };
            let (us, vs) = (lin(&u1, &u0), lin(&v1, &v0));
            // Fall back to the plain warm start if extrapolation is worse.
            if sys.relative(&us, &vs) < sys.relative(&u1, &v1) {
                Ok((us, vs))
            } else {
                Ok((u1, v1))
            }
        }
        Init::Bump => {
            let k = 0.5 * std::f64::consts::PI / radius;
            let psi: Vec<f64> = r.iter().map(|&x| (k * x).cos()).collect();
            // Near the linear regime the v amplitude follows -Δu = v^p at
            // the origin; otherwise the energy balance of the pure powers.
            let ratio = (problem.q() + 1.0) / (sp.p + 1.0);
            let amplitude = |a: f64| match problem.mode {
                Mode::NearlyCriticalExponent => a.powf(ratio),
                Mode::LinearPerturbation => (sp.n * k * k * a).powf(1.0 / sp.p),
            };
            let build = |a: f64| -> (Vec<f64>, Vec<f64>) {
                let b = amplitude(a);
                (
                    psi.iter().map(|s| a * s).collect(),
                    psi.iter().map(|s| b * s).collect(),
                )
            };
            let a = fit_scale(
                |a| {
                    let (u, v) = build(a);
                    sys.relative(&u, &v)
                },
                (1e-3f64).ln(),
                (1e4f64).ln(),
            );
            Ok(build(a))
        }
        Init::GroundState(gs) => {
            if gs.params.p != sp.p || gs.params.n != sp.n {
                return Err(LabError::Composition(
                    "ground state belongs to another (p, N)".into(),
                ));
            }
            let ae = sp.alpha_eps;
            let le = problem.length_exponent();
            let build = |mu: f64| -> (Vec<f64>, Vec<f64>) {
                let s = mu.powf(le);
                let (ub, vb) = ground_values(gs, radius / s);
                let (cu, cv) = (mu.powf(-ae), mu.powf(-sp.beta));
                r.iter()
                    .map(|&x| {
                        let (uu, vv) = ground_values(gs, x / s);
                        (cu * (uu - ub), cv * (vv - vb))
                    })
                    .unzip()
            };
            let mu = fit_scale(
                |mu| {
                    let (u, v) = build(mu);
                    sys.relative(&u, &v)
                },
                (1e-8f64).ln(),
                (10f64).ln(),
            );
            Ok(build(mu))
        }
    }
}

/// Solves the coupled radial problem on the ball of radius `radius`.
pub fn solve_ball_radial(
    problem: &Problem,
    radius: f64,
    init: Init,
    opts: &RadialOptions,
) -> Result<DomainSolution> {
    let start = Instant::now();
    let sp = problem.params;
    if !(radius > 0.0) {
        return Err(LabError::Domain(format!(
            "radius {radius} must be positive"
        )));
    }
    if !(problem.eps > 0.0) {
        return Err(LabError::Infeasible(format!("eps = {}", problem.eps)));
    }
    let mut r = radial_mesh(opts.mesh, opts.nodes, radius)?;
    let mut fv = RadialFv::new(&r, sp.n);
    let (mut u, mut v) = {
        let sys = RadialSystem {
            fv: &fv,
            p: sp.p,
            q: problem.q(),
            e: problem.linear(),
        };
        initial_guess(problem, &sys, &r, radius, init)?
    };
    if opts.mesh == RadialMesh::Auto {
        let width = u[0]
            .max(1e-300)
            .powf(-problem.length_exponent() / sp.alpha_eps);
        if radius / (opts.nodes - 1) as f64 > width / 40.0 {
            r = radial_mesh(
                RadialMesh::Clustered {
                    width: width.min(radius),
                },
                opts.nodes,
                radius,
            )?;
            fv = RadialFv::new(&r, sp.n);
            let sys = RadialSystem {
                fv: &fv,
                p: sp.p,
                q: problem.q(),
                e: problem.linear(),
            };
            (u, v) = initial_guess(problem, &sys, &r, radius, init)?;
        }
    }
    let sys = RadialSystem {
        fv: &fv,
        p: sp.p,
        q: problem.q(),
        e: problem.linear(),
    };
    let m = r.len() - 1;
    u[m] = 0.0;
    v[m] = 0.0;

    let fail = |reason: String| LabError::ContinuationFailure {
        eps: problem.eps,
        reason,
    };
    let boundary_slope = |f: &[f64]| {
        let w = derivative_weights(radius, &r[m - 4..]);
        (0..5).map(|j| w[j] * f[m - 4 + j]).sum::<f64>()
    };
    let predicted = [u[0], v[0], boundary_slope(&u), boundary_slope(&v)];
    let mut res = sys.residual(&u, &v);
    let mut merit = sys.merit(&res);
    let mut scaled = sys.scaled(&res, &u, &v);
    let mut iters = 0;
    let mut fd_failure = None;
    while scaled > opts.tol {
        if iters >= opts.max_newton {
            fd_failure = Some(fail(format!(
                "Newton stalled at scaled residual {scaled:e}"
            )));
            break;
        }
        iters += 1;
        let step = sys.newton_step(&u, &v, &res)?;
        let mut t = 1.0;
        loop {
            let un: Vec<f64> = (0..=m)
                .map(|i| if i < m { u[i] + t * step[i][0] } else { 0.0 })
                .collect();
            let vn: Vec<f64> = (0..=m)
                .map(|i| if i < m { v[i] + t * step[i][1] } else { 0.0 })
                .collect();
            let rn = sys.residual(&un, &vn);
            let mn = sys.merit(&rn);
            if mn.is_finite() && mn <= (1.0 - 1e-4 * t) * merit {
                u = un;
                v = vn;
                res = rn;
                merit = mn;
                break;
            }
            t *= 0.5;
            if t < opts.damping_floor {
                break;
            }
        }
        if t < opts.damping_floor {
            fd_failure = Some(fail(format!(
                "line search hit the damping floor at residual {scaled:e}"
            )));
            break;
        }
        scaled = sys.scaled(&res, &u, &v);
    }
    // A stalled grid iteration still hands a usable start to the shooting
    // polish, which decides.
    if !opts.polish {
        if let Some(err) = fd_failure {
            return Err(err);
        }
    }
    if fd_failure.is_none() && ((0..m).any(|i| !(u[i] > 0.0 && v[i] > 0.0)) || u[0] < 1e-10) {
        return Err(LabError::Branch { eps: problem.eps });
    }
    let mut log = SolveLog {
        newton_iterations: iters,
        residual: scaled,
        ..Default::default()
    };

    let (du, dv, int_u_q1) = if opts.polish {
        let mut attempt = polish_shot(
            problem,
            &r,
            [u[0], v[0], boundary_slope(&u), boundary_slope(&v)],
            opts.polish_tol,
        );
        if attempt.is_err() && fd_failure.is_some() {
            attempt = polish_shot(problem, &r, predicted, opts.polish_tol);
        }
        let shot = match attempt {
            Ok(s) => s,
            Err(e) => {
                return Err(match fd_failure {
                    Some(LabError::ContinuationFailure { eps, reason }) => {
                        LabError::ContinuationFailure {
                            eps,
                            reason: format!("{reason}; shooting polish: {e}"),
                        }
                    }
                    _ => e,
                })
            }
        };
        u = shot.u;
        v = shot.v;
        log.polish_iterations = shot.iterations;
        log.polish_residual = Some(shot.residual);
        if (0..m).any(|i| !(u[i] > 0.0 && v[i] > 0.0)) {
            return Err(LabError::Branch { eps: problem.eps });
        }
        (shot.du, shot.dv, shot.int_u_q1)
    } else {
        let du = grid_derivative(&r, &u);
        let dv = grid_derivative(&r, &v);
        let q1 = problem.q() + 1.0;
        let f: Vec<f64> = r
            .iter()
            .zip(&u)
            .map(|(x, y)| x.powf(sp.n - 1.0) * pos_pow(*y, q1))
            .collect();
        let int = sigma_n(sp.n) * crate::quadrature::trapezoid(&r, &f);
        (du, dv, int)
    };

    let k = r.len();
    let tail: Vec<f64> = r[k - 5..].to_vec();
    let w = derivative_weights(radius, &tail);
    let du_dn: f64 = (0..5).map(|j| w[j] * u[k - 5 + j]).sum();
    let dv_dn: f64 = (0..5).map(|j| w[j] * v[k - 5 + j]).sum();
    let (imax, &u_max) = u
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty grid");
    let n_dim = sp.n.round() as usize;
    let mut x_peak = vec![0.0; n_dim];
    x_peak[0] = r[imax];
    let boundary = ball_boundary_rule(n_dim, radius);
    let count = boundary.len();
    log.wall_seconds = start.elapsed().as_secs_f64();
    Ok(DomainSolution {
        params: sp,
        mode: problem.mode,
        eps: problem.eps,
        domain: Domain::ball(n_dim, radius),
        grid: SolutionGrid::Radial { r },
        u_field: u,
        v_field: v,
        du_dr: Some(du),
        dv_dr: Some(dv),
        u_max,
        x_peak,
        mu: u_max.powf(-1.0 / sp.alpha_eps),
        boundary,
        du_dn: vec![du_dn; count],
        dv_dn: vec![dv_dn; count],
        int_u_q1,
        log,
    })
}

/// Boundary quadrature of a centred ball: a product rule for N = 3, the
/// `2N` points `±R e_i` otherwise (exact for the affine integrands of
/// radial traces).
pub fn ball_boundary_rule(n: usize, radius: f64) -> Vec<BoundaryNode> {
    let area = sigma_n(n as f64) * radius.powi(n as i32 - 1);
    if n == 3 {
        sphere_rule(12, 24)
            .into_iter()
            .map(|(d, w)| BoundaryNode {
                point: d.iter().map(|x| radius * x).collect(),
                normal: d.to_vec(),
                weight: w * radius * radius,
            })
            .collect()
    } else {
        let mut out = Vec::with_capacity(2 * n);
        for i in 0..n {
            for s in [1.0, -1.0] {
                let mut normal = vec![0.0; n];
                normal[i] = s;
                out.push(BoundaryNode {
                    point: normal.iter().map(|x| radius * x).collect(),
                    normal,
                    weight: area / (2 * n) as f64,
                });
            }
        }
        out
    }
}

fn grid_derivative(r: &[f64], f: &[f64]) -> Vec<f64> {
    let m = r.len();
    (0..m)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                let lo = i.saturating_sub(1).min(m - 3);
                let xs = &r[lo..lo + 3];
                let w = derivative_weights(r[i], xs);
                (0..3).map(|j| w[j] * f[lo + j]).sum()
            }
        })
        .collect()
}

struct Shot {
    u: Vec<f64>,
    v: Vec<f64>,
    du: Vec<f64>,
    dv: Vec<f64>,
    int_u_q1: f64,
    iterations: usize,
    residual: f64,
}

/// State `[u, u', v, v']`, two sensitivity columns of it, and `∫u^{q+1}`.
type Leg = [f64; 13];

/// Integrates a leg with its sensitivities from `from` to `to`, inward when
/// `to < from` (via `s = from - r`). Records `[u, u', v, v', I]` at the
/// `stops` met on the way, in travel order.
fn variational_leg(
    problem: &Problem,
    from: f64,
    to: f64,
    y0: Leg,
    stops: &[f64],
    bound: [f64; 2],
) -> Result<(Leg, Vec<[f64; 5]>)> {
    let sp = &problem.params;
    let (n, p, q, e) = (sp.n, sp.p, problem.q(), problem.linear());
    let sn = sigma_n(n);
    let sign = if to >= from { 1.0 } else { -1.0 };
    let radius_of = |s: f64| from + sign * s;
    let mut svals: Vec<f64> = stops
        .iter()
        .map(|&x| sign * (x - from))
        .filter(|&s| s > 0.0)
        .collect();
    svals.sort_by(f64::total_cmp);
    let mut states = Vec::with_capacity(svals.len());
    let mut next = 0;
    let mut blew_up = None;
    let opts = OdeOptions {
        rtol: 1e-13,
        atol: 1e-300,
        ..OdeOptions::default()
    };
    let (_, end) = integrate(
        |s, y: &Leg| {
            let r = radius_of(s);
            let c = (n - 1.0) / r;
            let f = radial_rhs(n, p, q, e, r, &[y[0], y[1], y[2], y[3]]);
            let pv = p * y[2].abs().powf(p - 1.0);
            let qu = q * y[0].abs().powf(q - 1.0) + e;
            let mut out = [0.0; 13];
            out[..4].copy_from_slice(&f);
            for b in [4, 8] {
                out[b] = y[b + 1];
                out[b + 1] = -pv * y[b + 2] - c * y[b + 1];
                out[b + 2] = y[b + 3];
                out[b + 3] = -qu * y[b] - c * y[b + 3];
            }
            out[12] = sn * r.powf(n - 1.0) * pos_pow(y[0], q + 1.0);
            out.map(|x| sign * x)
        },
        0.0,
        y0,
        (to - from).abs(),
        &svals,
        &opts,
        |st: &Step<13>| {
            if st.y1[0].abs() > bound[0] || st.y1[2].abs() > bound[1] {
                blew_up = Some(radius_of(st.t1));
                return Control::Stop;
            }
            while next < svals.len() && svals[next] <= st.t1 {
                if svals[next] == st.t1 {
                    states.push([st.y1[0], st.y1[1], st.y1[2], st.y1[3], st.y1[12]]);
                }
                next += 1;
            }
            Control::Continue
        },
    )?;
    if let Some(radius) = blew_up {
        return Err(LabError::Integration {
            radius,
            reason: "shot left the bounded range".into(),
        });
    }
    Ok((end, states))
}

/// Start of the outward leg: series data at a small radius with its
/// sensitivities to `(u(0), v(0))`.
fn outward_start(problem: &Problem, u0: f64, v0: f64, cap: f64) -> (f64, Leg) {
    let sp = &problem.params;
    let (n, p, q, e) = (sp.n, sp.p, problem.q(), problem.linear());
    let rs = series_radius(p, q, u0, v0).min(cap);
    let base = series_start(n, p, q, e, u0, v0, rs);
    let (hu, hv) = (1e-6 * u0, 1e-6 * v0);
    let a = series_start(n, p, q, e, u0 + hu, v0, rs);
    let b = series_start(n, p, q, e, u0 - hu, v0, rs);
    let c = series_start(n, p, q, e, u0, v0 + hv, rs);
    let d = series_start(n, p, q, e, u0, v0 - hv, rs);
    let mut y = [0.0; 13];
    y[..4].copy_from_slice(&base);
    for k in 0..4 {
        y[4 + k] = (a[k] - b[k]) / (2.0 * hu);
        y[8 + k] = (c[k] - d[k]) / (2.0 * hv);
    }
    y[12] = sigma_n(n) * u0.powf(q + 1.0) * rs.powf(n) / n;
    (rs, y)
}

/// Matching mismatch at `r[im]` for unknowns `(u(0), v(0), u'(R), v'(R))`,
/// scaled, with its Jacobian (row-major 4x4).
struct Matched {
    f: [f64; 4],
    jac: [f64; 16],
    out: Leg,
    inn: Leg,
}

fn matched_shot(problem: &Problem, r: &[f64], im: usize, x: [f64; 4]) -> Result<Matched> {
    let radius = *r.last().expect("grid");
    let rm = r[im];
    let bound = [1e3 * x[0], 1e3 * x[1]];
    let (rs, y0) = outward_start(problem, x[0], x[1], 0.5 * r[1]);
    let (out, _) = variational_leg(problem, rs, rm, y0, &[], bound)?;
    let mut z0 = [0.0; 13];
    z0[1] = x[2];
    z0[3] = x[3];
    z0[5] = 1.0;
    z0[11] = 1.0;
    let (inn, _) = variational_leg(problem, radius, rm, z0, &[], bound)?;
    let su = out[0].abs().max(rm * out[1].abs()).max(1e-300);
    let sv = out[2].abs().max(rm * out[3].abs()).max(1e-300);
    let row = [1.0 / su, rm / su, 1.0 / sv, rm / sv];
    let mut f = [0.0; 4];
    let mut jac = [0.0; 16];
    for k in 0..4 {
        f[k] = row[k] * (out[k] - inn[k]);
        jac[4 * k] = row[k] * out[4 + k];
        jac[4 * k + 1] = row[k] * out[8 + k];
        jac[4 * k + 2] = -row[k] * inn[4 + k];
        jac[4 * k + 3] = -row[k] * inn[8 + k];
    }
    Ok(Matched { f, jac, out, inn })
}

/// First zeros of `w` and `z` for the scaled radial system with
/// `w(0) = 1`, `z(0) = s` and linear coefficient `e`; infinite when a zero
/// is not reached.
fn scaled_zeros(n: f64, p: f64, q: f64, e: f64, s: f64) -> Result<(f64, f64)> {
    let rs = series_radius(p, q, 1.0, s).min(1e-3);
    let y0 = series_start(n, p, q, e, 1.0, s, rs);
    let mut found = [f64::INFINITY; 2];
    let opts = OdeOptions {
        rtol: 1e-12,
        atol: 1e-300,
        ..OdeOptions::default()
    };
    let run = integrate(
        |t, y: &[f64; 4]| radial_rhs(n, p, q, e, t, y),
        rs,
        y0,
        1e12,
        &[],
        &opts,
        |st: &Step<4>| {
            for (slot, i) in [(0, 0), (1, 2)] {
                if found[slot].is_infinite() {
                    if let Some(t) = st.root(i) {
                        found[slot] = t;
                    }
                }
            }
            let first = found[0].min(found[1]);
            // Past a zero the other component may blow up instead.
            let runaway = st.y1[0].abs() > 1e3 || st.y1[2].abs() > 1e3 * s;
            if found.iter().all(|f| f.is_finite()) || st.t1 > 10.0 * first || runaway {
                Control::Stop
            } else {
                Control::Continue
            }
        },
    );
    if let Err(err) = run {
        if found.iter().all(|f| f.is_infinite()) {
            return Err(err);
        }
    }
    Ok((found[0], found[1]))
}

/// `(ρ, z(0))` such that `w` and `z` vanish together at `ρ`.
fn scaled_match(n: f64, p: f64, q: f64, e: f64) -> Result<(f64, f64)> {
    let g = |s: f64| -> Result<f64> {
        let (rw, rz) = scaled_zeros(n, p, q, e, s)?;
        Ok(match (rw.is_finite(), rz.is_finite()) {
            (false, _) => 1.0,
            (true, false) => -1.0,
            _ => rw - rz,
        })
    };
    let no_bracket = || LabError::Integration {
        radius: 0.0,
        reason: "no sign change in the scaled shooting".into(),
    };
    let (mut lo, mut hi) = (1.0f64, 1.0f64);
    for _ in 0..200 {
        if g(lo)? > 0.0 {
            break;
        }
        lo *= 0.5;
    }
    for _ in 0..200 {
        if g(hi)? < 0.0 {
            break;
        }
        hi *= 2.0;
    }
    if !(g(lo)? > 0.0 && g(hi)? < 0.0) {
        return Err(no_bracket());
    }
    while hi / lo - 1.0 > 1e-15 {
        let mid = 0.5 * (lo + hi);
        if g(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    let (rw, rz) = scaled_zeros(n, p, q, e, s)?;
    if !(rw.is_finite() && rz.is_finite()) {
        return Err(no_bracket());
    }
    Ok((0.5 * (rw + rz), s))
}

/// Centre values `(u(0), v(0))` of the radial solution on the ball, from
/// the scaling `u = λ^a w(λr)`, `v = λ^b z(λr)` with `a + 2 = pb`,
/// `b + 2 = qa`. The linear term rescales to `e = ε λ^{-a(q-1)}`, so in
/// perturbation mode `e` is searched for on a log scale.
pub fn scaling_start(problem: &Problem, radius: f64) -> Result<(f64, f64)> {
    let sp = &problem.params;
    let (n, p, q) = (sp.n, sp.p, problem.q());
    let d = p * q - 1.0;
    let (a, b) = (2.0 * (p + 1.0) / d, 2.0 * (q + 1.0) / d);
    let centre = |rho: f64, s: f64| {
        let lambda = rho / radius;
        (lambda.powf(a), lambda.powf(b) * s)
    };
    if problem.mode == Mode::NearlyCriticalExponent {
        let (rho, s) = scaled_match(n, p, q, 0.0)?;
        return Ok(centre(rho, s));
    }
    let target = problem.eps.ln();
    // ln ε as a function of ln e; unreachable coefficients count as too small.
    let f = |le: f64| -> f64 {
        match scaled_match(n, p, q, le.exp()) {
            Ok((rho, _)) => le + a * (q - 1.0) * (rho / radius).ln() - target,
            Err(_) => f64::NEG_INFINITY,
        }
    };
    // Bracket by stepping away from e = 1, then Illinois regula falsi;
    // ln ε grows with ln e along the branch.
    let step = 4f64.ln();
    let f0 = f(0.0);
    let (mut lo, mut hi, mut flo, mut fhi) = (0.0, 0.0, f0, f0);
    let mut k = 0;
    while !(flo < 0.0 && fhi > 0.0) {
        k += 1;
        if k > 60 {
            return Err(LabError::Infeasible(format!(
                "no radial solution found for eps = {}",
                problem.eps
            )));
        }
        if fhi <= 0.0 {
            (lo, flo) = (hi, fhi);
            hi += step;
            fhi = f(hi);
        } else {
            (hi, fhi) = (lo, flo);
            lo -= step;
            flo = f(lo);
        }
    }
    let mut side = 0;
    for _ in 0..100 {
        if hi - lo < 1e-13 {
            break;
        }
        // Unreachable points carry no slope information: bisect.
        let mid = if flo.is_finite() {
            (lo * fhi - hi * flo) / (fhi - flo)
        } else {
            0.5 * (lo + hi)
        };
        let fm = f(mid);
        if fm == 0.0 {
            (lo, hi) = (mid, mid);
            break;
        }
        if fm < 0.0 {
            (lo, flo) = (mid, fm);
            if side == -1 {
                fhi *= 0.5;
            }
            side = -1;
        } else {
            (hi, fhi) = (mid, fm);
            if side == 1 {
                flo *= 0.5;
            }
            side = 1;
        }
    }
    let (rho, s) = scaled_match(n, p, q, (0.5 * (lo + hi)).exp())?;
    Ok(centre(rho, s))
}

/// Node used to match the outward and inward legs: near the geometric mean
/// of the core width and the radius, where both legs are well conditioned.
fn matching_node(problem: &Problem, r: &[f64], u0: f64) -> usize {
    let radius = *r.last().expect("grid");
    let width = u0
        .max(1e-300)
        .powf(-1.0 / problem.params.alpha_eps)
        .min(radius);
    let target = (width * radius)
        .sqrt()
        .clamp((4.0 * width).min(0.5 * radius), 0.5 * radius);
    r.partition_point(|&x| x < target).clamp(2, r.len() - 3)
}

/// Newton on `(u(0), v(0), u'(R), v'(R))` so that an outward shot from the
/// origin and an inward shot from the boundary meet smoothly. A single
/// outward shot amplifies errors like `(R/width)^{N-2}` for concentrated
/// solutions; splitting the interval takes the square root of that.
fn polish_shot(problem: &Problem, r: &[f64], start: [f64; 4], tol: f64) -> Result<Shot> {
    let radius = *r.last().expect("grid");
    let fail = |reason: String| LabError::ContinuationFailure {
        eps: problem.eps,
        reason,
    };
    let norm = |f: &[f64; 4]| f.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !(start[0] > 0.0 && start[1] > 0.0) {
        return Err(LabError::Branch { eps: problem.eps });
    }
    let im = matching_node(problem, r, start[0]);
    let mut x = start;
    let mut cur = matched_shot(problem, r, im, x)?;
    let mut it = 0;
    while norm(&cur.f) > tol {
        if it >= 40 {
            return Err(fail(format!(
                "shooting polish stalled at {:e}",
                norm(&cur.f)
            )));
        }
        it += 1;
        let dx =
            solve(&cur.jac, &cur.f, 4).map_err(|_| fail("singular shooting Jacobian".into()))?;
        // Far from the solution the mismatch saturates; cap relative
        // changes so Newton cannot jump onto that plateau.
        let mut t: f64 = 1.0;
        for k in 0..4 {
            let cap = if k < 2 { 0.2 } else { 0.5 } * x[k].abs();
            if dx[k].abs() > cap {
                t = t.min(cap / dx[k].abs());
            }
        }
        let mut accepted = false;
        while t >= 1e-6 {
            let xn = [
                x[0] - t * dx[0],
                x[1] - t * dx[1],
                x[2] - t * dx[2],
                x[3] - t * dx[3],
            ];
            if xn[0] > 0.0 && xn[1] > 0.0 {
                // A failed trial shot just rejects the step length.
                if let Ok(m) = matched_shot(problem, r, im, xn) {
                    if norm(&m.f) < norm(&cur.f) {
                        (x, cur) = (xn, m);
                        accepted = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        if !accepted {
            // Integration noise floor: accept when already small.
            if norm(&cur.f) < 1e3 * tol {
                break;
            }
            return Err(fail(format!(
                "shooting line search failed at {:e}",
                norm(&cur.f)
            )));
        }
    }
    let bound = [1e3 * x[0], 1e3 * x[1]];
    let (rs, y0) = outward_start(problem, x[0], x[1], 0.5 * r[1]);
    let (out, out_states) = variational_leg(problem, rs, r[im], y0, &r[1..=im], bound)?;
    let mut z0 = [0.0; 13];
    (z0[1], z0[3]) = (x[2], x[3]);
    let (inn, in_states) = variational_leg(problem, radius, r[im], z0, &r[im..r.len() - 1], bound)?;
    let _ = (&cur.out, &cur.inn);
    let sp = &problem.params;
    let (mut u, mut v, mut du, mut dv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut push = |y: [f64; 4]| {
        u.push(y[0]);
        du.push(y[1]);
        v.push(y[2]);
        dv.push(y[3]);
    };
    push([x[0], 0.0, x[1], 0.0]);
    let mut k = 0;
    for &ri in &r[1..=im] {
        if ri <= rs {
            push(series_start(
                sp.n,
                sp.p,
                problem.q(),
                problem.linear(),
                x[0],
                x[1],
                ri,
            ));
        } else {
            let s = out_states[k];
            k += 1;
            push([s[0], s[1], s[2], s[3]]);
        }
    }
    // Inward states arrive from the boundary towards r[im]; the matching
    // node itself was taken from the outward leg.
    for s in in_states.iter().rev().skip(1) {
        push([s[0], s[1], s[2], s[3]]);
    }
    push([0.0, x[2], 0.0, x[3]]);
    debug_assert_eq!(u.len(), r.len());
    Ok(Shot {
        u,
        v,
        du,
        dv,
        int_u_q1: out[12] - inn[12],
        iterations: it,
        residual: norm(&cur.f),
    })
}

// ------------------------------------------------------------------- box

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoxOptions {
    /// Nodes per side of the longest edge, boundary included.
    pub nodes: usize,
    pub tol: f64,
    pub max_newton: usize,
    pub damping_floor: f64,
    pub gmres_restart: usize,
    pub gmres_max: usize,
    /// Smallest resolved peak width, in cells.
    pub min_cells: f64,
}

impl Default for BoxOptions {
    fn default() -> Self {
        Self {
            nodes: 65,
            tol: 1e-9,
            max_newton: 40,
            damping_floor: 2f64.powi(-10),
            gmres_restart: 80,
            gmres_max: 4000,
            min_cells: 3.0,
        }
    }
}

struct BoxSystem<'a> {
    grid: BoxGrid,
    solver: &'a DirichletPoisson,
    p: f64,
    q: f64,
    e: f64,
}

impl BoxSystem<'_> {
    fn residual(&self, x: &[f64]) -> Vec<f64> {
        let m = self.grid.len();
        let (u, v) = x.split_at(m);
        let mut out = vec![0.0; 2 * m];
        {
            let (fu, fv) = out.split_at_mut(m);
            neg_laplacian(&self.grid, u, fu);
            neg_laplacian(&self.grid, v, fv);
            fu.par_iter_mut()
                .zip(v.par_iter())
                .for_each(|(f, vi)| *f -= pos_pow(*vi, self.p));
            fv.par_iter_mut()
                .zip(u.par_iter())
                .for_each(|(f, ui)| *f -= pos_pow(*ui, self.q) + self.e * ui);
        }
        out
    }

    fn scaled(&self, res: &[f64], x: &[f64]) -> f64 {
        let m = self.grid.len();
        let umax = x[..m].iter().copied().fold(0.0, f64::max);
        let vmax = x[m..].iter().copied().fold(0.0, f64::max);
        let scale = pos_pow(vmax, self.p)
            .max(pos_pow(umax, self.q) + self.e * umax)
            .max(1e-300);
        res.iter().fold(0.0f64, |a, b| a.max(b.abs())) / scale
    }
}

fn norm2(x: &[f64]) -> f64 {
    ordered_sum(x.par_iter().map(|a| a * a)).sqrt()
}

/// Solves the system on an axis-aligned box with Newton–GMRES.
pub fn solve_box_fd(
    problem: &Problem,
    domain: &Domain,
    init: Option<&DomainSolution>,
    opts: &BoxOptions,
) -> Result<DomainSolution> {
    let start = Instant::now();
    let Domain::Box { lo, hi } = domain else {
        return Err(LabError::Domain("solve_box_fd needs a box".into()));
    };
    let sp = problem.params;
    if sp.n != 3.0 {
        return Err(LabError::Domain("box solves are three-dimensional".into()));
    }
    if !(problem.eps > 0.0) {
        return Err(LabError::Infeasible(format!("eps = {}", problem.eps)));
    }
    if opts.nodes < 9 || opts.nodes > 97 {
        return Err(LabError::Domain(format!(
            "{} nodes per side outside 9..=97",
            opts.nodes
        )));
    }
    let grid = grid_for(*lo, *hi, opts.nodes - 2);
    let solver = DirichletPoisson::new(grid);
    let sys = BoxSystem {
        grid,
        solver: &solver,
        p: sp.p,
        q: problem.q(),
        e: problem.linear(),
    };
    let m = grid.len();
    let center = [0, 1, 2].map(|d| 0.5 * (lo[d] + hi[d]));

    let mut x = vec![0.0; 2 * m];
    match init {
        Some(prev) => {
            let fields = prev.box_fields();
            let (xu, xv) = x.split_at_mut(m);
            xu.par_iter_mut()
                .zip(xv.par_iter_mut())
                .enumerate()
                .for_each(|(idx, (a, b))| {
                    let pt = grid.point(
                        idx / (grid.n[1] * grid.n[2]),
                        (idx / grid.n[2]) % grid.n[1],
                        idx % grid.n[2],
                    );
                    let val = match &fields {
                        Some((fu, fv)) => (fu.interp(pt), fv.interp(pt)),
                        None => prev.value_at(&pt).unwrap_or((0.0, 0.0)),
                    };
                    *a = val.0.max(0.0);
                    *b = val.1.max(0.0);
                });
        }
        None => {
            // Radial solution on the inscribed ball, extended by zero.
            let radius = (0..3)
                .map(|d| 0.5 * (hi[d] - lo[d]))
                .fold(f64::INFINITY, f64::min);
            let ball = solve_ball_radial(problem, radius, Init::Bump, &RadialOptions::default())?;
            for idx in 0..m {
                let pt = grid.point(
                    idx / (grid.n[1] * grid.n[2]),
                    (idx / grid.n[2]) % grid.n[1],
                    idx % grid.n[2],
                );
                let rr = crate::green::norm_diff(&pt, &center);
                if let Some((a, b)) = ball.eval_radial(rr) {
                    x[idx] = a;
                    x[m + idx] = b;
                }
            }
        }
    }

    let fail = |reason: String| LabError::ContinuationFailure {
        eps: problem.eps,
        reason,
    };
    let mut res = sys.residual(&x);
    let mut rnorm = norm2(&res);
    let mut scaled = sys.scaled(&res, &x);
    let mut iters = 0;
    let mut linear = 0;
    while scaled > opts.tol {
        if iters >= opts.max_newton {
            return Err(fail(format!(
                "box Newton stalled at scaled residual {scaled:e}"
            )));
        }
        iters += 1;
        let pd: Vec<f64> = x[m..].par_iter().map(|&vi| pos_dpow(vi, sys.p)).collect();
        let qd: Vec<f64> = x[..m]
            .par_iter()
            .map(|&ui| pos_dpow(ui, sys.q) + sys.e)
            .collect();
        let apply = |z: &[f64], out: &mut [f64]| {
            let (zu, zv) = z.split_at(m);
            let (ou, ov) = out.split_at_mut(m);
            neg_laplacian(&grid, zu, ou);
            neg_laplacian(&grid, zv, ov);
            ou.par_iter_mut()
                .zip(zv.par_iter().zip(pd.par_iter()))
                .for_each(|(o, (z, d))| *o -= d * z);
            ov.par_iter_mut()
                .zip(zu.par_iter().zip(qd.par_iter()))
                .for_each(|(o, (z, d))| *o -= d * z);
        };
        let precond = |z: &[f64], out: &mut [f64]| {
            out.copy_from_slice(z);
            let (ou, ov) = out.split_at_mut(m);
            sys.solver.solve_in_place(ou);
            sys.solver.solve_in_place(ov);
        };
        let b: Vec<f64> = res.iter().map(|r| -r).collect();
        let mut dx = vec![0.0; 2 * m];
        let forcing = (0.1 * scaled).clamp(1e-10, 1e-3);
        let info = gmres(
            apply,
            precond,
            &b,
            &mut dx,
            forcing,
            opts.gmres_restart,
            opts.gmres_max,
        );
        linear += info.iterations;
        if !info.converged && info.relative_residual > 0.5 {
            return Err(fail(format!(
                "GMRES reached only {:e}",
                info.relative_residual
            )));
        }
        let mut t = 1.0;
        loop {
            let xn: Vec<f64> = x
                .par_iter()
                .zip(dx.par_iter())
                .map(|(a, d)| a + t * d)
                .collect();
            let rn = sys.residual(&xn);
            let nn = norm2(&rn);
            if nn.is_finite() && nn <= (1.0 - 1e-4 * t) * rnorm {
                x = xn;
                res = rn;
                rnorm = nn;
                break;
            }
            t *= 0.5;
            if t < opts.damping_floor {
                return Err(fail(format!(
                    "box line search hit the damping floor at {scaled:e}"
                )));
            }
        }
        scaled = sys.scaled(&res, &x);
    }
    if x.iter().any(|&a| !(a > 0.0)) {
        return Err(LabError::Branch { eps: problem.eps });
    }
    let (u_in, v_in) = x.split_at(m);
    let uf = BoxField::from_interior(grid, u_in, |_| 0.0);
    let vf = BoxField::from_interior(grid, v_in, |_| 0.0);
    let (imax, &u_max) = u_in
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("grid");
    let x_peak = grid
        .point(
            imax / (grid.n[1] * grid.n[2]),
            (imax / grid.n[2]) % grid.n[1],
            imax % grid.n[2],
        )
        .to_vec();
    let mu = u_max.powf(-1.0 / sp.alpha_eps);
    let width = mu.powf(problem.length_exponent());
    let h = grid.h.iter().copied().fold(0.0, f64::max);
    if width < opts.min_cells * h {
        return Err(LabError::Resolution(format!(
            "peak width {width:.3e} is below {} cells of size {h:.3e}",
            opts.min_cells
        )));
    }
    let cell = grid.h[0] * grid.h[1] * grid.h[2];
    let q1 = problem.q() + 1.0;
    let int_u_q1 = cell * ordered_sum(u_in.par_iter().map(|&a| pos_pow(a, q1)));
    let faces = face_rule(&grid);
    let du_dn: Vec<f64> = faces.iter().map(|f| uf.normal_derivative(f)).collect();
    let dv_dn: Vec<f64> = faces.iter().map(|f| vf.normal_derivative(f)).collect();
    let boundary = faces
        .iter()
        .map(|f| BoundaryNode {
            point: f.point.to_vec(),
            normal: f.normal.to_vec(),
            weight: f.weight,
        })
        .collect();
    Ok(DomainSolution {
        params: sp,
        mode: problem.mode,
        eps: problem.eps,
        domain: domain.clone(),
        grid: SolutionGrid::Box { grid },
        u_field: uf.values,
        v_field: vf.values,
        du_dr: None,
        dv_dr: None,
        u_max,
        x_peak,
        mu,
        boundary,
        du_dn,
        dv_dn,
        int_u_q1,
        log: SolveLog {
            newton_iterations: iters,
            residual: scaled,
            linear_iterations: linear,
            wall_seconds: start.elapsed().as_secs_f64(),
            ..Default::default()
        },
    })
}

// ---------------------------------------------------------- continuation

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContinuationOptions {
    pub radial: RadialOptions,
    pub boxed: BoxOptions,
    /// Intermediate ε values tried before a failing step is abandoned.
    pub max_insertions: usize,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            radial: RadialOptions::default(),
            boxed: BoxOptions::default(),
            max_insertions: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuationStep {
    pub eps: f64,
    pub inserted: bool,
    pub newton_iterations: usize,
    pub linear_iterations: usize,
    pub residual: f64,
    pub polish_residual: Option<f64>,
    pub u_max: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ContinuationRun {
    pub eps_schedule: Vec<f64>,
    pub solutions: Vec<DomainSolution>,
    pub log: Vec<ContinuationStep>,
    /// Set when the branch could not be followed to the end of the schedule.
    pub stopped: Option<String>,
}

/// `start, start·ratio, …` down to `end` (inclusive up to rounding).
pub fn geometric_schedule(start: f64, end: f64, ratio: f64) -> Result<Vec<f64>> {
    if !(start > 0.0 && end > 0.0 && end <= start && ratio > 0.0 && ratio < 1.0) {
        return Err(LabError::Domain(format!(
            "bad schedule {start}:{end}:{ratio}"
        )));
    }
    let mut out = Vec::new();
    let mut e = start;
    while e >= end * (1.0 - 1e-9) {
        out.push(e);
        e *= ratio;
    }
    Ok(out)
}

/// Follows the branch along a decreasing ε schedule with warm starts.
pub fn run_continuation(
    base: &Problem,
    domain: &Domain,
    schedule: &[f64],
    opts: &ContinuationOptions,
) -> Result<ContinuationRun> {
    if schedule.is_empty() {
        return Err(LabError::Domain("empty schedule".into()));
    }
    if schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(LabError::Domain(
            "schedule must be strictly decreasing".into(),
        ));
    }
    let radius = match domain {
        Domain::Ball { center, radius } => {
            if center.iter().any(|c| *c != 0.0) {
                return Err(LabError::Domain("radial solves use a centred ball".into()));
            }
            if center.len() as f64 != base.params.n {
                return Err(LabError::Domain("ball dimension differs from N".into()));
            }
            Some(*radius)
        }
        Domain::Box { .. } => None,
    };
    let solve = |problem: &Problem, prev: &[DomainSolution]| -> Result<DomainSolution> {
        match radius {
            Some(r) => {
                let init = match prev {
                    [.., a, b] => Init::Secant(a, b),
                    [b] => Init::Previous(b),
                    [] => {
                        return solve_ball_radial(problem, r, Init::Bump, &opts.radial).or_else(
                            |_| solve_ball_radial(problem, r, Init::Shooting, &opts.radial),
                        );
                    }
                };
                solve_ball_radial(problem, r, init, &opts.radial).or_else(|e| {
                    solve_ball_radial(problem, r, Init::Shooting, &opts.radial).map_err(|_| e)
                })
            }
            None => solve_box_fd(problem, domain, prev.last(), &opts.boxed),
        }
    };
    let mut run = ContinuationRun {
        eps_schedule: schedule.to_vec(),
        solutions: Vec::new(),
        log: Vec::new(),
        stopped: None,
    };
    for &target in schedule {
        let mut pending = vec![target];
        let mut inserted = 0;
        while let Some(&eps) = pending.last() {
            let problem = base.with_eps(eps)?;
            match solve(&problem, &run.solutions) {
                Ok(sol) => {
                    run.log.push(ContinuationStep {
                        eps,
                        inserted: eps != target,
                        newton_iterations: sol.log.newton_iterations,
                        linear_iterations: sol.log.linear_iterations,
                        residual: sol.log.residual,
                        polish_residual: sol.log.polish_residual,
                        u_max: sol.u_max,
                        wall_seconds: sol.log.wall_seconds,
                    });
                    run.solutions.push(sol);
                    pending.pop();
                }
                Err(err @ LabError::ContinuationFailure { .. }) => {
                    let Some(prev) = run.solutions.last() else {
                        return Err(err);
                    };
                    if inserted >= opts.max_insertions {
                        run.stopped = Some(err.to_string());
                        return Ok(run);
                    }
                    inserted += 1;
                    pending.push((prev.eps * eps).sqrt());
                }
                Err(err) => {
                    if run.solutions.is_empty() {
                        return Err(err);
                    }
                    run.stopped = Some(err.to_string());
                    return Ok(run);
                }
            }
        }
    }
    Ok(run)
}

// ------------------------------------------------------------- rescaling

#[derive(Debug, Clone, Serialize)]
pub struct RescaleReport {
    pub mu: f64,
    pub mu_pow_eps: f64,
    /// `μ^{1-ε/2}`.
    pub length_scale: f64,
    /// Radius of the largest ball about the peak inside the rescaled domain.
    pub rescaled_extent: f64,
    pub compact_radius: f64,
    /// False when the rescaled domain does not contain `|y| <= 10`; the
    /// distances then cover the available part only.
    pub compact_covered: bool,
    pub sup_distance_u: f64,
    pub sup_distance_v: f64,
    pub domination_u: f64,
    pub domination_v: f64,
    /// `(|y|, u_{ε,μ}, v_{ε,μ}, U, V)` samples.
    #[serde(skip)]
    pub samples: Vec<[f64; 5]>,
}

/// Rescales a solution about its peak and compares it with the ground state.
pub fn rescale_solution(sol: &DomainSolution, gs: &GroundState) -> Result<RescaleReport> {
    let sp = &sol.params;
    if gs.params.p != sp.p || gs.params.n != sp.n {
        return Err(LabError::Composition(
            "ground state belongs to another (p, N)".into(),
        ));
    }
    let s = sol.length_scale();
    let cu = sol.mu.powf(sp.alpha_eps);
    let cv = sol.mu.powf(sp.beta);
    let compact = 10.0;
    let mut samples = Vec::new();
    let extent;
    match &sol.grid {
        SolutionGrid::Radial { r } => {
            extent = r.last().copied().unwrap_or(0.0) / s;
            for i in 0..r.len() - 1 {
                let y = r[i] / s;
                let (gu, gv) = ground_values(gs, y);
                samples.push([y, cu * sol.u_field[i], cv * sol.v_field[i], gu, gv]);
            }
        }
        SolutionGrid::Box { grid } => {
            extent = sol.domain.dist_to_boundary(&sol.x_peak) / s;
            let d = grid.n.map(|n| n + 2);
            for i in 1..d[0] - 1 {
                for j in 1..d[1] - 1 {
                    for k in 1..d[2] - 1 {
                        let pt = [grid.coord(0, i), grid.coord(1, j), grid.coord(2, k)];
                        let y = crate::green::norm_diff(&pt, &sol.x_peak) / s;
                        let idx = (i * d[1] + j) * d[2] + k;
                        let (gu, gv) = ground_values(gs, y);
                        samples.push([y, cu * sol.u_field[idx], cv * sol.v_field[idx], gu, gv]);
                    }
                }
            }
        }
    }
    let mut rep = RescaleReport {
        mu: sol.mu,
        mu_pow_eps: sol.mu.powf(sol.eps),
        length_scale: s,
        rescaled_extent: extent,
        compact_radius: compact,
        compact_covered: extent >= compact,
        sup_distance_u: 0.0,
        sup_distance_v: 0.0,
        domination_u: 0.0,
        domination_v: 0.0,
        samples: Vec::new(),
    };
    for smp in &samples {
        if smp[0] <= compact {
            rep.sup_distance_u = rep.sup_distance_u.max((smp[1] - smp[3]).abs());
            rep.sup_distance_v = rep.sup_distance_v.max((smp[2] - smp[4]).abs());
        }
        rep.domination_u = rep.domination_u.max(smp[1] / smp[3]);
        rep.domination_v = rep.domination_v.max(smp[2] / smp[4]);
    }
    rep.samples = samples;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_weights_exact_on_quartics() {
        let xs = [0.6, 0.7, 0.75, 0.9, 1.0];
        let w = derivative_weights(1.0, &xs);
        let f = |x: f64| 2.0 * x.powi(4) - x.powi(3) + 0.5 * x;
        let d: f64 = xs.iter().zip(&w).map(|(x, wi)| wi * f(*x)).sum();
        assert!((d - (8.0 - 3.0 + 0.5)).abs() < 1e-10);
    }

    #[test]
    fn meshes_span_the_radius() {
        for mesh in [
            RadialMesh::Uniform,
            RadialMesh::Graded,
            RadialMesh::Clustered { width: 0.01 },
        ] {
            let r = radial_mesh(mesh, 101, 2.0).unwrap();
            assert_eq!(r[0], 0.0);
            assert_eq!(r[100], 2.0);
            assert!(r.windows(2).all(|w| w[1] > w[0]));
        }
        let g = radial_mesh(RadialMesh::Graded, 101, 1.0).unwrap();
        assert!((g[1] - 0.005).abs() < 1e-4);
    }

    #[test]
    fn schedule_is_geometric() {
        let s = geometric_schedule(0.5, 0.02, 0.8).unwrap();
        assert_eq!(s.len(), 15);
        assert!((s[14] - 0.5 * 0.8f64.powi(14)).abs() < 1e-15);
    }

    #[test]
    fn mu_algebra() {
        // μ^{α_ε} u_max = 1 with u_max = 16, α_ε = 0.6.
        let mu = 16f64.powf(-1.0 / 0.6);
        assert!((mu - 0.00984).abs() < 1e-5);
    }
}
