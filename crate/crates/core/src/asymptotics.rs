//! Numerical checks of the blow-up laws: Pohozaev balance, rate fits,
//! limiting profiles, concentration and domination along a branch.
//!
//! Every limit is checked through trends and extrapolation over a
//! continuation branch; single-ε equalities are only used for identities
//! that hold exactly at each ε.

use std::io::Write;

use serde::Serialize;
use serde_json::{json, Value};

use crate::boxgreen::BoxGreen;
use crate::bundle::{iterated_green, BundleOptions, GreenBundle};
use crate::bvp::{ContinuationRun, DomainSolution, Mode, SolutionGrid};
use crate::error::{LabError, Result};
use crate::green::{green_ball, norm_diff, Domain};
use crate::ground_state::GroundState;
use crate::hyperbola::{Regime, SystemParams};
use crate::quadrature::{cumulative_hermite, weighted_line_fit};
use crate::special::sigma_n;

/// Uniform check record exported as JSON.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub inputs: Value,
    pub lhs: Value,
    pub rhs: Value,
    pub residual: f64,
    pub pass: bool,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn new(
        check: &str,
        inputs: Value,
        lhs: Value,
        rhs: Value,
        residual: f64,
        tolerance: f64,
    ) -> Self {
        Self {
            check: check.to_string(),
            inputs,
            lhs,
            rhs,
            residual,
            pass: residual.is_finite() && residual < tolerance,
            tolerance,
        }
    }
}

// ------------------------------------------------------------- Pohozaev

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PohozaevResult {
    pub lhs: f64,
    pub rhs: f64,
    pub rel_residual: f64,
}

/// Radial `σ_N ∫_0^R r^{N-1} f(u, v) dr` by the Hermite trapezoid rule,
/// given `f` and its derivative along the solution.
fn radial_integral<F, D>(sol: &DomainSolution, f: F, df: D) -> Result<f64>
where
    F: Fn(f64, f64) -> f64,
    D: Fn(f64, f64, f64, f64) -> f64,
{
    let SolutionGrid::Radial { r } = &sol.grid else {
        return Err(LabError::Precondition(
            "radial integral on a box solution".into(),
        ));
    };
    let (du, dv) = match (&sol.du_dr, &sol.dv_dr) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(LabError::Precondition(
                "radial derivatives are missing".into(),
            ))
        }
    };
    let n = sol.params.n;
    let vals: Vec<f64> = (0..r.len())
        .map(|i| r[i].powf(n - 1.0) * f(sol.u_field[i], sol.v_field[i]))
        .collect();
    let ders: Vec<f64> = (0..r.len())
        .map(|i| {
            let lead = if r[i] == 0.0 {
                0.0
            } else {
                (n - 1.0) * r[i].powf(n - 2.0) * f(sol.u_field[i], sol.v_field[i])
            };
            lead + r[i].powf(n - 1.0) * df(sol.u_field[i], sol.v_field[i], du[i], dv[i])
        })
        .collect();
    Ok(sigma_n(n)
        * cumulative_hermite(r, &vals, &ders)
            .last()
            .copied()
            .unwrap_or(0.0))
}

/// Trapezoid sum over box nodes (the fields vanish on the boundary).
fn box_integral<F: Fn(f64, f64) -> f64>(sol: &DomainSolution, f: F) -> Result<f64> {
    let SolutionGrid::Box { grid } = &sol.grid else {
        return Err(LabError::Precondition(
            "box integral on a radial solution".into(),
        ));
    };
    let cell = grid.h[0] * grid.h[1] * grid.h[2];
    Ok(cell
        * sol
            .u_field
            .iter()
            .zip(&sol.v_field)
            .map(|(u, v)| f(*u, *v))
            .sum::<f64>())
}

/// `∫_{x_0}^{c} f` of the piecewise cubic Hermite interpolant of
/// `(f, f')` on nodes `x`, with `c` clamped to the grid.
pub fn hermite_integral_to(x: &[f64], f: &[f64], df: &[f64], c: f64) -> f64 {
    if x.len() < 2 || c <= x[0] {
        return 0.0;
    }
    let c = c.min(x[x.len() - 1]);
    let mut acc = 0.0;
    for i in 0..x.len() - 1 {
        let h = x[i + 1] - x[i];
        if x[i + 1] <= c {
            acc += 0.5 * h * (f[i] + f[i + 1]) + h * h / 12.0 * (df[i] - df[i + 1]);
            continue;
        }
        let t = (c - x[i]) / h;
        let (t2, t3, t4) = (t * t, t * t * t, t * t * t * t);
        acc += h
            * (f[i] * (0.5 * t4 - t3 + t)
                + h * df[i] * (0.25 * t4 - 2.0 * t3 / 3.0 + 0.5 * t2)
                + f[i + 1] * (t3 - 0.5 * t4)
                + h * df[i + 1] * (0.25 * t4 - t3 / 3.0));
        break;
    }
    acc
}

fn pos_pow(x: f64, e: f64) -> f64 {
    if x > 0.0 {
        x.powf(e)
    } else {
        0.0
    }
}

/// Volume side of the Pohozaev balance: `ε∫u^{q_ε+1}` in exponent mode,
/// `ε(N/2 - α)∫u²` in perturbation mode.
pub fn pohozaev_volume_term(sol: &DomainSolution) -> Result<f64> {
    let sp = &sol.params;
    match sol.mode {
        Mode::NearlyCriticalExponent => {
            let q1 = sol.q() + 1.0;
            let int = match sol.grid {
                SolutionGrid::Radial { .. } => radial_integral(
                    sol,
                    |u, _| pos_pow(u, q1),
                    |u, _, du, _| q1 * pos_pow(u, q1 - 1.0) * du,
                )?,
                SolutionGrid::Box { .. } => box_integral(sol, |u, _| pos_pow(u, q1))?,
            };
            Ok(sol.eps * int)
        }
        Mode::LinearPerturbation => {
            let int = match sol.grid {
                SolutionGrid::Radial { .. } => {
                    radial_integral(sol, |u, _| u * u, |u, _, du, _| 2.0 * u * du)?
                }
                SolutionGrid::Box { .. } => box_integral(sol, |u, _| u * u)?,
            };
            Ok(sol.eps * (0.5 * sp.n - sp.alpha) * int)
        }
    }
}

/// Boundary side `∫ ∂_n u ∂_n v (n, x - y) ds`.
pub fn pohozaev_boundary_term(sol: &DomainSolution, y: &[f64]) -> Result<f64> {
    if sol.boundary.is_empty()
        || sol.du_dn.len() != sol.boundary.len()
        || sol.dv_dn.len() != sol.boundary.len()
    {
        return Err(LabError::Precondition("boundary traces are missing".into()));
    }
    if y.len() != sol.boundary[0].point.len() {
        return Err(LabError::Domain(
            "base point dimension differs from the domain".into(),
        ));
    }
    Ok(sol
        .boundary
        .iter()
        .zip(sol.du_dn.iter().zip(&sol.dv_dn))
        .map(|(node, (a, b))| {
            let xn: f64 = node
                .normal
                .iter()
                .zip(node.point.iter().zip(y))
                .map(|(n, (x, yy))| n * (x - yy))
                .sum();
            node.weight * a * b * xn
        })
        .sum())
}

/// Both sides of the Pohozaev balance at base point `y`.
pub fn pohozaev_residual(sol: &DomainSolution, y: &[f64]) -> Result<PohozaevResult> {
    let lhs = pohozaev_volume_term(sol)?;
    let rhs = pohozaev_boundary_term(sol, y)?;
    Ok(PohozaevResult {
        lhs,
        rhs,
        rel_residual: (lhs - rhs).abs() / lhs.abs().max(1e-300),
    })
}

/// Relative change of the boundary side between two base points.
pub fn pohozaev_drift(sol: &DomainSolution, y1: &[f64], y2: &[f64]) -> Result<f64> {
    let a = pohozaev_boundary_term(sol, y1)?;
    let b = pohozaev_boundary_term(sol, y2)?;
    Ok((a - b).abs() / a.abs().max(1e-300))
}

/// The vector `∫ ∂_n u ∂_n v n ds`, which vanishes for exact solutions.
pub fn boundary_flux_vector(sol: &DomainSolution) -> Result<Vec<f64>> {
    if sol.boundary.is_empty() {
        return Err(LabError::Precondition("boundary traces are missing".into()));
    }
    let d = sol.boundary[0].normal.len();
    let mut out = vec![0.0; d];
    for (node, (a, b)) in sol.boundary.iter().zip(sol.du_dn.iter().zip(&sol.dv_dn)) {
        for k in 0..d {
            out[k] += node.weight * a * b * node.normal[k];
        }
    }
    Ok(out)
}

pub fn pohozaev_report(sol: &DomainSolution, y: &[f64], tolerance: f64) -> Result<CheckReport> {
    let r = pohozaev_residual(sol, y)?;
    Ok(CheckReport::new(
        "pohozaev",
        json!({"p": sol.params.p, "N": sol.params.n, "eps": sol.eps, "mode": sol.mode.as_str(), "y": y}),
        json!(r.lhs),
        json!(r.rhs),
        r.rel_residual,
        tolerance,
    ))
}

// ------------------------------------------------------------ predictions

/// Theorem-level limit `ε·u_max^{exponent}·(ln u_max)^{log_power} → constant`.
#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub law: String,
    pub regime: Regime,
    pub exponent: f64,
    pub log_power: i32,
    /// Constant as stated by the theorem.
    pub constant: Option<f64>,
    /// Constant obtained by inserting the limiting profiles into the
    /// Pohozaev balance.
    pub pohozaev_constant: f64,
}

fn check_critical(params: &SystemParams, gs: &GroundState) -> Result<()> {
    if (gs.params.p - params.p).abs() > 1e-12 || gs.params.n != params.n {
        return Err(LabError::Composition(format!(
            "ground state (p={}, N={}) does not match (p={}, N={})",
            gs.params.p, gs.params.n, params.p, params.n
        )));
    }
    if gs.params.eps != 0.0 {
        return Err(LabError::Composition(
            "ground state must be at the critical pair".into(),
        ));
    }
    Ok(())
}

fn green_phi_t(params: &SystemParams, green: &GreenBundle) -> Result<f64> {
    if green.p.is_none_or(|p| (p - params.p).abs() > 1e-12) {
        return Err(LabError::Composition(
            "Green bundle was built for another p".into(),
        ));
    }
    green.phi_t.ok_or_else(|| {
        LabError::Composition("subcritical prediction needs the iterated Robin value".into())
    })
}

/// `S^{(1-pq)/(p(q+1))}`.
fn sobolev_factor(params: &SystemParams, gs: &GroundState) -> f64 {
    let (p, q) = (params.p, params.q);
    gs.s.powf((1.0 - p * q) / (p * (q + 1.0)))
}

/// Blow-up rate of `u_max` in the nearly critical exponent problem.
pub fn theorem2_prediction(
    params: &SystemParams,
    gs: &GroundState,
    green: &GreenBundle,
) -> Result<Prediction> {
    check_critical(params, gs)?;
    let (n, a) = (params.n, params.alpha);
    let sf = sobolev_factor(params, gs);
    let phi = green.phi.abs();
    let regime = params.regime();
    Ok(match regime {
        Regime::TailSupercritical => {
            let int_vp = gs
                .int_vp
                .ok_or_else(|| LabError::Composition("∫V^p diverges; not supercritical".into()))?;
            Prediction {
                law: "eps*u_max^((N-2)/alpha)".into(),
                regime,
                exponent: (n - 2.0) / a,
                log_power: 0,
                constant: Some(sf * gs.int_uq * int_vp * phi),
                pohozaev_constant: (n - 2.0) * gs.int_uq * int_vp * phi / gs.int_uq1,
            }
        }
        Regime::TailLogarithmic => {
            let tail = gs.a.powf(n / (n - 2.0)) / a;
            Prediction {
                law: "eps*u_max^((N-2)/alpha)/ln(u_max)".into(),
                regime,
                exponent: (n - 2.0) / a,
                log_power: -1,
                constant: Some(tail * sf * gs.int_uq * phi),
                pohozaev_constant: (n - 2.0) * tail * gs.int_uq * phi / gs.int_uq1,
            }
        }
        Regime::TailSubcritical => {
            let phi_t = green_phi_t(params, green)?.abs();
            let k = params.p * (n - 2.0);
            let m = gs.int_uq.powf(params.p + 1.0);
            Prediction {
                law: "eps*u_max^((p(N-2)-2)/alpha)".into(),
                regime,
                exponent: (k - 2.0) / a,
                log_power: 0,
                constant: Some(sf * m * phi_t),
                pohozaev_constant: a * m * phi_t / gs.int_uq1,
            }
        }
    })
}

/// Case of the linearly perturbed problem selected by the parameter
/// windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbedCase {
    /// `α > 1`, `N > 4`, tail-supercritical.
    Supercritical,
    /// `(N+4)/(2(N-2)) < p < N/(N-2)`.
    Subcritical,
    /// `p = (N+4)/(2(N-2))`: logarithmically divergent `∫U²`.
    Borderline,
    /// `N = 4`, `p = q = 3`.
    FourDimensional,
}

impl PerturbedCase {
    pub fn as_str(&self) -> &'static str {
        match self {
            PerturbedCase::Supercritical => "supercritical",
            PerturbedCase::Subcritical => "subcritical",
            PerturbedCase::Borderline => "borderline",
            PerturbedCase::FourDimensional => "four-dimensional",
        }
    }
}

/// Selects the perturbed-theorem case or names the violated inequality.
pub fn perturbed_window(p: f64, n: f64) -> Result<PerturbedCase> {
    let params = SystemParams::critical(p, n)?;
    let tol = 1e-9;
    let border = (n + 4.0) / (2.0 * (n - 2.0));
    if (n - 4.0).abs() < tol && (p - 3.0).abs() < tol {
        return Ok(PerturbedCase::FourDimensional);
    }
    if (p - border).abs() < tol {
        return Ok(PerturbedCase::Borderline);
    }
    match params.regime() {
        Regime::TailSubcritical => {
            if p > border {
                Ok(PerturbedCase::Subcritical)
            } else {
                Err(LabError::Window(format!(
                    "p = {p} must exceed (N+4)/(2(N-2)) = {border} (int U^2 diverges)"
                )))
            }
        }
        Regime::TailLogarithmic => Err(LabError::Window(format!(
            "p = N/(N-2) = {p} is not covered by the perturbed theorem"
        ))),
        Regime::TailSupercritical => {
            if !(n > 4.0) {
                Err(LabError::Window(format!("N = {n} must exceed 4")))
            } else if !(params.alpha > 1.0) {
                Err(LabError::Window(format!(
                    "alpha = {} must exceed 1",
                    params.alpha
                )))
            } else {
                Ok(PerturbedCase::Supercritical)
            }
        }
    }
}

/// Blow-up law of the linearly perturbed problem.
pub fn perturbed_prediction(
    params: &SystemParams,
    gs: &GroundState,
    green: &GreenBundle,
) -> Result<(PerturbedCase, Prediction)> {
    check_critical(params, gs)?;
    let case = perturbed_window(params.p, params.n)?;
    let (n, a, p) = (params.n, params.alpha, params.p);
    let k = p * (n - 2.0);
    let weight = 0.5 * n - a;
    let phi = green.phi.abs();
    let regime = params.regime();
    let pred = match case {
        PerturbedCase::Supercritical => {
            let int_u2 = gs
                .int_u2
                .ok_or_else(|| LabError::Window("int U^2 diverges".into()))?;
            let int_vp = gs
                .int_vp
                .ok_or_else(|| LabError::Window("int V^p diverges".into()))?;
            Prediction {
                law: "eps*u_max^(2-2/alpha)".into(),
                regime,
                exponent: 2.0 - 2.0 / a,
                log_power: 0,
                constant: Some(gs.int_uq * int_vp * phi / int_u2),
                pohozaev_constant: (n - 2.0) * gs.int_uq * int_vp * phi / (weight * int_u2),
            }
        }
        PerturbedCase::Subcritical => {
            let int_u2 = gs
                .int_u2
                .ok_or_else(|| LabError::Window("int U^2 diverges".into()))?;
            let phi_t = green_phi_t(params, green)?.abs();
            Prediction {
                law: "eps*u_max^(2-(2+N-p(N-2))/alpha)".into(),
                regime,
                exponent: 2.0 - (2.0 + n - k) / a,
                log_power: 0,
                constant: None,
                pohozaev_constant: a * gs.int_uq.powf(p + 1.0) * phi_t / (weight * int_u2),
            }
        }
        PerturbedCase::Borderline => {
            // ∫_{|y|<L} U² ≈ σ_N b² ln L with L = u_max^{1/α}.
            let phi_t = green_phi_t(params, green)?.abs();
            let log_mass = sigma_n(n) * gs.b * gs.b / a;
            Prediction {
                law: "eps*ln(u_max)*u_max^(2-(2+N-p(N-2))/alpha)".into(),
                regime,
                exponent: 2.0 - (2.0 + n - k) / a,
                log_power: 1,
                constant: None,
                pohozaev_constant: a * gs.int_uq.powf(p + 1.0) * phi_t / (weight * log_mass),
            }
        }
        PerturbedCase::FourDimensional => {
            let int_vp = gs
                .int_vp
                .ok_or_else(|| LabError::Window("int V^p diverges".into()))?;
            let log_mass = sigma_n(n) * gs.b * gs.b / a;
            Prediction {
                law: "eps*ln(u_max)".into(),
                regime,
                exponent: 2.0 - 2.0 / a,
                log_power: 1,
                constant: None,
                pohozaev_constant: (n - 2.0) * gs.int_uq * int_vp * phi / (weight * log_mass),
            }
        }
    };
    Ok((case, pred))
}

// -------------------------------------------------------------- rate fits

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RateEntry {
    pub eps: f64,
    pub u_max: f64,
    pub mu: f64,
    /// `φ(x_peak)` or `φ̃(x_peak)`, whichever enters the prediction.
    pub phi_or_phit_at_peak: f64,
    pub int_u_q1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RateSeries {
    pub entries: Vec<RateEntry>,
    pub regime: Regime,
    pub mode: Mode,
}

impl RateSeries {
    pub fn from_solutions(solutions: &[DomainSolution], phi_value: f64) -> Result<Self> {
        let first = solutions
            .first()
            .ok_or_else(|| LabError::Data("empty branch".into()))?;
        Ok(Self {
            entries: solutions
                .iter()
                .map(|s| RateEntry {
                    eps: s.eps,
                    u_max: s.u_max,
                    mu: s.mu,
                    phi_or_phit_at_peak: phi_value,
                    int_u_q1: s.int_u_q1,
                })
                .collect(),
            regime: first.params.regime(),
            mode: first.mode,
        })
    }

    /// Entries with `ε <= eps_max`.
    pub fn tail(&self, eps_max: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .copied()
                .filter(|e| e.eps <= eps_max)
                .collect(),
            regime: self.regime,
            mode: self.mode,
        }
    }

    /// Checks that ε decreases and `u_max` increases strictly.
    pub fn validate(&self) -> Result<()> {
        if self.entries.len() < 4 {
            return Err(LabError::Data(format!(
                "rate fit needs at least 4 entries, got {}",
                self.entries.len()
            )));
        }
        for w in self.entries.windows(2) {
            if !(w[1].eps < w[0].eps) {
                return Err(LabError::Data(format!(
                    "eps not strictly decreasing at {}",
                    w[1].eps
                )));
            }
            if !(w[1].u_max > w[0].u_max) {
                return Err(LabError::Data(format!(
                    "u_max not increasing between eps = {} ({}) and eps = {} ({})",
                    w[0].eps, w[0].u_max, w[1].eps, w[1].u_max
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RateFit {
    pub fitted_exponent: f64,
    pub exponent_std_error: f64,
    pub fitted_constant: f64,
    pub constant_std_error: f64,
    pub predicted_exponent: f64,
    pub predicted_constant: Option<f64>,
    pub pohozaev_constant: f64,
    /// Extrapolation of the scaled values to ε → 0.
    pub extrapolated_constant: f64,
    pub log_power: i32,
    /// Log-space residuals of the regression, per entry.
    pub residuals: Vec<f64>,
    /// `ε·u_max^{predicted}·(ln u_max)^{log_power}` per entry.
    pub scaled_values: Vec<f64>,
    /// Running extrapolation using entries up to each index.
    pub extrapolated: Vec<Option<f64>>,
    pub entries: Vec<RateEntry>,
}

impl RateFit {
    /// CSV `eps,u_max,mu,scaled_value,extrapolated`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| LabError::Io(std::io::Error::other(e));
        wr.write_record(["eps", "u_max", "mu", "scaled_value", "extrapolated"])
            .map_err(io)?;
        for (i, e) in self.entries.iter().enumerate() {
            let ex = self.extrapolated[i]
                .map(|x| format!("{x:.12e}"))
                .unwrap_or_default();
            wr.write_record([
                format!("{:.12e}", e.eps),
                format!("{:.12e}", e.u_max),
                format!("{:.12e}", e.mu),
                format!("{:.12e}", self.scaled_values[i]),
                ex,
            ])
            .map_err(io)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Limit of `s(ε) = C + A ε^γ` from the last three samples, with γ fitted;
/// falls back to first-order elimination when the samples do not fit such
/// a law.
pub fn extrapolate_to_zero(eps: &[f64], s: &[f64]) -> Option<f64> {
    let n = eps.len();
    if n < 2 {
        return None;
    }
    let first_order = || {
        let (e1, e2, s1, s2) = (eps[n - 2], eps[n - 1], s[n - 2], s[n - 1]);
        (e1 * s2 - e2 * s1) / (e1 - e2)
    };
    if n < 3 {
        return Some(first_order());
    }
    let (e1, e2, e3) = (eps[n - 3], eps[n - 2], eps[n - 1]);
    let (s1, s2, s3) = (s[n - 3], s[n - 2], s[n - 1]);
    let d12 = s1 - s2;
    let d23 = s2 - s3;
    if d12 == 0.0 || d23 == 0.0 || d12.signum() != d23.signum() {
        return Some(first_order());
    }
    let target = d12 / d23;
    let ratio = |g: f64| (e1.powf(g) - e2.powf(g)) / (e2.powf(g) - e3.powf(g));
    let (mut lo, mut hi) = (1e-3, 6.0);
    let (flo, fhi) = (ratio(lo) - target, ratio(hi) - target);
    if flo.signum() == fhi.signum() {
        return Some(first_order());
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (ratio(mid) - target).signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let g = 0.5 * (lo + hi);
    let a = d23 / (e2.powf(g) - e3.powf(g));
    Some(s3 - a * e3.powf(g))
}

fn scaled_value(e: &RateEntry, exponent: f64, log_power: i32) -> f64 {
    e.eps * e.u_max.powf(exponent) * e.u_max.ln().powi(log_power)
}

/// Weighted log-log regression plus extrapolation of the scaled sequence.
pub fn rate_fit(series: &RateSeries, prediction: &Prediction) -> Result<RateFit> {
    series.validate()?;
    let lp = prediction.log_power;
    let xs: Vec<f64> = series.entries.iter().map(|e| e.u_max.ln()).collect();
    let ys: Vec<f64> = series
        .entries
        .iter()
        .map(|e| e.eps.ln() + lp as f64 * e.u_max.ln().ln())
        .collect();
    let ws: Vec<f64> = series.entries.iter().map(|e| 1.0 / e.eps).collect();
    let (c0, c1, se0, se1, residuals) = weighted_line_fit(&xs, &ys, &ws);
    let scaled: Vec<f64> = series
        .entries
        .iter()
        .map(|e| scaled_value(e, prediction.exponent, lp))
        .collect();
    let eps: Vec<f64> = series.entries.iter().map(|e| e.eps).collect();
    let extrapolated: Vec<Option<f64>> = (0..eps.len())
        .map(|i| {
            if i >= 2 {
                extrapolate_to_zero(&eps[..=i], &scaled[..=i])
            } else {
                None
            }
        })
        .collect();
    let constant = c0.exp();
    Ok(RateFit {
        fitted_exponent: -c1,
        exponent_std_error: se1,
        fitted_constant: constant,
        constant_std_error: constant * se0,
        predicted_exponent: prediction.exponent,
        predicted_constant: prediction.constant,
        pohozaev_constant: prediction.pohozaev_constant,
        extrapolated_constant: extrapolated.last().copied().flatten().unwrap_or(f64::NAN),
        log_power: lp,
        residuals,
        scaled_values: scaled,
        extrapolated,
        entries: series.entries.clone(),
    })
}

/// Rate fit for a perturbation-mode branch after the window checks.
pub fn perturbed_rate_check(
    series: &RateSeries,
    gs: &GroundState,
    green: &GreenBundle,
) -> Result<(PerturbedCase, RateFit)> {
    if series.mode != Mode::LinearPerturbation {
        return Err(LabError::Precondition(
            "series was not produced in perturbation mode".into(),
        ));
    }
    let params = gs.params;
    let (case, pred) = perturbed_prediction(&params, gs, green)?;
    Ok((case, rate_fit(series, &pred)?))
}

// --------------------------------------------------------------- profiles

/// Limit fields at one evaluation point.
#[derive(Debug, Clone, Serialize)]
pub struct LimitSample {
    pub x: Vec<f64>,
    pub g: f64,
    pub g_tilde: Option<f64>,
}

/// `G(·, x0)` (and `G̃` in the tail-subcritical regime) at `points`.
pub fn limit_samples(
    domain: &Domain,
    x0: &[f64],
    p: f64,
    points: &[Vec<f64>],
) -> Result<Vec<LimitSample>> {
    let n = domain.dim();
    let regime = crate::hyperbola::classify_regime(p, n as f64);
    let g: Vec<f64> = match domain {
        Domain::Ball { center, radius } => {
            let shift =
                |x: &[f64]| -> Vec<f64> { x.iter().zip(center).map(|(a, b)| a - b).collect() };
            points
                .iter()
                .map(|y| green_ball(&shift(x0), &shift(y), *radius, n))
                .collect::<Result<_>>()?
        }
        Domain::Box { .. } => {
            let src = [x0[0], x0[1], x0[2]];
            let bg = BoxGreen::new(domain, src, 63)?;
            points
                .iter()
                .map(|y| bg.green([y[0], y[1], y[2]]))
                .collect()
        }
    };
    let gt = if regime == Regime::TailSubcritical {
        Some(iterated_green(
            domain,
            p,
            x0,
            points,
            &BundleOptions::default(),
        )?)
    } else {
        None
    };
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, x)| LimitSample {
            x: x.clone(),
            g: g[i],
            g_tilde: gt.as_ref().map(|v| v[i]),
        })
        .collect())
}

/// Points `t·e_1` for `t` in `[lo, hi]` about the centre of a ball.
pub fn radial_eval_set(n: usize, lo: f64, hi: f64, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| {
            let mut x = vec![0.0; n];
            x[0] = lo + (hi - lo) * i as f64 / (count.max(2) - 1) as f64;
            x
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileReport {
    pub eps: f64,
    pub u_max: f64,
    /// Sup relative error of `u_max·v_ε` against `(∫U^q)·G`.
    pub v_error: f64,
    /// Sup relative error of the regime-scaled `u_ε` against its limit.
    pub u_error: Option<f64>,
    pub u_law: String,
    pub points: usize,
}

/// Compares the scaled solution with its Green's-function limits away from
/// the peak.
pub fn theorem3_profile_check(
    sol: &DomainSolution,
    gs: &GroundState,
    samples: &[LimitSample],
) -> Result<ProfileReport> {
    check_critical(&SystemParams::critical(sol.params.p, sol.params.n)?, gs)?;
    let diam = sol.domain.diameter();
    for s in samples {
        if norm_diff(&s.x, &sol.x_peak) < 0.2 * diam {
            return Err(LabError::Precondition(format!(
                "evaluation point {:?} is within 0.2·diam of the peak",
                s.x
            )));
        }
    }
    let sp = &sol.params;
    let (n, a, b, p) = (sp.n, sp.alpha, sp.beta, sp.p);
    let m = sol.u_max;
    let mut v_error: f64 = 0.0;
    let mut u_error: Option<f64> = None;
    let (u_scale, u_coef, law): (f64, Option<f64>, &str) = match sp.regime() {
        Regime::TailSupercritical => (
            m.powf(b / a),
            gs.int_vp,
            "u_max^(beta/alpha)*u -> (int V^p)*G",
        ),
        Regime::TailLogarithmic => (
            m.powf(b / a) / m.ln(),
            Some(gs.a.powf(n / (n - 2.0)) / a),
            "u_max^(beta/alpha)/ln(u_max)*u -> (1/alpha)a^(N/(N-2))*G",
        ),
        Regime::TailSubcritical => (
            m.powf((b + p * (n - 2.0) - n) / a),
            Some(gs.int_uq.powf(p)),
            "u_max^((beta+p(N-2)-N)/alpha)*u -> (int U^q)^p*Gt",
        ),
    };
    for s in samples {
        let (u, v) = sol.value_at(&s.x)?;
        let lim_v = gs.int_uq * s.g;
        v_error = v_error.max((m * v / lim_v - 1.0).abs());
        let lim_u = match sp.regime() {
            Regime::TailSubcritical => s.g_tilde.zip(u_coef).map(|(gt, c)| c * gt),
            _ => u_coef.map(|c| c * s.g),
        };
        if let Some(l) = lim_u {
            let e = (u_scale * u / l - 1.0).abs();
            u_error = Some(u_error.map_or(e, |x: f64| x.max(e)));
        }
    }
    Ok(ProfileReport {
        eps: sol.eps,
        u_max: m,
        v_error,
        u_error,
        u_law: law.into(),
        points: samples.len(),
    })
}

// --------------------------------------------------------- concentration

#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationReport {
    pub eps: f64,
    /// Radius `c·μ^{1-ε/2}` of the concentration ball.
    pub radius: f64,
    pub inside: f64,
    pub total: f64,
    pub fraction: f64,
}

/// Share of `∫v^{p+1}` inside `|x - x_peak| <= factor·μ^{1-ε/2}`.
pub fn concentration(sol: &DomainSolution, factor: f64) -> Result<ConcentrationReport> {
    let p1 = sol.params.p + 1.0;
    let rho = factor * sol.length_scale();
    let (inside, total) = match &sol.grid {
        SolutionGrid::Radial { r } => {
            let dv = sol
                .dv_dr
                .as_ref()
                .ok_or_else(|| LabError::Precondition("radial derivatives missing".into()))?;
            let n = sol.params.n;
            let f = |i: usize| r[i].powf(n - 1.0) * pos_pow(sol.v_field[i], p1);
            let df = |i: usize| {
                let lead = if r[i] == 0.0 {
                    0.0
                } else {
                    (n - 1.0) * r[i].powf(n - 2.0) * pos_pow(sol.v_field[i], p1)
                };
                lead + r[i].powf(n - 1.0) * p1 * pos_pow(sol.v_field[i], p1 - 1.0) * dv[i]
            };
            let vals: Vec<f64> = (0..r.len()).map(f).collect();
            let ders: Vec<f64> = (0..r.len()).map(df).collect();
            let total = *cumulative_hermite(r, &vals, &ders).last().unwrap_or(&0.0);
            let inside = hermite_integral_to(r, &vals, &ders, rho);
            let s = sigma_n(n);
            (s * inside, s * total)
        }
        SolutionGrid::Box { grid } => {
            let d = grid.n.map(|k| k + 2);
            let cell = grid.h[0] * grid.h[1] * grid.h[2];
            let mut inside = 0.0;
            let mut total = 0.0;
            for i in 0..d[0] {
                for j in 0..d[1] {
                    for k in 0..d[2] {
                        let idx = (i * d[1] + j) * d[2] + k;
                        let w = cell * pos_pow(sol.v_field[idx], p1);
                        total += w;
                        let x = [grid.coord(0, i), grid.coord(1, j), grid.coord(2, k)];
                        if norm_diff(&x, &sol.x_peak) <= rho {
                            inside += w;
                        }
                    }
                }
            }
            (inside, total)
        }
    };
    Ok(ConcentrationReport {
        eps: sol.eps,
        radius: rho,
        inside,
        total,
        fraction: inside / total,
    })
}

/// `h(μ)` in the consistency bound `ε <= C μ^{N-2} h(μ)`.
pub fn consistency_h(params: &SystemParams, mu: f64) -> f64 {
    match params.regime() {
        Regime::TailSupercritical => 1.0,
        Regime::TailLogarithmic => mu.ln().abs(),
        Regime::TailSubcritical => mu.powf(params.p * (params.n - 2.0) - params.n),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BranchEntry {
    pub eps: f64,
    pub u_max: f64,
    pub mu: f64,
    pub mu_pow_eps: f64,
    pub sup_distance_u: f64,
    pub sup_distance_v: f64,
    pub compact_covered: bool,
    pub domination_u: f64,
    pub domination_v: f64,
    pub mass_fraction: f64,
    pub consistency_ratio: f64,
    /// `sup(u, v)` outside `|x - x_peak| > R/2`.
    pub outer_sup_u: f64,
    pub outer_sup_v: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BranchReport {
    pub entries: Vec<BranchEntry>,
    /// Largest domination ratio over the branch.
    pub k: f64,
    pub min_mu_pow_eps: f64,
    pub consistency_range: (f64, f64),
    pub mass_fraction_at_smallest_eps: f64,
}

/// Concentration, domination and consistency bounds along a branch.
pub fn branch_report(
    run: &ContinuationRun,
    gs: &GroundState,
    mass_factor: f64,
) -> Result<BranchReport> {
    let mut entries = Vec::new();
    for sol in &run.solutions {
        let resc = crate::bvp::rescale_solution(sol, gs)?;
        let conc = concentration(sol, mass_factor)?;
        let h = consistency_h(&sol.params, sol.mu);
        let (outer_u, outer_v) = outer_sup(sol);
        entries.push(BranchEntry {
            eps: sol.eps,
            u_max: sol.u_max,
            mu: sol.mu,
            mu_pow_eps: resc.mu_pow_eps,
            sup_distance_u: resc.sup_distance_u,
            sup_distance_v: resc.sup_distance_v,
            compact_covered: resc.compact_covered,
            domination_u: resc.domination_u,
            domination_v: resc.domination_v,
            mass_fraction: conc.fraction,
            consistency_ratio: sol.eps / (sol.mu.powf(sol.params.n - 2.0) * h),
            outer_sup_u: outer_u,
            outer_sup_v: outer_v,
        });
    }
    let last = entries
        .last()
        .ok_or_else(|| LabError::Data("empty branch".into()))?;
    let mass_last = last.mass_fraction;
    let k = entries
        .iter()
        .map(|e| e.domination_u.max(e.domination_v))
        .fold(0.0, f64::max);
    let min_mu = entries
        .iter()
        .map(|e| e.mu_pow_eps)
        .fold(f64::INFINITY, f64::min);
    let cr = entries.iter().map(|e| e.consistency_ratio);
    let range = (
        cr.clone().fold(f64::INFINITY, f64::min),
        cr.fold(0.0, f64::max),
    );
    Ok(BranchReport {
        entries,
        k,
        min_mu_pow_eps: min_mu,
        consistency_range: range,
        mass_fraction_at_smallest_eps: mass_last,
    })
}

fn outer_sup(sol: &DomainSolution) -> (f64, f64) {
    let (mut su, mut sv) = (0.0f64, 0.0f64);
    match &sol.grid {
        SolutionGrid::Radial { r } => {
            let half = 0.5 * r.last().copied().unwrap_or(0.0);
            for i in 0..r.len() {
                if r[i] > half {
                    su = su.max(sol.u_field[i]);
                    sv = sv.max(sol.v_field[i]);
                }
            }
        }
        SolutionGrid::Box { grid } => {
            let d = grid.n.map(|k| k + 2);
            let half = 0.25 * sol.domain.diameter() / 3f64.sqrt();
            for i in 0..d[0] {
                for j in 0..d[1] {
                    for k in 0..d[2] {
                        let x = [grid.coord(0, i), grid.coord(1, j), grid.coord(2, k)];
                        if norm_diff(&x, &sol.x_peak) > half {
                            let idx = (i * d[1] + j) * d[2] + k;
                            su = su.max(sol.u_field[idx]);
                            sv = sv.max(sol.v_field[idx]);
                        }
                    }
                }
            }
        }
    }
    (su, sv)
}

/// Ground-state mass share `∫_{|y|<=c} V^{p+1} / ∫V^{p+1}`: the ε → 0
/// limit of [`concentration`].
pub fn ground_state_mass_fraction(gs: &GroundState, c: f64) -> Result<f64> {
    let pr = &gs.profile;
    let n = gs.params.n;
    let p1 = gs.params.p + 1.0;
    if c > pr.r_max {
        return Err(LabError::Domain(format!("radius {c} outside the profile")));
    }
    let vals: Vec<f64> = (0..pr.len())
        .map(|k| pr.r[k].powf(n - 1.0) * pr.v[k].powf(p1))
        .collect();
    let ders: Vec<f64> = (0..pr.len())
        .map(|k| {
            let lead = if pr.r[k] == 0.0 {
                0.0
            } else {
                (n - 1.0) * pr.r[k].powf(n - 2.0) * pr.v[k].powf(p1)
            };
            lead + pr.r[k].powf(n - 1.0) * p1 * pr.v[k].powf(p1 - 1.0) * pr.dv[k]
        })
        .collect();
    let inside = hermite_integral_to(&pr.r, &vals, &ders, c);
    Ok(sigma_n(n) * inside / gs.int_vp1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extrapolation_recovers_power_law_limit() {
        let eps: Vec<f64> = (0..6).map(|k| 0.5 * 0.8f64.powi(k)).collect();
        let s: Vec<f64> = eps.iter().map(|e| 2.0 + 3.0 * e.powf(0.7)).collect();
        let c = extrapolate_to_zero(&eps, &s).unwrap();
        assert!((c - 2.0).abs() < 1e-9, "{c}");
    }

    #[test]
    fn partial_hermite_integral_is_exact_for_cubics() {
        let x: Vec<f64> = (0..7).map(|i| 0.3 * i as f64).collect();
        let f: Vec<f64> = x.iter().map(|t| t * t * t - t).collect();
        let d: Vec<f64> = x.iter().map(|t| 3.0 * t * t - 1.0).collect();
        let c: f64 = 1.13;
        let exact = c.powi(4) / 4.0 - c * c / 2.0;
        assert!((hermite_integral_to(&x, &f, &d, c) - exact).abs() < 1e-13);
    }

    #[test]
    fn windows_select_cases() {
        assert_eq!(
            perturbed_window(1.0, 9.0).unwrap(),
            PerturbedCase::Subcritical
        );
        assert_eq!(
            perturbed_window(1.0, 8.0).unwrap(),
            PerturbedCase::Borderline
        );
        assert_eq!(
            perturbed_window(3.0, 4.0).unwrap(),
            PerturbedCase::FourDimensional
        );
        assert!(matches!(
            perturbed_window(5.0, 3.0),
            Err(LabError::Window(_))
        ));
    }
}
