//! Radial ground state of the limit system on ℝ^N.
//!
//! `U'' + (N-1)/r U' = -V^p`, `V'' + (N-1)/r V' = -U^q`, `U(0) = 1`,
//! `V(0) = v0`, with `v0` fixed by bisection between a shot in which `U`
//! changes sign first (v0 too large) and one in which `V` does (v0 too small).

use std::io::Write;

use serde::Serialize;
use serde_json::json;

use crate::error::{LabError, Result};
use crate::hyperbola::{Regime, SystemParams};
use crate::ode::{integrate, Control, OdeOptions, Step};
use crate::quadrature::{cumulative_hermite, richardson};
use crate::special::{gamma_upper, sigma_n};

/// Sampled radial profile `(U, V)` with derivatives.
#[derive(Debug, Clone, Serialize)]
pub struct RadialProfile {
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    pub r_max: f64,
}

impl RadialProfile {
    fn with_capacity(n: usize) -> Self {
        Self {
            r: Vec::with_capacity(n),
            u: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
            du: Vec::with_capacity(n),
            dv: Vec::with_capacity(n),
            r_max: 0.0,
        }
    }

    fn push(&mut self, r: f64, y: &[f64; 4]) {
        self.r.push(r);
        self.u.push(y[0]);
        self.du.push(y[1]);
        self.v.push(y[2]);
        self.dv.push(y[3]);
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// Index of the grid node equal to `r` (exact match within 1e-12).
    pub fn node(&self, r: f64) -> Option<usize> {
        let i = self.r.partition_point(|&x| x < r * (1.0 - 1e-12));
        (i < self.len() && (self.r[i] - r).abs() <= 1e-12 * r.max(1.0)).then_some(i)
    }

    /// Cubic Hermite interpolation of `(U, V)` at `r`; `None` beyond the grid.
    pub fn eval(&self, r: f64) -> Option<(f64, f64)> {
        if r < 0.0 || r > self.r_max || self.is_empty() {
            return None;
        }
        let i = self.r.partition_point(|&x| x <= r).clamp(1, self.len() - 1);
        let (r0, r1) = (self.r[i - 1], self.r[i]);
        let h = r1 - r0;
        let s = (r - r0) / h;
        let herm = |y0: f64, d0: f64, y1: f64, d1: f64| {
            let (s2, s3) = (s * s, s * s * s);
            (2.0 * s3 - 3.0 * s2 + 1.0) * y0
                + (s3 - 2.0 * s2 + s) * h * d0
                + (-2.0 * s3 + 3.0 * s2) * y1
                + (s3 - s2) * h * d1
        };
        Some((
            herm(self.u[i - 1], self.du[i - 1], self.u[i], self.du[i]),
            herm(self.v[i - 1], self.dv[i - 1], self.v[i], self.dv[i]),
        ))
    }

    /// Writes the profile as CSV `r,U,V,dU,dV`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "r,U,V,dU,dV")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                self.r[i], self.u[i], self.v[i], self.du[i], self.dv[i]
            )?;
        }
        Ok(())
    }
}

/// Which component changed sign first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Component {
    U,
    V,
}

#[derive(Debug, Clone)]
pub enum ShootOutcome {
    CrossedZeroAt { radius: f64, component: Component },
    GrewBeyondBound { radius: f64 },
    Decayed(RadialProfile),
}

/// Sampling of the radial grid: uniform on `[0, 1]`, log-spaced beyond.
#[derive(Debug, Clone, Copy)]
pub struct GridSpec {
    pub points_unit: usize,
    pub points_per_decade: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points_unit: 1000,
            points_per_decade: 400,
        }
    }
}

impl GridSpec {
    /// Grid nodes on `(0, r_max]`; every decade `10^k <= r_max` is a node.
    pub fn nodes(&self, r_max: f64) -> Vec<f64> {
        let mut g: Vec<f64> = (1..=self.points_unit)
            .map(|i| i as f64 / self.points_unit as f64)
            .filter(|&r| r <= r_max)
            .collect();
        let mut k = 0i32;
        'outer: loop {
            let base = 10f64.powi(k);
            for j in 1..=self.points_per_decade {
                let r = if j == self.points_per_decade {
                    10f64.powi(k + 1)
                } else {
                    base * 10f64.powf(j as f64 / self.points_per_decade as f64)
                };
                if r > r_max * (1.0 + 1e-14) {
                    break 'outer;
                }
                g.push(r);
            }
            k += 1;
        }
        if g.last().is_none_or(|&l| l < r_max * (1.0 - 1e-12)) {
            g.push(r_max);
        }
        g
    }
}

#[inline]
pub(crate) fn spow(x: f64, e: f64) -> f64 {
    if x >= 0.0 {
        x.powf(e)
    } else {
        -(-x).powf(e)
    }
}

/// Radius up to which the Taylor start is used.
pub(crate) fn series_radius(p: f64, q: f64, u0: f64, v0: f64) -> f64 {
    let su = (v0.powf(p) / u0).max(1e-300);
    let sv = (u0.powf(q) / v0).max(1e-300);
    1e-3 * su.max(sv).max(1.0).powf(-0.5)
}

/// Taylor start `[U, U', V, V']` at `r` for the radial system with
/// `-ΔU = V^p`, `-ΔV = U^q + e·U`.
pub(crate) fn series_start(n: f64, p: f64, q: f64, e: f64, u0: f64, v0: f64, r: f64) -> [f64; 4] {
    let u2 = -v0.powf(p) / (2.0 * n);
    let v2 = -(u0.powf(q) + e * u0) / (2.0 * n);
    let u4 = -p * v0.powf(p - 1.0) * v2 / (4.0 * (n + 2.0));
    let v4 = -(q * u0.powf(q - 1.0) + e) * u2 / (4.0 * (n + 2.0));
    let r2 = r * r;
    [
        u0 + u2 * r2 + u4 * r2 * r2,
        2.0 * u2 * r + 4.0 * u4 * r2 * r,
        v0 + v2 * r2 + v4 * r2 * r2,
        2.0 * v2 * r + 4.0 * v4 * r2 * r,
    ]
}

/// Right-hand side of the radial system in first-order form.
#[inline]
pub(crate) fn radial_rhs(n: f64, p: f64, q: f64, e: f64, r: f64, y: &[f64; 4]) -> [f64; 4] {
    let c = (n - 1.0) / r;
    [
        y[1],
        -spow(y[2], p) - c * y[1],
        y[3],
        -spow(y[0], q) - e * y[0] - c * y[3],
    ]
}

fn ode_opts() -> OdeOptions {
    OdeOptions {
        rtol: 1e-12,
        atol: 1e-300,
        ..OdeOptions::default()
    }
}

/// Integrates the ground-state system from the origin.
///
/// Returns the first sign change, a blow-up past ten times the initial
/// values, or the profile sampled on `grid` when neither happens before
/// `r_max`.
pub fn shoot(params: &SystemParams, v0: f64, r_max: f64) -> Result<ShootOutcome> {
    shoot_on(params, v0, r_max, &GridSpec::default())
}

pub fn shoot_on(
    params: &SystemParams,
    v0: f64,
    r_max: f64,
    grid: &GridSpec,
) -> Result<ShootOutcome> {
    if !(v0 > 0.0 && v0.is_finite()) {
        return Err(LabError::Domain(format!("v0 = {v0} must be positive")));
    }
    if !(r_max > 1.0) {
        return Err(LabError::Domain(format!("r_max = {r_max} must exceed 1")));
    }
    let nodes = grid.nodes(r_max);
    Ok(run_shot(params, v0, r_max, Some(&nodes))?.0)
}

/// Runs one shot; the second value holds the nodes sampled before the shot
/// was classified.
fn run_shot(
    params: &SystemParams,
    v0: f64,
    r_max: f64,
    nodes: Option<&[f64]>,
) -> Result<(ShootOutcome, RadialProfile)> {
    let (n, p, q) = (params.n, params.p, params.q);
    let rs = series_radius(p, q, 1.0, v0);
    let y0 = series_start(n, p, q, 0.0, 1.0, v0, rs);
    let mut profile = RadialProfile::with_capacity(nodes.map_or(0, |g| g.len() + 1));
    let mut stops = Vec::new();
    if let Some(g) = nodes {
        profile.push(0.0, &[1.0, 0.0, v0, 0.0]);
        // Nodes inside the series zone come from the Taylor polynomial.
        for &r in g.iter().filter(|&&r| r <= rs) {
            profile.push(r, &series_start(n, p, q, 0.0, 1.0, v0, r));
        }
        stops.extend(g.iter().copied().filter(|&r| r > rs));
    }
    let mut event: Option<ShootOutcome> = None;
    let mut next = 0usize;
    let observer = |s: &Step<4>| {
        let first = match (s.root(0), s.root(2)) {
            (Some(a), Some(b)) if a <= b => Some((a, Component::U)),
            (Some(_), Some(b)) => Some((b, Component::V)),
            (Some(a), None) => Some((a, Component::U)),
            (None, Some(b)) => Some((b, Component::V)),
            (None, None) => None,
        };
        if let Some((radius, component)) = first {
            event = Some(ShootOutcome::CrossedZeroAt { radius, component });
            return Control::Stop;
        }
        if s.y1[0].abs() > 10.0 || s.y1[2].abs() > 10.0 * v0 {
            event = Some(ShootOutcome::GrewBeyondBound { radius: s.t1 });
            return Control::Stop;
        }
        while next < stops.len() && stops[next] <= s.t1 {
            if stops[next] == s.t1 {
                profile.push(s.t1, &s.y1);
            }
            next += 1;
        }
        Control::Continue
    };
    integrate(
        |r, y| radial_rhs(n, p, q, 0.0, r, y),
        rs,
        y0,
        r_max,
        &stops,
        &ode_opts(),
        observer,
    )?;
    profile.r_max = *profile.r.last().unwrap_or(&0.0);
    match event {
        Some(ev) => Ok((ev, profile)),
        None => Ok((ShootOutcome::Decayed(profile.clone()), profile)),
    }
}

/// Settings for [`find_ground_state_with`].
#[derive(Debug, Clone)]
pub struct GroundStateOptions {
    /// Relative width at which the v0 bisection stops.
    pub tol: f64,
    /// Allowed relative drift of the tail constant `a` over the last decade.
    pub tail_tol: f64,
    pub r_max: f64,
    /// Largest truncation radius reached by automatic raising.
    pub r_max_cap: f64,
    pub v0_bracket: (f64, f64),
    /// Relative gap between the two bracketing trajectories up to which the
    /// outward shot is trusted.
    pub gap_tol: f64,
    pub grid: GridSpec,
}

impl Default for GroundStateOptions {
    fn default() -> Self {
        Self {
            tol: 1e-13,
            tail_tol: 1e-6,
            r_max: 1e4,
            r_max_cap: 1e7,
            v0_bracket: (1e-3, 1e3),
            gap_tol: 1e-9,
            grid: GridSpec::default(),
        }
    }
}

/// Ground state with tail constants and integral norms.
#[derive(Debug, Clone, Serialize)]
pub struct GroundState {
    pub params: SystemParams,
    pub regime: Regime,
    pub profile: RadialProfile,
    pub v0: f64,
    /// `lim r^{N-2} V`.
    pub a: f64,
    /// Regime-weighted limit of `U`.
    pub b: f64,
    #[serde(rename = "S")]
    pub s: f64,
    pub int_uq: f64,
    pub int_vp: Option<f64>,
    pub int_uq1: f64,
    pub int_vp1: f64,
    pub int_u2: Option<f64>,
    pub diagnostics: GroundStateDiagnostics,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroundStateDiagnostics {
    pub v0_bracket: (f64, f64),
    pub bisection_steps: usize,
    /// Radius where the bracketing trajectories separate by `gap_tol`.
    pub trust_radius: f64,
    /// Radius where the outward shot meets the inward tail solution.
    pub r_match: f64,
    /// Scaled mismatch of `(U, U', V, V')` at `r_match`.
    pub match_residual: f64,
    /// Coefficient of the homogeneous `r^{2-N}` mode of `U`.
    pub d: f64,
    /// Relative change of `a` when the truncation radius drops a decade.
    pub a_drift: f64,
    /// Richardson plateau of `r^{N-2} V` at the truncation radius.
    pub a_plateau: f64,
    /// Regime-weighted plateau (log-slope fit in the log regime) of `U`.
    pub b_plateau: f64,
    pub b_drift: f64,
    pub tol: f64,
    pub tail_tol: f64,
}

pub fn find_ground_state(params: &SystemParams, tol: f64) -> Result<GroundState> {
    find_ground_state_with(
        params,
        &GroundStateOptions {
            tol,
            ..Default::default()
        },
    )
}

/// Classification for bisection: `true` when v0 is too large.
fn too_large(params: &SystemParams, v0: f64, r_far: f64) -> Result<Option<bool>> {
    Ok(match run_shot(params, v0, r_far, None)?.0 {
        ShootOutcome::CrossedZeroAt {
            component: Component::U,
            ..
        } => Some(true),
        ShootOutcome::CrossedZeroAt {
            component: Component::V,
            ..
        } => Some(false),
        ShootOutcome::GrewBeyondBound { .. } | ShootOutcome::Decayed(_) => None,
    })
}

/// Bisects `v0` on a log scale; returns the final bracket and step count.
fn bisect_v0(params: &SystemParams, opts: &GroundStateOptions) -> Result<(f64, f64, usize)> {
    let r_far = 1e15;
    let (mut lo, mut hi) = opts.v0_bracket;
    if too_large(params, lo, r_far)? != Some(false) || too_large(params, hi, r_far)? != Some(true) {
        return Err(LabError::Bracketing {
            lo,
            hi,
            reason: "endpoints do not produce opposite first crossings".into(),
        });
    }
    let mut steps = 0;
    while hi / lo - 1.0 > opts.tol && steps < 400 {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        steps += 1;
        match too_large(params, mid, r_far)? {
            Some(true) => hi = mid,
            Some(false) => lo = mid,
            None => {
                // No sign change before r_far: the shot is the ground state
                // to working precision.
                lo = mid;
                hi = mid;
            }
        }
    }
    Ok((lo, hi, steps))
}

pub fn find_ground_state_with(
    params: &SystemParams,
    opts: &GroundStateOptions,
) -> Result<GroundState> {
    if params.eps != 0.0 {
        return Err(LabError::Precondition(format!(
            "ground states need the critical pair, got eps = {}",
            params.eps
        )));
    }
    if !(opts.tol > 0.0 && opts.tail_tol > 0.0) {
        return Err(LabError::Domain("tolerances must be positive".into()));
    }
    let (lo, hi, steps) = bisect_v0(params, opts)?;
    let v0 = (lo * hi).sqrt();

    // How far the outward shot can be trusted.
    let mut r_max = opts.r_max.max(1e3);
    let nodes = opts.grid.nodes(r_max);
    let (_, fwd) = run_shot(params, v0, r_max, Some(&nodes))?;
    let trust = if lo == hi {
        fwd.r_max
    } else {
        let (_, lo_prof) = run_shot(params, lo, r_max, Some(&nodes))?;
        let (_, hi_prof) = run_shot(params, hi, r_max, Some(&nodes))?;
        trust_radius(&lo_prof, &hi_prof, opts.gap_tol).min(fwd.r_max)
    };
    let limit = trust.min(r_max / 100.0);
    let r_match = fwd.r[fwd.r.partition_point(|&x| x <= limit).saturating_sub(1)];
    if r_match < 1.0 {
        return Err(LabError::TailExtraction {
            drift: f64::INFINITY,
            limit: opts.tail_tol,
        });
    }

    let fwd_nodes = &nodes[..=nodes.partition_point(|&r| r < r_match)];
    let guess = initial_tail_guess(params, &fwd, v0, r_match)?;
    let mut fit = match_tails(params, guess, fwd_nodes, r_max, &opts.grid)?;
    let mut prev = match_tails(params, fit.x, fwd_nodes, r_max / 10.0, &opts.grid)?;
    let mut drift = ((fit.x[1] - prev.x[1]) / fit.x[1]).abs();
    while drift > opts.tail_tol && r_max * 10.0 <= opts.r_max_cap {
        r_max *= 10.0;
        prev = fit;
        fit = match_tails(params, prev.x, fwd_nodes, r_max, &opts.grid)?;
        drift = ((fit.x[1] - prev.x[1]) / fit.x[1]).abs();
    }
    if drift > 10.0 * opts.tail_tol {
        return Err(LabError::TailExtraction {
            drift,
            limit: 10.0 * opts.tail_tol,
        });
    }

    let [v0, a, d] = fit.x;
    let profile = stitched_profile(params, v0, a, d, r_match, r_max, &opts.grid)?;
    let b = tail_b(params, a, d);
    let (a_plateau, b_plateau) = plateaus(params, &profile)?;
    let ints = profile_integrals(params, &profile, a, b)?;
    let s = sobolev_quotient(params, ints.int_vp1, ints.int_uq1);
    Ok(GroundState {
        params: *params,
        regime: params.regime(),
        profile,
        v0,
        a,
        b,
        s,
        int_uq: ints.int_uq,
        int_vp: ints.int_vp,
        int_uq1: ints.int_uq1,
        int_vp1: ints.int_vp1,
        int_u2: ints.int_u2,
        diagnostics: GroundStateDiagnostics {
            v0_bracket: (lo, hi),
            bisection_steps: steps,
            trust_radius: trust,
            r_match,
            match_residual: fit.residual,
            d,
            a_drift: drift,
            a_plateau,
            b_plateau,
            b_drift: ((b - b_plateau) / b).abs(),
            tol: opts.tol,
            tail_tol: opts.tail_tol,
        },
    })
}

/// Largest radius up to which the two bracketing trajectories agree to
/// `gap_tol` relative.
fn trust_radius(lo: &RadialProfile, hi: &RadialProfile, gap_tol: f64) -> f64 {
    let m = lo.len().min(hi.len());
    for i in 0..m {
        let gu = (lo.u[i] - hi.u[i]).abs() / lo.u[i].abs().max(1e-300);
        let gv = (lo.v[i] - hi.v[i]).abs() / lo.v[i].abs().max(1e-300);
        if gu.max(gv) > gap_tol {
            return lo.r[i.saturating_sub(1)];
        }
    }
    lo.r[m - 1]
}

fn value_at(profile: &RadialProfile, r: f64) -> Result<(usize, f64, f64)> {
    let i = profile
        .node(r)
        .ok_or_else(|| LabError::Resolution(format!("radius {r} is not a grid node")))?;
    Ok((i, profile.u[i], profile.v[i]))
}

/// Coefficient and exponent of the particular `r^{2-k}` part of `U`,
/// `k = p(N-2)`, driven by `V ~ a r^{2-N}` (absent in the log regime).
fn u_particular(params: &SystemParams, a: f64) -> Option<(f64, f64)> {
    let (n, p) = (params.n, params.p);
    let k = p * (n - 2.0);
    (params.regime() != Regime::TailLogarithmic).then(|| (a.powf(p) / ((k - 2.0) * (n - k)), k))
}

/// Regime-appropriate tail constant `b` of `U` from `(a, d)`.
fn tail_b(params: &SystemParams, a: f64, d: f64) -> f64 {
    match params.regime() {
        Regime::TailSupercritical => d,
        Regime::TailSubcritical => u_particular(params, a).map_or(f64::NAN, |(c, _)| c),
        Regime::TailLogarithmic => a.powf(params.p) / (params.n - 2.0),
    }
}

/// Leading two-term asymptotics `[U, U', V, V']` at large `r` for the
/// decaying solution with tail data `(a, d)`.
fn asymptotic_state(params: &SystemParams, a: f64, d: f64, r: f64) -> [f64; 4] {
    let (n, q) = (params.n, params.q);
    let (u, du, lead) = match u_particular(params, a) {
        Some((c, k)) => {
            let u = d * r.powf(2.0 - n) + c * r.powf(2.0 - k);
            let du = (2.0 - n) * d * r.powf(1.0 - n) + (2.0 - k) * c * r.powf(1.0 - k);
            let lead = if k > n { (d, n - 2.0) } else { (c, k - 2.0) };
            (u, du, Some(lead))
        }
        None => {
            let b = tail_b(params, a, d);
            let w = b * r.ln() + d;
            (
                r.powf(2.0 - n) * w,
                r.powf(1.0 - n) * ((2.0 - n) * w + b),
                None,
            )
        }
    };
    let (mut v, mut dv) = (a * r.powf(2.0 - n), (2.0 - n) * a * r.powf(1.0 - n));
    if let Some((cu, th)) = lead {
        let m = th * q;
        if m > n {
            let cv = spow(cu, q) / ((m - 2.0) * (n - m));
            v += cv * r.powf(2.0 - m);
            dv += (2.0 - m) * cv * r.powf(1.0 - m);
        }
    }
    [u, du, v, dv]
}

/// `a` from the shell theorem at a grid radius `r`:
/// `(N-2)σ_N a = -σ_N r^{N-1} V'(r) + ∫_{|y|>r} U^q`, the outer mass taken
/// from the local power law of `U`.
fn a_shell(params: &SystemParams, profile: &RadialProfile, r: f64) -> Result<f64> {
    let (i, u, _) = value_at(profile, r)?;
    let (n, q) = (params.n, params.q);
    let theta = -profile.du[i] * r / u;
    let k = theta * q - n;
    let outer = if k > 0.0 {
        u.powf(q) * r.powf(n) / k
    } else {
        0.0
    };
    Ok((-r.powf(n - 1.0) * profile.dv[i] + outer) / (n - 2.0))
}

fn initial_tail_guess(
    params: &SystemParams,
    fwd: &RadialProfile,
    v0: f64,
    r: f64,
) -> Result<[f64; 3]> {
    let n = params.n;
    let a = a_shell(params, fwd, r)?;
    let (i, u, v) = value_at(fwd, r)?;
    let d = match params.regime() {
        Regime::TailSupercritical => {
            let theta_v = -fwd.dv[i] * r / v;
            let k = theta_v * params.p - n;
            let outer = if k > 0.0 {
                v.powf(params.p) * r.powf(n) / k
            } else {
                0.0
            };
            (-r.powf(n - 1.0) * fwd.du[i] + outer) / (n - 2.0)
        }
        Regime::TailSubcritical => {
            let (c, k) = u_particular(params, a).unwrap_or((0.0, n));
            (u - c * r.powf(2.0 - k)) * r.powf(n - 2.0)
        }
        Regime::TailLogarithmic => u * r.powf(n - 2.0) - tail_b(params, a, 0.0) * r.ln(),
    };
    Ok([v0, a, d])
}

/// State `[U, U', V, V']` at the last of `nodes` along the outward shot
/// with `U(0) = 1`. Sampling the same nodes as the stored profile keeps
/// the two bitwise identical.
fn outward_state(params: &SystemParams, v0: f64, nodes: &[f64]) -> Result<[f64; 4]> {
    let r = *nodes
        .last()
        .ok_or_else(|| LabError::Resolution("empty node set".into()))?;
    let (outcome, pr) = run_shot(params, v0, r, Some(nodes))?;
    match outcome {
        ShootOutcome::Decayed(_) if pr.r_max == r => {
            let i = pr.len() - 1;
            Ok([pr.u[i], pr.du[i], pr.v[i], pr.dv[i]])
        }
        _ => Err(LabError::Integration {
            radius: pr.r_max,
            reason: "outward shot left the positive cone".into(),
        }),
    }
}

/// Integrates inward from `r_far` (asymptotic data) to `r_in`, sampling
/// the nodes in between. Returned samples are in increasing `r`.
fn inward(
    params: &SystemParams,
    a: f64,
    d: f64,
    r_in: f64,
    r_far: f64,
    nodes: &[f64],
) -> Result<([f64; 4], Vec<(f64, [f64; 4])>)> {
    let (n, p, q) = (params.n, params.p, params.q);
    let y0 = asymptotic_state(params, a, d, r_far);
    let stops: Vec<f64> = nodes
        .iter()
        .rev()
        .filter(|&&r| r > r_in && r < r_far)
        .map(|r| -r)
        .collect();
    let mut samples = vec![(r_far, y0)];
    let (_, y) = integrate(
        |s, y| {
            let f = radial_rhs(n, p, q, 0.0, -s, y);
            [-f[0], -f[1], -f[2], -f[3]]
        },
        -r_far,
        y0,
        -r_in,
        &stops,
        &ode_opts(),
        |st| {
            if stops.binary_search_by(|x| x.total_cmp(&st.t1)).is_ok() {
                samples.push((-st.t1, st.y1));
            }
            Control::Continue
        },
    )?;
    samples.reverse();
    Ok((y, samples))
}

#[derive(Debug, Clone, Copy)]
struct TailFit {
    x: [f64; 3],
    residual: f64,
}

/// Gauss–Newton on `(v0, a, d)` so that the outward shot and the inward
/// tail solution agree at `r_match`.
///
/// The inward leg samples the same nodes as the stored profile: the
/// `r^{2-N}` mode grows inward, so its amount depends on the step sequence
/// and must be fitted for the exact integration that is kept.
fn match_tails(
    params: &SystemParams,
    x0: [f64; 3],
    fwd_nodes: &[f64],
    r_far: f64,
    grid: &GridSpec,
) -> Result<TailFit> {
    let in_nodes = grid.nodes(r_far);
    let r_match = *fwd_nodes
        .last()
        .ok_or_else(|| LabError::Resolution("empty node set".into()))?;
    let scale = outward_state(params, x0[0], fwd_nodes)?.map(|y| y.abs().max(1e-300));
    let residual = |x: &[f64; 3]| -> Result<[f64; 4]> {
        let f = outward_state(params, x[0], fwd_nodes)?;
        let (g, _) = inward(params, x[1], x[2], r_match, r_far, &in_nodes)?;
        Ok([0, 1, 2, 3].map(|i| (f[i] - g[i]) / scale[i]))
    };
    let norm = |r: &[f64; 4]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut x = x0;
    let mut res = residual(&x)?;
    for _ in 0..40 {
        let mut jac = [0.0; 12];
        for j in 0..3 {
            let h = 1e-7 * x[j].abs().max(1e-12);
            let mut xp = x;
            xp[j] += h;
            let rp = residual(&xp)?;
            for i in 0..4 {
                jac[i * 3 + j] = (rp[i] - res[i]) / h;
            }
        }
        let neg: Vec<f64> = res.iter().map(|v| -v).collect();
        let dx = crate::linalg::lstsq(&jac, &neg, 4, 3)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let xn = [x[0] + t * dx[0], x[1] + t * dx[1], x[2] + t * dx[2]];
            if let Ok(rn) = residual(&xn) {
                if norm(&rn) < norm(&res) || norm(&rn) < 1e-14 {
                    x = xn;
                    res = rn;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        let step = (0..3).map(|j| (dx[j] / x[j]).abs()).fold(0.0, f64::max);
        if !accepted || step < 1e-14 || norm(&res) < 1e-14 {
            break;
        }
    }
    let r = norm(&res);
    if !(r < 1e-8) {
        return Err(LabError::TailExtraction {
            drift: r,
            limit: 1e-8,
        });
    }
    Ok(TailFit { x, residual: r })
}

fn stitched_profile(
    params: &SystemParams,
    v0: f64,
    a: f64,
    d: f64,
    r_match: f64,
    r_max: f64,
    grid: &GridSpec,
) -> Result<RadialProfile> {
    let nodes = grid.nodes(r_max);
    let (_, mut profile) = run_shot(
        params,
        v0,
        r_match,
        Some(&nodes[..=nodes.partition_point(|&r| r < r_match)]),
    )?;
    let (_, samples) = inward(params, a, d, r_match, r_max, &nodes)?;
    for (r, y) in samples {
        if r > profile.r_max {
            profile.push(r, &y);
        }
    }
    profile.r_max = *profile.r.last().unwrap_or(&0.0);
    Ok(profile)
}

/// Plateau estimates of `a` and `b` read directly off the profile over
/// its last decade.
fn plateaus(params: &SystemParams, profile: &RadialProfile) -> Result<(f64, f64)> {
    let n = params.n;
    let r1 = profile.r_max;
    let r0 = r1 / 10.0;
    let theta = params.u_tail_exponent();
    let q = params.q;
    let gv = theta * q - n;
    let w_v = |r: f64| -> Result<f64> { Ok(r.powf(n - 2.0) * value_at(profile, r)?.2) };
    let w_u = |r: f64| -> Result<f64> { Ok(r.powf(theta) * value_at(profile, r)?.1) };
    let a = richardson(w_v(r0)?, w_v(r1)?, 10.0, gv);
    let b = match params.regime() {
        Regime::TailLogarithmic => log_fit(profile, n, r0, r1)?,
        Regime::TailSupercritical => richardson(w_u(r0)?, w_u(r1)?, 10.0, params.p * (n - 2.0) - n),
        Regime::TailSubcritical => richardson(w_u(r0)?, w_u(r1)?, 10.0, n - params.p * (n - 2.0)),
    };
    Ok((a, b))
}

/// Least-squares slope of `r^{N-2} U` against `ln r` on `[r_lo, r_hi]`.
fn log_fit(profile: &RadialProfile, n: f64, r_lo: f64, r_hi: f64) -> Result<f64> {
    let i0 = profile
        .node(r_lo)
        .ok_or_else(|| LabError::Resolution("log fit start".into()))?;
    let i1 = profile
        .node(r_hi)
        .ok_or_else(|| LabError::Resolution("log fit end".into()))?;
    let xs: Vec<f64> = profile.r[i0..=i1].iter().map(|r| r.ln()).collect();
    let ys: Vec<f64> = (i0..=i1)
        .map(|i| profile.r[i].powf(n - 2.0) * profile.u[i])
        .collect();
    let w = vec![1.0; xs.len()];
    Ok(crate::quadrature::weighted_line_fit(&xs, &ys, &w).1)
}

/// Closed-form `b` in terms of `a`, for the logarithmic and subcritical
/// regimes.
pub fn b_from_a(params: &SystemParams, a: f64) -> Option<f64> {
    match params.regime() {
        Regime::TailSupercritical => None,
        _ => Some(tail_b(params, a, 0.0)),
    }
}

/// Integral norms of a ground state.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Integrals {
    pub int_uq: f64,
    pub int_vp: Option<f64>,
    pub int_uq1: f64,
    pub int_vp1: f64,
    pub int_u2: Option<f64>,
}

/// `∫_R^∞ r^{N-1} (c r^{-θ})^s dr`, or `None` when divergent.
fn power_tail(n: f64, c: f64, theta: f64, s: f64, r: f64) -> Option<f64> {
    let k = theta * s - n;
    (k > 0.0).then(|| c.powf(s) * r.powf(-k) / k)
}

/// `∫_R^∞ r^{N-1} (b r^{2-N} ln r)^s dr`, or `None` when divergent.
fn log_tail(n: f64, b: f64, s: f64, r: f64) -> Option<f64> {
    let k = (n - 2.0) * s - n;
    (k > 0.0).then(|| b.powf(s) * gamma_upper(s + 1.0, k * r.ln()) / k.powf(s + 1.0))
}

/// `σ_N ∫_0^∞ r^{N-1} f^s dr` with `f ∈ {U, V}` from the sampled profile
/// plus the analytic tail. `None` when the tail diverges.
fn radial_power_integral(
    params: &SystemParams,
    profile: &RadialProfile,
    use_u: bool,
    s: f64,
    a: f64,
    b: f64,
) -> Option<f64> {
    let n = params.n;
    let r_end = profile.r_max;
    let tail = if use_u {
        match params.regime() {
            Regime::TailLogarithmic => log_tail(n, b, s, r_end),
            _ => power_tail(n, b, params.u_tail_exponent(), s, r_end),
        }
    } else {
        power_tail(n, a, n - 2.0, s, r_end)
    }?;
    let (vals, ders) = if use_u {
        (&profile.u, &profile.du)
    } else {
        (&profile.v, &profile.dv)
    };
    let f: Vec<f64> = profile
        .r
        .iter()
        .zip(vals.iter())
        .map(|(r, x)| r.powf(n - 1.0) * x.powf(s))
        .collect();
    let df: Vec<f64> = (0..profile.len())
        .map(|i| {
            let (r, x, dx) = (profile.r[i], vals[i], ders[i]);
            let lead = if n == 1.0 {
                0.0
            } else if r == 0.0 {
                0.0
            } else {
                (n - 1.0) * r.powf(n - 2.0) * x.powf(s)
            };
            lead + s * r.powf(n - 1.0) * x.powf(s - 1.0) * dx
        })
        .collect();
    let body = cumulative_hermite(&profile.r, &f, &df)
        .last()
        .copied()
        .unwrap_or(0.0);
    Some(sigma_n(n) * (body + tail))
}

pub fn profile_integrals(
    params: &SystemParams,
    profile: &RadialProfile,
    a: f64,
    b: f64,
) -> Result<Integrals> {
    let (p, q) = (params.p, params.q);
    let need = |x: Option<f64>, what: &str| {
        x.ok_or_else(|| LabError::Data(format!("{what} diverges for this ground state")))
    };
    Ok(Integrals {
        int_uq: need(
            radial_power_integral(params, profile, true, q, a, b),
            "int U^q",
        )?,
        int_vp: radial_power_integral(params, profile, false, p, a, b),
        int_uq1: need(
            radial_power_integral(params, profile, true, q + 1.0, a, b),
            "int U^(q+1)",
        )?,
        int_vp1: need(
            radial_power_integral(params, profile, false, p + 1.0, a, b),
            "int V^(p+1)",
        )?,
        int_u2: radial_power_integral(params, profile, true, 2.0, a, b),
    })
}

/// `∫V^{p+1} / (∫U^{q+1})^{(p+1)/(p(q+1))}`.
pub fn sobolev_quotient(params: &SystemParams, int_vp1: f64, int_uq1: f64) -> f64 {
    let (p, q) = (params.p, params.q);
    int_vp1 / int_uq1.powf((p + 1.0) / (p * (q + 1.0)))
}

/// Recomputes `S` from the stored profile and tail constants.
pub fn sobolev_constant(gs: &GroundState, params: &SystemParams) -> Result<f64> {
    let ints = profile_integrals(params, &gs.profile, gs.a, gs.b)?;
    Ok(sobolev_quotient(params, ints.int_vp1, ints.int_uq1))
}

impl GroundState {
    /// Critical dilation `U_λ(r) = λ^α U(λr)`, `V_λ(r) = λ^β V(λr)`.
    pub fn dilate(&self, lambda: f64) -> GroundState {
        let sp = &self.params;
        let (al, be) = (lambda.powf(sp.alpha), lambda.powf(sp.beta));
        let mut out = self.clone();
        let pr = &mut out.profile;
        for i in 0..pr.len() {
            pr.r[i] /= lambda;
            pr.u[i] *= al;
            pr.v[i] *= be;
            pr.du[i] *= al * lambda;
            pr.dv[i] *= be * lambda;
        }
        pr.r_max /= lambda;
        out.v0 *= be;
        out.a *= be * lambda.powf(2.0 - sp.n);
        let theta = sp.u_tail_exponent();
        out.b *= al * lambda.powf(-theta);
        if sp.regime() == Regime::TailLogarithmic {
            // U ~ b r^{2-N} ln r; the shift ln(λr) = ln r + ln λ only moves
            // the subleading constant.
            out.b = self.b * al * lambda.powf(2.0 - sp.n);
        }
        out
    }

    /// `σ_N ∫_0^R r^{N-1} U^q dr` at a grid node `R`.
    pub fn mass_uq(&self, r: f64) -> Result<f64> {
        let (i, _, _) = value_at(&self.profile, r)?;
        let pr = &self.profile;
        let n = self.params.n;
        let q = self.params.q;
        let f: Vec<f64> = (0..=i)
            .map(|k| pr.r[k].powf(n - 1.0) * pr.u[k].powf(q))
            .collect();
        let df: Vec<f64> = (0..=i)
            .map(|k| {
                let (r, u, du) = (pr.r[k], pr.u[k], pr.du[k]);
                let lead = if r == 0.0 {
                    0.0
                } else {
                    (n - 1.0) * r.powf(n - 2.0) * u.powf(q)
                };
                lead + q * r.powf(n - 1.0) * u.powf(q - 1.0) * du
            })
            .collect();
        Ok(sigma_n(n) * cumulative_hermite(&pr.r[..=i], &f, &df)[i])
    }

    /// `-σ_N R^{N-1} V'(R)` at a grid node `R`.
    pub fn flux_v(&self, r: f64) -> Result<f64> {
        let (i, _, _) = value_at(&self.profile, r)?;
        let n = self.params.n;
        Ok(-sigma_n(n) * r.powf(n - 1.0) * self.profile.dv[i])
    }

    /// Constants as the JSON object exported next to the profile.
    pub fn constants_json(&self) -> serde_json::Value {
        json!({
            "p": self.params.p,
            "q": self.params.q,
            "N": self.params.n,
            "a": self.a,
            "b": self.b,
            "S": self.s,
            "int_Uq": self.int_uq,
            "int_Vp": self.int_vp,
            "int_Uq1": self.int_uq1,
            "int_Vp1": self.int_vp1,
            "int_U2": self.int_u2,
            "regime": self.regime.as_str(),
            "tolerance": {
                "v0_bisection": self.diagnostics.tol,
                "tail_drift": self.diagnostics.tail_tol,
                "a_drift": self.diagnostics.a_drift,
                "match_residual": self.diagnostics.match_residual,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bubble() -> SystemParams {
        SystemParams::critical(5.0, 3.0).unwrap()
    }

    #[test]
    fn grid_has_decades() {
        let g = GridSpec::default().nodes(1e4);
        for d in [1.0, 10.0, 100.0, 1e3, 1e4] {
            assert!(g.contains(&d), "missing {d}");
        }
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn bubble_shot_decays() {
        match shoot(&bubble(), 1.0, 100.0).unwrap() {
            ShootOutcome::Decayed(p) => {
                for (r, u) in p.r.iter().zip(&p.u) {
                    assert!((u - (1.0 + r * r / 3.0).powf(-0.5)).abs() < 1e-10);
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_shots_do_not_decay() {
        assert!(matches!(
            shoot(&bubble(), 2.0, 1e6).unwrap(),
            ShootOutcome::CrossedZeroAt {
                component: Component::U,
                ..
            } | ShootOutcome::GrewBeyondBound { .. }
        ));
        assert!(matches!(
            shoot(&bubble(), 1e-3, 1e6).unwrap(),
            ShootOutcome::CrossedZeroAt { .. }
        ));
    }

    #[test]
    fn series_solves_taylor_system() {
        // Residual of the truncated series in the ODE is O(r^4).
        let y = series_start(3.0, 2.0, 3.0, 0.5, 1.3, 0.7, 1e-3);
        let h = 1e-6;
        let y2 = series_start(3.0, 2.0, 3.0, 0.5, 1.3, 0.7, 1e-3 + h);
        let f = radial_rhs(3.0, 2.0, 3.0, 0.5, 1e-3, &y);
        assert!(((y2[1] - y[1]) / h - f[1]).abs() < 1e-5);
        assert!(((y2[3] - y[3]) / h - f[3]).abs() < 1e-5);
    }
}
