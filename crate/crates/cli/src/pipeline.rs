//! Continuation, Pohozaev checks and rate fit for one branch.

use lelab_core::asymptotics::{
    perturbed_prediction, perturbed_window, pohozaev_drift, pohozaev_residual, rate_fit,
    theorem2_prediction, PerturbedCase, PohozaevResult, Prediction, RateFit, RateSeries,
};
use lelab_core::bundle::{build_bundle, BundleOptions, GreenBundle};
use lelab_core::bvp::{run_continuation, ContinuationOptions, ContinuationRun, Mode, Problem};
use lelab_core::green::Domain;
use lelab_core::ground_state::{find_ground_state, GroundState};
use lelab_core::{LabError, Regime, Result, SystemParams};
use serde::Serialize;

pub struct BranchSetup {
    pub p: f64,
    pub n: usize,
    pub mode: Mode,
    pub domain: Domain,
    pub schedule: Vec<f64>,
    pub opts: ContinuationOptions,
}

#[derive(Debug, Clone, Serialize)]
pub struct PohozaevRow {
    pub eps: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub rel_residual: f64,
    pub drift: f64,
}

/// Rate fit with the ε window it used.
#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub prediction: Prediction,
    pub perturbed_case: Option<&'static str>,
    /// Largest ε entering the fit. The branch is monotone in `u_max` only
    /// below the ε where `u_max` is smallest.
    pub fit_eps_max: f64,
    pub fit: Option<RateFit>,
    pub fit_error: Option<String>,
}

pub struct BranchOutcome {
    pub run: ContinuationRun,
    pub pohozaev: Vec<PohozaevRow>,
    pub gs: GroundState,
    pub fit: Result<FitSummary>,
}

pub fn drift_point(domain: &Domain) -> (Vec<f64>, Vec<f64>) {
    let c = domain.center();
    let mut shifted = c.clone();
    shifted[0] += match domain {
        Domain::Ball { radius, .. } => 0.3 * radius,
        Domain::Box { .. } => 0.1,
    };
    (c, shifted)
}

pub fn pohozaev_rows(run: &ContinuationRun, domain: &Domain) -> Result<Vec<PohozaevRow>> {
    let (y1, y2) = drift_point(domain);
    run.solutions
        .iter()
        .map(|s| {
            let PohozaevResult {
                lhs,
                rhs,
                rel_residual,
            } = pohozaev_residual(s, &y1)?;
            Ok(PohozaevRow {
                eps: s.eps,
                lhs,
                rhs,
                rel_residual,
                drift: pohozaev_drift(s, &y1, &y2)?,
            })
        })
        .collect()
}

/// Limit objects needed by the predictions: ground state and Green bundle
/// at the domain centre.
pub fn limits(p: f64, domain: &Domain) -> Result<(GroundState, GreenBundle)> {
    let params = SystemParams::critical(p, domain.dim() as f64)?;
    let gs = find_ground_state(&params, 1e-13)?;
    let opts = BundleOptions {
        identities: false,
        ..BundleOptions::default()
    };
    let green = build_bundle(domain, &domain.center(), Some(p), &opts)?;
    Ok((gs, green))
}

pub fn fit_branch(
    run: &ContinuationRun,
    mode: Mode,
    gs: &GroundState,
    green: &GreenBundle,
) -> Result<FitSummary> {
    let (prediction, case) = match mode {
        Mode::NearlyCriticalExponent => (theorem2_prediction(&gs.params, gs, green)?, None),
        Mode::LinearPerturbation => {
            let (case, pred) = perturbed_prediction(&gs.params, gs, green)?;
            (pred, Some(case.as_str()))
        }
    };
    let phi = match gs.regime {
        Regime::TailSubcritical => green
            .phi_t
            .ok_or_else(|| LabError::Composition("bundle lacks phi_t".into()))?,
        _ => green.phi,
    };
    let series = RateSeries::from_solutions(&run.solutions, phi)?;
    let fit_eps_max = monotone_window(&series);
    let (fit, fit_error) = match rate_fit(&series.tail(fit_eps_max), &prediction) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(FitSummary {
        prediction,
        perturbed_case: case,
        fit_eps_max,
        fit,
        fit_error,
    })
}

/// ε at which `u_max` is smallest; entries from there on grow with 1/ε.
pub fn monotone_window(series: &RateSeries) -> f64 {
    series
        .entries
        .iter()
        .min_by(|a, b| a.u_max.total_cmp(&b.u_max))
        .map(|e| e.eps)
        .unwrap_or(f64::INFINITY)
}

pub fn window_case(setup: &BranchSetup) -> Result<Option<PerturbedCase>> {
    match setup.mode {
        Mode::LinearPerturbation => perturbed_window(setup.p, setup.n as f64).map(Some),
        Mode::NearlyCriticalExponent => Ok(None),
    }
}

pub fn run_branch(setup: &BranchSetup) -> Result<BranchOutcome> {
    window_case(setup)?;
    let base = Problem::new(setup.p, setup.n as f64, setup.mode, setup.schedule[0])?;
    let run = run_continuation(&base, &setup.domain, &setup.schedule, &setup.opts)?;
    let pohozaev = pohozaev_rows(&run, &setup.domain)?;
    let (gs, green) = limits(setup.p, &setup.domain)?;
    let fit = fit_branch(&run, setup.mode, &gs, &green);
    Ok(BranchOutcome {
        run,
        pohozaev,
        gs,
        fit,
    })
}

/// Relative deviation, absolute when the target vanishes.
pub fn rel_dev(value: f64, target: f64) -> f64 {
    if target == 0.0 {
        value.abs()
    } else {
        ((value - target) / target).abs()
    }
}
