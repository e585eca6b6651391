//! The `ground`, `solve`, `sweep` and `green` commands.

use std::path::Path;

use lelab_core::asymptotics::pohozaev_report;
use lelab_core::bundle::{build_bundle, BundleOptions};
use lelab_core::bvp::{
    solve_ball_radial, solve_box_fd, BoxOptions, ContinuationOptions, Init, Mode, Problem,
    RadialOptions,
};
use lelab_core::green::Domain;
use lelab_core::ground_state::{find_ground_state_with, GroundStateOptions};
use lelab_core::SystemParams;
use serde_json::json;

use crate::config::*;
use crate::pipeline::{rel_dev, run_branch, window_case, BranchSetup};
use crate::run::{CheckOutcome, CmdResult, Failure, RunDir, EXIT_CHECK, EXIT_NUMERIC, EXIT_OK};

/// Flux-identity self-check radii for the ground state.
const FLUX_RADII: [f64; 3] = [1.0, 10.0, 100.0];
const FLUX_TOL: f64 = 1e-6;

fn report(dir: &RunDir) {
    for c in &dir.checks {
        let tag = if c.pass { "PASS" } else { "FAIL" };
        println!(
            "{tag} {} value={:.3e} tol={:.1e}",
            c.check, c.value, c.tolerance
        );
    }
}

fn done(dir: RunDir, status: &str, code: i32) -> CmdResult<i32> {
    report(&dir);
    let path = dir.finish(status)?;
    println!("{}", path.display());
    Ok(code)
}

pub fn ground(out: &Path, config: Option<&Path>, flags: &GroundArgs) -> CmdResult<i32> {
    let (args, canonical) = resolve(config, flags)?;
    let p = required(args.p, "p")?;
    let n = required(args.n, "N")?;
    let params = SystemParams::critical(p, n as f64)?;
    let mut opts = GroundStateOptions::default();
    if let Some(t) = args.tol {
        if !(t > 0.0 && t < 1.0) {
            return Err(Failure::usage(format!("tol = {t} must lie in (0, 1)")));
        }
        opts.tol = t;
    }
    if let Some(r) = args.rmax {
        if !(r > 100.0) {
            return Err(Failure::usage(format!("rmax = {r} must exceed 100")));
        }
        opts.r_max = r;
        opts.r_max_cap = opts.r_max_cap.max(r);
    }
    let gs = find_ground_state_with(&params, &opts)?;
    let mut dir = RunDir::create(out, "ground", canonical)?;
    dir.extra
        .insert("params".into(), serde_json::to_value(params)?);
    dir.write_with("profile.csv", |w| {
        gs.profile.write_csv(w).map_err(Into::into)
    })?;

    let mut flux = Vec::new();
    for r in FLUX_RADII {
        let (mass, fl) = (gs.mass_uq(r)?, gs.flux_v(r)?);
        let res = rel_dev(fl, mass);
        flux.push(
            json!({"R": r, "int_Uq": mass, "flux": fl, "rel_residual": res, "tolerance": FLUX_TOL}),
        );
        dir.checks.push(CheckOutcome::new(
            format!("flux_identity R={r}"),
            res < FLUX_TOL,
            res,
            FLUX_TOL,
        ));
    }
    let mut constants = gs.constants_json();
    constants["flux_identity"] = json!(flux);
    constants["v0"] = json!(gs.v0);
    dir.write_json("constants.json", &constants)?;
    if dir.all_pass() {
        done(dir, "ok", EXIT_OK)
    } else {
        eprintln!("ground state failed its flux-identity self-check");
        done(dir, "numerical-failure", EXIT_NUMERIC)
    }
}

pub fn solve(out: &Path, config: Option<&Path>, flags: &SolveArgs) -> CmdResult<i32> {
    let (args, canonical) = resolve(config, flags)?;
    let p = required(args.p, "p")?;
    let n = required(args.n, "N")?;
    let eps = required(args.eps, "eps")?;
    let mode: Mode = args.mode.unwrap_or(ModeArg::Exponent).into();
    let domain = make_domain(args.domain.unwrap_or(DomainKind::Ball), n, args.radius)?;
    let problem = Problem::new(p, n as f64, mode, eps)?;
    let sol = match &domain {
        Domain::Ball { radius, .. } => {
            let mut opts = RadialOptions::default();
            if let Some(k) = args.nodes {
                opts.nodes = k;
            }
            if let Some(m) = args.mesh {
                opts.mesh = m.into();
            }
            solve_ball_radial(&problem, *radius, Init::Bump, &opts).or_else(|e| {
                solve_ball_radial(&problem, *radius, Init::Shooting, &opts).map_err(|_| e)
            })?
        }
        Domain::Box { .. } => {
            let mut opts = BoxOptions::default();
            if let Some(k) = args.nodes {
                opts.nodes = k;
            }
            solve_box_fd(&problem, &domain, None, &opts)?
        }
    };
    let mut dir = RunDir::create(out, "solve", canonical)?;
    dir.extra
        .insert("params".into(), serde_json::to_value(sol.params)?);
    dir.extra
        .insert("domain".into(), serde_json::to_value(&domain)?);
    dir.write_with("solution.csv", |w| sol.write_csv(w))?;
    let tol = if domain.outside_smoothness_hypotheses() {
        5e-2
    } else {
        1e-6
    };
    let center = domain.center();
    let poh = pohozaev_report(&sol, &center, tol)?;
    dir.checks
        .push(CheckOutcome::new("pohozaev", poh.pass, poh.residual, tol));
    let mut summary = sol.summary_json();
    summary["pohozaev"] = serde_json::to_value(&poh)?;
    summary["outside_smoothness_hypotheses"] = json!(domain.outside_smoothness_hypotheses());
    summary["peaks"] = json!(sol.local_maxima(0.5).len());
    dir.write_json("summary.json", &summary)?;
    let code = if dir.all_pass() { EXIT_OK } else { EXIT_CHECK };
    done(
        dir,
        if code == EXIT_OK {
            "ok"
        } else {
            "check-failure"
        },
        code,
    )
}

pub fn sweep(out: &Path, config: Option<&Path>, flags: &SweepArgs) -> CmdResult<i32> {
    let (args, canonical) = resolve(config, flags)?;
    let p = required(args.p, "p")?;
    let n = required(args.n, "N")?;
    let spec = args
        .eps
        .clone()
        .ok_or_else(|| Failure::usage("missing required parameter --eps"))?;
    let schedule = parse_schedule(&spec)?;
    let mode: Mode = args.mode.unwrap_or(ModeArg::Exponent).into();
    let domain = make_domain(args.domain.unwrap_or(DomainKind::Ball), n, args.radius)?;
    SystemParams::critical(p, n as f64)?;
    let mut opts = ContinuationOptions::default();
    if let Some(k) = args.nodes {
        match domain {
            Domain::Ball { .. } => opts.radial.nodes = k,
            Domain::Box { .. } => opts.boxed.nodes = k,
        }
    }
    let poh_tol = args
        .pohozaev_tol
        .unwrap_or(if domain.outside_smoothness_hypotheses() {
            5e-2
        } else {
            1e-6
        });
    let exp_tol = args.exponent_tol.unwrap_or(0.05);
    let const_tol = args.constant_tol.unwrap_or(0.15);
    let setup = BranchSetup {
        p,
        n,
        mode,
        domain: domain.clone(),
        schedule,
        opts,
    };
    let case = window_case(&setup)?;

    let outcome = run_branch(&setup)?;
    let mut dir = RunDir::create(out, "sweep", canonical)?;
    dir.extra.insert(
        "params".into(),
        serde_json::to_value(SystemParams::critical(p, n as f64)?)?,
    );
    dir.extra
        .insert("domain".into(), serde_json::to_value(&domain)?);
    dir.extra.insert(
        "schedule".into(),
        json!({"spec": spec, "values": setup.schedule}),
    );
    if let Some(c) = case {
        dir.checks.push(CheckOutcome::new(
            format!("window {}", c.as_str()),
            true,
            0.0,
            0.0,
        ));
    }
    let run = &outcome.run;
    dir.write_with("branch.csv", |w| {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| lelab_core::LabError::Io(std::io::Error::other(e));
        wr.write_record([
            "eps",
            "u_max",
            "mu",
            "int_u_q1",
            "pohozaev_residual",
            "pohozaev_drift",
            "newton_iterations",
            "inserted",
        ])
        .map_err(io)?;
        for ((sol, row), step) in run.solutions.iter().zip(&outcome.pohozaev).zip(&run.log) {
            wr.write_record([
                format!("{:.17e}", sol.eps),
                format!("{:.17e}", sol.u_max),
                format!("{:.17e}", sol.mu),
                format!("{:.17e}", sol.int_u_q1),
                format!("{:.6e}", row.rel_residual),
                format!("{:.6e}", row.drift),
                step.newton_iterations.to_string(),
                step.inserted.to_string(),
            ])
            .map_err(io)?;
        }
        wr.flush()?;
        Ok(())
    })?;
    for row in &outcome.pohozaev {
        dir.checks.push(CheckOutcome::new(
            format!("pohozaev eps={:.6e}", row.eps),
            row.rel_residual < poh_tol,
            row.rel_residual,
            poh_tol,
        ));
        dir.checks.push(CheckOutcome::new(
            format!("pohozaev_drift eps={:.6e}", row.eps),
            row.drift < poh_tol,
            row.drift,
            poh_tol,
        ));
    }
    dir.write_json(
        "checks.json",
        &json!({"pohozaev": outcome.pohozaev, "tolerance": poh_tol}),
    )?;
    match &outcome.fit {
        Ok(f) => {
            match &f.fit {
                Some(fit) => {
                    let de = rel_dev(fit.fitted_exponent, f.prediction.exponent);
                    dir.checks.push(CheckOutcome::new(
                        "rate_exponent",
                        de <= exp_tol,
                        de,
                        exp_tol,
                    ));
                    let target = f
                        .prediction
                        .constant
                        .unwrap_or(f.prediction.pohozaev_constant);
                    let dc = rel_dev(fit.extrapolated_constant, target);
                    dir.checks.push(CheckOutcome::new(
                        "rate_constant",
                        dc <= const_tol,
                        dc,
                        const_tol,
                    ));
                }
                None => dir
                    .checks
                    .push(CheckOutcome::new("rate_fit", false, f64::NAN, exp_tol)),
            }
            let mut js = serde_json::to_value(f)?;
            js["tolerance"] = json!({"exponent": exp_tol, "constant": const_tol});
            dir.write_json("ratefit.json", &js)?;
        }
        Err(e) => {
            dir.checks
                .push(CheckOutcome::new("rate_fit", false, f64::NAN, exp_tol));
            dir.write_json("ratefit.json", &json!({"error": e.to_string()}))?;
        }
    }
    let last = run.solutions.last().map(|s| s.eps);
    dir.extra.insert("last_good_eps".into(), json!(last));
    if let Some(reason) = &run.stopped {
        eprintln!("continuation stopped: {reason}");
        dir.extra.insert("stopped".into(), json!(reason));
        return done(dir, "numerical-failure", EXIT_NUMERIC);
    }
    let code = if dir.all_pass() { EXIT_OK } else { EXIT_CHECK };
    done(
        dir,
        if code == EXIT_OK {
            "ok"
        } else {
            "check-failure"
        },
        code,
    )
}

pub fn green(out: &Path, config: Option<&Path>, flags: &GreenArgs) -> CmdResult<i32> {
    let (args, canonical) = resolve(config, flags)?;
    let kind = args.domain.unwrap_or(DomainKind::Ball);
    let n = match kind {
        DomainKind::Box => args.n.unwrap_or(3),
        DomainKind::Ball => required(args.n, "N")?,
    };
    let domain = make_domain(kind, n, args.radius)?;
    let x0 = match &args.x0 {
        Some(s) => parse_point(s)?,
        None => domain.center(),
    };
    domain.require_interior(&x0)?;
    let mut opts = BundleOptions {
        identities: args.identities.unwrap_or(false),
        ..BundleOptions::default()
    };
    if let Some(k) = args.field_points {
        opts.field_points = k;
    }
    let bundle = build_bundle(&domain, &x0, args.p, &opts)?;
    let mut dir = RunDir::create(out, "green", canonical)?;
    dir.extra
        .insert("domain".into(), serde_json::to_value(&domain)?);
    dir.write_json("bundle.json", &bundle)?;
    dir.write_with("field.csv", |w| bundle.write_field_csv(w))?;
    for (name, rep) in &bundle.residuals {
        dir.checks.push(CheckOutcome::new(
            name.clone(),
            rep.pass,
            rep.residual,
            rep.tolerance,
        ));
    }
    let code = if dir.all_pass() { EXIT_OK } else { EXIT_CHECK };
    done(
        dir,
        if code == EXIT_OK {
            "ok"
        } else {
            "check-failure"
        },
        code,
    )
}
