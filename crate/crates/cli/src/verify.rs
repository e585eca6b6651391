//! Pinned verification suites: `identities`, `rates`, `profiles`, `all`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use lelab_core::asymptotics::{
    branch_report, concentration, limit_samples, perturbed_window, radial_eval_set,
    theorem3_profile_check,
};
use lelab_core::bvp::{ContinuationOptions, Mode};
use lelab_core::green::{robin_ball, Domain};
use lelab_core::ground_state::find_ground_state;
use lelab_core::identities::{check_identity, Identity};
use lelab_core::special::sigma_n;
use lelab_core::{Result, SystemParams};
use serde_json::json;

use crate::pipeline::{rel_dev, run_branch, BranchOutcome, BranchSetup, FitSummary};
use crate::run::{CheckOutcome, CmdResult, Failure, RunDir, EXIT_CHECK, EXIT_OK};

pub const SUITES: [&str; 4] = ["identities", "rates", "profiles", "all"];

/// Pinned branches: `(label, p, N, mode, schedule start, end, ratio, exponent tol, constant tol)`.
const BRANCHES: [(&str, f64, usize, Mode, f64, f64, f64, f64, f64); 3] = [
    (
        "p5",
        5.0,
        3,
        Mode::NearlyCriticalExponent,
        0.5,
        0.02,
        0.8,
        0.05,
        0.15,
    ),
    (
        "p2.5",
        2.5,
        3,
        Mode::NearlyCriticalExponent,
        0.5,
        0.02,
        0.8,
        0.05,
        0.25,
    ),
    (
        "perturbed-p1-N9",
        1.0,
        9,
        Mode::LinearPerturbation,
        2000.0,
        60.0,
        0.8,
        0.15,
        f64::INFINITY,
    ),
];

#[derive(Default)]
struct Cache {
    branches: BTreeMap<&'static str, BranchOutcome>,
}

impl Cache {
    fn branch(&mut self, label: &'static str) -> Result<&BranchOutcome> {
        if !self.branches.contains_key(label) {
            let &(_, p, n, mode, start, end, ratio, _, _) = BRANCHES
                .iter()
                .find(|b| b.0 == label)
                .expect("pinned label");
            let schedule = lelab_core::bvp::geometric_schedule(start, end, ratio)?;
            let setup = BranchSetup {
                p,
                n,
                mode,
                domain: Domain::ball(n, 1.0),
                schedule,
                opts: ContinuationOptions::default(),
            };
            eprintln!("verify: running branch {label}");
            self.branches.insert(label, run_branch(&setup)?);
        }
        Ok(&self.branches[label])
    }
}

fn check(out: &mut Vec<CheckOutcome>, name: impl Into<String>, value: f64, tol: f64) {
    out.push(CheckOutcome::new(
        name,
        value.is_finite() && value < tol,
        value,
        tol,
    ));
}

fn identities(out: &mut Vec<CheckOutcome>) -> Result<()> {
    let gs = find_ground_state(&SystemParams::critical(5.0, 3.0)?, 1e-13)?;
    let prof = &gs.profile;
    let sup = prof
        .r
        .iter()
        .zip(&prof.u)
        .filter(|(r, _)| **r <= 100.0)
        .map(|(r, u)| (u - (1.0 + r * r / 3.0).powf(-0.5)).abs())
        .fold(0.0, f64::max);
    check(out, "bubble sup error", sup, 1e-6);
    check(out, "bubble a", (gs.a - 3f64.sqrt()).abs(), 1e-4);
    check(
        out,
        "bubble int U^5",
        rel_dev(gs.int_uq, 4.0 * PI * 3f64.sqrt()),
        1e-3,
    );

    for p in [5.0, 3.0, 2.5] {
        let g = find_ground_state(&SystemParams::critical(p, 3.0)?, 1e-13)?;
        for r in [1.0, 10.0, 100.0] {
            check(
                out,
                format!("flux p={p} R={r}"),
                rel_dev(g.flux_v(r)?, g.mass_uq(r)?),
                1e-6,
            );
        }
    }

    // Closed-form Robin function at pinned points.
    let mut worst: f64 = 0.0;
    for (n, radius, x) in [
        (3, 1.0, vec![0.2, -0.1, 0.3]),
        (4, 2.0, vec![0.5, 0.1, -0.7, 0.2]),
        (5, 0.5, vec![0.1, 0.0, 0.05, -0.2, 0.1]),
    ] {
        let s: f64 = x.iter().map(|v| v * v).sum();
        let exact = -(radius / (radius * radius - s)).powi(n as i32 - 2)
            / ((n as f64 - 2.0) * sigma_n(n as f64));
        worst = worst.max((robin_ball(&x, radius, n)? - exact).abs());
    }
    check(out, "robin closed form", worst, 1e-10);

    let ball = Domain::ball(3, 1.0);
    let i = check_identity(&ball, &[0.0; 3], Identity::I, None)?;
    check(
        out,
        "identity i lhs vs 1/(4pi)",
        rel_dev(i.lhs[0], 1.0 / (4.0 * PI)),
        1e-6,
    );
    let ii = check_identity(&ball, &[0.0; 3], Identity::Ii, Some(2.5))?;
    check(out, "identity ii p=2.5", ii.residual, 1e-3);
    Ok(())
}

fn rates(out: &mut Vec<CheckOutcome>, cache: &mut Cache) -> Result<()> {
    for (p, n) in [(1.0, 9.0), (1.0, 8.0), (3.0, 4.0)] {
        let ok = perturbed_window(p, n).is_ok();
        out.push(CheckOutcome::new(
            format!("window p={p} N={n}"),
            ok,
            0.0,
            0.0,
        ));
    }
    for &(label, _, _, _, _, _, _, exp_tol, const_tol) in &BRANCHES {
        let b = cache.branch(label)?;
        let worst = b
            .pohozaev
            .iter()
            .map(|r| r.rel_residual.max(r.drift))
            .fold(0.0, f64::max);
        check(out, format!("{label} pohozaev"), worst, 1e-6);
        if let Some(reason) = &b.run.stopped {
            out.push(CheckOutcome::new(
                format!("{label} reached end of schedule ({reason})"),
                false,
                b.run.solutions.last().map_or(f64::NAN, |s| s.eps),
                0.0,
            ));
        }
        match &b.fit {
            Ok(FitSummary {
                fit: Some(fit),
                prediction,
                ..
            }) => {
                check(
                    out,
                    format!("{label} exponent"),
                    rel_dev(fit.fitted_exponent, prediction.exponent),
                    exp_tol,
                );
                if const_tol.is_finite() {
                    let target = prediction.constant.unwrap_or(prediction.pohozaev_constant);
                    check(
                        out,
                        format!("{label} constant"),
                        rel_dev(fit.extrapolated_constant, target),
                        const_tol,
                    );
                }
            }
            Ok(FitSummary { fit_error, .. }) => {
                let msg = fit_error.as_deref().unwrap_or("no fit");
                out.push(CheckOutcome::new(
                    format!("{label} rate fit ({msg})"),
                    false,
                    f64::NAN,
                    exp_tol,
                ));
            }
            Err(e) => out.push(CheckOutcome::new(
                format!("{label} rate fit ({e})"),
                false,
                f64::NAN,
                exp_tol,
            )),
        }
    }
    Ok(())
}

fn profiles(out: &mut Vec<CheckOutcome>, cache: &mut Cache) -> Result<()> {
    for label in ["p5", "p2.5"] {
        let b = cache.branch(label)?;
        let p = b.gs.params.p;
        let ball = Domain::ball(3, 1.0);
        let samples = limit_samples(&ball, &[0.0; 3], p, &radial_eval_set(3, 0.5, 0.9, 9))?;
        let errs = b
            .run
            .solutions
            .iter()
            .map(|s| theorem3_profile_check(s, &b.gs, &samples).map(|r| r.v_error))
            .collect::<Result<Vec<f64>>>()?;
        let monotone = errs.windows(2).all(|w| w[1] < w[0]);
        out.push(CheckOutcome::new(
            format!("{label} v-profile error decreasing"),
            monotone,
            *errs.last().unwrap_or(&f64::NAN),
            0.0,
        ));
        check(
            out,
            format!("{label} v-profile error at smallest eps"),
            *errs.last().unwrap_or(&f64::NAN),
            0.1,
        );
        let last = b.run.solutions.last().expect("non-empty branch");
        let frac = concentration(last, 5.0)?.fraction;
        out.push(CheckOutcome::new(
            format!("{label} mass fraction"),
            frac > 0.95,
            frac,
            0.95,
        ));
        let rep = branch_report(&b.run, &b.gs, 5.0)?;
        check(out, format!("{label} domination K"), rep.k, 3.0);
        out.push(CheckOutcome::new(
            format!("{label} min mu^eps"),
            rep.min_mu_pow_eps > 0.1,
            rep.min_mu_pow_eps,
            0.1,
        ));
    }
    Ok(())
}

pub fn verify(out_root: &Path, suite: &str) -> CmdResult<i32> {
    if !SUITES.contains(&suite) {
        return Err(Failure::usage(format!(
            "unknown suite '{suite}'; expected one of {}",
            SUITES.join(", ")
        )));
    }
    let mut checks = Vec::new();
    let mut cache = Cache::default();
    if matches!(suite, "identities" | "all") {
        identities(&mut checks)?;
    }
    if matches!(suite, "rates" | "all") {
        rates(&mut checks, &mut cache)?;
    }
    if matches!(suite, "profiles" | "all") {
        profiles(&mut checks, &mut cache)?;
    }
    let mut dir = RunDir::create(out_root, "verify", json!({ "suite": suite }))?;
    dir.checks = checks;
    let failing: Vec<&str> = dir
        .checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| c.check.as_str())
        .collect();
    dir.write_json(
        "report.json",
        &json!({ "suite": suite, "checks": dir.checks, "failing": failing }),
    )?;
    for c in &dir.checks {
        println!(
            "{} {} value={:.3e} tol={:.1e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.check,
            c.value,
            c.tolerance
        );
    }
    let code = if dir.all_pass() { EXIT_OK } else { EXIT_CHECK };
    let path = dir.finish(if code == EXIT_OK {
        "ok"
    } else {
        "check-failure"
    })?;
    println!("{}", path.display());
    Ok(code)
}
