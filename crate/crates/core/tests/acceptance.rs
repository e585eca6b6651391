//! Acceptance criteria 1 to 11. Each test prints one PASS/FAIL line to the
//! real stderr (not the captured test output) and then asserts.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use lelab_core::asymptotics::{perturbed_window, pohozaev_drift, pohozaev_residual, PerturbedCase};
use lelab_core::bvp::*;
use lelab_core::green::{robin_ball, Domain};
use lelab_core::ground_state::{find_ground_state, GroundState};
use lelab_core::identities::{check_identity, Identity};
use lelab_core::iterated::RadialTilde;
use lelab_core::SystemParams;

fn verdict(id: u32, ok: bool, detail: &str, elapsed: Duration) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {id:>2}: {tag} ({:.1} s) {detail}",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------- oracles

fn bubble(r: f64) -> f64 {
    (1.0 + r * r / 3.0).powf(-0.5)
}

/// Surface area of the unit sphere in ℝ^N for N = 3, 4, 5.
fn sphere_area(n: usize) -> f64 {
    match n {
        3 => 4.0 * PI,
        4 => 2.0 * PI * PI,
        5 => 8.0 * PI * PI / 3.0,
        _ => unreachable!(),
    }
}

const GL4: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
];

/// `∫_a^b f` by four-point Gauss–Legendre on the panels cut by `breaks`.
fn gauss_on(breaks: &[f64], a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let mut cuts: Vec<f64> = std::iter::once(a)
        .chain(breaks.iter().copied().filter(|&x| x > a && x < b))
        .chain(std::iter::once(b))
        .collect();
    cuts.dedup();
    cuts.windows(2)
        .map(|w| {
            let (m, h) = (0.5 * (w[0] + w[1]), 0.5 * (w[1] - w[0]));
            GL4.iter().map(|(x, wt)| h * wt * f(m + h * x)).sum::<f64>()
        })
        .sum()
}

/// Slope `k` of the least-squares line `ln ε = c - k ln u_max`.
fn fitted_exponent(eps: &[f64], u: &[f64]) -> f64 {
    let x: Vec<f64> = u.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = eps.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    -sxy / sxx
}

/// Aitken Δ² on the last three values of a geometric-ε sequence, which
/// removes a correction `A ε^γ` of any order γ.
fn aitken(s: &[f64]) -> f64 {
    let [a, b, c] = s[s.len() - 3..] else {
        unreachable!()
    };
    let den = a + c - 2.0 * b;
    if den.abs() < 1e-14 * c.abs() {
        c
    } else {
        (a * c - b * b) / den
    }
}

/// Entries past the smallest `u_max`, where `u_max` grows as ε falls.
fn monotone_tail(run: &ContinuationRun) -> (Vec<f64>, Vec<f64>) {
    let sols = &run.solutions;
    let start = (0..sols.len())
        .min_by(|&i, &j| sols[i].u_max.total_cmp(&sols[j].u_max))
        .unwrap();
    (
        sols[start..].iter().map(|s| s.eps).collect(),
        sols[start..].iter().map(|s| s.u_max).collect(),
    )
}

fn radial_nodes(sol: &DomainSolution) -> &[f64] {
    match &sol.grid {
        SolutionGrid::Radial { r } => r,
        _ => panic!("radial solution expected"),
    }
}

// --------------------------------------------------------------- branches

struct Branch {
    run: ContinuationRun,
    gs: GroundState,
    elapsed: Duration,
}

fn branch(p: f64) -> Branch {
    let start = Instant::now();
    let base = Problem::new(p, 3.0, Mode::NearlyCriticalExponent, 0.5).unwrap();
    let schedule = geometric_schedule(0.5, 0.02, 0.8).unwrap();
    let run = run_continuation(
        &base,
        &Domain::ball(3, 1.0),
        &schedule,
        &ContinuationOptions::default(),
    )
    .unwrap();
    let gs = find_ground_state(&SystemParams::critical(p, 3.0).unwrap(), 1e-13).unwrap();
    Branch {
        run,
        gs,
        elapsed: start.elapsed(),
    }
}

fn p5() -> &'static Branch {
    static B: OnceLock<Branch> = OnceLock::new();
    B.get_or_init(|| branch(5.0))
}

fn p25() -> &'static Branch {
    static B: OnceLock<Branch> = OnceLock::new();
    B.get_or_init(|| branch(2.5))
}

// --------------------------------------------------------------- criteria

#[test]
fn criterion_01_ground_state_bubble() {
    let t = Instant::now();
    let gs = find_ground_state(&SystemParams::critical(5.0, 3.0).unwrap(), 1e-13).unwrap();
    let mut sup: f64 = 0.0;
    for i in 0..=20_000 {
        let r = 100.0 * i as f64 / 20_000.0;
        let (u, _) = gs.profile.eval(r).unwrap();
        sup = sup.max((u - bubble(r)).abs());
    }
    let da = (gs.a - 3f64.sqrt()).abs();
    let di = (gs.int_uq / (4.0 * PI * 3f64.sqrt()) - 1.0).abs();
    let el = t.elapsed();
    let ok = sup < 1e-6 && da < 1e-4 && di < 1e-3 && el < Duration::from_secs(10);
    verdict(
        1,
        ok,
        &format!("sup|U-bubble| = {sup:.2e}, |a-√3| = {da:.2e}, rel ∫U^5 error = {di:.2e}"),
        el,
    );
    assert!(ok);
}

#[test]
fn criterion_02_flux_identity() {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for p in [5.0, 3.0, 2.5] {
        let gs = find_ground_state(&SystemParams::critical(p, 3.0).unwrap(), 1e-13).unwrap();
        let q = gs.params.q;
        for radius in [1.0, 10.0, 100.0] {
            let mass = 4.0
                * PI
                * gauss_on(&gs.profile.r, 0.0, radius, |r| {
                    r * r * gs.profile.eval(r).unwrap().0.powf(q)
                });
            let flux = gs.flux_v(radius).unwrap();
            worst = worst.max((mass / flux - 1.0).abs());
        }
    }
    let el = t.elapsed();
    let ok = worst < 1e-6 && el < Duration::from_secs(30);
    verdict(
        2,
        ok,
        &format!("worst relative flux residual = {worst:.2e}"),
        el,
    );
    assert!(ok);
}

#[test]
fn criterion_03_robin_oracle() {
    let t = Instant::now();
    // Halton points in the unit cube mapped into the ball.
    let halton = |mut i: usize, b: usize| {
        let (mut f, mut r) = (1.0, 0.0);
        while i > 0 {
            f /= b as f64;
            r += f * (i % b) as f64;
            i /= b;
        }
        r
    };
    let primes = [2, 3, 5, 7, 11, 13];
    let mut worst: f64 = 0.0;
    for k in 1..=20 {
        let n = 3 + k % 3;
        let radius = 0.5 + 2.5 * halton(k, 13);
        let mut x: Vec<f64> = (0..n).map(|d| 2.0 * halton(k, primes[d]) - 1.0).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = 0.9 * radius * halton(k, 17) / norm.max(1e-12);
        x.iter_mut().for_each(|v| *v *= scale);
        let s: f64 = x.iter().map(|v| v * v).sum();
        let exact = -(radius / (radius * radius - s)).powi(n as i32 - 2)
            / ((n as f64 - 2.0) * sphere_area(n));
        let got = robin_ball(&x, radius, n).unwrap();
        worst = worst.max(((got - exact) / exact).abs());
    }
    let id = check_identity(&Domain::ball(3, 1.0), &[0.0; 3], Identity::I, None).unwrap();
    let di = (id.lhs[0] * 4.0 * PI - 1.0).abs();
    let el = t.elapsed();
    let ok = worst < 1e-10 && di < 1e-6 && el < Duration::from_secs(60);
    verdict(
        3,
        ok,
        &format!("worst relative Robin error = {worst:.2e}, identity i vs 1/(4π) = {di:.2e}"),
        el,
    );
    assert!(ok);
}

#[test]
fn criterion_04_iterated_green() {
    let t = Instant::now();
    let id = check_identity(&Domain::ball(3, 1.0), &[0.0; 3], Identity::Ii, Some(2.5)).unwrap();
    let coarse = RadialTilde::new(2.5, 3, 1.0, 16)
        .unwrap()
        .extract_phi_t(6, 1e-6)
        .unwrap();
    let fine = RadialTilde::new(2.5, 3, 1.0, 32)
        .unwrap()
        .extract_phi_t(6, 1e-6)
        .unwrap();
    let change = (coarse.value - fine.value).abs();
    let bound = 2.0 * coarse.error.max(fine.error);
    let el = t.elapsed();
    let ok = id.residual < 1e-3 && change <= bound && el < Duration::from_secs(300);
    verdict(
        4,
        ok,
        &format!("identity ii residual = {:.2e}, φ̃(0) = {:.10e}, halving change {change:.2e} vs 2×error {bound:.2e}", id.residual, fine.value),
        el,
    );
    assert!(ok);
}

#[test]
fn criterion_05_pohozaev_along_branch() {
    let b = p5();
    let mut worst_res: f64 = 0.0;
    let mut worst_drift: f64 = 0.0;
    for sol in &b.run.solutions {
        worst_res = worst_res.max(pohozaev_residual(sol, &[0.0; 3]).unwrap().rel_residual);
        worst_drift = worst_drift.max(pohozaev_drift(sol, &[0.0; 3], &[0.3, 0.0, 0.0]).unwrap());
    }
    let ok = worst_res < 1e-6 && worst_drift < 1e-6 && b.run.stopped.is_none();
    verdict(
        5,
        ok,
        &format!(
            "{} solutions, worst residual = {worst_res:.2e}, worst drift = {worst_drift:.2e}",
            b.run.solutions.len()
        ),
        b.elapsed,
    );
    assert!(ok);
}

#[test]
fn criterion_06_supercritical_rate() {
    let b = p5();
    let (eps, u) = monotone_tail(&b.run);
    let k = fitted_exponent(&eps, &u);
    let scaled: Vec<f64> = eps.iter().zip(&u).map(|(e, m)| e * m * m).collect();
    let c = aitken(&scaled);
    let s = (3.0 * 3f64.sqrt() * PI * PI / 4.0).powf(0.8);
    let predicted = s.powf(-0.8) * (4.0 * PI * 3f64.sqrt()).powi(2) / (4.0 * PI);
    let dc = (c / predicted - 1.0).abs();
    let ok = (k - 2.0).abs() <= 0.1
        && dc <= 0.15
        && b.elapsed < Duration::from_secs(1800)
        && b.run.stopped.is_none();
    verdict(
        6,
        ok,
        &format!(
            "exponent {k:.4} over eps in [{:.4}, {:.4}] (target 2±0.1), extrapolated constant {c:.4} vs prediction {predicted:.4} (off {:.1}%)",
            eps[eps.len() - 1],
            eps[0],
            100.0 * dc
        ),
        b.elapsed,
    );
    assert!(ok);
}

#[test]
fn criterion_07_subcritical_rate() {
    let b = p25();
    let (eps, u) = monotone_tail(&b.run);
    let k = fitted_exponent(&eps, &u);
    let scaled: Vec<f64> = eps.iter().zip(&u).map(|(e, m)| e * m.powf(3.5)).collect();
    let c = aitken(&scaled);
    let (p, q) = (2.5, b.gs.params.q);
    let phi_t = RadialTilde::new(p, 3, 1.0, 32)
        .unwrap()
        .extract_phi_t(6, 1e-6)
        .unwrap()
        .value;
    let predicted =
        b.gs.s.powf((1.0 - p * q) / (p * (q + 1.0))) * b.gs.int_uq.powf(p + 1.0) * phi_t.abs();
    let dk = (k / 3.5 - 1.0).abs();
    let dc = (c / predicted - 1.0).abs();
    let ok = dk <= 0.05
        && dc <= 0.25
        && b.elapsed < Duration::from_secs(2700)
        && b.run.stopped.is_none();
    verdict(
        7,
        ok,
        &format!(
            "q = {q:.4}, exponent {k:.4} over eps in [{:.4}, {:.4}] (target 3.5±5%), extrapolated constant {c:.4} vs prediction {predicted:.4} (off {:.1}%)",
            eps[eps.len() - 1],
            eps[0],
            100.0 * dc
        ),
        b.elapsed,
    );
    assert!(ok);
}

#[test]
fn criterion_08_green_profiles() {
    let b = p5();
    let int_u5 = 4.0 * PI * 3f64.sqrt();
    let green = |r: f64| (1.0 / r - 1.0) / (4.0 * PI);
    let errs: Vec<f64> = b
        .run
        .solutions
        .iter()
        .map(|sol| {
            (0..=40)
                .map(|i| {
                    let r = 0.5 + 0.4 * i as f64 / 40.0;
                    let (_, v) = sol.eval_radial(r).unwrap();
                    let target = int_u5 * green(r);
                    ((sol.u_max * v - target) / target).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let monotone = errs.windows(2).all(|w| w[1] < w[0]);
    let last = *errs.last().unwrap();
    let ok = monotone && last < 0.1;
    verdict(
        8,
        ok,
        &format!("sup relative v-error from {:.4} (eps 0.5) to {last:.4} (eps {:.4}), monotone: {monotone}", errs[0], b.run.solutions.last().unwrap().eps),
        b.elapsed,
    );
    assert!(ok);
}

/// Mass fraction at the smallest ε, domination constant and min μ^ε.
fn concentration_stats(b: &Branch, exact: Option<fn(f64) -> f64>) -> (f64, f64, f64) {
    let sp = b.run.solutions[0].params;
    let last = b.run.solutions.last().unwrap();
    let nodes = radial_nodes(last);
    let p1 = sp.p + 1.0;
    let density = |r: f64| r * r * last.eval_radial(r).unwrap().1.powf(p1);
    let rho = (5.0 * last.mu.powf(1.0 - last.eps / 2.0)).min(1.0);
    let fraction = gauss_on(nodes, 0.0, rho, density) / gauss_on(nodes, 0.0, 1.0, density);

    let limit = |y: f64| -> Option<(f64, f64)> {
        match exact {
            Some(f) => Some((f(y), f(y))),
            None => b.gs.profile.eval(y),
        }
    };
    let mut k: f64 = 0.0;
    let mut min_mu_eps = f64::INFINITY;
    for sol in &b.run.solutions {
        let sp = sol.params;
        let alpha_eps = sp.n / (sp.q_eps + 1.0);
        let beta = sp.n / (sp.p + 1.0);
        let mu = sol.u_max.powf(-1.0 / alpha_eps);
        min_mu_eps = min_mu_eps.min(mu.powf(sol.eps));
        let len = mu.powf(1.0 - sol.eps / 2.0);
        let r = radial_nodes(sol);
        for i in 0..r.len() - 1 {
            let Some((gu, gv)) = limit(r[i] / len) else {
                continue;
            };
            k = k
                .max(mu.powf(alpha_eps) * sol.u_field[i] / gu)
                .max(mu.powf(beta) * sol.v_field[i] / gv);
        }
    }
    (fraction, k, min_mu_eps)
}

#[test]
fn criterion_09_concentration_and_domination() {
    let mut ok = true;
    let mut details = Vec::new();
    let mut elapsed = Duration::ZERO;
    for (label, b, exact) in [
        ("p=5", p5(), Some(bubble as fn(f64) -> f64)),
        ("p=2.5", p25(), None),
    ] {
        let (fraction, k, min_mu_eps) = concentration_stats(b, exact);
        ok &= fraction > 0.95 && k < 3.0 && min_mu_eps > 0.1;
        elapsed += b.elapsed;
        details.push(format!(
            "{label}: mass fraction {fraction:.4}, K = {k:.3}, min mu^eps = {min_mu_eps:.3}"
        ));
    }
    verdict(9, ok, &details.join("; "), elapsed);
    assert!(ok);
}

#[test]
fn criterion_10_perturbed_mode() {
    let t = Instant::now();
    let windows = [
        (1.0, 9.0, PerturbedCase::Subcritical),
        (1.0, 8.0, PerturbedCase::Borderline),
        (3.0, 4.0, PerturbedCase::FourDimensional),
    ];
    let windows_ok = windows
        .iter()
        .all(|&(p, n, case)| perturbed_window(p, n).ok() == Some(case));

    let base = Problem::new(1.0, 9.0, Mode::LinearPerturbation, 2000.0).unwrap();
    let schedule = geometric_schedule(2000.0, 1.0, 0.8).unwrap();
    let run = run_continuation(
        &base,
        &Domain::ball(9, 1.0),
        &schedule,
        &ContinuationOptions::default(),
    )
    .unwrap();
    let (eps, u) = monotone_tail(&run);
    let k = fitted_exponent(&eps, &u);
    let tail = eps.len().min(5);
    let k_tail = fitted_exponent(&eps[eps.len() - tail..], &u[u.len() - tail..]);
    let el = t.elapsed();
    let dk = (k / 0.4 - 1.0).abs();
    let ok = windows_ok && dk <= 0.15 && el < Duration::from_secs(1800);
    verdict(
        10,
        ok,
        &format!(
            "windows {}; exponent {k:.4} over eps in [{:.2}, {:.0}] (last five: {k_tail:.4}; target 0.4±15%), u_max up to {:.3e}; {}",
            if windows_ok { "ok" } else { "wrong" },
            eps[eps.len() - 1],
            eps[0],
            u[u.len() - 1],
            run.stopped.as_deref().map_or("schedule completed".to_string(), |s| format!("stopped: {s}")),
        ),
        el,
    );
    assert!(ok);
}

#[test]
fn criterion_11_box_single_central_peak() {
    let t = Instant::now();
    let mut ok = true;
    let mut details = Vec::new();
    for p in [2.5, 5.0] {
        let problem = Problem::new(p, 3.0, Mode::NearlyCriticalExponent, 0.3).unwrap();
        let sol = solve_box_fd(
            &problem,
            &Domain::unit_cube(),
            None,
            &BoxOptions {
                nodes: 65,
                ..BoxOptions::default()
            },
        )
        .unwrap();
        let SolutionGrid::Box { grid } = &sol.grid else {
            panic!("box grid expected")
        };
        let d = grid.n.map(|n| n + 2);
        let at = |i: usize, j: usize, k: usize| sol.u_field[(i * d[1] + j) * d[2] + k];
        let mut peaks = Vec::new();
        for i in 1..d[0] - 1 {
            for j in 1..d[1] - 1 {
                for k in 1..d[2] - 1 {
                    let c = at(i, j, k);
                    let nb = [
                        at(i - 1, j, k),
                        at(i + 1, j, k),
                        at(i, j - 1, k),
                        at(i, j + 1, k),
                        at(i, j, k - 1),
                        at(i, j, k + 1),
                    ];
                    if nb.iter().all(|&v| c > v) {
                        peaks.push([grid.coord(0, i), grid.coord(1, j), grid.coord(2, k)]);
                    }
                }
            }
        }
        let h = grid.h[0];
        let off = peaks.first().map_or(f64::INFINITY, |x| {
            x.iter().map(|c| (c - 0.5).abs()).fold(0.0, f64::max)
        });
        ok &= peaks.len() == 1 && off <= h * (1.0 + 1e-9);
        details.push(format!(
            "p={p}: {} local maxima, peak offset {off:.3e} (cell {h:.4})",
            peaks.len()
        ));
    }
    let el = t.elapsed();
    ok &= el < Duration::from_secs(1200);
    verdict(11, ok, &details.join("; "), el);
    assert!(ok);
}
