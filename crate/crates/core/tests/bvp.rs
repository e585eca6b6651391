use approx::assert_relative_eq;
use lelab_core::bvp::*;
use lelab_core::error::LabError;
use lelab_core::green::Domain;
use lelab_core::ground_state::find_ground_state;
use lelab_core::hyperbola::qeps_from_eps;
use lelab_core::SystemParams;
use proptest::prelude::*;

// ---------------------------------------------------------------- oracle
//
// The ball problem is solved independently by scaling: with
// u = λ^a w(λr), v = λ^b z(λr), a + 2 = pb, b + 2 = qa, the pair (w, z)
// solves the same system with w(0) = 1. Bisection on z(0) makes w and z
// vanish at the same radius ρ, and then λ = ρ/R.

fn spow(x: f64, e: f64) -> f64 {
    x.signum() * x.abs().powf(e)
}

struct Oracle {
    n: f64,
    p: f64,
    q: f64,
    /// Linear coefficient of the scaled problem.
    e: f64,
}

impl Oracle {
    fn rhs(&self, r: f64, y: [f64; 4]) -> [f64; 4] {
        let c = (self.n - 1.0) / r;
        [
            y[1],
            -spow(y[2], self.p) - c * y[1],
            y[3],
            -spow(y[0], self.q) - self.e * y[0] - c * y[3],
        ]
    }

    fn rk4(&self, r: f64, y: [f64; 4], h: f64) -> [f64; 4] {
        let add = |a: [f64; 4], b: [f64; 4], s: f64| [0, 1, 2, 3].map(|i| a[i] + s * b[i]);
        let k1 = self.rhs(r, y);
        let k2 = self.rhs(r + 0.5 * h, add(y, k1, 0.5 * h));
        let k3 = self.rhs(r + 0.5 * h, add(y, k2, 0.5 * h));
        let k4 = self.rhs(r + h, add(y, k3, h));
        [0, 1, 2, 3].map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
    }

    /// First zeros of w and z for z(0) = s (infinite if not reached).
    fn zeros(&self, s: f64) -> (f64, f64) {
        let r0 = 1e-4;
        let (n, p) = (self.n, self.p);
        let mut y = [
            1.0 - s.powf(p) * r0 * r0 / (2.0 * n),
            -s.powf(p) * r0 / n,
            s - (1.0 + self.e) * r0 * r0 / (2.0 * n),
            -(1.0 + self.e) * r0 / n,
        ];
        let mut r = r0;
        let h = 2e-4;
        let mut found = [f64::INFINITY; 2];
        let mut limit = f64::INFINITY;
        while r < limit && r < 1e3 {
            let yn = self.rk4(r, y, h);
            for (slot, i) in [(0, 0), (1, 2)] {
                if found[slot].is_infinite() && yn[i] <= 0.0 {
                    // Newton on the step length from the last positive state.
                    let (mut t, mut z) = (r, y);
                    for _ in 0..6 {
                        let d = -z[i] / z[i + 1];
                        z = self.rk4(t, z, d);
                        t += d;
                    }
                    found[slot] = t;
                    limit = limit.min(10.0 * t);
                }
            }
            if found.iter().all(|f| f.is_finite()) {
                break;
            }
            y = yn;
            r += h;
        }
        (found[0], found[1])
    }

    /// `(ρ, z(0))` with both components vanishing at ρ.
    fn solve(&self) -> (f64, f64) {
        let g = |s: f64| {
            let (rw, rz) = self.zeros(s);
            if rw.is_infinite() {
                1.0
            } else if rz.is_infinite() {
                -1.0
            } else {
                rw - rz
            }
        };
        let (mut lo, mut hi) = (1.0, 1.0);
        while g(lo) <= 0.0 {
            lo *= 0.5;
        }
        while g(hi) >= 0.0 {
            hi *= 2.0;
        }
        for _ in 0..70 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let s = 0.5 * (lo + hi);
        let (rw, rz) = self.zeros(s);
        (0.5 * (rw + rz), s)
    }
}

fn scaling_exponents(p: f64, q: f64) -> (f64, f64) {
    let d = p * q - 1.0;
    (2.0 * (p + 1.0) / d, 2.0 * (q + 1.0) / d)
}

/// `(u_max, v_max)` on the ball of radius `radius`, exponent mode.
fn oracle_exponent(p: f64, n: f64, eps: f64, radius: f64) -> (f64, f64) {
    let q = qeps_from_eps(p, n, eps).unwrap();
    let (rho, s) = Oracle { n, p, q, e: 0.0 }.solve();
    let (a, b) = scaling_exponents(p, q);
    let lambda = rho / radius;
    (lambda.powf(a), lambda.powf(b) * s)
}

/// `(ε, u_max)` for the perturbed problem whose scaled coefficient is `e`.
fn oracle_perturbed(p: f64, n: f64, e: f64, radius: f64) -> (f64, f64) {
    let q = SystemParams::critical(p, n).unwrap().q;
    let (rho, _) = Oracle { n, p, q, e }.solve();
    let (a, _) = scaling_exponents(p, q);
    let lambda = rho / radius;
    (e * lambda.powf(a * (q - 1.0)), lambda.powf(a))
}

fn ball_run(p: f64, end: f64) -> ContinuationRun {
    let base = Problem::new(p, 3.0, Mode::NearlyCriticalExponent, 0.5).unwrap();
    let schedule = geometric_schedule(0.5, end, 0.8).unwrap();
    let run = run_continuation(
        &base,
        &Domain::ball(3, 1.0),
        &schedule,
        &ContinuationOptions::default(),
    )
    .unwrap();
    assert!(run.stopped.is_none(), "{:?}", run.stopped);
    run
}

// ----------------------------------------------------------------- radial

#[test]
fn rejects_nonpositive_eps() {
    for eps in [0.0, -0.1] {
        assert!(matches!(
            Problem::new(5.0, 3.0, Mode::NearlyCriticalExponent, eps),
            Err(LabError::Infeasible(_))
        ));
    }
}

#[test]
fn single_solve_matches_scaling_oracle() {
    let problem = Problem::new(5.0, 3.0, Mode::NearlyCriticalExponent, 0.5).unwrap();
    let sol = solve_ball_radial(&problem, 1.0, Init::Bump, &RadialOptions::default()).unwrap();
    let (u, v) = oracle_exponent(5.0, 3.0, 0.5, 1.0);
    assert_relative_eq!(sol.u_max, u, max_relative = 1e-8);
    assert_relative_eq!(sol.v_field[0], v, max_relative = 1e-8);
    assert_relative_eq!(problem.q(), 2.0, epsilon = 1e-12);
}

#[test]
fn supercritical_branch_matches_oracle() {
    let run = ball_run(5.0, 0.1);
    for sol in run.solutions.iter().step_by(3) {
        let (u, _) = oracle_exponent(5.0, 3.0, sol.eps, 1.0);
        assert_relative_eq!(sol.u_max, u, max_relative = 1e-7);
    }
}

#[test]
fn subcritical_tail_branch_matches_oracle() {
    let run = ball_run(2.5, 0.15);
    for sol in run.solutions.iter().step_by(2) {
        let (u, _) = oracle_exponent(2.5, 3.0, sol.eps, 1.0);
        assert_relative_eq!(sol.u_max, u, max_relative = 1e-7);
    }
}

#[test]
fn branch_has_interior_minimum_of_u_max() {
    // Along the ball branch u_max first drops, then grows without bound.
    let run = ball_run(5.0, 0.05);
    let u: Vec<f64> = run.solutions.iter().map(|s| s.u_max).collect();
    let imin = (0..u.len()).min_by(|&a, &b| u[a].total_cmp(&u[b])).unwrap();
    assert!(imin > 0 && imin < u.len() - 1);
    assert!(u[..=imin].windows(2).all(|w| w[1] < w[0]));
    assert!(u[imin..].windows(2).all(|w| w[1] > w[0]));
    let eps_min = run.solutions[imin].eps;
    let (o_min, _) = oracle_exponent(5.0, 3.0, eps_min, 1.0);
    assert_relative_eq!(u[imin], o_min, max_relative = 1e-7);
}

#[test]
fn perturbation_mode_matches_oracle() {
    let (eps, u_max) = oracle_perturbed(3.0, 4.0, 5.0, 1.0);
    let problem = Problem::new(3.0, 4.0, Mode::LinearPerturbation, eps).unwrap();
    assert_relative_eq!(problem.q(), 3.0, epsilon = 1e-12);
    assert_eq!(problem.linear(), eps);
    // Follow the branch down from below the first eigenvalue (≈ 216).
    let mut schedule = geometric_schedule(170.0, 1.05 * eps, 0.8).unwrap();
    schedule.push(eps);
    let run = run_continuation(
        &problem.with_eps(170.0).unwrap(),
        &Domain::ball(4, 1.0),
        &schedule,
        &ContinuationOptions::default(),
    )
    .unwrap();
    assert!(run.stopped.is_none(), "{:?}", run.stopped);
    let sol = run.solutions.last().unwrap();
    assert_eq!(sol.eps, eps);
    assert_relative_eq!(sol.u_max, u_max, max_relative = 1e-7);
}

#[test]
fn radial_solution_invariants() {
    let run = ball_run(5.0, 0.2);
    let sol = run.solutions.last().unwrap();
    let m = sol.u_field.len();
    assert_eq!(sol.u_field[m - 1], 0.0);
    assert_eq!(sol.v_field[m - 1], 0.0);
    assert!(sol.u_field[..m - 1].windows(2).all(|w| w[1] < w[0]));
    assert!(sol.v_field[..m - 1].windows(2).all(|w| w[1] < w[0]));
    assert!(sol.x_peak.iter().all(|&x| x == 0.0));
    let ae = sol.params.alpha_eps;
    assert_relative_eq!(sol.mu.powf(ae) * sol.u_max, 1.0, epsilon = 1e-13);
    assert!(sol.du_dn.iter().all(|&d| d < 0.0));
    assert!(sol.dv_dn.iter().all(|&d| d < 0.0));
    assert_relative_eq!(
        sol.q(),
        qeps_from_eps(5.0, 3.0, sol.eps).unwrap(),
        epsilon = 1e-12
    );
    for step in &run.log {
        assert!(
            step.residual < RadialOptions::default().tol || step.polish_residual.unwrap() < 1e-8
        );
    }
}

#[test]
fn graded_and_auto_meshes_agree() {
    let problem = Problem::new(5.0, 3.0, Mode::NearlyCriticalExponent, 0.3).unwrap();
    let auto = solve_ball_radial(&problem, 1.0, Init::Bump, &RadialOptions::default()).unwrap();
    let graded = RadialOptions {
        mesh: RadialMesh::Graded,
        ..RadialOptions::default()
    };
    let g = solve_ball_radial(&problem, 1.0, Init::Bump, &graded).unwrap();
    assert_relative_eq!(auto.u_max, g.u_max, max_relative = 1e-8);
}

#[test]
fn ground_state_initial_guess_converges() {
    let gs = find_ground_state(&SystemParams::critical(5.0, 3.0).unwrap(), 1e-13).unwrap();
    let problem = Problem::new(5.0, 3.0, Mode::NearlyCriticalExponent, 0.2).unwrap();
    let sol = solve_ball_radial(
        &problem,
        1.0,
        Init::GroundState(&gs),
        &RadialOptions::default(),
    )
    .unwrap();
    let (u, _) = oracle_exponent(5.0, 3.0, 0.2, 1.0);
    assert_relative_eq!(sol.u_max, u, max_relative = 1e-7);
}

#[test]
fn rescaling_approaches_ground_state() {
    let gs = find_ground_state(&SystemParams::critical(5.0, 3.0).unwrap(), 1e-13).unwrap();
    let run = ball_run(5.0, 0.02);
    let reports: Vec<RescaleReport> = run
        .solutions
        .iter()
        .map(|s| rescale_solution(s, &gs).unwrap())
        .collect();
    let tail: Vec<f64> = reports
        .iter()
        .filter(|r| r.compact_covered)
        .map(|r| r.sup_distance_u)
        .collect();
    assert!(tail.len() >= 4);
    assert!(tail.windows(2).all(|w| w[1] < w[0]), "{tail:?}");
    let k = reports
        .iter()
        .map(|r| r.domination_u.max(r.domination_v))
        .fold(0.0, f64::max);
    assert!(k < 2.0, "K = {k}");
    assert!(reports
        .iter()
        .all(|r| r.mu_pow_eps > 0.1 && r.mu_pow_eps <= 1.0));
}

#[test]
fn csv_export_has_headers() {
    let problem = Problem::new(5.0, 3.0, Mode::NearlyCriticalExponent, 0.5).unwrap();
    let sol = solve_ball_radial(&problem, 1.0, Init::Bump, &RadialOptions::default()).unwrap();
    let mut buf = Vec::new();
    sol.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "r,u,v");
    assert_eq!(lines.count(), sol.u_field.len());
    let js = sol.summary_json();
    assert_eq!(js["mode"], "nearly-critical-exponent");
}

#[test]
fn continuation_rejects_increasing_schedule() {
    let base = Problem::new(5.0, 3.0, Mode::NearlyCriticalExponent, 0.5).unwrap();
    let r = run_continuation(
        &base,
        &Domain::ball(3, 1.0),
        &[0.1, 0.5],
        &ContinuationOptions::default(),
    );
    assert!(r.is_err());
    assert!(geometric_schedule(0.1, 0.5, 1.25).is_err());
}

// -------------------------------------------------------------------- box

#[test]
fn cube_peaks_at_centre_for_both_regimes() {
    for p in [5.0, 2.5] {
        let problem = Problem::new(p, 3.0, Mode::NearlyCriticalExponent, 0.3).unwrap();
        let sol =
            solve_box_fd(&problem, &Domain::unit_cube(), None, &BoxOptions::default()).unwrap();
        let h = 1.0 / 64.0;
        assert!(
            sol.x_peak.iter().all(|&x| (x - 0.5).abs() <= h + 1e-12),
            "{:?}",
            sol.x_peak
        );
        assert_eq!(sol.local_maxima(0.01).len(), 1);
        assert!(sol.u_field.iter().all(|&u| u >= 0.0));
        assert_relative_eq!(
            sol.mu.powf(sol.params.alpha_eps) * sol.u_max,
            1.0,
            epsilon = 1e-13
        );
    }
}

#[test]
fn cube_refinement_changes_u_max_little() {
    let problem = Problem::new(5.0, 3.0, Mode::NearlyCriticalExponent, 0.3).unwrap();
    // At 49 nodes the peak spans fewer than three cells.
    let coarse = BoxOptions {
        nodes: 49,
        ..BoxOptions::default()
    };
    assert!(matches!(
        solve_box_fd(&problem, &Domain::unit_cube(), None, &coarse),
        Err(LabError::Resolution(_))
    ));
    let coarse = BoxOptions {
        min_cells: 2.5,
        ..coarse
    };
    let a = solve_box_fd(&problem, &Domain::unit_cube(), None, &coarse).unwrap();
    let b = solve_box_fd(&problem, &Domain::unit_cube(), None, &BoxOptions::default()).unwrap();
    assert!(
        (a.u_max - b.u_max).abs() / b.u_max < 0.05,
        "{} vs {}",
        a.u_max,
        b.u_max
    );
}

#[test]
fn box_rejects_ball_and_other_dimensions() {
    let problem = Problem::new(5.0, 3.0, Mode::NearlyCriticalExponent, 0.3).unwrap();
    assert!(solve_box_fd(
        &problem,
        &Domain::ball(3, 1.0),
        None,
        &BoxOptions::default()
    )
    .is_err());
    let p4 = Problem::new(3.0, 4.0, Mode::NearlyCriticalExponent, 0.3).unwrap();
    assert!(solve_box_fd(&p4, &Domain::unit_cube(), None, &BoxOptions::default()).is_err());
}

// -------------------------------------------------------------- properties

proptest! {
    #[test]
    fn geometric_schedule_is_decreasing(start in 0.05f64..1.0, frac in 0.01f64..1.0, ratio in 0.3f64..0.95) {
        let end = start * frac;
        let s = geometric_schedule(start, end, ratio).unwrap();
        prop_assert_eq!(s[0], start);
        prop_assert!(s.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(*s.last().unwrap() >= end * (1.0 - 1e-9));
        prop_assert!(s.last().unwrap() * ratio < end);
    }

    #[test]
    fn derivative_weights_exact_on_quartics(h in 0.01f64..0.5, c in prop::array::uniform5(-3.0f64..3.0)) {
        let xs: Vec<f64> = (0..5).map(|k| 1.0 - (4 - k) as f64 * h).collect();
        let f = |x: f64| c[0] + c[1] * x + c[2] * x * x + c[3] * x.powi(3) + c[4] * x.powi(4);
        let df = c[1] + 2.0 * c[2] + 3.0 * c[3] + 4.0 * c[4];
        let w = derivative_weights(1.0, &xs);
        let approx: f64 = (0..5).map(|k| w[k] * f(xs[k])).sum();
        prop_assert!((approx - df).abs() <= 1e-6 * (1.0 + df.abs()) / h.min(1.0));
    }

    #[test]
    fn problem_exponents_reproduce_eps(p in 1.2f64..5.0, eps in 0.01f64..0.5) {
        let pr = Problem::new(p, 3.0, Mode::NearlyCriticalExponent, eps);
        if let Ok(pr) = pr {
            let defect = 3.0 / (p + 1.0) + 3.0 / (pr.q() + 1.0) - 1.0;
            prop_assert!((defect - eps).abs() < 1e-12);
            prop_assert!(pr.length_exponent() == 1.0 - eps / 2.0);
        }
    }
}
