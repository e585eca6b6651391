//! Green's functions on an axis-aligned box in ℝ³ by finite differences.
//!
//! The singular parts are kept analytic: `G = Γ + g` with `g` harmonic and
//! `g = -Γ` on the boundary, and
//! `G̃ = c_p r^{2-k} - κ r^{3-k} + w` where `w` solves a Poisson problem
//! whose source `G^p - Γ^p - pΓ^{p-1}φ(x0)` is only mildly singular.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::green::{fundamental, newton_constant, norm_diff, Domain};
use crate::iterated::{
    check_tilde_window, correction_coefficient, extract_limit, tilde_coefficient, Extraction,
    TildeOptions, TildeRobin,
};
use crate::linalg::ordered_sum;
use crate::poisson::{BoxGrid, DirichletPoisson};
use crate::quadrature::richardson_table;

/// Grid function on interior and boundary nodes, extended indices
/// `0..=n+1` per axis.
#[derive(Debug, Clone)]
pub struct BoxField {
    pub grid: BoxGrid,
    pub values: Vec<f64>,
}

impl BoxField {
    fn dims(&self) -> [usize; 3] {
        self.grid.n.map(|n| n + 2)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        let d = self.dims();
        self.values[(i * d[1] + j) * d[2] + k]
    }

    /// Builds the extended field from interior values and boundary data.
    pub fn from_interior<B: Fn([f64; 3]) -> f64 + Sync>(
        grid: BoxGrid,
        interior: &[f64],
        boundary: B,
    ) -> Self {
        let d = grid.n.map(|n| n + 2);
        let values: Vec<f64> = (0..d[0] * d[1] * d[2])
            .into_par_iter()
            .map(|idx| {
                let (i, j, k) = (idx / (d[1] * d[2]), (idx / d[2]) % d[1], idx % d[2]);
                let on_boundary =
                    i == 0 || j == 0 || k == 0 || i == d[0] - 1 || j == d[1] - 1 || k == d[2] - 1;
                if on_boundary {
                    boundary([grid.coord(0, i), grid.coord(1, j), grid.coord(2, k)])
                } else {
                    interior[grid.index(i - 1, j - 1, k - 1)]
                }
            })
            .collect();
        Self { grid, values }
    }

    /// Tensor cubic Lagrange interpolation.
    pub fn interp(&self, x: [f64; 3]) -> f64 {
        let d = self.dims();
        let mut base = [0usize; 3];
        let mut wts = [[0.0; 4]; 3];
        for a in 0..3 {
            let t = (x[a] - self.grid.lo[a]) / self.grid.h[a];
            let b = (t.floor() as isize - 1).clamp(0, d[a] as isize - 4) as usize;
            base[a] = b;
            for m in 0..4 {
                let mut w = 1.0;
                for l in 0..4 {
                    if l != m {
                        w *= (t - (b + l) as f64) / (m as f64 - l as f64);
                    }
                }
                wts[a][m] = w;
            }
        }
        let mut sum = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    sum += wts[0][a]
                        * wts[1][b]
                        * wts[2][c]
                        * self.at(base[0] + a, base[1] + b, base[2] + c);
                }
            }
        }
        sum
    }

    /// Outward normal derivative at a boundary node by a one-sided
    /// fourth-order difference.
    pub fn normal_derivative(&self, node: &FaceNode) -> f64 {
        let d = self.dims();
        let axis = node.axis;
        let h = self.grid.h[axis];
        let step = |m: usize| -> f64 {
            let mut idx = node.index;
            idx[axis] = if node.upper { d[axis] - 1 - m } else { m };
            self.at(idx[0], idx[1], idx[2])
        };
        (25.0 * step(0) - 48.0 * step(1) + 36.0 * step(2) - 16.0 * step(3) + 3.0 * step(4))
            / (12.0 * h)
    }
}

/// Boundary quadrature node of a box: tensor trapezoid on each face.
#[derive(Debug, Clone, Copy)]
pub struct FaceNode {
    pub point: [f64; 3],
    pub normal: [f64; 3],
    pub weight: f64,
    pub axis: usize,
    pub upper: bool,
    pub index: [usize; 3],
}

pub fn face_rule(grid: &BoxGrid) -> Vec<FaceNode> {
    let d = grid.n.map(|n| n + 2);
    let mut out = Vec::new();
    for axis in 0..3 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        for upper in [false, true] {
            let m = if upper { d[axis] - 1 } else { 0 };
            let mut normal = [0.0; 3];
            normal[axis] = if upper { 1.0 } else { -1.0 };
            for ia in 0..d[a] {
                for ib in 0..d[b] {
                    let wa = if ia == 0 || ia == d[a] - 1 { 0.5 } else { 1.0 };
                    let wb = if ib == 0 || ib == d[b] - 1 { 0.5 } else { 1.0 };
                    let mut index = [0; 3];
                    index[axis] = m;
                    index[a] = ia;
                    index[b] = ib;
                    let point = [0, 1, 2].map(|e| grid.coord(e, index[e]));
                    out.push(FaceNode {
                        point,
                        normal,
                        weight: wa * wb * grid.h[a] * grid.h[b],
                        axis,
                        upper,
                        index,
                    });
                }
            }
        }
    }
    out
}

fn box_bounds(domain: &Domain) -> Result<([f64; 3], [f64; 3])> {
    match domain {
        Domain::Box { lo, hi } => Ok((*lo, *hi)),
        _ => Err(LabError::Domain("expected a box domain".into())),
    }
}

/// Grid with `nodes` interior points along the longest edge and matching
/// spacing elsewhere.
pub fn grid_for(lo: [f64; 3], hi: [f64; 3], nodes: usize) -> BoxGrid {
    let longest = (0..3).map(|d| hi[d] - lo[d]).fold(0.0, f64::max);
    let h = longest / (nodes + 1) as f64;
    let n = [0, 1, 2].map(|d| (((hi[d] - lo[d]) / h).round() as usize).max(2) - 1);
    BoxGrid::new(lo, hi, n)
}

fn grad_gamma(y: [f64; 3], x0: [f64; 3]) -> [f64; 3] {
    let r = norm_diff(&y, &x0);
    let f = -newton_constant(3.0) / r.powi(3);
    [0, 1, 2].map(|d| f * (y[d] - x0[d]))
}

/// `G(x0, ·) = Γ + g` on a box.
#[derive(Debug, Clone)]
pub struct BoxGreen {
    pub x0: [f64; 3],
    pub g: BoxField,
    /// `φ(x0) = g(x0, x0)`.
    pub phi: f64,
}

impl BoxGreen {
    pub fn new(domain: &Domain, x0: [f64; 3], nodes: usize) -> Result<Self> {
        let (lo, hi) = box_bounds(domain)?;
        domain.require_interior(&x0)?;
        let grid = grid_for(lo, hi, nodes);
        let solver = DirichletPoisson::new(grid);
        Ok(Self::with_solver(&solver, x0))
    }

    fn with_solver(solver: &DirichletPoisson, x0: [f64; 3]) -> Self {
        let grid = *solver.grid();
        let bc = move |y: [f64; 3]| -fundamental(norm_diff(&y, &x0), 3.0);
        let interior = solver.solve_with_boundary(&vec![0.0; grid.len()], bc);
        let g = BoxField::from_interior(grid, &interior, bc);
        let phi = g.interp(x0);
        Self { x0, g, phi }
    }

    pub fn grid(&self) -> &BoxGrid {
        &self.g.grid
    }

    pub fn green(&self, y: [f64; 3]) -> f64 {
        fundamental(norm_diff(&y, &self.x0), 3.0) + self.g.interp(y)
    }

    /// `∇φ(x0) = 2∇_y g(x0, y)|_{y=x0}` by symmetry of `g`; central
    /// differences at `2h` and `h` with one Richardson step.
    pub fn grad_phi(&self) -> [f64; 3] {
        let h = self.grid().h.iter().copied().fold(f64::INFINITY, f64::min);
        [0, 1, 2].map(|d| {
            let diff = |s: f64| {
                let (mut xp, mut xm) = (self.x0, self.x0);
                xp[d] += s;
                xm[d] -= s;
                (self.g.interp(xp) - self.g.interp(xm)) / s
            };
            (4.0 * diff(h) - diff(2.0 * h)) / 3.0
        })
    }

    /// `∂G/∂n` at a face node.
    pub fn normal_derivative(&self, node: &FaceNode) -> f64 {
        let gg = grad_gamma(node.point, self.x0);
        let dg = self.g.normal_derivative(node);
        (0..3).map(|d| gg[d] * node.normal[d]).sum::<f64>() + dg
    }
}

/// `G̃(x0, ·)` on a box.
#[derive(Debug, Clone)]
pub struct BoxTilde {
    pub p: f64,
    pub cp: f64,
    pub kappa: f64,
    /// `∇_y g(x0, y)` at `y = x0`, i.e. `∇φ(x0)/2`.
    pub a: [f64; 3],
    /// Coefficient of the odd term `r^{3-p} a·(y - x0)`.
    pub dodd: f64,
    /// `G̃` minus the singular terms.
    pub w: BoxField,
    /// `φ̃(x0) = w(x0)`.
    pub phi_t: f64,
}

impl BoxTilde {
    pub fn new(green: &BoxGreen, solver: &DirichletPoisson, p: f64) -> Result<Self> {
        check_tilde_window(p, 3.0)?;
        let grid = *green.grid();
        let x0 = green.x0;
        let k = p;
        let cp = tilde_coefficient(p, 3.0);
        let kappa = correction_coefficient(p, 3.0, green.phi);
        let phi = green.phi;
        let c = newton_constant(3.0);
        let a = green.grad_phi().map(|v| 0.5 * v);
        // -Δ(r^{3-p} a·d) = -(6-p)(3-p) r^{1-p} a·d
        let dodd = -p * c.powf(p - 1.0) / ((6.0 - p) * (3.0 - p));
        let source = |y: [f64; 3], g: f64| -> f64 {
            let r = norm_diff(&y, &x0);
            let gam = fundamental(r, 3.0);
            let ad: f64 = (0..3).map(|d| a[d] * (y[d] - x0[d])).sum();
            gam.powf(p) * (p * (g / gam).ln_1p()).exp_m1()
                - p * c.powf(p - 1.0) * r.powf(1.0 - k) * (phi + ad)
        };
        let hmin = grid.h.iter().copied().fold(f64::INFINITY, f64::min);
        let f: Vec<f64> = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let [nx, ny, nz] = grid.n;
                let _ = nx;
                let (i, j, kk) = (idx / (ny * nz), (idx / nz) % ny, idx % nz);
                let y = grid.point(i, j, kk);
                if norm_diff(&y, &x0) > 1e-9 * hmin {
                    source(y, green.g.at(i + 1, j + 1, kk + 1))
                } else {
                    // Cell average over a 4³ midpoint rule that avoids the source.
                    let mut acc = 0.0;
                    for a in 0..4 {
                        for b in 0..4 {
                            for e in 0..4 {
                                let off = [a, b, e].map(|m| (m as f64 - 1.5) / 4.0);
                                let z = [0, 1, 2].map(|d| y[d] + off[d] * grid.h[d]);
                                acc += source(z, green.g.interp(z));
                            }
                        }
                    }
                    acc / 64.0
                }
            })
            .collect();
        let bc = move |y: [f64; 3]| {
            let r = norm_diff(&y, &x0);
            let ad: f64 = (0..3).map(|d| a[d] * (y[d] - x0[d])).sum();
            -(cp * r.powf(2.0 - k) - kappa * r.powf(3.0 - k) + dodd * r.powf(3.0 - k) * ad)
        };
        let interior = solver.solve_with_boundary(&f, bc);
        let w = BoxField::from_interior(grid, &interior, bc);
        let phi_t = w.interp(x0);
        Ok(Self {
            p,
            cp,
            kappa,
            a,
            dodd,
            w,
            phi_t,
        })
    }

    pub fn value(&self, x0: [f64; 3], y: [f64; 3]) -> f64 {
        self.singular(x0, y) + self.w.interp(y)
    }

    /// Removed part `c_p r^{2-p} - κ r^{3-p} + D r^{3-p} a·(y - x0)`.
    pub fn singular(&self, x0: [f64; 3], y: [f64; 3]) -> f64 {
        let r = norm_diff(&y, &x0);
        let ad: f64 = (0..3).map(|d| self.a[d] * (y[d] - x0[d])).sum();
        self.cp * r.powf(2.0 - self.p) + (self.dodd * ad - self.kappa) * r.powf(3.0 - self.p)
    }

    /// Gradient of `ĝ(x0, ·)` at `x0` with an error estimate, from symmetric
    /// differences of `w` at offsets `s0, s0/2, s0/4`. The odd remainder of
    /// `w` starts at `r^{5-p}`, so the differences are extrapolated in the
    /// exponents `4-p` and `2`. Offsets below two cells are dominated by
    /// the discretisation error near `x0`.
    pub fn partial_gradient_from(&self, x0: [f64; 3], s0: f64) -> ([f64; 3], f64) {
        let mut grad = [0.0; 3];
        let mut err: f64 = 0.0;
        for d in 0..3 {
            let vals: Vec<f64> = [1.0, 0.5, 0.25]
                .iter()
                .map(|m| {
                    let s = m * s0;
                    let (mut xp, mut xm) = (x0, x0);
                    xp[d] += s;
                    xm[d] -= s;
                    (self.w.interp(xp) - self.w.interp(xm)) / (2.0 * s)
                })
                .collect();
            let (g, e) = richardson_table(&vals, 2.0, &[4.0 - self.p, 2.0]);
            grad[d] = g;
            err = err.max(e);
        }
        (grad, err)
    }

    /// `∂G̃/∂n` at a face node.
    pub fn normal_derivative(&self, x0: [f64; 3], node: &FaceNode) -> f64 {
        let y = node.point;
        let r = norm_diff(&y, &x0);
        let k = self.p;
        let ad: f64 = (0..3).map(|d| self.a[d] * (y[d] - x0[d])).sum();
        let an: f64 = (0..3).map(|d| self.a[d] * node.normal[d]).sum();
        let radial = self.cp * (2.0 - k) * r.powf(1.0 - k)
            + (self.dodd * ad - self.kappa) * (3.0 - k) * r.powf(2.0 - k);
        let dr: f64 = (0..3).map(|d| (y[d] - x0[d]) / r * node.normal[d]).sum();
        radial * dr + self.dodd * r.powf(3.0 - k) * an + self.w.normal_derivative(node)
    }
}

/// Fields for one source point at one resolution.
pub struct BoxSolve {
    pub green: BoxGreen,
    pub tilde: Option<BoxTilde>,
}

pub fn solve_box(domain: &Domain, x0: [f64; 3], nodes: usize, p: Option<f64>) -> Result<BoxSolve> {
    let (lo, hi) = box_bounds(domain)?;
    domain.require_interior(&x0)?;
    let grid = grid_for(lo, hi, nodes);
    if domain.dist_to_boundary(&x0) < 2.0 * grid.h.iter().copied().fold(0.0, f64::max) {
        return Err(LabError::Resolution(
            "source closer than two cells to the boundary".into(),
        ));
    }
    let solver = DirichletPoisson::new(grid);
    let green = BoxGreen::with_solver(&solver, x0);
    let tilde = p.map(|p| BoxTilde::new(&green, &solver, p)).transpose()?;
    Ok(BoxSolve { green, tilde })
}

/// `φ̃(x0)` and its gradient on a box. The value is Richardson-combined from
/// `nodes` and `2·nodes+1` interior points; the gradient uses central
/// differences of the fine-grid diagonal with step one coarse cell.
/// Largest gradient offset: `16` coarse cells, capped at half the distance
/// to the boundary.
pub fn default_gradient_offset(domain: &Domain, x0: [f64; 3], coarse: &BoxSolve) -> f64 {
    let h = coarse.green.grid().h.iter().copied().fold(0.0, f64::max);
    (16.0 * h).min(0.5 * domain.dist_to_boundary(&x0))
}

/// `∇_y ĝ(x0, x0)` from a grid and its refinement (`h` halved): the same
/// offsets, starting at `s0`, on both, then one Richardson step in `h²`.
pub fn tilde_gradient_two_grids(
    coarse: &BoxSolve,
    fine: &BoxSolve,
    x0: [f64; 3],
    s0: f64,
) -> ([f64; 3], f64) {
    let grad_on = |s: &BoxSolve| {
        s.tilde.as_ref().map_or(([f64::NAN; 3], f64::NAN), |t| {
            t.partial_gradient_from(x0, s0)
        })
    };
    let ((gf, ef), (gc, _)) = (grad_on(fine), grad_on(coarse));
    let corr = [0, 1, 2].map(|d| (gf[d] - gc[d]) / 3.0);
    let err = corr.iter().fold(ef, |m, c| m.max(c.abs()));
    ([0, 1, 2].map(|d| gf[d] + corr[d]), err)
}

pub fn tilde_robin_box(
    domain: &Domain,
    p: f64,
    x0: &[f64],
    opts: &TildeOptions,
) -> Result<TildeRobin> {
    check_tilde_window(p, 3.0)?;
    let x0: [f64; 3] = x0
        .try_into()
        .map_err(|_| LabError::Domain("box points have 3 coordinates".into()))?;
    let fine_solve = solve_box(domain, x0, 2 * opts.box_nodes + 1, Some(p))?;
    let coarse_solve = solve_box(domain, x0, opts.box_nodes, Some(p))?;
    let phi_t_of = |s: &BoxSolve| s.tilde.as_ref().map_or(f64::NAN, |t| t.phi_t);
    let (fine, coarse) = (phi_t_of(&fine_solve), phi_t_of(&coarse_solve));
    let s0 = default_gradient_offset(domain, x0, &coarse_solve);
    let (gf, gerr) = tilde_gradient_two_grids(&coarse_solve, &fine_solve, x0, s0);
    Ok(TildeRobin {
        phi_t: fine,
        phi_t_error: (fine - coarse).abs(),
        grad_phi_t: gf.to_vec(),
        grad_error: gerr,
        method: "box-finite-difference",
        extraction: None,
    })
}

/// `φ(x0)` on a box from the eigenfunction series of `G`, extracted from
/// symmetric offsets `x0 ± δ e_z`. Independent of the grid solver.
pub fn phi_box_series(
    domain: &Domain,
    x0: [f64; 3],
    levels: usize,
    tol: f64,
) -> Result<Extraction> {
    let (lo, hi) = box_bounds(domain)?;
    domain.require_interior(&x0)?;
    let len = [0, 1, 2].map(|d| hi[d] - lo[d]);
    let dist = domain.dist_to_boundary(&x0);
    let green_z = |z: f64| -> f64 {
        // 2-D sine series in (x, y), exact 1-D Green's function in z.
        let a = x0[2].min(z) - lo[2];
        let b = hi[2] - x0[2].max(z);
        let dz = (z - x0[2]).abs();
        let kmax = 40.0 / dz.max(1e-12);
        let mmax = (kmax * len[0] / std::f64::consts::PI).ceil() as usize + 1;
        let nmax = (kmax * len[1] / std::f64::consts::PI).ceil() as usize + 1;
        let pi = std::f64::consts::PI;
        ordered_sum((1..mmax + 1).into_par_iter().map(|m| {
            let km = m as f64 * pi / len[0];
            let sx = (km * (x0[0] - lo[0])).sin().powi(2);
            let mut acc = 0.0;
            for n in 1..=nmax {
                let kn = n as f64 * pi / len[1];
                let kappa = (km * km + kn * kn).sqrt();
                if kappa > kmax * 1.5 {
                    break;
                }
                let sy = (kn * (x0[1] - lo[1])).sin().powi(2);
                let l = len[2];
                let num = (kappa * (a + b - l)).exp()
                    - (kappa * (a - b - l)).exp()
                    - (kappa * (b - a - l)).exp()
                    + (-kappa * (a + b + l)).exp();
                let g1 = num / (2.0 * kappa * (1.0 - (-2.0 * kappa * l).exp()));
                acc += sx * sy * g1;
            }
            acc
        })) * 4.0
            / (len[0] * len[1])
    };
    let f = |delta: f64| {
        let avg = 0.5 * (green_z(x0[2] + delta) + green_z(x0[2] - delta));
        avg - fundamental(delta, 3.0)
    };
    extract_limit(f, 0.1 * dist, levels, &[2.0, 4.0, 6.0, 8.0, 10.0], tol)
}

/// Box identity report used by the bundle builder.
#[derive(Debug, Clone, Serialize)]
pub struct FaceIntegrals {
    pub identity_i: f64,
    pub identity_ii: Option<f64>,
    pub vec_i: [f64; 3],
    pub vec_ii: Option<[f64; 3]>,
}

pub fn face_integrals(solve: &BoxSolve) -> FaceIntegrals {
    let x0 = solve.green.x0;
    let nodes = face_rule(solve.green.grid());
    let mut out = FaceIntegrals {
        identity_i: 0.0,
        identity_ii: solve.tilde.as_ref().map(|_| 0.0),
        vec_i: [0.0; 3],
        vec_ii: solve.tilde.as_ref().map(|_| [0.0; 3]),
    };
    for node in &nodes {
        let dg = solve.green.normal_derivative(node);
        let xn: f64 = (0..3)
            .map(|d| node.normal[d] * (node.point[d] - x0[d]))
            .sum();
        out.identity_i += node.weight * dg * dg * xn;
        for d in 0..3 {
            out.vec_i[d] += node.weight * dg * dg * node.normal[d];
        }
        if let Some(t) = &solve.tilde {
            let dt = t.normal_derivative(x0, node);
            *out.identity_ii.as_mut().unwrap() += node.weight * dt * dg * xn;
            let v = out.vec_ii.as_mut().unwrap();
            for d in 0..3 {
                v[d] += node.weight * dt * dg * node.normal[d];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn face_rule_area() {
        let grid = BoxGrid::new([0.0; 3], [1.0, 2.0, 0.5], [7, 15, 3]);
        let area: f64 = face_rule(&grid).iter().map(|n| n.weight).sum();
        assert!((area - 2.0 * (2.0 + 0.5 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn interpolation_is_cubic_exact() {
        let grid = BoxGrid::new([0.0; 3], [1.0; 3], [9, 9, 9]);
        let f = |x: [f64; 3]| x[0].powi(3) - 2.0 * x[1] * x[2] + x[2].powi(2);
        let interior: Vec<f64> = (0..grid.len())
            .map(|idx| f(grid.point(idx / 81, (idx / 9) % 9, idx % 9)))
            .collect();
        let field = BoxField::from_interior(grid, &interior, f);
        let x = [0.33, 0.71, 0.05];
        assert!((field.interp(x) - f(x)).abs() < 1e-13);
    }
}
