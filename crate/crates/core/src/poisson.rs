//! Fast Dirichlet Poisson solver for the 7-point Laplacian on a box.
//!
//! Unknowns live on interior nodes `(i, j, k)`, `0 <= i < nx` etc., stored
//! with `k` fastest. The solver diagonalises the discrete Laplacian with
//! type-I sine transforms along each axis.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Uniform interior grid of a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxGrid {
    pub lo: [f64; 3],
    pub n: [usize; 3],
    pub h: [f64; 3],
}

impl BoxGrid {
    /// Interior grid with `n[d]` nodes along axis `d` of `[lo, hi]`.
    pub fn new(lo: [f64; 3], hi: [f64; 3], n: [usize; 3]) -> Self {
        let h = [0, 1, 2].map(|d| (hi[d] - lo[d]) / (n[d] + 1) as f64);
        Self { lo, n, h }
    }

    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n[1] + j) * self.n[2] + k
    }

    /// Coordinates of interior node `(i, j, k)`.
    #[inline]
    pub fn point(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.lo[0] + (i + 1) as f64 * self.h[0],
            self.lo[1] + (j + 1) as f64 * self.h[1],
            self.lo[2] + (k + 1) as f64 * self.h[2],
        ]
    }

    /// Coordinate along axis `d` of extended index `m` (`0` and `n+1` are
    /// boundary nodes).
    #[inline]
    pub fn coord(&self, d: usize, m: usize) -> f64 {
        self.lo[d] + m as f64 * self.h[d]
    }

    pub fn hi(&self) -> [f64; 3] {
        [0, 1, 2].map(|d| self.coord(d, self.n[d] + 1))
    }
}

/// Applies `-Δ_h` with homogeneous Dirichlet data.
pub fn neg_laplacian(grid: &BoxGrid, u: &[f64], out: &mut [f64]) {
    let [nx, ny, nz] = grid.n;
    let [cx, cy, cz] = grid.h.map(|h| 1.0 / (h * h));
    let at = |i: usize, j: usize, k: usize, di: isize, dj: isize, dk: isize| -> f64 {
        let (ii, jj, kk) = (i as isize + di, j as isize + dj, k as isize + dk);
        if ii < 0 || jj < 0 || kk < 0 || ii >= nx as isize || jj >= ny as isize || kk >= nz as isize
        {
            0.0
        } else {
            u[grid.index(ii as usize, jj as usize, kk as usize)]
        }
    };
    out.par_chunks_mut(ny * nz)
        .enumerate()
        .for_each(|(i, slab)| {
            for j in 0..ny {
                for k in 0..nz {
                    let c = 2.0 * u[grid.index(i, j, k)];
                    slab[j * nz + k] = cx * (c - at(i, j, k, -1, 0, 0) - at(i, j, k, 1, 0, 0))
                        + cy * (c - at(i, j, k, 0, -1, 0) - at(i, j, k, 0, 1, 0))
                        + cz * (c - at(i, j, k, 0, 0, -1) - at(i, j, k, 0, 0, 1));
                }
            }
        });
}

struct Dst {
    n: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl Dst {
    fn new(planner: &mut FftPlanner<f64>, n: usize) -> Self {
        Self {
            n,
            fft: planner.plan_fft_forward(2 * (n + 1)),
        }
    }

    /// Unnormalised DST-I of `x` in place.
    fn apply(&self, x: &mut [f64], buf: &mut Vec<Complex<f64>>) {
        let n = self.n;
        let m = 2 * (n + 1);
        buf.clear();
        buf.resize(m, Complex::new(0.0, 0.0));
        for j in 0..n {
            buf[j + 1].re = x[j];
            buf[m - 1 - j].re = -x[j];
        }
        self.fft.process(buf);
        for k in 0..n {
            x[k] = -0.5 * buf[k + 1].im;
        }
    }
}

/// Reusable solver for `-Δ_h u = f` on one grid.
pub struct DirichletPoisson {
    grid: BoxGrid,
    dst: [Dst; 3],
    eig: [Vec<f64>; 3],
}

impl DirichletPoisson {
    pub fn new(grid: BoxGrid) -> Self {
        let mut planner = FftPlanner::new();
        let dst = [0, 1, 2].map(|d| Dst::new(&mut planner, grid.n[d]));
        let eig = [0, 1, 2].map(|d| {
            let n = grid.n[d];
            let h = grid.h[d];
            (1..=n)
                .map(|k| {
                    let s = (std::f64::consts::PI * k as f64 / (2.0 * (n + 1) as f64)).sin();
                    4.0 * s * s / (h * h)
                })
                .collect()
        });
        Self { grid, dst, eig }
    }

    pub fn grid(&self) -> &BoxGrid {
        &self.grid
    }

    fn transform(&self, u: &mut [f64]) {
        let [nx, ny, nz] = self.grid.n;
        // Axis z: contiguous lines.
        u.par_chunks_mut(nz)
            .for_each_init(Vec::new, |buf, line| self.dst[2].apply(line, buf));
        // Axis y: strided within each x-slab.
        u.par_chunks_mut(ny * nz).for_each_init(
            || (Vec::new(), vec![0.0; ny]),
            |(buf, line), slab| {
                for k in 0..nz {
                    for j in 0..ny {
                        line[j] = slab[j * nz + k];
                    }
                    self.dst[1].apply(line, buf);
                    for j in 0..ny {
                        slab[j * nz + k] = line[j];
                    }
                }
            },
        );
        // Axis x: gather columns of stride ny*nz.
        let plane = ny * nz;
        let cols: Vec<Vec<f64>> = (0..plane)
            .into_par_iter()
            .map_init(Vec::new, |buf, c| {
                let mut line: Vec<f64> = (0..nx).map(|i| u[i * plane + c]).collect();
                self.dst[0].apply(&mut line, buf);
                line
            })
            .collect();
        for (c, line) in cols.iter().enumerate() {
            for i in 0..nx {
                u[i * plane + c] = line[i];
            }
        }
    }

    /// Overwrites `f` with the solution of `-Δ_h u = f`.
    pub fn solve_in_place(&self, f: &mut [f64]) {
        let [nx, ny, nz] = self.grid.n;
        assert_eq!(f.len(), nx * ny * nz);
        self.transform(f);
        let norm = 8.0 / ((nx + 1) * (ny + 1) * (nz + 1)) as f64;
        f.par_chunks_mut(ny * nz).enumerate().for_each(|(i, slab)| {
            for j in 0..ny {
                for k in 0..nz {
                    slab[j * nz + k] *= norm / (self.eig[0][i] + self.eig[1][j] + self.eig[2][k]);
                }
            }
        });
        self.transform(f);
    }

    /// Solves `-Δ_h u = f` in the interior with `u = g` on the boundary.
    pub fn solve_with_boundary<G>(&self, f: &[f64], g: G) -> Vec<f64>
    where
        G: Fn([f64; 3]) -> f64 + Sync,
    {
        let grid = self.grid;
        let [nx, ny, nz] = grid.n;
        let mut rhs = f.to_vec();
        let [cx, cy, cz] = grid.h.map(|h| 1.0 / (h * h));
        let p =
            |i: usize, j: usize, k: usize| [grid.coord(0, i), grid.coord(1, j), grid.coord(2, k)];
        rhs.par_chunks_mut(ny * nz)
            .enumerate()
            .for_each(|(i, slab)| {
                let ie = i + 1;
                for j in 0..ny {
                    let je = j + 1;
                    for k in 0..nz {
                        let ke = k + 1;
                        let mut add = 0.0;
                        if i == 0 {
                            add += cx * g(p(0, je, ke));
                        }
                        if i == nx - 1 {
                            add += cx * g(p(nx + 1, je, ke));
                        }
                        if j == 0 {
                            add += cy * g(p(ie, 0, ke));
                        }
                        if j == ny - 1 {
                            add += cy * g(p(ie, ny + 1, ke));
                        }
                        if k == 0 {
                            add += cz * g(p(ie, je, 0));
                        }
                        if k == nz - 1 {
                            add += cz * g(p(ie, je, nz + 1));
                        }
                        slab[j * nz + k] += add;
                    }
                }
            });
        self.solve_in_place(&mut rhs);
        rhs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverts_the_stencil() {
        let grid = BoxGrid::new([0.0; 3], [1.0, 1.5, 0.8], [9, 14, 7]);
        let u: Vec<f64> = (0..grid.len())
            .map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.5)
            .collect();
        let mut f = vec![0.0; grid.len()];
        neg_laplacian(&grid, &u, &mut f);
        let solver = DirichletPoisson::new(grid);
        solver.solve_in_place(&mut f);
        let err = u
            .iter()
            .zip(&f)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn harmonic_boundary_data() {
        // x² - y² is discretely harmonic, so it is reproduced exactly.
        let grid = BoxGrid::new([-1.0; 3], [1.0; 3], [15, 15, 15]);
        let solver = DirichletPoisson::new(grid);
        let g = |x: [f64; 3]| x[0] * x[0] - x[1] * x[1] + 0.5 * x[2];
        let u = solver.solve_with_boundary(&vec![0.0; grid.len()], g);
        let mut err: f64 = 0.0;
        for i in 0..15 {
            for j in 0..15 {
                for k in 0..15 {
                    err = err.max((u[grid.index(i, j, k)] - g(grid.point(i, j, k))).abs());
                }
            }
        }
        assert!(err < 1e-12, "{err}");
    }
}
