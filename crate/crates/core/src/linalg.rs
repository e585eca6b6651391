//! Small dense linear algebra.

use rayon::prelude::*;

use crate::error::{LabError, Result};

/// Solves `A x = b` for square `A` (row-major, `n×n`) by Gaussian
/// elimination with partial pivoting.
pub fn solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap_or(col);
        if m[piv * n + col] == 0.0 || !m[piv * n + col].is_finite() {
            return Err(LabError::Singularity("singular dense system".into()));
        }
        if piv != col {
            for k in 0..n {
                m.swap(piv * n + k, col * n + k);
            }
            x.swap(piv, col);
        }
        let d = m[col * n + col];
        for row in col + 1..n {
            let f = m[row * n + col] / d;
            if f != 0.0 {
                for k in col..n {
                    m[row * n + k] -= f * m[col * n + k];
                }
                x[row] -= f * x[col];
            }
        }
    }
    for row in (0..n).rev() {
        let mut s = x[row];
        for k in row + 1..n {
            s -= m[row * n + k] * x[k];
        }
        x[row] = s / m[row * n + row];
    }
    Ok(x)
}

/// Least-squares solution of `A x ≈ b` for `A` of shape `rows×cols`
/// (row-major, `rows >= cols`) by Householder QR.
pub fn lstsq(a: &[f64], b: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut m = a.to_vec();
    let mut y = b.to_vec();
    for k in 0..cols {
        let norm = (k..rows)
            .map(|i| m[i * cols + k].powi(2))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(LabError::Singularity(
                "rank-deficient least-squares system".into(),
            ));
        }
        let alpha = if m[k * cols + k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..rows).map(|i| m[i * cols + k]).collect();
        v[0] -= alpha;
        let vn = v.iter().map(|x| x * x).sum::<f64>();
        if vn == 0.0 {
            continue;
        }
        for j in k..cols {
            let dot: f64 = (k..rows).map(|i| v[i - k] * m[i * cols + j]).sum();
            let f = 2.0 * dot / vn;
            for i in k..rows {
                m[i * cols + j] -= f * v[i - k];
            }
        }
        let dot: f64 = (k..rows).map(|i| v[i - k] * y[i]).sum();
        let f = 2.0 * dot / vn;
        for i in k..rows {
            y[i] -= f * v[i - k];
        }
    }
    let mut x = vec![0.0; cols];
    for row in (0..cols).rev() {
        let mut s = y[row];
        for k in row + 1..cols {
            s -= m[row * cols + k] * x[k];
        }
        x[row] = s / m[row * cols + row];
    }
    Ok(x)
}

/// Solves a block tridiagonal system with 2×2 blocks.
///
/// `lower[i]`, `diag[i]`, `upper[i]` are row-major blocks of block row `i`
/// (`lower[0]` and `upper[m-1]` are ignored).
pub fn block_tridiag_solve(
    lower: &[[f64; 4]],
    diag: &[[f64; 4]],
    upper: &[[f64; 4]],
    rhs: &[[f64; 2]],
) -> Result<Vec<[f64; 2]>> {
    let m = diag.len();
    let inv = |a: &[f64; 4]| -> Result<[f64; 4]> {
        let det = a[0] * a[3] - a[1] * a[2];
        if det == 0.0 || !det.is_finite() {
            return Err(LabError::Singularity("singular 2x2 pivot block".into()));
        }
        Ok([a[3] / det, -a[1] / det, -a[2] / det, a[0] / det])
    };
    let mul = |a: &[f64; 4], b: &[f64; 4]| {
        [
            a[0] * b[0] + a[1] * b[2],
            a[0] * b[1] + a[1] * b[3],
            a[2] * b[0] + a[3] * b[2],
            a[2] * b[1] + a[3] * b[3],
        ]
    };
    let mulv = |a: &[f64; 4], x: &[f64; 2]| [a[0] * x[0] + a[1] * x[1], a[2] * x[0] + a[3] * x[1]];
    // Forward sweep: c'_i = D_i^{-1} U_i, d'_i = D_i^{-1} r_i.
    let mut cp = vec![[0.0; 4]; m];
    let mut dp = vec![[0.0; 2]; m];
    for i in 0..m {
        let (mut d, mut r) = (diag[i], rhs[i]);
        if i > 0 {
            let lc = mul(&lower[i], &cp[i - 1]);
            let ld = mulv(&lower[i], &dp[i - 1]);
            for k in 0..4 {
                d[k] -= lc[k];
            }
            r = [r[0] - ld[0], r[1] - ld[1]];
        }
        let di = inv(&d)?;
        cp[i] = mul(&di, &upper[i]);
        dp[i] = mulv(&di, &r);
    }
    let mut x = dp;
    for i in (0..m.saturating_sub(1)).rev() {
        let c = mulv(&cp[i], &x[i + 1]);
        x[i] = [x[i][0] - c[0], x[i][1] - c[1]];
    }
    Ok(x)
}

/// Outcome of [`gmres`].
#[derive(Debug, Clone, Copy)]
pub struct GmresInfo {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Parallel sum over fixed-size chunks, added in order, so the result does
/// not depend on the thread count or on work stealing.
pub fn ordered_sum<I: IndexedParallelIterator<Item = f64>>(terms: I) -> f64 {
    let partial: Vec<f64> = terms.chunks(4096).map(|c| c.iter().sum::<f64>()).collect();
    partial.iter().sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    ordered_sum(a.par_iter().zip(b.par_iter()).map(|(x, y)| x * y))
}

/// Restarted GMRES with right preconditioning for `A x = b`.
///
/// `apply` computes `A v`, `precond` computes `M^{-1} v`. `x` holds the
/// initial guess on entry and the solution on exit.
pub fn gmres<A, P>(
    mut apply: A,
    mut precond: P,
    b: &[f64],
    x: &mut [f64],
    rtol: f64,
    restart: usize,
    max_iter: usize,
) -> GmresInfo
where
    A: FnMut(&[f64], &mut [f64]),
    P: FnMut(&[f64], &mut [f64]),
{
    let n = b.len();
    let bnorm = dot(b, b).sqrt().max(1e-300);
    let mut total = 0;
    let mut tmp = vec![0.0; n];
    let mut z = vec![0.0; n];
    loop {
        apply(x, &mut tmp);
        let r: Vec<f64> = b.iter().zip(&tmp).map(|(bi, ai)| bi - ai).collect();
        let beta = dot(&r, &r).sqrt();
        let mut rel = beta / bnorm;
        if rel <= rtol || total >= max_iter {
            return GmresInfo {
                iterations: total,
                relative_residual: rel,
                converged: rel <= rtol,
            };
        }
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut h = vec![vec![0.0; restart]; restart + 1];
        let (mut cs, mut sn) = (vec![0.0; restart], vec![0.0; restart]);
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..restart {
            precond(&basis[k], &mut z);
            apply(&z, &mut tmp);
            let mut w = tmp.clone();
            for j in 0..=k {
                let hj = dot(&w, &basis[j]);
                h[j][k] = hj;
                w.par_iter_mut()
                    .zip(basis[j].par_iter())
                    .for_each(|(wi, vi)| *wi -= hj * vi);
            }
            let wn = dot(&w, &w).sqrt();
            h[k + 1][k] = wn;
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let den = h[k][k].hypot(h[k + 1][k]);
            cs[k] = h[k][k] / den;
            sn[k] = h[k + 1][k] / den;
            h[k][k] = den;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            total += 1;
            k_used = k + 1;
            rel = g[k + 1].abs() / bnorm;
            if rel <= rtol || total >= max_iter || wn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / wn).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let s: f64 = (i + 1..k_used).map(|j| h[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        let mut corr = vec![0.0; n];
        for (j, yj) in y.iter().enumerate() {
            corr.par_iter_mut()
                .zip(basis[j].par_iter())
                .for_each(|(c, v)| *c += yj * v);
        }
        precond(&corr, &mut z);
        x.par_iter_mut()
            .zip(z.par_iter())
            .for_each(|(xi, zi)| *xi += zi);
        if rel <= rtol || total >= max_iter {
            apply(x, &mut tmp);
            let r2: f64 = b.iter().zip(&tmp).map(|(bi, ai)| (bi - ai).powi(2)).sum();
            let rel2 = r2.sqrt() / bnorm;
            return GmresInfo {
                iterations: total,
                relative_residual: rel2,
                converged: rel2 <= rtol * 10.0,
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_solve() {
        let a = [0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let x = solve(&a, &[5.0, 3.0, 4.0], 3).unwrap();
        for (xi, ei) in x.iter().zip([1.0, 2.0, 1.0]) {
            assert!((xi - ei).abs() < 1e-14);
        }
    }

    #[test]
    fn overdetermined_consistent() {
        // rows: x, y, x+y, x-y with x=2, y=-1
        let a = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -1.0];
        let x = lstsq(&a, &[2.0, -1.0, 1.0, 3.0], 4, 2).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-14 && (x[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn block_tridiagonal_matches_dense() {
        let m = 5;
        let lower: Vec<[f64; 4]> = (0..m).map(|i| [0.3, -0.1 * i as f64, 0.05, 0.2]).collect();
        let diag: Vec<[f64; 4]> = (0..m).map(|i| [4.0 + i as f64, 0.7, -0.4, 3.0]).collect();
        let upper: Vec<[f64; 4]> = (0..m).map(|i| [-0.5, 0.1, 0.2 * i as f64, -0.3]).collect();
        let rhs: Vec<[f64; 2]> = (0..m)
            .map(|i| [1.0 + i as f64, -2.0 + 0.5 * i as f64])
            .collect();
        let n = 2 * m;
        let mut a = vec![0.0; n * n];
        for i in 0..m {
            for r in 0..2 {
                for c in 0..2 {
                    a[(2 * i + r) * n + 2 * i + c] = diag[i][2 * r + c];
                    if i > 0 {
                        a[(2 * i + r) * n + 2 * (i - 1) + c] = lower[i][2 * r + c];
                    }
                    if i + 1 < m {
                        a[(2 * i + r) * n + 2 * (i + 1) + c] = upper[i][2 * r + c];
                    }
                }
            }
        }
        let b: Vec<f64> = rhs.iter().flat_map(|x| x.iter().copied()).collect();
        let dense = solve(&a, &b, n).unwrap();
        let x = block_tridiag_solve(&lower, &diag, &upper, &rhs).unwrap();
        for i in 0..m {
            assert!((x[i][0] - dense[2 * i]).abs() < 1e-12);
            assert!((x[i][1] - dense[2 * i + 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn gmres_nonsymmetric() {
        let n = 60;
        let apply = |v: &[f64], out: &mut [f64]| {
            for i in 0..n {
                let l = if i > 0 { v[i - 1] } else { 0.0 };
                let r = if i + 1 < n { v[i + 1] } else { 0.0 };
                out[i] = 3.0 * v[i] - 1.3 * l - 0.4 * r;
            }
        };
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut x = vec![0.0; n];
        let info = gmres(
            apply,
            |v: &[f64], o: &mut [f64]| o.copy_from_slice(v),
            &b,
            &mut x,
            1e-11,
            10,
            500,
        );
        assert!(info.converged, "{info:?}");
        let mut ax = vec![0.0; n];
        apply(&x, &mut ax);
        let err: f64 = ax
            .iter()
            .zip(&b)
            .map(|(a, c)| (a - c).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9);
    }
}
