//! Quadrature rules and extrapolation helpers.

use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = z;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Gauss–Legendre rule mapped to `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(n);
    let (m, h) = (0.5 * (a + b), 0.5 * (b - a));
    x.iter()
        .zip(&w)
        .map(|(xi, wi)| (m + h * xi, h * wi))
        .collect()
}

/// Trapezoid rule with the Euler–Maclaurin endpoint correction on every
/// panel, using sampled derivatives. Fourth order on smooth data.
pub fn hermite_trapezoid(x: &[f64], f: &[f64], df: &[f64]) -> f64 {
    cumulative_hermite(x, f, df).last().copied().unwrap_or(0.0)
}

/// Running integral `∫_{x_0}^{x_i}` of the Hermite trapezoid rule.
pub fn cumulative_hermite(x: &[f64], f: &[f64], df: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    if !x.is_empty() {
        out.push(0.0);
    }
    for i in 1..x.len() {
        let h = x[i] - x[i - 1];
        acc += 0.5 * h * (f[i - 1] + f[i]) + h * h / 12.0 * (df[i - 1] - df[i]);
        out.push(acc);
    }
    out
}

/// Plain composite trapezoid rule.
pub fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
    x.windows(2)
        .zip(f.windows(2))
        .map(|(xs, fs)| 0.5 * (xs[1] - xs[0]) * (fs[0] + fs[1]))
        .sum()
}

/// Richardson step: removes an error term `c·s^order` given estimates at
/// scales `s` (coarse) and `s/ratio` (fine).
pub fn richardson(coarse: f64, fine: f64, ratio: f64, order: f64) -> f64 {
    let k = ratio.powf(order);
    (k * fine - coarse) / (k - 1.0)
}

/// Repeated Richardson elimination of the error terms `s^{e_1}, s^{e_2}, …`
/// from values at scales `s_0, s_0/ratio, s_0/ratio², …`.
///
/// Returns the most eliminated estimate and the gap to the previous column
/// as its error estimate.
pub fn richardson_table(values: &[f64], ratio: f64, exponents: &[f64]) -> (f64, f64) {
    let mut col = values.to_vec();
    let mut prev_best = *values.last().unwrap_or(&f64::NAN);
    let mut best = prev_best;
    for &e in exponents.iter().take(values.len().saturating_sub(1)) {
        let next: Vec<f64> = col
            .windows(2)
            .map(|w| richardson(w[0], w[1], ratio, e))
            .collect();
        prev_best = best;
        best = *next.last().unwrap_or(&best);
        col = next;
    }
    (best, (best - prev_best).abs())
}

/// Aitken Δ² acceleration of three successive terms. Falls back to the
/// last term when the second difference vanishes.
pub fn aitken(s0: f64, s1: f64, s2: f64) -> f64 {
    let d2 = s2 - 2.0 * s1 + s0;
    if d2.abs() <= 1e-300 || !d2.is_finite() {
        return s2;
    }
    s2 - (s2 - s1).powi(2) / d2
}

/// Weighted least squares line `y = c0 + c1 x`; returns
/// `(c0, c1, se_c0, se_c1, residuals)`.
pub fn weighted_line_fit(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64, f64, Vec<f64>) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    let sxy: f64 = x
        .iter()
        .zip(y)
        .zip(w)
        .map(|((a, c), b)| b * (a - mx) * (c - my))
        .sum();
    let c1 = sxy / sxx;
    let c0 = my - c1 * mx;
    let res: Vec<f64> = x.iter().zip(y).map(|(a, c)| c - (c0 + c1 * a)).collect();
    let n = x.len() as f64;
    let dof = (n - 2.0).max(1.0);
    let s2 = res.iter().zip(w).map(|(r, b)| b * r * r).sum::<f64>() / sw * n / dof;
    let se1 = (s2 / (sxx / sw * n)).sqrt();
    let se0 = (s2 * (1.0 / n + mx * mx / (sxx / sw * n))).sqrt();
    (c0, c1, se0, se1, res)
}

/// Product rule on the unit sphere in ℝ³: Gauss–Legendre in `cos θ`,
/// trapezoid in the azimuth. Returns `(direction, weight)` pairs whose
/// weights sum to 4π.
pub fn sphere_rule(n_theta: usize, n_phi: usize) -> Vec<([f64; 3], f64)> {
    let (x, w) = gauss_legendre(n_theta);
    let dphi = 2.0 * PI / n_phi as f64;
    let mut out = Vec::with_capacity(n_theta * n_phi);
    for (ct, wt) in x.iter().zip(&w) {
        let st = (1.0 - ct * ct).sqrt();
        for j in 0..n_phi {
            let ph = (j as f64 + 0.5) * dphi;
            out.push(([st * ph.cos(), st * ph.sin(), *ct], wt * dphi));
        }
    }
    out
}
