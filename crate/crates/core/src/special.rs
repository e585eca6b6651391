//! Gamma function and sphere areas.

use std::f64::consts::PI;

/// Γ(x) for x > 0. Exact products for integer and half-integer arguments,
/// Lanczos (via `statrs`) otherwise.
pub fn gamma(x: f64) -> f64 {
    let twice = 2.0 * x;
    if twice.fract() == 0.0 && x > 0.0 && x <= 171.0 {
        let mut acc = if x.fract() == 0.0 { 1.0 } else { PI.sqrt() };
        let mut t = if x.fract() == 0.0 { 1.0 } else { 0.5 };
        while t < x {
            acc *= t;
            t += 1.0;
        }
        acc
    } else {
        statrs::function::gamma::gamma(x)
    }
}

/// Surface area σ_N = 2π^{N/2}/Γ(N/2) of the unit sphere in ℝ^N.
pub fn sigma_n(n: f64) -> f64 {
    2.0 * PI.powf(0.5 * n) / gamma(0.5 * n)
}

/// Upper incomplete gamma Γ(s, x).
pub fn gamma_upper(s: f64, x: f64) -> f64 {
    statrs::function::gamma::gamma_ur(s, x) * gamma(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn half_integers() {
        assert_relative_eq!(gamma(0.5), PI.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(gamma(1.5), 0.5 * PI.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(gamma(5.0), 24.0, max_relative = 1e-15);
        assert_relative_eq!(gamma(4.5), 11.631728396567448, max_relative = 1e-14);
        assert_relative_eq!(
            gamma(2.3),
            statrs::function::gamma::gamma(2.3),
            max_relative = 1e-14
        );
    }

    #[test]
    fn spheres() {
        assert_relative_eq!(sigma_n(2.0), 2.0 * PI, max_relative = 1e-15);
        assert_relative_eq!(sigma_n(3.0), 4.0 * PI, max_relative = 1e-15);
        assert_relative_eq!(sigma_n(4.0), 2.0 * PI * PI, max_relative = 1e-15);
        assert_relative_eq!(sigma_n(5.0), 8.0 * PI * PI / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn incomplete() {
        // Γ(1, x) = e^{-x}
        assert_relative_eq!(gamma_upper(1.0, 2.0), (-2.0f64).exp(), max_relative = 1e-12);
    }
}
