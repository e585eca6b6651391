//! Exponent algebra on the critical hyperbola
//! `N/(p+1) + N/(q+1) = N - 2`.
//!
//! Every downstream formula is keyed on the tail regime of the ground state,
//! i.e. on the position of `p` relative to `N/(N-2)`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Relative band used when `p` is not a small rational; ties go to the
/// logarithmic regime.
const REGIME_BAND: f64 = 1e-12;

/// Tail behaviour of the ground state `U` at infinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// `p > N/(N-2)`: `U ~ b r^{2-N}`.
    TailSupercritical,
    /// `p = N/(N-2)`: `U ~ b r^{2-N} log r`.
    TailLogarithmic,
    /// `2/(N-2) < p < N/(N-2)`: `U ~ b r^{2-p(N-2)}`.
    TailSubcritical,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::TailSupercritical => "tail-supercritical",
            Regime::TailLogarithmic => "tail-logarithmic",
            Regime::TailSubcritical => "tail-subcritical",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Exponents, dimension and hyperbola defect of one instance of the system
/// `-Δu = v^p`, `-Δv = u^{q_ε}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub p: f64,
    /// Dimension. Integer at the user surface, real inside radial code.
    #[serde(rename = "N")]
    pub n: f64,
    /// Critical partner of `p`.
    pub q: f64,
    pub q_eps: f64,
    pub eps: f64,
    /// `N/(q+1)`.
    pub alpha: f64,
    /// `N/(p+1)`.
    pub beta: f64,
    /// `N/(q_ε+1)`.
    pub alpha_eps: f64,
}

impl SystemParams {
    /// Critical pair `(p, q)` with zero defect.
    pub fn critical(p: f64, n: f64) -> Result<Self> {
        Self::new(p, n, 0.0)
    }

    pub fn new(p: f64, n: f64, eps: f64) -> Result<Self> {
        let q = critical_q(p, n)?;
        let q_eps = qeps_from_eps(p, n, eps)?;
        Ok(Self {
            p,
            n,
            q,
            q_eps,
            eps,
            alpha: n / (q + 1.0),
            beta: n / (p + 1.0),
            alpha_eps: n / (q_eps + 1.0),
        })
    }

    /// Same `(p, N)` with a different defect.
    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        Self::new(self.p, self.n, eps)
    }

    pub fn regime(&self) -> Regime {
        classify_regime(self.p, self.n)
    }

    /// `N/(p+1) + N/(q+1) - (N-2)` for the critical pair.
    pub fn closure_residual(&self) -> f64 {
        self.n / (self.p + 1.0) + self.n / (self.q + 1.0) - (self.n - 2.0)
    }

    /// Recomputed defect `N/(p+1) + N/(q_ε+1) - (N-2)`.
    pub fn defect(&self) -> f64 {
        self.n / (self.p + 1.0) + self.n / (self.q_eps + 1.0) - (self.n - 2.0)
    }

    /// Decay exponent θ of `U ~ r^{-θ}` (log factor aside).
    pub fn u_tail_exponent(&self) -> f64 {
        match self.regime() {
            Regime::TailSubcritical => self.p * (self.n - 2.0) - 2.0,
            _ => self.n - 2.0,
        }
    }
}

fn check_admissible(p: f64, n: f64) -> Result<()> {
    if !(n.is_finite() && n > 2.0) {
        return Err(LabError::Domain(format!("dimension N = {n} must exceed 2")));
    }
    if !p.is_finite() {
        return Err(LabError::Domain(format!("exponent p = {p} is not finite")));
    }
    let lower = 2.0 / (n - 2.0);
    let upper = (n + 2.0) / (n - 2.0);
    if p <= lower {
        return Err(LabError::Domain(format!(
            "p = {p} violates the lower bound p > 2/(N-2) = {lower}"
        )));
    }
    if p > upper * (1.0 + 1e-12) {
        return Err(LabError::Domain(format!(
            "p = {p} violates the upper bound p <= (N+2)/(N-2) = {upper}"
        )));
    }
    Ok(())
}

/// Solves `N/(p+1) + N/(q+1) = N-2` for `q`.
pub fn critical_q(p: f64, n: f64) -> Result<f64> {
    check_admissible(p, n)?;
    let alpha = (n - 2.0) - n / (p + 1.0);
    Ok(n / alpha - 1.0)
}

/// Inverts the defect `ε = N/(p+1) + N/(q_ε+1) - (N-2)` for `q_ε`.
pub fn qeps_from_eps(p: f64, n: f64, eps: f64) -> Result<f64> {
    check_admissible(p, n)?;
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(LabError::Domain(format!("defect eps = {eps} must be >= 0")));
    }
    let alpha_eps = eps + (n - 2.0) - n / (p + 1.0);
    let q_eps = n / alpha_eps - 1.0;
    if p * q_eps <= 1.0 {
        return Err(LabError::Infeasible(format!(
            "eps = {eps} gives q_eps = {q_eps} and p*q_eps = {} <= 1",
            p * q_eps
        )));
    }
    Ok(q_eps)
}

/// Trichotomy of `p` against `N/(N-2)`.
pub fn classify_regime(p: f64, n: f64) -> Regime {
    use std::cmp::Ordering;
    let ord = match (small_rational(p), small_integer(n)) {
        (Some((num, den)), Some(dim)) => (num * (dim - 2)).cmp(&(den * dim)),
        _ => {
            let threshold = n / (n - 2.0);
            if (p - threshold).abs() <= REGIME_BAND * threshold {
                Ordering::Equal
            } else if p > threshold {
                Ordering::Greater
            } else {
                Ordering::Less
            }
        }
    };
    match ord {
        Ordering::Greater => Regime::TailSupercritical,
        Ordering::Equal => Regime::TailLogarithmic,
        Ordering::Less => Regime::TailSubcritical,
    }
}

fn small_integer(x: f64) -> Option<i64> {
    (x.fract() == 0.0 && x.abs() < 1e6).then_some(x as i64)
}

/// `x = num/den` with `den <= 64`, when `x` is such a ratio to rounding.
fn small_rational(x: f64) -> Option<(i64, i64)> {
    if !x.is_finite() || x.abs() > 1e6 {
        return None;
    }
    (1..=64i64).find_map(|den| {
        let num = (x * den as f64).round();
        let err = (x - num / den as f64).abs();
        (err <= 4.0 * f64::EPSILON * x.abs().max(1.0)).then_some((num as i64, den))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn critical_partners() {
        assert_relative_eq!(critical_q(5.0, 3.0).unwrap(), 5.0, epsilon = 1e-12);
        assert_relative_eq!(critical_q(1.0, 5.0).unwrap(), 9.0, epsilon = 1e-12);
        assert_relative_eq!(critical_q(2.5, 3.0).unwrap(), 20.0, epsilon = 1e-12);
    }

    #[test]
    fn subcritical_partners() {
        assert_relative_eq!(qeps_from_eps(5.0, 3.0, 0.1).unwrap(), 4.0, epsilon = 1e-12);
        assert_relative_eq!(qeps_from_eps(5.0, 3.0, 0.0).unwrap(), 5.0, epsilon = 1e-12);
        assert_relative_eq!(
            qeps_from_eps(2.5, 3.0, 1.0 / 7.0).unwrap(),
            9.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn regimes() {
        assert_eq!(classify_regime(5.0, 3.0), Regime::TailSupercritical);
        assert_eq!(classify_regime(3.0, 3.0), Regime::TailLogarithmic);
        assert_eq!(classify_regime(2.5, 3.0), Regime::TailSubcritical);
        // 4/3 = N/(N-2) for N = 8 only reaches the log regime through the
        // rational path.
        assert_eq!(classify_regime(4.0 / 3.0, 8.0), Regime::TailLogarithmic);
        assert_eq!(classify_regime(1.0, 9.0), Regime::TailSubcritical);
        assert_eq!(
            classify_regime(9.5 / 7.5 * (1.0 + 1e-13), 9.5),
            Regime::TailLogarithmic
        );
    }

    #[test]
    fn out_of_range() {
        let err = critical_q(0.5, 3.0).unwrap_err();
        assert!(err.to_string().contains("lower bound"), "{err}");
        let err = critical_q(6.0, 3.0).unwrap_err();
        assert!(err.to_string().contains("upper bound"), "{err}");
        assert!(matches!(critical_q(1.0, 2.0), Err(LabError::Domain(_))));
        assert!(matches!(
            qeps_from_eps(5.0, 3.0, -0.1),
            Err(LabError::Domain(_))
        ));
    }

    #[test]
    fn infeasible_defect() {
        // q_eps <= 1/p once N/(q_eps+1) >= N p/(p+1).
        let err = qeps_from_eps(5.0, 3.0, 2.0).unwrap_err();
        assert!(matches!(err, LabError::Infeasible(_)));
    }

    #[test]
    fn params_fields() {
        let sp = SystemParams::new(2.5, 3.0, 1.0 / 7.0).unwrap();
        assert_relative_eq!(sp.alpha, 1.0 / 7.0, epsilon = 1e-14);
        assert_relative_eq!(sp.beta, 3.0 / 3.5, epsilon = 1e-14);
        assert_relative_eq!(sp.alpha + sp.beta, 1.0, epsilon = 1e-14);
        assert_relative_eq!(sp.alpha_eps - sp.alpha, sp.eps, epsilon = 1e-14);
        assert_eq!(sp.u_tail_exponent(), 0.5);
    }

    proptest! {
        #[test]
        fn closure_and_round_trip(n in 3u32..12, t in 0.001f64..1.0) {
            let n = n as f64;
            let lo = 2.0 / (n - 2.0);
            let hi = (n + 2.0) / (n - 2.0);
            let p = lo + t * (hi - lo);
            let sp = SystemParams::critical(p, n).unwrap();
            prop_assert!(sp.closure_residual().abs() < 1e-12);
            prop_assert!((sp.alpha + sp.beta - (n - 2.0)).abs() < 1e-12);
            prop_assert!(sp.q >= p * (1.0 - 1e-12));
            prop_assert_eq!(qeps_from_eps(p, n, 0.0).unwrap(), sp.q);
            prop_assert_eq!(sp.regime(), classify_regime(sp.p, sp.n));
        }

        #[test]
        fn q_eps_decreasing(t in 0.05f64..1.0, e1 in 0.0f64..0.3, de in 1e-6f64..0.2) {
            let n = 3.0;
            let p = 2.0 + 3.0 * t;
            let a = qeps_from_eps(p, n, e1);
            let b = qeps_from_eps(p, n, e1 + de);
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!(b < a);
                let sp = SystemParams::new(p, n, e1 + de).unwrap();
                prop_assert!((sp.defect() - (e1 + de)).abs() < 1e-12);
                prop_assert!(sp.p * sp.q_eps > 1.0);
            }
        }
    }
}
