//! Adaptive Dormand–Prince 5(4) integrator on fixed-size states.

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; a fraction of the span is used when zero.
    pub h_init: f64,
    /// Relative step floor; steps below `h_min_rel * |t|` abort.
    pub h_min_rel: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-12,
            atol: 1e-14,
            h_init: 0.0,
            h_min_rel: 1e-15,
            max_steps: 2_000_000,
        }
    }
}

/// One accepted step, handed to the observer.
#[derive(Debug, Clone, Copy)]
pub struct Step<const D: usize> {
    pub t0: f64,
    pub y0: [f64; D],
    pub f0: [f64; D],
    pub t1: f64,
    pub y1: [f64; D],
    pub f1: [f64; D],
}

impl<const D: usize> Step<D> {
    /// Cubic Hermite interpolant of component `i` at `t`.
    pub fn interp(&self, i: usize, t: f64) -> f64 {
        let h = self.t1 - self.t0;
        let s = (t - self.t0) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.y0[i] + h10 * h * self.f0[i] + h01 * self.y1[i] + h11 * h * self.f1[i]
    }

    /// First root of component `i` inside the step, when it changes sign.
    pub fn root(&self, i: usize) -> Option<f64> {
        let (a, b) = (self.y0[i], self.y1[i]);
        if a == 0.0 {
            return Some(self.t0);
        }
        if a.signum() == b.signum() && b != 0.0 {
            return None;
        }
        let (mut lo, mut hi) = (self.t0, self.t1);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.interp(i, mid).signum() == a.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

pub enum Control {
    Continue,
    Stop,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[inline]
fn axpy<const D: usize>(y: &[f64; D], h: f64, terms: &[(f64, &[f64; D])]) -> [f64; D] {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..D {
            out[i] += h * c * k[i];
        }
    }
    out
}

/// Integrates `y' = f(t, y)` from `t0` to `t_end` (forward only).
///
/// Every value in `stops` inside `(t0, t_end]` is hit exactly by a step
/// endpoint. The observer sees each accepted step and may stop the run.
/// Returns the final time and state.
pub fn integrate<const D: usize, F, O>(
    mut f: F,
    t0: f64,
    y0: [f64; D],
    t_end: f64,
    stops: &[f64],
    opts: &OdeOptions,
    mut observer: O,
) -> Result<(f64, [f64; D])>
where
    F: FnMut(f64, &[f64; D]) -> [f64; D],
    O: FnMut(&Step<D>) -> Control,
{
    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(t, &y);
    let span = t_end - t0;
    if span <= 0.0 {
        return Ok((t, y));
    }
    let mut h = if opts.h_init > 0.0 {
        opts.h_init
    } else if t0.abs() > 0.0 {
        (1e-3 * span).min(0.01 * t0.abs())
    } else {
        1e-3 * span
    };
    let mut stop_idx = stops.partition_point(|&s| s <= t0);
    let mut fac_prev_err = 1e-4f64;

    for _ in 0..opts.max_steps {
        let next_stop = stops
            .get(stop_idx)
            .copied()
            .filter(|&s| s < t_end)
            .unwrap_or(t_end);
        let mut hit = false;
        if t + h >= next_stop {
            h = next_stop - t;
            hit = true;
        }
        if h <= opts.h_min_rel * t.abs().max(1e-300) {
            return Err(LabError::Integration {
                radius: t,
                reason: "step size underflow".into(),
            });
        }
        let k2 = f(t + C2 * h, &axpy(&y, h, &[(A21, &k1)]));
        let k3 = f(t + C3 * h, &axpy(&y, h, &[(A31, &k1), (A32, &k2)]));
        let k4 = f(
            t + C4 * h,
            &axpy(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]),
        );
        let k5 = f(
            t + C5 * h,
            &axpy(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
        );
        let k6 = f(
            t + h,
            &axpy(
                &y,
                h,
                &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            ),
        );
        let y_new = axpy(
            &y,
            h,
            &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)],
        );
        let k7 = f(t + h, &y_new);

        let mut err = 0.0f64;
        for i in 0..D {
            let e =
                h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err = err.max((e / sc).abs());
        }
        if !err.is_finite() {
            h *= 0.1;
            continue;
        }
        if err <= 1.0 {
            let t_new = if hit { next_stop } else { t + h };
            let step = Step {
                t0: t,
                y0: y,
                f0: k1,
                t1: t_new,
                y1: y_new,
                f1: k7,
            };
            t = t_new;
            y = y_new;
            k1 = k7;
            if hit && t < t_end {
                stop_idx += 1;
                while stops.get(stop_idx).is_some_and(|&s| s <= t) {
                    stop_idx += 1;
                }
            }
            if let Control::Stop = observer(&step) {
                return Ok((t, y));
            }
            if t >= t_end {
                return Ok((t, y));
            }
            // PI step control
            let fac = 0.9 * err.max(1e-10).powf(-0.7 / 5.0) * fac_prev_err.powf(0.4 / 5.0);
            fac_prev_err = err.max(1e-4);
            h *= fac.clamp(0.2, 5.0);
        } else {
            h *= (0.9 * err.powf(-0.2)).max(0.1);
        }
    }
    Err(LabError::Integration {
        radius: t,
        reason: "step budget exhausted".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential() {
        let (t, y) = integrate(
            |_, y: &[f64; 1]| [y[0]],
            0.0,
            [1.0],
            2.0,
            &[],
            &OdeOptions::default(),
            |_| Control::Continue,
        )
        .unwrap();
        assert_eq!(t, 2.0);
        assert!((y[0] - 2.0f64.exp()).abs() < 1e-10);
    }

    #[test]
    fn stops_are_hit() {
        let stops = [0.5, 1.0, 1.5];
        let mut seen = Vec::new();
        integrate(
            |_, y: &[f64; 2]| [y[1], -y[0]],
            0.0,
            [0.0, 1.0],
            2.0,
            &stops,
            &OdeOptions::default(),
            |s| {
                seen.push((s.t1, s.y1[0]));
                Control::Continue
            },
        )
        .unwrap();
        for st in stops {
            let (_, v) = seen.iter().find(|(t, _)| *t == st).expect("stop hit");
            assert!((v - st.sin()).abs() < 1e-11);
        }
    }

    #[test]
    fn root_location() {
        let mut root = None;
        integrate(
            |_, y: &[f64; 2]| [y[1], -y[0]],
            0.0,
            [1.0, 0.0],
            3.0,
            &[],
            &OdeOptions::default(),
            |s| match s.root(0) {
                Some(r) => {
                    root = Some(r);
                    Control::Stop
                }
                None => Control::Continue,
            },
        )
        .unwrap();
        assert!((root.unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-7);
    }
}
