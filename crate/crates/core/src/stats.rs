//! Paired t-test with a numerically integrated Student t distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance of the adaptive Simpson integration.
pub const INTEGRATION_TOLERANCE: f64 = 1e-10;
const MAX_DEPTH: u32 = 60;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    /// Two-sided p-value.
    pub p: f64,
}

/// Paired t-test on `a - b` with the sample standard deviation.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "paired t-test needs at least 2 pairs, got {n}"
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(Error::Degenerate("differences have zero variance".into()));
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let df = n - 1;
    Ok(TTestResult {
        t,
        df,
        p: two_sided_p(t, df as f64),
    })
}

/// Unnormalised Student t density.
fn kernel(x: f64, df: f64) -> f64 {
    (1.0 + x * x / df).powf(-(df + 1.0) / 2.0)
}

/// `int_from^inf kernel`, mapped onto `[0, 1]` by `x = from + s / (1 - s)`.
fn upper_integral(from: f64, df: f64) -> f64 {
    let g = |s: f64| {
        if s >= 1.0 {
            // kernel(x) * x^2 tends to df^((df+1)/2) * x^(1-df)
            return if df == 1.0 { 1.0 } else { 0.0 };
        }
        let u = 1.0 - s;
        kernel(from + s / u, df) / (u * u)
    };
    adaptive_simpson(&g, 0.0, 1.0, INTEGRATION_TOLERANCE)
}

/// `P(|T| >= |t|)` for `df` degrees of freedom.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    let half = upper_integral(0.0, df);
    let tail = upper_integral(t.abs(), df);
    (tail / half).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Student t cumulative distribution function.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    let upper = upper_integral(t.abs(), df) / (2.0 * upper_integral(0.0, df));
    if t >= 0.0 {
        1.0 - upper
    } else {
        upper
    }
}

pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, MAX_DEPTH)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}
