//! Least-squares fit of `y = α·x^β + γ`.
//!
//! Levenberg–Marquardt in the original (untransformed) space. Each step
//! solves `(JᵀJ + λ·diag(JᵀJ))·δ = Jᵀr` for the residual `r = y − f(x)`.
//! A step that lowers the SSE is kept and divides `λ` by 3; otherwise `λ`
//! is multiplied by 4. The loop stops when the relative SSE change and the
//! step are both below `1e-15`, or after [`MAX_ITERATIONS`].

use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 500;
const BETA_STARTS: [f64; 6] = [-1.0, -0.5, -0.1, 0.1, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
    pub sse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Constant targets: `β` is indeterminate.
    pub degenerate: bool,
}

fn model(t: &[f64; 3], x: f64) -> f64 {
    t[0] * x.powf(t[1]) + t[2]
}

fn sse(t: &[f64; 3], xs: &[f64], ys: &[f64]) -> f64 {
    xs.iter().zip(ys).map(|(&x, &y)| (y - model(t, x)).powi(2)).sum()
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..3 {
            let f = a[r][c] / a[c][c];
            for k in c..3 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn levenberg_marquardt(mut t: [f64; 3], xs: &[f64], ys: &[f64]) -> ([f64; 3], f64, usize, bool) {
    let mut lambda = 1e-3;
    let mut cur = sse(&t, xs, ys);
    for it in 1..=MAX_ITERATIONS {
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (&x, &y) in xs.iter().zip(ys) {
            let p = x.powf(t[1]);
            let j = [p, t[0] * p * x.ln(), 1.0];
            let r = y - model(&t, x);
            for a in 0..3 {
                jtr[a] += j[a] * r;
                for b in 0..3 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e30 {
            let mut a = jtj;
            for (i, row) in a.iter_mut().enumerate() {
                row[i] += lambda * jtj[i][i].max(1e-12);
            }
            if let Some(step) = solve3(a, jtr) {
                let next = [t[0] + step[0], t[1] + step[1], t[2] + step[2]];
                let s = sse(&next, xs, ys);
                if s.is_finite() && s <= cur {
                    let rel = (cur - s) / cur.max(1e-300);
                    let size = step.iter().map(|v| v.abs()).fold(0.0, f64::max);
                    t = next;
                    cur = s;
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = true;
                    if (rel < 1e-15 && size < 1e-12) || cur < 1e-28 {
                        return (t, cur, it, true);
                    }
                    break;
                }
            }
            lambda *= 4.0;
        }
        if !improved {
            // no downhill step at any damping: a stationary point
            return (t, cur, it, true);
        }
    }
    (t, cur, MAX_ITERATIONS, false)
}

/// Multi-start fit over `β ∈ {−1, −0.5, −0.1, 0.1, 0.5, 1}` with `γ`
/// started at `min(y)` and at `max(y)` and `α` from initial least squares.
/// Returns the start with the lowest SSE.
pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<FitResult> {
    if xs.len() != ys.len() {
        return Err(Error::dim("fit_power_law", "xs and ys differ in length"));
    }
    if xs.len() < 4 {
        return Err(Error::Config(format!("need at least 4 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) || xs.iter().any(|&x| x <= 0.0) {
        return Err(Error::Config("xs must be positive and all values finite".into()));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("xs must be distinct".into()));
    }
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let sst: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let scale = ys.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-300);
    if sst <= (1e-14 * scale).powi(2) * n {
        return Ok(FitResult {
            alpha: 0.0,
            beta: 0.0,
            gamma: mean,
            r_squared: 0.0,
            residuals: ys.iter().map(|y| y - mean).collect(),
            sse: sst,
            iterations: 0,
            converged: true,
            degenerate: true,
        });
    }
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<([f64; 3], f64, usize, bool)> = None;
    let mut total_iters = 0;
    for &b0 in &BETA_STARTS {
        for g0 in [lo, hi] {
            let num: f64 = xs.iter().zip(ys).map(|(&x, &y)| x.powf(b0) * (y - g0)).sum();
            let den: f64 = xs.iter().map(|&x| x.powf(2.0 * b0)).sum();
            let a0 = if den > 0.0 { num / den } else { 0.0 };
            let run = levenberg_marquardt([a0, b0, g0], xs, ys);
            total_iters += run.2;
            if run.1.is_finite() && best.as_ref().is_none_or(|b| run.1 < b.1) {
                best = Some(run);
            }
        }
    }
    let (t, s, _, converged) =
        best.ok_or_else(|| Error::Numerical("power-law fit diverged from every start".into()))?;
    Ok(FitResult {
        alpha: t[0],
        beta: t[1],
        gamma: t[2],
        r_squared: (1.0 - s / sst).clamp(0.0, 1.0),
        residuals: xs.iter().zip(ys).map(|(&x, &y)| y - model(&t, x)).collect(),
        sse: s,
        iterations: total_iters,
        converged,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_recovery() {
        let xs = [1.0, 2.0, 4.0, 8.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 2.0 * x.sqrt() + 1.0).collect();
        let f = fit_power_law(&xs, &ys).unwrap();
        assert!((f.alpha - 2.0).abs() < 1e-6, "{:?}", f);
        assert!((f.beta - 0.5).abs() < 1e-6);
        assert!((f.gamma - 1.0).abs() < 1e-6);
        assert!(f.r_squared > 1.0 - 1e-12);
    }

    #[test]
    fn constant_is_degenerate() {
        let f = fit_power_law(&[1.0, 2.0, 3.0, 4.0], &[0.7; 4]).unwrap();
        assert!(f.degenerate);
        assert_eq!(f.alpha, 0.0);
        assert!((f.gamma - 0.7).abs() < 1e-15);
    }

    #[test]
    fn preconditions() {
        assert!(fit_power_law(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(fit_power_law(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).is_err());
        assert!(fit_power_law(&[0.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).is_err());
    }
}
