use log::warn;
use nalgebra::{DMatrix, DVector};

use super::{expit, Design};
use crate::error::{Error, Result};

/// IRLS settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmOptions {
    pub max_iter: usize,
    /// Relative change in deviance that counts as converged.
    pub tol: f64,
    /// Added to the diagonal of the weighted normal equations.
    pub ridge: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        GlmOptions {
            max_iter: 50,
            tol: 1e-10,
            ridge: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub coef: Vec<f64>,
    pub converged: bool,
    pub deviance: f64,
    pub iterations: usize,
}

/// Max-norm of the weighted score that must be reached before IRLS stops.
const SCORE_TOL: f64 = 1e-8;

fn xlogy(y: f64, p: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else {
        y * p.ln()
    }
}

/// Weighted binomial deviance, valid for fractional `y`.
fn deviance(y: &[f64], w: &[f64], mu: &[f64]) -> f64 {
    let mut dev = 0.0;
    for i in 0..y.len() {
        if w[i] > 0.0 {
            let (yi, mi) = (y[i], mu[i]);
            dev += 2.0
                * w[i]
                * (xlogy(yi, yi) - xlogy(yi, mi) + xlogy(1.0 - yi, 1.0 - yi)
                    - xlogy(1.0 - yi, 1.0 - mi));
        }
    }
    dev
}

fn linear_predictor(x: &Design, beta: &[f64], offset: &[f64], out: &mut [f64]) {
    for i in 0..x.rows() {
        let row = x.row(i);
        out[i] = offset[i] + row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn score(x: &Design, y: &[f64], w: &[f64], mu: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        if w[i] > 0.0 {
            let r = w[i] * (y[i] - mu[i]);
            for (gj, xj) in g.iter_mut().zip(x.row(i)) {
                *gj += r * xj;
            }
        }
    }
    g
}

fn information(x: &Design, w: &[f64], mu: &[f64], ridge: f64) -> DMatrix<f64> {
    let p = x.cols();
    let mut h = DMatrix::<f64>::zeros(p, p);
    for i in 0..x.rows() {
        let wi = w[i] * mu[i] * (1.0 - mu[i]);
        if wi <= 0.0 {
            continue;
        }
        let row = x.row(i);
        for a in 0..p {
            let ra = wi * row[a];
            for b in a..p {
                h[(a, b)] += ra * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            h[(a, b)] = h[(b, a)];
        }
        h[(a, a)] += ridge;
    }
    h
}

fn solve(h: DMatrix<f64>, g: &[f64]) -> Option<Vec<f64>> {
    let rhs = DVector::from_column_slice(g);
    if let Some(chol) = h.clone().cholesky() {
        return Some(chol.solve(&rhs).iter().copied().collect());
    }
    h.lu().solve(&rhs).map(|s| s.iter().copied().collect())
}

/// Weighted quasi-binomial logistic regression with a fixed offset.
///
/// Newton steps with step-halving on the deviance. Stops when the relative
/// deviance change is below `tol` and the weighted score is below `1e-8`
/// in max-norm; otherwise returns the last iterate with `converged = false`.
pub fn fit_binary_glm(
    x: &Design,
    y: &[f64],
    w: &[f64],
    offset: &[f64],
    opts: &GlmOptions,
) -> Result<GlmFit> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::Fit("design has no rows".into()));
    }
    if y.len() != n || w.len() != n || offset.len() != n {
        return Err(Error::Fit(format!(
            "length mismatch: design {n}, response {}, weights {}, offset {}",
            y.len(),
            w.len(),
            offset.len()
        )));
    }
    if w.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Fit("weights must be nonnegative".into()));
    }
    if !w.iter().any(|v| *v > 0.0) {
        return Err(Error::Fit("all weights are zero".into()));
    }
    if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Fit("responses must lie in [0, 1]".into()));
    }

    let p = x.cols();
    let mut beta = vec![0.0; p];
    let mut eta = vec![0.0; n];
    let mut mu = vec![0.0; n];
    linear_predictor(x, &beta, offset, &mut eta);
    mu.iter_mut().zip(&eta).for_each(|(m, e)| *m = expit(*e));
    let mut dev = deviance(y, w, &mu);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let g = score(x, y, w, &mu);
        let h = information(x, w, &mu, opts.ridge);
        let Some(step) = solve(h, &g) else {
            warn!("IRLS: singular information matrix");
            break;
        };
        let mut scale = 1.0;
        let mut candidate = vec![0.0; p];
        let mut new_dev;
        loop {
            for j in 0..p {
                candidate[j] = beta[j] + scale * step[j];
            }
            linear_predictor(x, &candidate, offset, &mut eta);
            mu.iter_mut().zip(&eta).for_each(|(m, e)| *m = expit(*e));
            new_dev = deviance(y, w, &mu);
            if new_dev.is_finite() && new_dev <= dev * (1.0 + 1e-12) + 1e-12 {
                break;
            }
            scale *= 0.5;
            if scale < 1e-10 {
                break;
            }
        }
        let change = (dev - new_dev).abs() / (new_dev.abs() + 0.1);
        beta.copy_from_slice(&candidate);
        dev = new_dev;
        let g = score(x, y, w, &mu);
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if change < opts.tol && gmax <= SCORE_TOL {
            converged = true;
            break;
        }
    }

    Ok(GlmFit {
        coef: beta,
        converged,
        deviance: dev,
        iterations,
    })
}

/// Result of the one-dimensional targeting fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Fluctuation {
    pub epsilon: f64,
    pub converged: bool,
    /// Set when the fit was vacuous or hit a bound.
    pub warning: Option<String>,
}

const EPS_BOUND: f64 = 60.0;

fn fluctuation_score(y: &[f64], offset: &[f64], w: &[f64], eps: f64) -> (f64, f64) {
    let (mut s, mut ds) = (0.0, 0.0);
    for i in 0..y.len() {
        if w[i] > 0.0 {
            let m = expit(offset[i] + eps);
            s += w[i] * (y[i] - m);
            ds += w[i] * m * (1.0 - m);
        }
    }
    (s, ds)
}

/// Solves `Σ w_i (y_i - expit(offset_i + ε)) = 0` for the intercept `ε`.
///
/// Newton iterations safeguarded by a bisection bracket; the score is
/// monotone decreasing in `ε`, so the root is unique when it exists.
pub fn fit_intercept_fluctuation(y: &[f64], offset: &[f64], w: &[f64]) -> Result<Fluctuation> {
    if y.len() != offset.len() || y.len() != w.len() {
        return Err(Error::Fit("fluctuation inputs differ in length".into()));
    }
    if y.iter().chain(offset).any(|v| !v.is_finite()) || w.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Fit(
            "fluctuation inputs must be finite with nonnegative weights".into(),
        ));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        warn!("fluctuation with zero total weight; update is vacuous");
        return Ok(Fluctuation {
            epsilon: 0.0,
            converged: true,
            warning: Some("all clever weights are zero".into()),
        });
    }
    let tol = 1e-13 * total.max(1.0);
    let (s0, _) = fluctuation_score(y, offset, w, 0.0);
    if s0.abs() <= tol {
        return Ok(Fluctuation {
            epsilon: 0.0,
            converged: true,
            warning: None,
        });
    }

    // bracket [lo, hi] with s(lo) > 0 > s(hi)
    let (mut lo, mut hi) = if s0 > 0.0 { (0.0, 1.0) } else { (-1.0, 0.0) };
    loop {
        let probe = if s0 > 0.0 { hi } else { lo };
        let (s, _) = fluctuation_score(y, offset, w, probe);
        let beyond = if s0 > 0.0 { s < 0.0 } else { s > 0.0 };
        if beyond || s.abs() <= tol {
            break;
        }
        if s0 > 0.0 {
            lo = hi;
            hi *= 2.0;
        } else {
            hi = lo;
            lo *= 2.0;
        }
        if hi > EPS_BOUND || lo < -EPS_BOUND {
            let eps = if s0 > 0.0 { EPS_BOUND } else { -EPS_BOUND };
            return Ok(Fluctuation {
                epsilon: eps,
                converged: false,
                warning: Some("fluctuation root is unbounded".into()),
            });
        }
    }

    let mut eps = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (s, ds) = fluctuation_score(y, offset, w, eps);
        if s.abs() <= tol {
            return Ok(Fluctuation {
                epsilon: eps,
                converged: true,
                warning: None,
            });
        }
        if s > 0.0 {
            lo = eps;
        } else {
            hi = eps;
        }
        let newton = eps + s / ds;
        eps = if ds > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-15 * (1.0 + eps.abs()) {
            break;
        }
    }
    let (s, _) = fluctuation_score(y, offset, w, eps);
    Ok(Fluctuation {
        epsilon: eps,
        converged: s.abs() <= 1e-9 * total.max(1.0),
        warning: None,
    })
}
