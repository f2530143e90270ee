use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Design, FittedModel, LearnerSpec};
use crate::error::{Error, Result};

/// Cross-validated risk of every library member and the winner.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionReport {
    /// `None` for members that failed on every fold.
    pub cv_risk: Vec<Option<f64>>,
    pub selected: usize,
}

/// Weighted mean negative quasi-binomial log-likelihood.
pub fn quasi_binomial_loss(y: &[f64], p: &[f64], w: &[f64]) -> f64 {
    const EPS: f64 = 1e-12;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..y.len() {
        if w[i] > 0.0 {
            let pi = p[i].clamp(EPS, 1.0 - EPS);
            num -= w[i] * (y[i] * pi.ln() + (1.0 - y[i]) * (1.0 - pi).ln());
            den += w[i];
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Deterministic V-fold assignment of `n` rows.
fn fold_ids(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut ids = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        ids[i] = pos % folds;
    }
    ids
}

/// Discrete super learner: V-fold cross-validated loss per member, the
/// argmin (ties to the earliest member) refit on all rows.
///
/// `designs[j]` is the design built with `library[j].features`.
pub fn fit_discrete_super_learner(
    library: &[LearnerSpec],
    designs: &[Design],
    y: &[f64],
    w: &[f64],
    folds: usize,
    seed: u64,
) -> Result<(FittedModel, SelectionReport)> {
    if library.is_empty() {
        return Err(Error::Fit("super learner library is empty".into()));
    }
    if designs.len() != library.len() {
        return Err(Error::Fit("one design per library member is required".into()));
    }
    if folds < 2 {
        return Err(Error::Fit("super learner needs at least two folds".into()));
    }
    let n = y.len();
    if n < folds {
        return Err(Error::Fit(format!("{n} rows cannot fill {folds} folds")));
    }
    let ids = fold_ids(n, folds, seed);

    let mut cv_risk = Vec::with_capacity(library.len());
    for (spec, x) in library.iter().zip(designs) {
        let mut held_out = vec![f64::NAN; n];
        let mut failed = 0;
        for v in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| ids[i] != v).collect();
            let test: Vec<usize> = (0..n).filter(|&i| ids[i] == v).collect();
            let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let tw: Vec<f64> = train.iter().map(|&i| w[i]).collect();
            match spec.fit(&x.select(&train), &ty, &tw) {
                Ok(m) => {
                    for &i in &test {
                        held_out[i] = m.predict(x.row(i));
                    }
                }
                Err(e) => {
                    failed += 1;
                    warn!("super learner member {} failed on fold {v}: {e}", spec.features.name());
                }
            }
        }
        if failed == folds {
            cv_risk.push(None);
            continue;
        }
        // rows whose fold failed drop out of this member's risk
        let keep: Vec<usize> = (0..n).filter(|&i| held_out[i].is_finite()).collect();
        let ky: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
        let kp: Vec<f64> = keep.iter().map(|&i| held_out[i]).collect();
        let kw: Vec<f64> = keep.iter().map(|&i| w[i]).collect();
        cv_risk.push(Some(quasi_binomial_loss(&ky, &kp, &kw)));
    }

    let mut selected: Option<usize> = None;
    for (j, r) in cv_risk.iter().enumerate() {
        if let Some(r) = r {
            if selected.map_or(true, |s| *r < cv_risk[s].expect("selected has a risk")) {
                selected = Some(j);
            }
        }
    }
    let selected =
        selected.ok_or_else(|| Error::Fit("every super learner member failed".into()))?;
    let model = library[selected].fit(&designs[selected], y, w)?;
    Ok((model, SelectionReport { cv_risk, selected }))
}
