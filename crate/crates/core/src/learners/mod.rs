//! Binary and quasi-binary regression.
//!
//! [`fit_binary_glm`] is a weighted logit-link IRLS solver with offsets
//! that accepts fractional responses in `[0, 1]`;
//! [`fit_intercept_fluctuation`] is its one-parameter specialization used
//! by the targeting step; [`fit_discrete_super_learner`] picks the library
//! member with the smallest cross-validated quasi-binomial loss.

mod glm;
mod super_learner;

pub use glm::{fit_binary_glm, fit_intercept_fluctuation, Fluctuation, GlmFit, GlmOptions};
pub use super_learner::{fit_discrete_super_learner, quasi_binomial_loss, SelectionReport};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounds applied to probabilities before logit transforms.
pub const PROB_CLIP: f64 = 1e-6;

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `logit` of `p` clipped to `[PROB_CLIP, 1 - PROB_CLIP]`.
pub fn clipped_logit(p: f64) -> f64 {
    logit(p.clamp(PROB_CLIP, 1.0 - PROB_CLIP))
}

/// How a node's history is turned into regressors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// Intercept only.
    Intercept,
    /// Intercept plus every raw history column.
    Main,
    /// Intercept, current covariates, last concomitant status and the
    /// running averages of covariates and treatments.
    RunningAvg,
    /// Running-average features plus all pairwise products.
    Interactions,
    /// One cell per distinct raw history; fitted by weighted cell means.
    Saturated,
}

impl FeatureMap {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureMap::Intercept => "intercept",
            FeatureMap::Main => "main",
            FeatureMap::RunningAvg => "running_avg",
            FeatureMap::Interactions => "interactions",
            FeatureMap::Saturated => "saturated",
        }
    }
}

fn default_max_iter() -> usize {
    50
}
fn default_tol() -> f64 {
    1e-10
}
fn default_ridge() -> f64 {
    1e-8
}

/// A library member: feature map plus IRLS settings. The link is logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub features: FeatureMap,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

impl LearnerSpec {
    pub fn new(features: FeatureMap) -> Self {
        LearnerSpec {
            features,
            max_iter: default_max_iter(),
            tol: default_tol(),
            ridge: default_ridge(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config("learner tolerance must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("learner needs at least one iteration".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Config("ridge jitter must be nonnegative".into()));
        }
        Ok(())
    }

    fn glm_options(&self) -> GlmOptions {
        GlmOptions {
            max_iter: self.max_iter,
            tol: self.tol,
            ridge: self.ridge,
        }
    }

    /// Fits this member on a design built with its own feature map.
    pub fn fit(&self, x: &Design, y: &[f64], w: &[f64]) -> Result<FittedModel> {
        if let Some(c) = constant_response(y, w)? {
            return Ok(FittedModel {
                features: self.features,
                kind: ModelKind::Constant(c),
            });
        }
        let kind = match self.features {
            FeatureMap::Saturated => fit_cell_means(x, y, w),
            _ => {
                let zero = vec![0.0; y.len()];
                let fit = fit_binary_glm(x, y, w, &zero, &self.glm_options())?;
                ModelKind::Glm(fit)
            }
        };
        Ok(FittedModel {
            features: self.features,
            kind,
        })
    }
}

/// Which learner fits a family of regressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LearnerChoice {
    Single(LearnerSpec),
    SuperLearner {
        library: Vec<LearnerSpec>,
        #[serde(default = "default_folds")]
        folds: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_folds() -> usize {
    10
}

impl LearnerChoice {
    pub fn single(features: FeatureMap) -> Self {
        LearnerChoice::Single(LearnerSpec::new(features))
    }

    /// Feature maps whose designs must be built, in library order.
    pub fn feature_maps(&self) -> Vec<FeatureMap> {
        match self {
            LearnerChoice::Single(s) => vec![s.features],
            LearnerChoice::SuperLearner { library, .. } => {
                library.iter().map(|s| s.features).collect()
            }
        }
    }

    pub fn specs(&self) -> Box<dyn Iterator<Item = &LearnerSpec> + '_> {
        match self {
            LearnerChoice::Single(s) => Box::new(std::iter::once(s)),
            LearnerChoice::SuperLearner { library, .. } => Box::new(library.iter()),
        }
    }

    /// Fits on `designs[j]`, one per entry of [`Self::feature_maps`].
    pub fn fit(&self, designs: &[Design], y: &[f64], w: &[f64]) -> Result<FittedModel> {
        match self {
            LearnerChoice::Single(s) => s.fit(&designs[0], y, w),
            LearnerChoice::SuperLearner {
                library,
                folds,
                seed,
            } => fit_discrete_super_learner(library, designs, y, w, *folds, *seed)
                .map(|(m, _)| m),
        }
    }
}

/// Dense row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Fit(format!(
                "design data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Design { rows, cols, data })
    }

    /// A single intercept column.
    pub fn intercept(rows: usize) -> Self {
        Design {
            rows,
            cols: 1,
            data: vec![1.0; rows],
        }
    }

    /// Builds from per-row vectors that all share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Fit("ragged design rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Design {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Keeps rows at `idx`, in order.
    pub fn select(&self, idx: &[usize]) -> Design {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Design {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Multiplies column `j` by `factor`.
    pub fn scale_column(&mut self, j: usize, factor: f64) {
        for i in 0..self.rows {
            self.data[i * self.cols + j] *= factor;
        }
    }
}

/// Fitted regression.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub features: FeatureMap,
    pub kind: ModelKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Glm(GlmFit),
    /// Weighted means per exact feature row; unseen rows get `fallback`.
    CellMeans {
        cells: HashMap<Vec<u64>, f64>,
        fallback: f64,
    },
    /// Degenerate fit to a constant response.
    Constant(f64),
}

/// Predictions of non-degenerate models stay this far from 0 and 1.
const PREDICTION_EPS: f64 = 1e-12;

impl FittedModel {
    pub fn constant(features: FeatureMap, p: f64) -> Self {
        FittedModel {
            features,
            kind: ModelKind::Constant(p),
        }
    }

    pub fn converged(&self) -> bool {
        match &self.kind {
            ModelKind::Glm(g) => g.converged,
            _ => true,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self.kind, ModelKind::Constant(_))
    }

    pub fn coefficients(&self) -> Option<&[f64]> {
        match &self.kind {
            ModelKind::Glm(g) => Some(&g.coef),
            _ => None,
        }
    }

    /// Predicted probability for one feature row.
    pub fn predict(&self, x: &[f64]) -> f64 {
        match &self.kind {
            ModelKind::Glm(g) => {
                let eta: f64 = x.iter().zip(&g.coef).map(|(a, b)| a * b).sum();
                expit(eta).clamp(PREDICTION_EPS, 1.0 - PREDICTION_EPS)
            }
            ModelKind::CellMeans { cells, fallback } => {
                *cells.get(&cell_key(x)).unwrap_or(fallback)
            }
            ModelKind::Constant(c) => *c,
        }
    }

    pub fn predict_all(&self, x: &Design) -> Vec<f64> {
        (0..x.rows()).map(|i| self.predict(x.row(i))).collect()
    }
}

fn cell_key(x: &[f64]) -> Vec<u64> {
    // normalize -0.0 so it shares a cell with 0.0
    x.iter().map(|v| (v + 0.0).to_bits()).collect()
}

fn fit_cell_means(x: &Design, y: &[f64], w: &[f64]) -> ModelKind {
    let mut acc: HashMap<Vec<u64>, (f64, f64)> = HashMap::new();
    let (mut sy, mut sw) = (0.0, 0.0);
    for i in 0..x.rows() {
        if w[i] <= 0.0 {
            continue;
        }
        let e = acc.entry(cell_key(x.row(i))).or_insert((0.0, 0.0));
        e.0 += w[i] * y[i];
        e.1 += w[i];
        sy += w[i] * y[i];
        sw += w[i];
    }
    let cells = acc.into_iter().map(|(k, (a, b))| (k, a / b)).collect();
    ModelKind::CellMeans {
        cells,
        fallback: sy / sw,
    }
}

/// Checks lengths and weights; returns the common value when every
/// positively weighted response is identical.
fn constant_response(y: &[f64], w: &[f64]) -> Result<Option<f64>> {
    if y.len() != w.len() {
        return Err(Error::Fit("response and weights differ in length".into()));
    }
    if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Fit("responses must lie in [0, 1]".into()));
    }
    let mut it = y.iter().zip(w).filter(|(_, &wi)| wi > 0.0).map(|(yi, _)| *yi);
    let first = it
        .next()
        .ok_or_else(|| Error::Fit("all weights are zero".into()))?;
    Ok(it.all(|v| v == first).then_some(first))
}
