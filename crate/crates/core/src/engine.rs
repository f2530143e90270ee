//! Nuisance fits, the backward sequential-regression pass and EIC-based
//! inference.
//!
//! Within visit `l` the order is `C_l, D_l, Y_l, L_l, Z_l, A_l`. The
//! sequential regression `Q̄_l` is fit among subjects at risk at `l` and
//! uncensored at `l`, on `Ō_{l-1}`. The clever weight `H_l` carries the
//! censoring factors through `C_l` and the treatment ratios through visit
//! `l - 1`:
//!
//! ```text
//! H_l = 1{at risk at l} Π_{j=1..l} 1{C_j=0}/ĝ_{C_j}(0)
//!       Π_{j=0..l-1} g*_{Z_j}(Z_j) g*_{A_j}(A_j) / (ĝ_{Z_j}(Z_j) ĝ_{A_j}(A_j))
//! ```
//!
//! A concomitant node whose `g*` is the observed mechanism is treated as a
//! covariate: its ratio is one and the marginalization keeps its observed
//! value.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::{build_design, write_features, Override, Scope};
use crate::interventions::{weight_tail, ArmPolicy, GStarProb, WeightTail, DEFAULT_WEIGHT_THRESHOLD};
use crate::learners::{
    clipped_logit, expit, fit_intercept_fluctuation, Design, FeatureMap, FittedModel,
    LearnerChoice,
};
use crate::panel::{at_risk_mask, TrialPanel};

pub const DEFAULT_G_FLOOR: f64 = 1e-3;

fn rows_of(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

fn designs_for(choice: &LearnerChoice, panel: &TrialPanel, rows: &[usize], scope: Scope) -> Vec<Design> {
    choice
        .feature_maps()
        .into_iter()
        .map(|m| build_design(m, panel, rows, scope, Override::NONE))
        .collect()
}

fn predict_at(
    model: &FittedModel,
    panel: &TrialPanel,
    i: usize,
    scope: Scope,
    ov: Override,
    buf: &mut Vec<f64>,
) -> f64 {
    buf.clear();
    write_features(model.features, panel, i, scope, ov, buf);
    model.predict(buf)
}

/// Fitted observed-data treatment and censoring mechanisms.
#[derive(Debug, Clone)]
pub struct GFit {
    pub g_floor: f64,
    pub randomized: bool,
    /// `ĝ_{Z_k}` for `k = 0..K`.
    pub z_models: Vec<FittedModel>,
    /// `ĝ_{A_k}` for `k = 1..K-1`, stratified by `A_{k-1}`; `a_models[k-1][s]`.
    pub a_models: Vec<[Option<FittedModel>; 2]>,
    /// `ĝ_{A_0}` when the panel is not randomized.
    pub a0_model: Option<FittedModel>,
    /// `ĝ_{C_l}` for `l = 1..=K`, as `P(C_l = 1)`.
    pub c_models: Vec<FittedModel>,
    /// `P̂(Z_k = 1)` per subject.
    pz1: Vec<Vec<f64>>,
    /// `P̂(A_k = 1)` per subject.
    pa1: Vec<Vec<f64>>,
    /// `P̂(C_l = 0)` per subject, index `l - 1`.
    pc0: Vec<Vec<f64>>,
    /// Predictions moved onto the floor among fitting rows.
    pub floored: usize,
}

impl GFit {
    pub fn prob_z(&self, k: usize, i: usize, value: u8) -> f64 {
        let p = self.pz1[k][i];
        if value == 1 {
            p
        } else {
            1.0 - p
        }
    }

    pub fn prob_a(&self, k: usize, i: usize, value: u8) -> f64 {
        let p = self.pa1[k][i];
        if value == 1 {
            p
        } else {
            1.0 - p
        }
    }

    pub fn prob_uncensored(&self, l: usize, i: usize) -> f64 {
        self.pc0[l - 1][i]
    }
}

struct Floor {
    floor: f64,
    count: usize,
}

impl Floor {
    fn apply(&mut self, model: &FittedModel, p: f64, counted: bool) -> f64 {
        if model.is_degenerate() {
            return p;
        }
        let q = p.clamp(self.floor, 1.0 - self.floor);
        if counted && q != p {
            self.count += 1;
        }
        q
    }
}

fn fit_binary_node(
    choice: &LearnerChoice,
    panel: &TrialPanel,
    rows: &[usize],
    scope: Scope,
    response: impl Fn(usize) -> u8,
    what: &str,
) -> Result<FittedModel> {
    if rows.is_empty() {
        return Err(Error::Estimation(format!("no subject at risk to fit {what}")));
    }
    let y: Vec<f64> = rows.iter().map(|&i| response(i) as f64).collect();
    let w = vec![1.0; rows.len()];
    let model = choice.fit(&designs_for(choice, panel, rows, scope), &y, &w)?;
    if !model.converged() {
        warn!("{what}: IRLS did not converge");
    }
    Ok(model)
}

/// Fits `ĝ_{Z_k}`, `ĝ_{A_k}` and `ĝ_{C_l}` among subjects at risk.
pub fn fit_g(panel: &TrialPanel, learner: &LearnerChoice, g_floor: f64) -> Result<GFit> {
    if !(g_floor > 0.0 && g_floor < 0.5) {
        return Err(Error::Config("g_floor must lie in (0, 0.5)".into()));
    }
    let n = panel.n();
    let k_max = panel.n_visits();
    let mut floor = Floor {
        floor: g_floor,
        count: 0,
    };
    let mut buf = Vec::new();

    let mut z_models = Vec::with_capacity(k_max);
    let mut pz1 = Vec::with_capacity(k_max);
    let mut a_models = Vec::with_capacity(k_max.saturating_sub(1));
    let mut pa1 = Vec::with_capacity(k_max);
    for k in 0..k_max {
        // Z_k and A_k are recorded for subjects still in follow-up after visit k
        let mask = at_risk_mask(panel, k + 1)?;
        let rows = rows_of(&mask);
        let zs = Scope::concomitant(k);
        let zm = fit_binary_node(learner, panel, &rows, zs, |i| panel.z(k)[i], &format!("g_Z{k}"))?;
        pz1.push(
            (0..n)
                .map(|i| {
                    let p = predict_at(&zm, panel, i, zs, Override::NONE, &mut buf);
                    floor.apply(&zm, p, mask[i])
                })
                .collect(),
        );
        z_models.push(zm);

        let as_ = Scope::adherence(k);
        if k == 0 {
            continue;
        }
        let mut strata: [Option<FittedModel>; 2] = [None, None];
        for s in 0..2u8 {
            let srows: Vec<usize> = rows
                .iter()
                .copied()
                .filter(|&i| panel.a(k - 1)[i] == s)
                .collect();
            if !srows.is_empty() {
                strata[s as usize] = Some(fit_binary_node(
                    learner,
                    panel,
                    &srows,
                    as_,
                    |i| panel.a(k)[i],
                    &format!("g_A{k} (A{} = {s})", k - 1),
                )?);
            }
        }
        pa1.push(
            (0..n)
                .map(|i| match &strata[panel.a(k - 1)[i] as usize] {
                    Some(m) => {
                        let p = predict_at(m, panel, i, as_, Override::NONE, &mut buf);
                        floor.apply(m, p, mask[i])
                    }
                    None => f64::NAN,
                })
                .collect(),
        );
        a_models.push(strata);
    }

    let a0_model = if panel.is_randomized() {
        pa1.insert(0, vec![0.5; n]);
        None
    } else {
        let rows: Vec<usize> = (0..n).collect();
        let s = Scope::adherence(0);
        let m = fit_binary_node(learner, panel, &rows, s, |i| panel.a(0)[i], "g_A0")?;
        pa1.insert(
            0,
            (0..n)
                .map(|i| {
                    let p = predict_at(&m, panel, i, s, Override::NONE, &mut buf);
                    floor.apply(&m, p, true)
                })
                .collect(),
        );
        Some(m)
    };

    let mut c_models = Vec::with_capacity(k_max);
    let mut pc0 = Vec::with_capacity(k_max);
    for l in 1..=k_max {
        let mask = at_risk_mask(panel, l)?;
        let rows = rows_of(&mask);
        let s = Scope::outcome(l);
        let m = fit_binary_node(learner, panel, &rows, s, |i| panel.c(l)[i], &format!("g_C{l}"))?;
        pc0.push(
            (0..n)
                .map(|i| {
                    let p = predict_at(&m, panel, i, s, Override::NONE, &mut buf);
                    1.0 - floor.apply(&m, p, mask[i])
                })
                .collect(),
        );
        c_models.push(m);
    }

    Ok(GFit {
        g_floor,
        randomized: panel.is_randomized(),
        z_models,
        a_models,
        a0_model,
        c_models,
        pz1,
        pa1,
        pc0,
        floored: floor.count,
    })
}

/// `H_1..=H_horizon` for every subject.
pub fn all_clever_weights(
    panel: &TrialPanel,
    gfit: &GFit,
    policy: &ArmPolicy,
    horizon: usize,
    cap: Option<f64>,
) -> Result<Vec<Vec<f64>>> {
    check_horizon(panel, horizon)?;
    if !policy.is_complete() {
        return Err(Error::Intervention("policy has an unfitted stochastic law".into()));
    }
    let n = panel.n();
    let mut out = vec![vec![0.0; n]; horizon];
    for i in 0..n {
        // running product of treatment ratios through visit l-1 and
        // censoring factors through l-1
        let mut h = 1.0;
        for l in 1..=horizon {
            if panel.absorbed_before(i, l) {
                break;
            }
            let j = l - 1;
            let z = panel.z(j)[i];
            let a = panel.a(j)[i];
            let z_ratio = match policy.z_prob(panel, i, j, z)? {
                GStarProb::UseObserved => 1.0,
                GStarProb::Known(p) if p == 0.0 => 0.0,
                GStarProb::Known(p) => p / gfit.prob_z(j, i, z),
            };
            let a_num = policy.a_prob(a);
            let a_ratio = if a_num == 0.0 {
                0.0
            } else {
                a_num / gfit.prob_a(j, i, a)
            };
            h *= z_ratio * a_ratio;
            if h == 0.0 {
                break;
            }
            if panel.c(l)[i] == 1 {
                break;
            }
            h /= gfit.prob_uncensored(l, i);
            if !h.is_finite() {
                return Err(Error::Estimation(format!(
                    "clever weight of subject {i} at visit {l} is not finite"
                )));
            }
            out[l - 1][i] = match cap {
                Some(c) => h.min(c),
                None => h,
            };
        }
    }
    Ok(out)
}

/// `H_k` per subject.
pub fn clever_weights(
    panel: &TrialPanel,
    gfit: &GFit,
    policy: &ArmPolicy,
    k: usize,
    cap: Option<f64>,
) -> Result<Vec<f64>> {
    if k == 0 || k > panel.n_visits() {
        return Err(Error::VisitOutOfRange {
            k,
            max: panel.n_visits(),
        });
    }
    Ok(all_clever_weights(panel, gfit, policy, k, cap)?.pop().expect("k >= 1"))
}

fn check_horizon(panel: &TrialPanel, horizon: usize) -> Result<()> {
    if horizon == 0 || horizon > panel.n_visits() {
        return Err(Error::VisitOutOfRange {
            k: horizon,
            max: panel.n_visits(),
        });
    }
    Ok(())
}

/// One step of the backward pass.
#[derive(Debug, Clone)]
pub struct SequentialFit {
    pub visit: usize,
    /// Initial regression `Q̄_l` on `Ō_{l-1}`.
    pub model: FittedModel,
    pub epsilon: f64,
    /// `H_l`; zero everywhere for g-computation.
    pub weights: Vec<f64>,
    /// `Q̄*_l` per subject: the marginalized targeted regression for those at
    /// risk at `l`, 1 after an event, 0 after death or censoring.
    pub qstar: Vec<f64>,
    /// `Σ_i H_l,i (Q̄*_{l+1,i} - Q̄_l^tmle,i)`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmDiagnostics {
    pub weight_tails: Vec<WeightTail>,
    pub max_weight: f64,
    /// Subjects at risk at visits `1..=horizon`.
    pub at_risk: Vec<usize>,
    pub eic_mean: f64,
    pub floored: usize,
    pub epsilons: Vec<f64>,
}

/// Intervention-specific mean for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmEstimate {
    pub policy: String,
    pub horizon: usize,
    pub psi: f64,
    /// Per-subject efficient influence curve; empty without targeting.
    #[serde(skip)]
    pub eic: Vec<f64>,
    pub targeted: bool,
    pub diagnostics: ArmDiagnostics,
}

fn fluctuated(q: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        q
    } else {
        expit(clipped_logit(q) + eps)
    }
}

/// Targeted (`gfit` given) or plain sequential regression pass.
pub fn sequential_pass(
    panel: &TrialPanel,
    gfit: Option<&GFit>,
    policy: &ArmPolicy,
    outcome: &LearnerChoice,
    horizon: usize,
    weight_cap: Option<f64>,
) -> Result<(Vec<SequentialFit>, ArmEstimate)> {
    check_horizon(panel, horizon)?;
    if !policy.is_complete() {
        return Err(Error::Intervention("policy has an unfitted stochastic law".into()));
    }
    let n = panel.n();
    let weights = match gfit {
        Some(g) => all_clever_weights(panel, g, policy, horizon, weight_cap)?,
        None => vec![vec![0.0; n]; horizon],
    };
    let mut buf = Vec::new();
    let mut fits: Vec<SequentialFit> = Vec::with_capacity(horizon);
    let mut at_risk_counts = vec![0; horizon];
    let mut eic = vec![0.0; n];
    // Q̄*_{l+1} for subjects at risk at l+1
    let mut next_qstar: Vec<f64> = Vec::new();

    for l in (1..=horizon).rev() {
        let mask = at_risk_mask(panel, l)?;
        at_risk_counts[l - 1] = mask.iter().filter(|&&m| m).count();
        let rows: Vec<usize> = (0..n)
            .filter(|&i| mask[i] && panel.c(l)[i] == 0)
            .collect();
        if rows.is_empty() {
            return Err(Error::Estimation(format!(
                "no uncensored subject at risk at visit {l}"
            )));
        }
        let response: Vec<f64> = rows
            .iter()
            .map(|&i| {
                if panel.y(l)[i] == 1 {
                    1.0
                } else if panel.d(l)[i] == 1 || l == horizon {
                    0.0
                } else {
                    next_qstar[i]
                }
            })
            .collect();
        let scope = Scope::outcome(l);
        let unit = vec![1.0; rows.len()];
        let model = outcome.fit(&designs_for(outcome, panel, &rows, scope), &response, &unit)?;
        let q_obs: Vec<f64> = rows
            .iter()
            .map(|&i| predict_at(&model, panel, i, scope, Override::NONE, &mut buf))
            .collect();
        let h: Vec<f64> = rows.iter().map(|&i| weights[l - 1][i]).collect();

        let epsilon = if gfit.is_none() {
            0.0
        } else {
            let total: f64 = h.iter().sum();
            let raw_score: f64 = (0..rows.len()).map(|r| h[r] * (response[r] - q_obs[r])).sum();
            if total == 0.0 || raw_score.abs() <= 1e-13 * total {
                0.0
            } else {
                let offset: Vec<f64> = q_obs.iter().map(|&q| clipped_logit(q)).collect();
                let f = fit_intercept_fluctuation(&response, &offset, &h)?;
                if !f.converged {
                    return Err(Error::Estimation(format!(
                        "fluctuation at visit {l} did not converge"
                    )));
                }
                f.epsilon
            }
        };

        let mut score = 0.0;
        for (r, &i) in rows.iter().enumerate() {
            let resid = h[r] * (response[r] - fluctuated(q_obs[r], epsilon));
            score += resid;
            eic[i] += resid;
        }

        // marginalize over (A_{l-1}, Z_{l-1}) under g*
        let j = l - 1;
        let mut qstar = vec![0.0; n];
        for i in 0..n {
            if !mask[i] {
                qstar[i] = if (1..l).any(|v| panel.y(v)[i] == 1) {
                    1.0
                } else {
                    0.0
                };
                continue;
            }
            let a = policy.a_value;
            let z_mass: [(u8, f64); 2] = match policy.z_prob(panel, i, j, 1)? {
                GStarProb::UseObserved => {
                    let z = panel.z(j)[i];
                    [(z, 1.0), (1 - z, 0.0)]
                }
                GStarProb::Known(p1) => [(1, p1), (0, 1.0 - p1)],
            };
            let mut v = 0.0;
            for (z, p) in z_mass {
                if p > 0.0 {
                    let q = predict_at(&model, panel, i, scope, Override::treatments(a, z), &mut buf);
                    v += p * fluctuated(q, epsilon);
                }
            }
            qstar[i] = v;
        }
        fits.push(SequentialFit {
            visit: l,
            model,
            epsilon,
            weights: weights[l - 1].clone(),
            qstar: qstar.clone(),
            score,
        });
        next_qstar = qstar;
    }
    fits.reverse();

    let psi = next_qstar.iter().sum::<f64>() / n as f64;
    let targeted = gfit.is_some();
    let eic = if targeted {
        for i in 0..n {
            eic[i] += next_qstar[i] - psi;
        }
        eic
    } else {
        Vec::new()
    };
    let eic_mean = if targeted {
        eic.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    let weight_tails: Vec<WeightTail> = if targeted {
        weights
            .iter()
            .enumerate()
            .map(|(k, w)| weight_tail(k + 1, w, DEFAULT_WEIGHT_THRESHOLD))
            .collect()
    } else {
        Vec::new()
    };
    let max_weight = weight_tails.iter().map(|t| t.max).fold(0.0, f64::max);
    let estimate = ArmEstimate {
        policy: policy.label(),
        horizon,
        psi,
        eic,
        targeted,
        diagnostics: ArmDiagnostics {
            weight_tails,
            max_weight,
            at_risk: at_risk_counts,
            eic_mean,
            floored: gfit.map_or(0, |g| g.floored),
            epsilons: fits.iter().map(|f| f.epsilon).collect(),
        },
    };
    Ok((fits, estimate))
}

/// Targeted minimum loss-based estimate for one arm.
pub fn tmle_arm(
    panel: &TrialPanel,
    gfit: &GFit,
    policy: &ArmPolicy,
    outcome: &LearnerChoice,
    horizon: usize,
    weight_cap: Option<f64>,
) -> Result<ArmEstimate> {
    sequential_pass(panel, Some(gfit), policy, outcome, horizon, weight_cap).map(|(_, e)| e)
}

/// Non-targeted sequential-regression g-computation estimate for one arm.
pub fn gcomp_arm(
    panel: &TrialPanel,
    policy: &ArmPolicy,
    outcome: &LearnerChoice,
    horizon: usize,
) -> Result<ArmEstimate> {
    sequential_pass(panel, None, policy, outcome, horizon, None).map(|(_, e)| e)
}

/// Risk difference between two arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub policy: String,
    pub horizon: usize,
    pub n: usize,
    pub risk1: f64,
    pub risk0: f64,
    pub psi: f64,
    pub se: Option<f64>,
    pub ci: Option<[f64; 2]>,
    pub active: ArmDiagnostics,
    pub control: ArmDiagnostics,
}

pub const Z_975: f64 = 1.959963984540054;

pub fn contrast(policy: &str, active: &ArmEstimate, control: &ArmEstimate) -> Result<EstimateReport> {
    if active.horizon != control.horizon {
        return Err(Error::Estimation("arms were estimated at different horizons".into()));
    }
    let targeted = active.targeted && control.targeted;
    if targeted && active.eic.len() != control.eic.len() {
        return Err(Error::Estimation("arms were estimated on different subjects".into()));
    }
    let n = active.eic.len().max(control.eic.len());
    let psi = active.psi - control.psi;
    let se = (targeted && n > 1).then(|| {
        let d: Vec<f64> = active.eic.iter().zip(&control.eic).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        (var / n as f64).sqrt()
    });
    Ok(EstimateReport {
        policy: policy.to_string(),
        horizon: active.horizon,
        n,
        risk1: active.psi,
        risk0: control.psi,
        psi,
        se,
        ci: se.map(|s| [psi - Z_975 * s, psi + Z_975 * s]),
        active: active.diagnostics.clone(),
        control: control.diagnostics.clone(),
    })
}

fn default_learner() -> LearnerChoice {
    LearnerChoice::single(FeatureMap::RunningAvg)
}

fn default_g_floor() -> f64 {
    DEFAULT_G_FLOOR
}

/// Estimator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    #[serde(default = "default_learner")]
    pub outcome: LearnerChoice,
    #[serde(default = "default_learner")]
    pub propensity: LearnerChoice,
    #[serde(default = "default_g_floor")]
    pub g_floor: f64,
    #[serde(default)]
    pub weight_cap: Option<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            outcome: default_learner(),
            propensity: default_learner(),
            g_floor: DEFAULT_G_FLOOR,
            weight_cap: None,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.g_floor > 0.0 && self.g_floor < 0.5) {
            return Err(Error::Config("g_floor must lie in (0, 0.5)".into()));
        }
        if let Some(c) = self.weight_cap {
            if !(c > 0.0) {
                return Err(Error::Config("weight_cap must be positive".into()));
            }
        }
        for spec in self.outcome.specs().chain(self.propensity.specs()) {
            spec.validate()?;
        }
        Ok(())
    }
}
