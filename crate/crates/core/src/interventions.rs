//! Hypothetical treatment and censoring mechanisms `g*`.
//!
//! Randomized treatment `A_k` is always set statically to the arm value.
//! Concomitant treatment `Z_k` follows one of four forms:
//!
//! | form           | `g*_{Z_k}(z | ·)`                                   |
//! |----------------|-----------------------------------------------------|
//! | static `v`     | `1{z = v}`, also at baseline                        |
//! | dynamic        | `1{z = Z_0}` for `k ≥ 1`; `Z_0` itself is untouched |
//! | stochastic     | fitted `P̂(Z_k = z | Z_{k-1}, L_0)` among survivors  |
//! | observational  | the observed-data mechanism `g_{Z_k}`               |
//!
//! Censoring is always prevented: `g*_{C_k}(c) = 1{c = 0}`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::engine::{clever_weights, GFit};
use crate::error::{Error, Result};
use crate::history::{build_design, features_from_raw, restricted_raw, Scope};
use crate::learners::{FeatureMap, FittedModel, LearnerSpec, PROB_CLIP};
use crate::panel::{at_risk_mask, TrialPanel};

/// Intervention node type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Node {
    A,
    Z,
    C,
}

/// Serializable name of a concomitant-treatment form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZForm {
    Static0,
    Static1,
    Dynamic,
    Stochastic,
    Observational,
}

impl ZForm {
    pub fn name(&self) -> &'static str {
        match self {
            ZForm::Static0 => "static0",
            ZForm::Static1 => "static1",
            ZForm::Dynamic => "dynamic",
            ZForm::Stochastic => "stochastic",
            ZForm::Observational => "observational",
        }
    }
}

/// Per-visit fitted law `P̂(Z_k = 1 | Z_{k-1}, L_0)`, pooled over arms.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticLaw {
    features: FeatureMap,
    /// Index `k` in `0..K`.
    models: Vec<FittedModel>,
}

impl StochasticLaw {
    pub fn n_visits(&self) -> usize {
        self.models.len()
    }

    /// Clipped `P̂(Z_k = 1 | Z_{k-1}, L_0)`.
    pub fn prob_one(&self, k: usize, l0: &[f64], last_z: Option<u8>) -> Result<f64> {
        let model = self.models.get(k).ok_or_else(|| {
            Error::Intervention(format!("stochastic law has no model for visit {k}"))
        })?;
        let mut raw = Vec::with_capacity(l0.len() + 1);
        restricted_raw(l0, last_z, &mut raw);
        let mut x = Vec::with_capacity(raw.len() * raw.len() + 1);
        features_from_raw(self.features, &raw, &mut x);
        Ok(model.predict(&x).clamp(PROB_CLIP, 1.0 - PROB_CLIP))
    }
}

/// Functional form of `g*` at one node type.
#[derive(Debug, Clone, PartialEq)]
pub enum GStarForm {
    Static(u8),
    /// `z = Z_0`.
    Dynamic,
    /// `None` until fitted.
    Stochastic(Option<Arc<StochasticLaw>>),
    /// `g* = g`.
    Observational,
}

/// `g*` for one node type, applied identically at every visit.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSpec {
    node: Node,
    form: GStarForm,
}

impl InterventionSpec {
    pub fn new(node: Node, form: GStarForm) -> Result<Self> {
        match (node, &form) {
            (_, GStarForm::Static(v)) if *v > 1 => {
                Err(Error::Intervention(format!("static value {v} is not binary")))
            }
            (Node::C, GStarForm::Static(0)) => Ok(InterventionSpec { node, form }),
            (Node::C, _) => Err(Error::Intervention(
                "censoring can only be prevented (static 0)".into(),
            )),
            (Node::A, GStarForm::Dynamic | GStarForm::Stochastic(_)) => Err(Error::Intervention(
                "randomized treatment supports static and observational forms".into(),
            )),
            _ => Ok(InterventionSpec { node, form }),
        }
    }

    pub fn node(&self) -> Node {
        self.node
    }

    pub fn form(&self) -> &GStarForm {
        &self.form
    }

    pub fn z_form(&self) -> ZForm {
        match self.form {
            GStarForm::Static(0) => ZForm::Static0,
            GStarForm::Static(_) => ZForm::Static1,
            GStarForm::Dynamic => ZForm::Dynamic,
            GStarForm::Stochastic(_) => ZForm::Stochastic,
            GStarForm::Observational => ZForm::Observational,
        }
    }
}

/// What `gstar_prob` needs to know about a subject at visit `k`.
#[derive(Debug, Clone, Copy)]
pub struct GStarHistory<'a> {
    pub visit: usize,
    pub l0: &'a [f64],
    pub z0: u8,
    /// `Z_{k-1}`; `None` at baseline.
    pub last_z: Option<u8>,
    pub y: u8,
    pub d: u8,
}

/// Value of `g*(value | history)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GStarProb {
    Known(f64),
    /// Observational form: use the fitted observed-data mechanism.
    UseObserved,
}

impl GStarProb {
    pub fn known(self) -> Option<f64> {
        match self {
            GStarProb::Known(p) => Some(p),
            GStarProb::UseObserved => None,
        }
    }
}

/// Evaluates `g*(value | history)` for a binary node.
pub fn gstar_prob(spec: &InterventionSpec, value: u8, h: &GStarHistory<'_>) -> Result<GStarProb> {
    let indicator = |v: u8| GStarProb::Known((value == v) as u8 as f64);
    match &spec.form {
        GStarForm::Static(v) => Ok(indicator(*v)),
        GStarForm::Observational => Ok(GStarProb::UseObserved),
        // the rule is defined relative to Z_0, so Z_0 keeps its own law
        GStarForm::Dynamic if h.visit == 0 => Ok(GStarProb::UseObserved),
        GStarForm::Dynamic => Ok(indicator(h.z0)),
        GStarForm::Stochastic(None) => Err(Error::Intervention(
            "stochastic intervention queried before fitting".into(),
        )),
        GStarForm::Stochastic(Some(law)) => {
            if h.y == 1 || h.d == 1 {
                // nobody is treated after absorption
                return Ok(indicator(0));
            }
            let p1 = law.prob_one(h.visit, h.l0, h.last_z)?;
            Ok(GStarProb::Known(if value == 1 { p1 } else { 1.0 - p1 }))
        }
    }
}

/// Fits the stochastic law: for each visit `k`, a regression of `Z_k` on
/// `(Z_{k-1}, L_0)` among subjects still at risk after visit `k`, pooled
/// over randomization arms.
pub fn fit_stochastic_gstar(panel: &TrialPanel, learner: &LearnerSpec) -> Result<InterventionSpec> {
    learner.validate()?;
    let k_max = panel.n_visits();
    let mut models = Vec::with_capacity(k_max);
    for k in 0..k_max {
        let rows: Vec<usize> = at_risk_mask(panel, k + 1)?
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| r.then_some(i))
            .collect();
        if rows.is_empty() {
            return Err(Error::Intervention(format!(
                "no subject at risk to fit the stochastic law at visit {k}"
            )));
        }
        let x = build_design(
            learner.features,
            panel,
            &rows,
            Scope::stochastic(k),
            Default::default(),
        );
        let y: Vec<f64> = rows.iter().map(|&i| panel.z(k)[i] as f64).collect();
        let w = vec![1.0; rows.len()];
        let model = learner.fit(&x, &y, &w)?;
        if model.is_degenerate() {
            warn!("stochastic law at visit {k}: Z is constant, using the empirical constant");
        }
        models.push(model);
    }
    Ok(InterventionSpec {
        node: Node::Z,
        form: GStarForm::Stochastic(Some(Arc::new(StochasticLaw {
            features: learner.features,
            models,
        }))),
    })
}

/// One hypothetical arm: static randomized treatment, a concomitant form,
/// and no censoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmPolicy {
    pub a_value: u8,
    pub z_spec: InterventionSpec,
    pub censor_spec: InterventionSpec,
}

impl ArmPolicy {
    pub fn new(a_value: u8, z_spec: InterventionSpec) -> Result<Self> {
        if a_value > 1 {
            return Err(Error::Intervention("a_value must be 0 or 1".into()));
        }
        if z_spec.node != Node::Z {
            return Err(Error::Intervention("z_spec must target the Z node".into()));
        }
        Ok(ArmPolicy {
            a_value,
            z_spec,
            censor_spec: InterventionSpec::new(Node::C, GStarForm::Static(0))?,
        })
    }

    /// Builds an arm; `law` is required for the stochastic form.
    pub fn from_form(a_value: u8, form: ZForm, law: Option<&InterventionSpec>) -> Result<Self> {
        let z_spec = match form {
            ZForm::Static0 => InterventionSpec::new(Node::Z, GStarForm::Static(0))?,
            ZForm::Static1 => InterventionSpec::new(Node::Z, GStarForm::Static(1))?,
            ZForm::Dynamic => InterventionSpec::new(Node::Z, GStarForm::Dynamic)?,
            ZForm::Observational => InterventionSpec::new(Node::Z, GStarForm::Observational)?,
            ZForm::Stochastic => match law {
                Some(spec) if matches!(spec.form, GStarForm::Stochastic(_)) => spec.clone(),
                _ => InterventionSpec::new(Node::Z, GStarForm::Stochastic(None))?,
            },
        };
        ArmPolicy::new(a_value, z_spec)
    }

    pub fn is_complete(&self) -> bool {
        !matches!(self.z_spec.form, GStarForm::Stochastic(None))
    }

    /// `g*_{A_k}(value)`.
    pub fn a_prob(&self, value: u8) -> f64 {
        (value == self.a_value) as u8 as f64
    }

    /// `g*_{Z_k}(value | ·)` for subject `i` of `panel` at visit `k`.
    pub fn z_prob(&self, panel: &TrialPanel, i: usize, k: usize, value: u8) -> Result<GStarProb> {
        let l0: Vec<f64> = panel.l(0).iter().map(|c| c[i]).collect();
        let (y, d) = if k == 0 {
            (0, 0)
        } else {
            (panel.y(k)[i], panel.d(k)[i])
        };
        let h = GStarHistory {
            visit: k,
            l0: &l0,
            z0: panel.z(0)[i],
            last_z: k.checked_sub(1).map(|j| panel.z(j)[i]),
            y,
            d,
        };
        gstar_prob(&self.z_spec, value, &h)
    }

    pub fn label(&self) -> String {
        format!("{}_a{}", self.z_spec.z_form().name(), self.a_value)
    }
}

/// JSON form of an arm: `{"a_value": 0, "z_form": "static0"}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyJson {
    pub a_value: u8,
    pub z_form: ZForm,
}

/// A contrast of two arms sharing one concomitant form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Static0,
    Static1,
    Dynamic,
    Stochastic,
    Ignore,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Static0,
        PolicyKind::Static1,
        PolicyKind::Dynamic,
        PolicyKind::Stochastic,
        PolicyKind::Ignore,
    ];

    /// The four forms that balance concomitant use across arms.
    pub const BALANCING: [PolicyKind; 4] = [
        PolicyKind::Static0,
        PolicyKind::Static1,
        PolicyKind::Dynamic,
        PolicyKind::Stochastic,
    ];

    pub fn z_form(&self) -> ZForm {
        match self {
            PolicyKind::Static0 => ZForm::Static0,
            PolicyKind::Static1 => ZForm::Static1,
            PolicyKind::Dynamic => ZForm::Dynamic,
            PolicyKind::Stochastic => ZForm::Stochastic,
            PolicyKind::Ignore => ZForm::Observational,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Static0 => "static0",
            PolicyKind::Static1 => "static1",
            PolicyKind::Dynamic => "dynamic",
            PolicyKind::Stochastic => "stochastic",
            PolicyKind::Ignore => "ignore",
        }
    }

    pub fn arm(&self, a_value: u8, law: Option<&InterventionSpec>) -> Result<ArmPolicy> {
        ArmPolicy::from_form(a_value, self.z_form(), law)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "static0" | "static_z0" => Ok(PolicyKind::Static0),
            "static1" | "static_z1" => Ok(PolicyKind::Static1),
            "dynamic" => Ok(PolicyKind::Dynamic),
            "stochastic" => Ok(PolicyKind::Stochastic),
            "ignore" | "observational" => Ok(PolicyKind::Ignore),
            other => Err(Error::Config(format!("unknown policy `{other}`"))),
        }
    }
}

/// Parses an arm name such as `static_a0_z0`, `dynamic_a1`,
/// `stochastic_a0` or `ignore_a1`.
pub fn parse_arm_name(s: &str) -> Result<(u8, ZForm)> {
    let bad = || Error::Config(format!("unknown arm policy `{s}`"));
    let s = s.trim();
    if let Some(rest) = s.strip_prefix("static_a") {
        let (a, z) = rest.split_once("_z").ok_or_else(bad)?;
        let a: u8 = a.parse().map_err(|_| bad())?;
        let form = match z {
            "0" => ZForm::Static0,
            "1" => ZForm::Static1,
            _ => return Err(bad()),
        };
        return (a <= 1).then_some((a, form)).ok_or_else(bad);
    }
    let (kind, a) = s.rsplit_once("_a").ok_or_else(bad)?;
    let a: u8 = a.parse().map_err(|_| bad())?;
    if a > 1 {
        return Err(bad());
    }
    let kind: PolicyKind = kind.parse().map_err(|_| bad())?;
    Ok((a, kind.z_form()))
}

/// Tail summary of clever weights at one visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTail {
    pub visit: usize,
    pub max: f64,
    pub p99: f64,
    /// Fraction of subjects with positive weight whose weight exceeds the threshold.
    pub frac_above: f64,
    pub n_positive: usize,
    pub flagged: bool,
}

pub const DEFAULT_WEIGHT_THRESHOLD: f64 = 50.0;

/// Summarizes the tail of positive weights.
pub fn weight_tail(visit: usize, weights: &[f64], threshold: f64) -> WeightTail {
    let mut pos: Vec<f64> = weights.iter().copied().filter(|w| *w > 0.0).collect();
    pos.sort_by(f64::total_cmp);
    let max = pos.last().copied().unwrap_or(0.0);
    let p99 = if pos.is_empty() {
        0.0
    } else {
        let idx = ((0.99 * pos.len() as f64).ceil() as usize).clamp(1, pos.len()) - 1;
        pos[idx]
    };
    let above = pos.iter().filter(|w| **w > threshold).count();
    WeightTail {
        visit,
        max,
        p99,
        frac_above: if pos.is_empty() {
            0.0
        } else {
            above as f64 / pos.len() as f64
        },
        n_positive: pos.len(),
        flagged: max > threshold,
    }
}

/// Per-visit clever-weight tails for `policy` up to `horizon`.
pub fn support_diagnostics(
    panel: &TrialPanel,
    gfit: &GFit,
    policy: &ArmPolicy,
    horizon: usize,
    threshold: f64,
) -> Result<Vec<WeightTail>> {
    (1..=horizon)
        .map(|k| {
            let w = clever_weights(panel, gfit, policy, k, None)?;
            Ok(weight_tail(k, &w, threshold))
        })
        .collect()
}
