//! Discrete-time trial simulator and Monte-Carlo counterfactual oracle.
//!
//! Every random draw is addressed by `(seed, subject, visit, node)`: the
//! subject selects a ChaCha stream and `(visit, node)` a word offset within
//! it. Factual and counterfactual runs therefore share baseline and
//! covariate noise, and output does not depend on the worker count.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::{fit_stochastic_gstar, ArmPolicy, GStarForm, InterventionSpec};
use crate::learners::{expit, FeatureMap, LearnerSpec};
use crate::panel::{at_risk_mask, Baseline, TrialPanel, Visit};

/// Parameters of the data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Shift of baseline concomitant use.
    pub c_z0: f64,
    /// Shift of concomitant initiation.
    pub c_z: f64,
    /// Concomitant efficacy on the covariate.
    pub p_z: f64,
    /// Concomitant efficacy on the outcome.
    pub p_zy: f64,
    /// Persistence of concomitant use.
    pub b_zz: f64,
    pub outcome_intercept: f64,
    pub covariate_noise_sd: f64,
    pub covariate_drift_coef: f64,
    pub outcome_slope: f64,
    pub n_visits: usize,
    /// `A_k = A_0` at every visit.
    pub full_adherence: bool,
    /// Per-visit probability of stopping active treatment when adherence is not full.
    pub discontinuation_prob: f64,
    /// Discount factor of the running averages; `None` is the plain mean.
    pub decay: Option<f64>,
    /// Constant per-visit hazard of competing death.
    pub death_hazard: f64,
    /// Constant per-visit hazard of censoring.
    pub censor_hazard: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            c_z0: -1.5,
            c_z: -2.5,
            p_z: 1.0,
            p_zy: 1.0,
            b_zz: 8.0,
            outcome_intercept: -3.75,
            covariate_noise_sd: 0.5,
            covariate_drift_coef: 0.3,
            outcome_slope: 0.3,
            n_visits: 5,
            full_adherence: true,
            discontinuation_prob: 0.0,
            decay: None,
            death_hazard: 0.0,
            censor_hazard: 0.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        let reals = [
            self.c_z0,
            self.c_z,
            self.p_z,
            self.p_zy,
            self.b_zz,
            self.covariate_noise_sd,
            self.covariate_drift_coef,
            self.outcome_slope,
        ];
        if reals.iter().any(|v| !v.is_finite()) || self.outcome_intercept.is_nan() {
            return bad("scenario parameters must be finite");
        }
        if self.p_z < 0.0 || self.p_zy < 0.0 {
            return bad("p_z and p_zy must be nonnegative");
        }
        if !(self.covariate_noise_sd > 0.0) {
            return bad("covariate_noise_sd must be positive");
        }
        if self.n_visits == 0 {
            return bad("n_visits must be at least 1");
        }
        for (name, p) in [
            ("discontinuation_prob", self.discontinuation_prob),
            ("death_hazard", self.death_hazard),
            ("censor_hazard", self.censor_hazard),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if let Some(l) = self.decay {
            if !(l > 0.0 && l <= 1.0) {
                return bad("decay must lie in (0, 1]");
            }
        }
        Ok(())
    }

    /// Weighted average of `xs` with the most recent term weighted 1.
    fn running_avg(&self, xs: &[f64]) -> f64 {
        match self.decay {
            None => xs.iter().sum::<f64>() / xs.len() as f64,
            Some(l) => {
                let (mut num, mut den, mut w) = (0.0, 0.0, 1.0);
                for x in xs.iter().rev() {
                    num += w * x;
                    den += w;
                    w *= l;
                }
                num / den
            }
        }
    }
}

/// The three named scenarios.
pub fn scenario_presets() -> BTreeMap<String, ScenarioConfig> {
    let make = |p_z: f64, c_z0: f64, c_z: f64| ScenarioConfig {
        p_z,
        p_zy: p_z,
        c_z0,
        c_z,
        ..ScenarioConfig::default()
    };
    BTreeMap::from([
        ("scenario1".to_string(), make(1.0, -1.5, -2.5)),
        ("scenario2".to_string(), make(1.0, -1.0, 0.0)),
        ("scenario3".to_string(), make(0.1, -1.5, -2.5)),
    ])
}

pub fn scenario(name: &str) -> Result<ScenarioConfig> {
    scenario_presets()
        .remove(name)
        .ok_or_else(|| Error::Config(format!("unknown scenario `{name}`")))
}

#[derive(Clone, Copy)]
enum NodeSlot {
    L0 = 0,
    A0 = 1,
    Z0 = 2,
    C = 3,
    D = 4,
    Y = 5,
    L = 6,
    Z = 7,
    A = 8,
}

const SLOTS_PER_VISIT: u128 = 9;
const WORDS_PER_SLOT: u128 = 256;

/// Per-subject random source addressed by `(visit, node)`.
struct SubjectRng(ChaCha8Rng);

impl SubjectRng {
    fn new(seed: u64, subject: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(subject as u64);
        SubjectRng(rng)
    }

    fn at(&mut self, visit: usize, slot: NodeSlot) -> &mut ChaCha8Rng {
        let pos = (visit as u128 * SLOTS_PER_VISIT + slot as u128) * WORDS_PER_SLOT;
        self.0.set_word_pos(pos);
        &mut self.0
    }

    fn uniform(&mut self, visit: usize, slot: NodeSlot) -> f64 {
        self.at(visit, slot).gen::<f64>()
    }

    fn normal(&mut self, visit: usize, slot: NodeSlot) -> f64 {
        self.at(visit, slot).sample(StandardNormal)
    }
}

/// Which mechanisms drive `A` and `Z`.
#[derive(Debug, Clone, Copy)]
pub enum Regime<'a> {
    /// The data-generating process itself.
    Natural,
    /// `A` set to the arm value, `Z` drawn from the arm's `g*`, censoring prevented.
    Arm(&'a ArmPolicy),
}

/// How a simulated subject left follow-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Event(usize),
    Death(usize),
    Censored(usize),
}

/// One subject's simulated record. `l`, `z`, `a` hold visits `0..K`;
/// values after exit are carried forward.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub l: Vec<f64>,
    pub z: Vec<u8>,
    pub a: Vec<u8>,
    pub exit: Option<Exit>,
}

impl Trajectory {
    pub fn event_by(&self, horizon: usize) -> bool {
        matches!(self.exit, Some(Exit::Event(k)) if k <= horizon)
    }
}

fn draw(u: f64, p: f64) -> u8 {
    (u < p) as u8
}

fn z_prob_under(
    policy: &ArmPolicy,
    k: usize,
    natural: f64,
    l0: f64,
    z0: u8,
    last_z: Option<u8>,
) -> Result<f64> {
    match &policy.z_spec.form() {
        GStarForm::Static(v) => Ok(*v as f64),
        GStarForm::Observational => Ok(natural),
        GStarForm::Dynamic if k == 0 => Ok(natural),
        GStarForm::Dynamic => Ok(z0 as f64),
        GStarForm::Stochastic(Some(law)) => law.prob_one(k, &[l0], last_z),
        GStarForm::Stochastic(None) => Err(Error::Intervention(
            "stochastic arm supplied without a fitted law".into(),
        )),
    }
}

/// Simulates subject `i` through visit `horizon` under `regime`.
pub fn simulate_subject(
    config: &ScenarioConfig,
    seed: u64,
    i: usize,
    horizon: usize,
    regime: Regime<'_>,
) -> Result<Trajectory> {
    let k_max = config.n_visits;
    let mut rng = SubjectRng::new(seed, i);
    let mut l = Vec::with_capacity(k_max);
    let mut z = Vec::with_capacity(k_max);
    let mut a = Vec::with_capacity(k_max);

    let l0: f64 = rng.normal(0, NodeSlot::L0);
    let a_nat = draw(rng.uniform(0, NodeSlot::A0), 0.5);
    let p_z0 = expit(l0 + config.c_z0);
    let u_z0 = rng.uniform(0, NodeSlot::Z0);
    let z0 = match regime {
        Regime::Natural => draw(u_z0, p_z0),
        Regime::Arm(p) => {
            let z0_nat = draw(u_z0, p_z0);
            draw(u_z0, z_prob_under(p, 0, p_z0, l0, z0_nat, None)?)
        }
    };
    let a0 = match regime {
        Regime::Natural => a_nat,
        Regime::Arm(p) => p.a_value,
    };
    l.push(l0);
    z.push(z0);
    a.push(a0);

    let mut exit = None;
    for k in 1..=horizon.min(k_max) {
        let zf: Vec<f64> = z.iter().map(|&v| v as f64).collect();
        let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let (l_bar, z_bar, a_bar) = (
            config.running_avg(&l),
            config.running_avg(&zf),
            config.running_avg(&af),
        );

        let censor = matches!(regime, Regime::Natural)
            && draw(rng.uniform(k, NodeSlot::C), config.censor_hazard) == 1;
        if censor {
            exit = Some(Exit::Censored(k));
            break;
        }
        if draw(rng.uniform(k, NodeSlot::D), config.death_hazard) == 1 {
            exit = Some(Exit::Death(k));
            break;
        }
        let eta = config.outcome_slope * (l_bar - a_bar - config.p_zy * z_bar)
            + config.outcome_intercept;
        if draw(rng.uniform(k, NodeSlot::Y), expit(eta)) == 1 {
            exit = Some(Exit::Event(k));
            break;
        }
        if k == k_max {
            break;
        }

        let mean = l[k - 1] - config.covariate_drift_coef * (a_bar + config.p_z * z_bar);
        let lk = mean + config.covariate_noise_sd * rng.normal(k, NodeSlot::L);
        let last_z = z[k - 1];
        let p_nat = expit(lk + config.b_zz * last_z as f64 + config.c_z);
        let u_z = rng.uniform(k, NodeSlot::Z);
        let zk = match regime {
            Regime::Natural => draw(u_z, p_nat),
            Regime::Arm(p) => draw(u_z, z_prob_under(p, k, p_nat, l0, z0, Some(last_z))?),
        };
        let ak = match regime {
            Regime::Arm(p) => p.a_value,
            Regime::Natural if config.full_adherence || a[k - 1] == 0 => a[k - 1],
            Regime::Natural => {
                1 - draw(rng.uniform(k, NodeSlot::A), config.discontinuation_prob)
            }
        };
        l.push(lk);
        z.push(zk);
        a.push(ak);
    }
    // carry the last values through the remaining visits
    while l.len() < k_max {
        l.push(*l.last().expect("baseline present"));
        z.push(*z.last().expect("baseline present"));
        a.push(*a.last().expect("baseline present"));
    }
    Ok(Trajectory { l, z, a, exit })
}

/// Simulates a trial panel of `n` subjects.
pub fn simulate_trial(config: &ScenarioConfig, n: usize, seed: u64) -> Result<TrialPanel> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let k_max = config.n_visits;
    let subjects: Vec<Trajectory> = (0..n)
        .into_par_iter()
        .map(|i| simulate_subject(config, seed, i, k_max, Regime::Natural))
        .collect::<Result<_>>()?;

    let baseline = Baseline {
        l0: vec![subjects.iter().map(|s| s.l[0]).collect()],
        z0: subjects.iter().map(|s| s.z[0]).collect(),
        a0: subjects.iter().map(|s| s.a[0]).collect(),
    };
    let mut visits: Vec<Visit> = (1..=k_max)
        .map(|k| Visit::zeros(n, 1, k < k_max))
        .collect();
    for (i, s) in subjects.iter().enumerate() {
        for k in 1..=k_max {
            let v = &mut visits[k - 1];
            match s.exit {
                Some(Exit::Event(e)) if e <= k => v.y[i] = 1,
                Some(Exit::Death(e)) if e <= k => v.d[i] = 1,
                Some(Exit::Censored(e)) if e <= k => v.c[i] = 1,
                _ => {}
            }
            if k < k_max {
                v.l[0][i] = s.l[k];
                v.z[i] = s.z[k];
                v.a[i] = s.a[k];
            }
        }
    }
    TrialPanel::new(
        (0..n).map(|i| (i + 1).to_string()).collect(),
        (0..=k_max).map(|k| k as f64).collect(),
        baseline,
        visits,
        true,
    )
}

/// Oracle output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualMean {
    pub arm: String,
    pub horizon: usize,
    pub n_mc: usize,
    pub risk: f64,
    pub mc_se: f64,
}

/// Paired oracle for a risk difference: both arms share every draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualContrast {
    pub horizon: usize,
    pub n_mc: usize,
    pub risk1: f64,
    pub risk0: f64,
    pub psi: f64,
    pub mc_se: f64,
}

fn check_oracle_args(config: &ScenarioConfig, horizon: usize, n_mc: usize) -> Result<()> {
    config.validate()?;
    if horizon == 0 || horizon > config.n_visits {
        return Err(Error::VisitOutOfRange {
            k: horizon,
            max: config.n_visits,
        });
    }
    if n_mc == 0 {
        return Err(Error::Config("n_mc must be at least 1".into()));
    }
    Ok(())
}

fn require_complete(regime: Regime<'_>) -> Result<()> {
    match regime {
        Regime::Arm(p) if !p.is_complete() => Err(Error::Intervention(
            "stochastic arm supplied without a fitted law".into(),
        )),
        _ => Ok(()),
    }
}

/// Mean of `Y_horizon` over `n_mc` trajectories drawn under `regime`.
pub fn simulate_counterfactual_mean(
    config: &ScenarioConfig,
    regime: Regime<'_>,
    horizon: usize,
    n_mc: usize,
    seed: u64,
) -> Result<CounterfactualMean> {
    check_oracle_args(config, horizon, n_mc)?;
    require_complete(regime)?;
    let events: usize = (0..n_mc)
        .into_par_iter()
        .map(|i| simulate_subject(config, seed, i, horizon, regime).map(|t| t.event_by(horizon) as usize))
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    let risk = events as f64 / n_mc as f64;
    Ok(CounterfactualMean {
        arm: match regime {
            Regime::Natural => "natural".to_string(),
            Regime::Arm(p) => p.label(),
        },
        horizon,
        n_mc,
        risk,
        mc_se: (risk * (1.0 - risk) / n_mc as f64).sqrt(),
    })
}

/// Risk difference between two arms with common random numbers.
pub fn simulate_counterfactual_contrast(
    config: &ScenarioConfig,
    active: &ArmPolicy,
    control: &ArmPolicy,
    horizon: usize,
    n_mc: usize,
    seed: u64,
) -> Result<CounterfactualContrast> {
    check_oracle_args(config, horizon, n_mc)?;
    require_complete(Regime::Arm(active))?;
    require_complete(Regime::Arm(control))?;
    // (events under active, events under control, squared paired differences)
    let (e1, e0, sq) = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let y1 = simulate_subject(config, seed, i, horizon, Regime::Arm(active))?
                .event_by(horizon) as i64;
            let y0 = simulate_subject(config, seed, i, horizon, Regime::Arm(control))?
                .event_by(horizon) as i64;
            Ok::<_, Error>((y1, y0, (y1 - y0) * (y1 - y0)))
        })
        .try_reduce(|| (0, 0, 0), |a, b| Ok((a.0 + b.0, a.1 + b.1, a.2 + b.2)))?;
    let n = n_mc as f64;
    let (risk1, risk0) = (e1 as f64 / n, e0 as f64 / n);
    let psi = risk1 - risk0;
    let var = if n_mc > 1 {
        (sq as f64 - n * psi * psi) / (n - 1.0)
    } else {
        0.0
    };
    Ok(CounterfactualContrast {
        horizon,
        n_mc,
        risk1,
        risk0,
        psi,
        mc_se: (var.max(0.0) / n).sqrt(),
    })
}

/// Population version of the stochastic law, fit on a large natural panel.
pub fn fit_truth_law(config: &ScenarioConfig, n: usize, seed: u64) -> Result<InterventionSpec> {
    let panel = simulate_trial(config, n, seed)?;
    fit_stochastic_gstar(&panel, &LearnerSpec::new(FeatureMap::Main))
}

/// Fraction of subjects still in follow-up after visit `k` who use
/// concomitant treatment at `k`, by randomized arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropInRow {
    pub arm: u8,
    pub visit: usize,
    pub at_risk: usize,
    pub fraction: Option<f64>,
}

pub fn drop_in_trajectory(panel: &TrialPanel) -> Result<Vec<DropInRow>> {
    let mut rows = Vec::new();
    for arm in [0u8, 1] {
        for k in 0..panel.n_visits() {
            let mask = at_risk_mask(panel, k + 1)?;
            let (mut m, mut users) = (0usize, 0usize);
            for i in 0..panel.n() {
                if mask[i] && panel.a(0)[i] == arm {
                    m += 1;
                    users += panel.z(k)[i] as usize;
                }
            }
            if m == 0 {
                warn!("arm {arm} has nobody at risk at visit {k}");
            }
            rows.push(DropInRow {
                arm,
                visit: k,
                at_risk: m,
                fraction: (m > 0).then(|| users as f64 / m as f64),
            });
        }
    }
    Ok(rows)
}
