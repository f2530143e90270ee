//! Replication study: oracle truths, repeated simulate-and-estimate runs
//! and the bias/coverage/CI-length summary.

use std::io::Write;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{contrast, fit_g, tmle_arm, EstimateReport, EstimatorConfig};
use crate::error::{Error, Result};
use crate::interventions::{fit_stochastic_gstar, InterventionSpec, PolicyKind};
use crate::learners::{FeatureMap, LearnerSpec};
use crate::sim::{fit_truth_law, simulate_counterfactual_contrast, simulate_trial, ScenarioConfig};

pub const DEFAULT_N: usize = 9340;
pub const DEFAULT_REPS: usize = 500;
pub const DEFAULT_N_MC: usize = 1_000_000;

/// Seed offsets keep the oracle streams apart from replication panels.
const TRUTH_SEED_OFFSET: u64 = 0x5EED_0000_0000;
const LAW_SEED_OFFSET: u64 = 0x1A3_0000_0000;

#[derive(Debug, Clone)]
pub struct ReplicationConfig {
    pub scenario: String,
    pub config: ScenarioConfig,
    pub policies: Vec<PolicyKind>,
    pub n: usize,
    pub reps: usize,
    pub horizon: usize,
    pub seed: u64,
    pub n_mc: usize,
    pub estimator: EstimatorConfig,
}

impl ReplicationConfig {
    pub fn new(scenario: &str, config: ScenarioConfig) -> Self {
        ReplicationConfig {
            scenario: scenario.to_string(),
            horizon: config.n_visits,
            config,
            policies: PolicyKind::ALL.to_vec(),
            n: DEFAULT_N,
            reps: DEFAULT_REPS,
            seed: 1,
            n_mc: DEFAULT_N_MC,
            estimator: EstimatorConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.estimator.validate()?;
        if self.reps == 0 || self.n == 0 || self.n_mc == 0 {
            return Err(Error::Config("n, reps and n_mc must be positive".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("no policies requested".into()));
        }
        if self.horizon == 0 || self.horizon > self.config.n_visits {
            return Err(Error::VisitOutOfRange {
                k: self.horizon,
                max: self.config.n_visits,
            });
        }
        Ok(())
    }
}

/// Oracle risk difference for one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub policy: PolicyKind,
    pub risk1: f64,
    pub risk0: f64,
    pub psi: f64,
    pub mc_se: f64,
}

/// Paired Monte-Carlo truths; the stochastic law is fit on an `n_mc` panel.
pub fn oracle_truths(
    config: &ScenarioConfig,
    policies: &[PolicyKind],
    horizon: usize,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<Truth>> {
    let law = if policies.contains(&PolicyKind::Stochastic) {
        Some(fit_truth_law(config, n_mc, seed.wrapping_add(LAW_SEED_OFFSET))?)
    } else {
        None
    };
    policies
        .iter()
        .map(|&kind| {
            let c = simulate_counterfactual_contrast(
                config,
                &kind.arm(1, law.as_ref())?,
                &kind.arm(0, law.as_ref())?,
                horizon,
                n_mc,
                seed.wrapping_add(TRUTH_SEED_OFFSET),
            )?;
            Ok(Truth {
                policy: kind,
                risk1: c.risk1,
                risk0: c.risk0,
                psi: c.psi,
                mc_se: c.mc_se,
            })
        })
        .collect()
}

/// One replication's result for one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub policy: PolicyKind,
    pub report: Option<EstimateReport>,
    pub error: Option<String>,
}

impl RepRecord {
    /// Largest clever weight over both arms and all visits.
    pub fn max_weight(&self) -> Option<f64> {
        self.report
            .as_ref()
            .map(|r| r.active.max_weight.max(r.control.max_weight))
    }

    pub fn max_abs_eic_mean(&self) -> Option<f64> {
        self.report
            .as_ref()
            .map(|r| r.active.eic_mean.abs().max(r.control.eic_mean.abs()))
    }
}

/// Estimates every policy on one panel; failures are per policy.
pub fn estimate_policies(
    panel: &crate::panel::TrialPanel,
    policies: &[PolicyKind],
    horizon: usize,
    estimator: &EstimatorConfig,
) -> Vec<Result<EstimateReport>> {
    let gfit = match fit_g(panel, &estimator.propensity, estimator.g_floor) {
        Ok(g) => g,
        Err(e) => {
            let msg = e.to_string();
            return policies
                .iter()
                .map(|_| Err(Error::Estimation(msg.clone())))
                .collect();
        }
    };
    let law: Option<Result<InterventionSpec>> = policies
        .contains(&PolicyKind::Stochastic)
        .then(|| fit_stochastic_gstar(panel, &LearnerSpec::new(FeatureMap::Main)));
    policies
        .iter()
        .map(|&kind| {
            let law = match (&law, kind) {
                (Some(Err(e)), PolicyKind::Stochastic) => {
                    return Err(Error::Intervention(e.to_string()))
                }
                (Some(Ok(l)), _) => Some(l),
                _ => None,
            };
            let e1 = tmle_arm(
                panel,
                &gfit,
                &kind.arm(1, law)?,
                &estimator.outcome,
                horizon,
                estimator.weight_cap,
            )?;
            let e0 = tmle_arm(
                panel,
                &gfit,
                &kind.arm(0, law)?,
                &estimator.outcome,
                horizon,
                estimator.weight_cap,
            )?;
            contrast(kind.name(), &e1, &e0)
        })
        .collect()
}

/// Summary row per `(scenario, policy)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub scenario: String,
    pub policy: PolicyKind,
    pub truth: f64,
    pub truth_mc_se: f64,
    pub mean_est: Option<f64>,
    pub emp_sd: Option<f64>,
    pub mean_se: Option<f64>,
    pub coverage: Option<f64>,
    pub mean_ci_len: Option<f64>,
    pub norm_ci_len: Option<f64>,
    pub reps: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationTable {
    pub rows: Vec<TableRow>,
    pub truths: Vec<Truth>,
    pub records: Vec<RepRecord>,
}

pub const CSV_HEADER: &str =
    "scenario,policy,truth,truth_mc_se,mean_est,emp_sd,mean_se,coverage,mean_ci_len,norm_ci_len,reps,failures";

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn sample_sd(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// Summarizes the records of one policy against its truth.
pub fn summarize(scenario: &str, truth: &Truth, records: &[RepRecord]) -> TableRow {
    let ok: Vec<&EstimateReport> = records
        .iter()
        .filter(|r| r.policy == truth.policy)
        .filter_map(|r| r.report.as_ref())
        .collect();
    let failures = records
        .iter()
        .filter(|r| r.policy == truth.policy && r.report.is_none())
        .count();
    let est: Vec<f64> = ok.iter().map(|r| r.psi).collect();
    let ses: Vec<f64> = ok.iter().filter_map(|r| r.se).collect();
    let cis: Vec<[f64; 2]> = ok.iter().filter_map(|r| r.ci).collect();
    let covered: Vec<f64> = cis
        .iter()
        .map(|c| (c[0] <= truth.psi && truth.psi <= c[1]) as u8 as f64)
        .collect();
    let lens: Vec<f64> = cis.iter().map(|c| c[1] - c[0]).collect();
    let mean_ci_len = mean(&lens);
    TableRow {
        scenario: scenario.to_string(),
        policy: truth.policy,
        truth: truth.psi,
        truth_mc_se: truth.mc_se,
        mean_est: mean(&est),
        emp_sd: sample_sd(&est),
        mean_se: mean(&ses),
        coverage: mean(&covered),
        mean_ci_len,
        norm_ci_len: mean_ci_len.map(|l| l / truth.psi.abs()),
        reps: ok.len(),
        failures,
    }
}

/// Worker pool sized by `LTMLE_THREADS` (default: all cores).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("LTMLE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("LTMLE_THREADS=`{v}` is not a count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Runs the full study. Replication `r` simulates with seed `seed + r`.
pub fn run_replications(cfg: &ReplicationConfig) -> Result<ReplicationTable> {
    cfg.validate()?;
    let pool = worker_pool()?;
    pool.install(|| {
        info!("computing oracle truths for {} ({} draws)", cfg.scenario, cfg.n_mc);
        let truths = oracle_truths(&cfg.config, &cfg.policies, cfg.horizon, cfg.n_mc, cfg.seed)?;
        let per_rep: Vec<Vec<RepRecord>> = (1..=cfg.reps)
            .into_par_iter()
            .map(|r| {
                let seed = cfg.seed.wrapping_add(r as u64);
                let results = match simulate_trial(&cfg.config, cfg.n, seed) {
                    Ok(panel) => {
                        estimate_policies(&panel, &cfg.policies, cfg.horizon, &cfg.estimator)
                    }
                    Err(e) => cfg
                        .policies
                        .iter()
                        .map(|_| Err(Error::Estimation(e.to_string())))
                        .collect(),
                };
                cfg.policies
                    .iter()
                    .zip(results)
                    .map(|(&policy, res)| match res {
                        Ok(report) => RepRecord {
                            rep: r,
                            policy,
                            report: Some(report),
                            error: None,
                        },
                        Err(e) => {
                            warn!("replication {r}, policy {policy}: {e}");
                            RepRecord {
                                rep: r,
                                policy,
                                report: None,
                                error: Some(e.to_string()),
                            }
                        }
                    })
                    .collect()
            })
            .collect();
        let records: Vec<RepRecord> = per_rep.into_iter().flatten().collect();
        let rows = truths
            .iter()
            .map(|t| summarize(&cfg.scenario, t, &records))
            .collect();
        Ok(ReplicationTable {
            rows,
            truths,
            records,
        })
    })
}

/// Six significant digits, shortest form; empty for missing values.
pub fn fmt_sig(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => {
            if v == 0.0 {
                return "0".to_string();
            }
            let rounded: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
            format!("{rounded}")
        }
        _ => String::new(),
    }
}

pub fn write_table_csv<W: Write>(rows: &[TableRow], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.policy,
            fmt_sig(Some(r.truth)),
            fmt_sig(Some(r.truth_mc_se)),
            fmt_sig(r.mean_est),
            fmt_sig(r.emp_sd),
            fmt_sig(r.mean_se),
            fmt_sig(r.coverage),
            fmt_sig(r.mean_ci_len),
            fmt_sig(r.norm_ci_len),
            r.reps,
            r.failures
        )?;
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize, W: Write>(value: &T, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Config(format!("unknown format `{other}`"))),
        }
    }
}

pub fn emit_table<W: Write>(table: &ReplicationTable, format: Format, out: W) -> Result<()> {
    match format {
        Format::Csv => write_table_csv(&table.rows, out),
        Format::Json => write_json(&table.rows, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig(Some(0.114334)), "0.114334");
        assert_eq!(fmt_sig(Some(-0.0349470001)), "-0.034947");
        assert_eq!(fmt_sig(Some(1234567.0)), "1234570");
        assert_eq!(fmt_sig(Some(0.0)), "0");
        assert_eq!(fmt_sig(None), "");
        assert_eq!(fmt_sig(Some(f64::NAN)), "");
    }

    #[test]
    fn csv_header_is_stable() {
        let mut buf = Vec::new();
        write_table_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), CSV_HEADER);
    }

    #[test]
    fn single_replication_has_blank_sd() {
        let truth = Truth {
            policy: PolicyKind::Static0,
            risk1: 0.1,
            risk0: 0.2,
            psi: -0.1,
            mc_se: 0.001,
        };
        let rec = RepRecord {
            rep: 1,
            policy: PolicyKind::Static0,
            report: None,
            error: Some("boom".into()),
        };
        let row = summarize("s", &truth, &[rec]);
        assert_eq!(row.reps, 0);
        assert_eq!(row.failures, 1);
        assert_eq!(row.emp_sd, None);
        assert_eq!(row.coverage, None);
    }

    #[test]
    fn small_study_runs_end_to_end() {
        let mut cfg = ReplicationConfig::new("scenario1", ScenarioConfig::default());
        cfg.n = 400;
        cfg.reps = 2;
        cfg.n_mc = 2000;
        let t = run_replications(&cfg).unwrap();
        assert_eq!(t.rows.len(), 5);
        assert_eq!(t.records.len(), 10);
        for r in &t.rows {
            assert_eq!(r.reps + r.failures, 2);
            if let Some(c) = r.coverage {
                assert!((0.0..=1.0).contains(&c));
            }
        }
        assert_eq!(run_replications(&cfg).unwrap(), t);
    }
}
