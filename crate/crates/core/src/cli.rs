//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::engine::{EstimateReport, EstimatorConfig};
use crate::error::{Error, Result};
use crate::harness::{
    emit_table, estimate_policies, oracle_truths, run_replications, worker_pool, write_json,
    Format, ReplicationConfig, DEFAULT_N, DEFAULT_N_MC, DEFAULT_REPS,
};
use crate::interventions::{parse_arm_name, ArmPolicy, PolicyJson, PolicyKind, ZForm};
use crate::learners::{FeatureMap, LearnerChoice, LearnerSpec};
use crate::panel::{
    ingest_long_events, read_event_csv, read_panel_csv, validate_panel, write_panel_csv,
    TrialPanel,
};
use crate::sim::{
    drop_in_trajectory, fit_truth_law, scenario, simulate_counterfactual_mean, simulate_trial,
    Regime, ScenarioConfig,
};

#[derive(Parser, Debug)]
#[command(name = "ltmle", version, about = "Longitudinal TMLE for trials with drop-in treatment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ScenarioArgs {
    /// Preset name (scenario1, scenario2, scenario3).
    #[arg(long, default_value = "scenario1", conflicts_with = "config")]
    scenario: String,
    /// Scenario JSON with any subset of the configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<(String, ScenarioConfig)> {
        match &self.config {
            Some(path) => {
                let cfg: ScenarioConfig = serde_json::from_reader(File::open(path)?)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                cfg.validate()?;
                let name = path
                    .file_stem()
                    .map_or("custom".to_string(), |s| s.to_string_lossy().into_owned());
                Ok((name, cfg))
            }
            None => Ok((self.scenario.clone(), scenario(&self.scenario)?)),
        }
    }
}

#[derive(Args, Debug, Clone)]
struct EstimatorArgs {
    #[arg(long, default_value_t = crate::engine::DEFAULT_G_FLOOR)]
    g_floor: f64,
    #[arg(long)]
    weight_cap: Option<f64>,
    /// Use the discrete super learner with this many folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Seed for the super learner's fold split.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl EstimatorArgs {
    fn config(&self) -> EstimatorConfig {
        let learner = match self.folds {
            None => LearnerChoice::single(FeatureMap::RunningAvg),
            Some(folds) => LearnerChoice::SuperLearner {
                library: vec![
                    LearnerSpec::new(FeatureMap::RunningAvg),
                    LearnerSpec::new(FeatureMap::Interactions),
                    LearnerSpec::new(FeatureMap::Intercept),
                ],
                folds,
                seed: self.seed,
            },
        };
        EstimatorConfig {
            outcome: learner.clone(),
            propensity: learner,
            g_floor: self.g_floor,
            weight_cap: self.weight_cap,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a trial panel and write it as wide CSV.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = DEFAULT_N)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo truth for one arm (e.g. static_a0_z0) or one policy contrast (e.g. dynamic).
    Oracle {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        policy: String,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_N_MC)]
        nmc: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate risk differences on a panel CSV.
    Estimate {
        #[arg(long)]
        panel: Option<PathBuf>,
        /// Policy JSON file (object or array of {a_value, z_form}).
        #[arg(long, conflicts_with = "policies")]
        policy: Option<PathBuf>,
        /// Comma-separated policy names.
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<PolicyKind>>,
        /// Estimation request JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        /// A_0 was not randomized; fit its mechanism instead of using 1/2.
        #[arg(long)]
        observational_a0: bool,
        #[command(flatten)]
        estimator: EstimatorArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the replication study.
    Replicate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<PolicyKind>>,
        #[arg(long, default_value_t = DEFAULT_N)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_REPS)]
        reps: usize,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_N_MC)]
        nmc: usize,
        #[arg(long, default_value = "csv")]
        format: Format,
        #[command(flatten)]
        estimator: EstimatorArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-arm fraction of concomitant use among subjects in follow-up.
    Trajectory {
        #[arg(long)]
        panel: Option<PathBuf>,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = DEFAULT_N)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Discretize a long event CSV onto a visit grid.
    Ingest {
        #[arg(long)]
        events: PathBuf,
        /// Comma-separated visit times t_0,...,t_K.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_panel(path: &Path) -> Result<TrialPanel> {
    let panel = read_panel_csv(File::open(path)?)?;
    let report = validate_panel(&panel);
    if let Some(v) = report.violations.first() {
        return Err(Error::Panel(format!(
            "{} invariant violations, first: {v}",
            report.violations.len()
        )));
    }
    Ok(panel)
}

/// Estimation request file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimationRequest {
    panel_path: Option<PathBuf>,
    horizon: Option<usize>,
    #[serde(default)]
    policies: Vec<PolicyKind>,
    #[serde(default)]
    learner: Option<LearnerChoice>,
    g_floor: Option<f64>,
    weight_cap: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EstimateOutput {
    horizon: usize,
    n: usize,
    reports: Vec<PolicyOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyOutcome {
    policy: String,
    report: Option<EstimateReport>,
    error: Option<String>,
}

fn read_policy_file(path: &Path) -> Result<Vec<PolicyJson>> {
    let v: serde_json::Value = serde_json::from_reader(File::open(path)?)?;
    let parsed = if v.is_array() {
        serde_json::from_value(v)
    } else {
        serde_json::from_value(v).map(|p: PolicyJson| vec![p])
    };
    parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn policy_kind_of(form: ZForm) -> PolicyKind {
    match form {
        ZForm::Static0 => PolicyKind::Static0,
        ZForm::Static1 => PolicyKind::Static1,
        ZForm::Dynamic => PolicyKind::Dynamic,
        ZForm::Stochastic => PolicyKind::Stochastic,
        ZForm::Observational => PolicyKind::Ignore,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_estimate(
    panel: Option<PathBuf>,
    policy: Option<PathBuf>,
    policies: Option<Vec<PolicyKind>>,
    config: Option<PathBuf>,
    horizon: Option<usize>,
    observational_a0: bool,
    estimator: EstimatorArgs,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut est = estimator.config();
    let mut kinds: Vec<PolicyKind> = Vec::new();
    let mut panel_path = panel;
    let mut horizon = horizon;
    // arm 0 listed as active in a policy file
    let mut flipped: Vec<bool> = Vec::new();
    if let Some(path) = config {
        let req: EstimationRequest = serde_json::from_reader(File::open(&path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        panel_path = panel_path.or(req.panel_path);
        horizon = horizon.or(req.horizon);
        kinds.extend(req.policies);
        if let Some(l) = req.learner {
            est.outcome = l.clone();
            est.propensity = l;
        }
        if let Some(f) = req.g_floor {
            est.g_floor = f;
        }
        est.weight_cap = est.weight_cap.or(req.weight_cap);
        if let (Some(s), LearnerChoice::SuperLearner { seed, .. }) = (req.seed, &mut est.outcome) {
            *seed = s;
        }
    }
    flipped.resize(kinds.len(), false);
    if let Some(path) = policy {
        for p in read_policy_file(&path)? {
            if p.a_value > 1 {
                return Err(Error::Config("a_value must be 0 or 1".into()));
            }
            kinds.push(policy_kind_of(p.z_form));
            flipped.push(p.a_value == 0);
        }
    }
    if let Some(ps) = policies {
        flipped.extend(ps.iter().map(|_| false));
        kinds.extend(ps);
    }
    if kinds.is_empty() {
        kinds = PolicyKind::ALL.to_vec();
        flipped = vec![false; kinds.len()];
    }
    est.validate()?;
    let panel_path =
        panel_path.ok_or_else(|| Error::Config("estimate needs --panel or a request file".into()))?;
    let mut panel = load_panel(&panel_path)?;
    if observational_a0 {
        panel.set_randomized(false);
    }
    let horizon = horizon.unwrap_or(panel.n_visits());
    if horizon == 0 || horizon > panel.n_visits() {
        return Err(Error::Config(format!(
            "horizon {horizon} outside 1..={}",
            panel.n_visits()
        )));
    }
    let results = worker_pool()?.install(|| estimate_policies(&panel, &kinds, horizon, &est));
    let reports = kinds
        .iter()
        .zip(&flipped)
        .zip(results)
        .map(|((kind, &flip), res)| match res {
            Ok(mut r) => {
                if flip {
                    std::mem::swap(&mut r.risk1, &mut r.risk0);
                    std::mem::swap(&mut r.active, &mut r.control);
                    r.psi = -r.psi;
                    r.ci = r.ci.map(|c| [-c[1], -c[0]]);
                }
                PolicyOutcome {
                    policy: kind.name().to_string(),
                    report: Some(r),
                    error: None,
                }
            }
            Err(e) => PolicyOutcome {
                policy: kind.name().to_string(),
                report: None,
                error: Some(e.to_string()),
            },
        })
        .collect::<Vec<_>>();
    if let Some(first) = reports.iter().find_map(|r| r.error.as_ref()) {
        if reports.iter().all(|r| r.report.is_none()) {
            return Err(Error::Estimation(first.clone()));
        }
    }
    write_json(
        &EstimateOutput {
            horizon,
            n: panel.n(),
            reports,
        },
        output(&out)?,
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            scenario,
            n,
            seed,
            out,
        } => {
            let (_, cfg) = scenario.load()?;
            let panel = worker_pool()?.install(|| simulate_trial(&cfg, n, seed))?;
            write_panel_csv(&panel, output(&out)?)
        }
        Command::Oracle {
            scenario,
            policy,
            horizon,
            nmc,
            seed,
            out,
        } => {
            let (_, cfg) = scenario.load()?;
            let horizon = horizon.unwrap_or(cfg.n_visits);
            worker_pool()?.install(|| match policy.parse::<PolicyKind>() {
                Ok(kind) => {
                    let t = oracle_truths(&cfg, &[kind], horizon, nmc, seed)?;
                    write_json(&t[0], output(&out)?)
                }
                Err(_) => {
                    let (a, form) = parse_arm_name(&policy)?;
                    let law = if form == ZForm::Stochastic {
                        Some(fit_truth_law(&cfg, nmc, seed.wrapping_add(1))?)
                    } else {
                        None
                    };
                    let arm = ArmPolicy::from_form(a, form, law.as_ref())?;
                    let mut r =
                        simulate_counterfactual_mean(&cfg, Regime::Arm(&arm), horizon, nmc, seed)?;
                    r.arm = policy.clone();
                    write_json(&r, output(&out)?)
                }
            })
        }
        Command::Estimate {
            panel,
            policy,
            policies,
            config,
            horizon,
            observational_a0,
            estimator,
            out,
        } => run_estimate(
            panel,
            policy,
            policies,
            config,
            horizon,
            observational_a0,
            estimator,
            out,
        ),
        Command::Replicate {
            scenario,
            policies,
            n,
            reps,
            horizon,
            nmc,
            format,
            estimator,
            out,
        } => {
            let (name, cfg) = scenario.load()?;
            let mut rc = ReplicationConfig::new(&name, cfg);
            if let Some(p) = policies {
                rc.policies = p;
            }
            rc.n = n;
            rc.reps = reps;
            rc.horizon = horizon.unwrap_or(rc.horizon);
            rc.n_mc = nmc;
            rc.seed = estimator.seed;
            rc.estimator = estimator.config();
            let table = run_replications(&rc)?;
            emit_table(&table, format, output(&out)?)
        }
        Command::Trajectory {
            panel,
            scenario,
            n,
            seed,
            out,
        } => {
            let panel = match panel {
                Some(p) => load_panel(&p)?,
                None => {
                    let (_, cfg) = scenario.load()?;
                    worker_pool()?.install(|| simulate_trial(&cfg, n, seed))?
                }
            };
            let rows = drop_in_trajectory(&panel)?;
            let mut w = output(&out)?;
            writeln!(w, "arm,visit,at_risk,fraction")?;
            for r in rows {
                writeln!(
                    w,
                    "{},{},{},{}",
                    r.arm,
                    r.visit,
                    r.at_risk,
                    crate::harness::fmt_sig(r.fraction)
                )?;
            }
            Ok(())
        }
        Command::Ingest { events, grid, out } => {
            let records = read_event_csv(File::open(&events)?)?;
            let panel = ingest_long_events(&records, &grid)?;
            write_panel_csv(&panel, output(&out)?)
        }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_data_error() {
                2
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(cli_main(["ltmle", "frobnicate"]), 1);
        assert_eq!(cli_main(["ltmle", "simulate", "--bogus"]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(cli_main(["ltmle", "--help"]), 0);
    }

    #[test]
    fn unknown_scenario_is_configuration_error() {
        assert_eq!(cli_main(["ltmle", "simulate", "--scenario", "nope", "--n", "5"]), 1);
    }
}
