//! Discrete-time trial panels.
//!
//! A [`TrialPanel`] holds, for `n` subjects and `K` follow-up visits,
//!
//! ```text
//! L0, Z0, A0, (Y1, D1, C1, L1, Z1, A1), ..., (Y{K-1}, D{K-1}, C{K-1}, L{K-1}, Z{K-1}, A{K-1}), (YK, DK, CK)
//! ```
//!
//! Within a visit the outcome triplet `(Y, D, C)` comes first, then the
//! covariates `L`, then the treatment pair `(Z, A)`. Censoring is resolved
//! before the primary event and competing death: a subject with `C_k = 1`
//! has unknown `Y_k`, `D_k` and no later information.
//!
//! Storage is column-major per visit so that per-visit regression passes
//! walk contiguous memory.

mod csv_io;
mod ingest;

pub use csv_io::{read_event_csv, read_panel_csv, write_panel_csv};
pub use ingest::{ingest_long_events, render_events, EventKind, EventRecord};

use std::fmt;

use crate::error::{Error, Result};

/// Baseline block: `L0` (d columns), `Z0`, `A0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub l0: Vec<Vec<f64>>,
    pub z0: Vec<u8>,
    pub a0: Vec<u8>,
}

/// One follow-up visit. `l`, `z`, `a` are empty at the final visit.
#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub y: Vec<u8>,
    pub d: Vec<u8>,
    pub c: Vec<u8>,
    pub l: Vec<Vec<f64>>,
    pub z: Vec<u8>,
    pub a: Vec<u8>,
}

impl Visit {
    /// An all-zero visit for `n` subjects with `width` covariate columns.
    pub fn zeros(n: usize, width: usize, has_treatment: bool) -> Self {
        let t = if has_treatment { n } else { 0 };
        let w = if has_treatment { width } else { 0 };
        Visit {
            y: vec![0; n],
            d: vec![0; n],
            c: vec![0; n],
            l: vec![vec![0.0; t]; w],
            z: vec![0; t],
            a: vec![0; t],
        }
    }
}

/// Rectangular discrete-time record of `n` subjects over `K` visits.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialPanel {
    ids: Vec<String>,
    visit_times: Vec<f64>,
    baseline: Baseline,
    visits: Vec<Visit>,
    randomized: bool,
}

/// Which absorbing process a violation concerns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Process {
    Event,
    Death,
    Censoring,
}

impl fmt::Display for Process {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Process::Event => "Y",
            Process::Death => "D",
            Process::Censoring => "C",
        })
    }
}

/// A single broken panel invariant with its coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    AbsorbingBroken {
        process: Process,
        subject: usize,
        visit: usize,
    },
    ExclusiveFirstTransition {
        subject: usize,
        visit: usize,
    },
    NonBinary {
        variable: String,
        subject: usize,
        value: u8,
    },
    NonFiniteCovariate {
        variable: String,
        subject: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::AbsorbingBroken {
                process,
                subject,
                visit,
            } => write!(f, "absorbing {process} broken at k={visit} (subject {subject})"),
            Violation::ExclusiveFirstTransition { subject, visit } => write!(
                f,
                "exclusive first transition violated at k={visit} (subject {subject})"
            ),
            Violation::NonBinary {
                variable,
                subject,
                value,
            } => write!(f, "{variable} = {value} is not binary (subject {subject})"),
            Violation::NonFiniteCovariate { variable, subject } => {
                write!(f, "{variable} is not finite (subject {subject})")
            }
        }
    }
}

/// All violations found by [`validate_panel`]; empty when the panel is valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl TrialPanel {
    /// Assembles a panel, checking only structural consistency (shapes).
    /// Semantic invariants are checked by [`validate_panel`].
    pub fn new(
        ids: Vec<String>,
        visit_times: Vec<f64>,
        baseline: Baseline,
        visits: Vec<Visit>,
        randomized: bool,
    ) -> Result<Self> {
        let n = ids.len();
        let k = visits.len();
        if n == 0 {
            return Err(Error::Panel("panel has no subjects".into()));
        }
        if k == 0 {
            return Err(Error::Panel("panel has no follow-up visits".into()));
        }
        if visit_times.len() != k + 1 {
            return Err(Error::Panel(format!(
                "expected {} visit times (t_0..t_K), got {}",
                k + 1,
                visit_times.len()
            )));
        }
        if visit_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Panel("visit times must be strictly increasing".into()));
        }
        if baseline.l0.is_empty() {
            return Err(Error::Panel("baseline covariates L0 need at least one column".into()));
        }
        let shape_ok = |len: usize, what: &str| -> Result<()> {
            if len != n {
                Err(Error::Panel(format!("{what} has length {len}, expected {n}")))
            } else {
                Ok(())
            }
        };
        shape_ok(baseline.z0.len(), "Z0")?;
        shape_ok(baseline.a0.len(), "A0")?;
        for (j, col) in baseline.l0.iter().enumerate() {
            shape_ok(col.len(), &format!("L0_{}", j + 1))?;
        }
        let width = visits[0].l.len();
        for (idx, v) in visits.iter().enumerate() {
            let visit = idx + 1;
            shape_ok(v.y.len(), &format!("Y{visit}"))?;
            shape_ok(v.d.len(), &format!("D{visit}"))?;
            shape_ok(v.c.len(), &format!("C{visit}"))?;
            if visit < k {
                shape_ok(v.z.len(), &format!("Z{visit}"))?;
                shape_ok(v.a.len(), &format!("A{visit}"))?;
                if v.l.len() != width {
                    return Err(Error::Panel(format!(
                        "visit {visit} has {} covariate columns, expected {width}",
                        v.l.len()
                    )));
                }
                for (j, col) in v.l.iter().enumerate() {
                    shape_ok(col.len(), &format!("L{visit}_{}", j + 1))?;
                }
            } else if !(v.z.is_empty() && v.a.is_empty() && v.l.is_empty()) {
                return Err(Error::Panel(
                    "the final visit carries no covariates or treatments".into(),
                ));
            }
        }
        Ok(TrialPanel {
            ids,
            visit_times,
            baseline,
            visits,
            randomized,
        })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    /// Number of follow-up visits `K`.
    pub fn n_visits(&self) -> usize {
        self.visits.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn visit_times(&self) -> &[f64] {
        &self.visit_times
    }

    /// Whether `A0` was assigned by randomization (known `g_{A_0} = 0.5`).
    pub fn is_randomized(&self) -> bool {
        self.randomized
    }

    pub fn set_randomized(&mut self, randomized: bool) {
        self.randomized = randomized;
    }

    pub fn baseline(&self) -> &Baseline {
        &self.baseline
    }

    /// Visit `k` in `1..=K`.
    pub fn visit(&self, k: usize) -> &Visit {
        &self.visits[k - 1]
    }

    pub fn visits(&self) -> &[Visit] {
        &self.visits
    }

    /// Number of baseline covariate columns `d`.
    pub fn baseline_width(&self) -> usize {
        self.baseline.l0.len()
    }

    /// Number of time-varying covariate columns `d'` (0 when `K = 1`).
    pub fn covariate_width(&self) -> usize {
        self.visits[0].l.len()
    }

    /// Covariate columns at visit `k` in `0..K`; `k = 0` is `L0`.
    pub fn l(&self, k: usize) -> &[Vec<f64>] {
        if k == 0 {
            &self.baseline.l0
        } else {
            &self.visits[k - 1].l
        }
    }

    /// Concomitant treatment at visit `k` in `0..K`.
    pub fn z(&self, k: usize) -> &[u8] {
        if k == 0 {
            &self.baseline.z0
        } else {
            &self.visits[k - 1].z
        }
    }

    /// Randomized treatment at visit `k` in `0..K`.
    pub fn a(&self, k: usize) -> &[u8] {
        if k == 0 {
            &self.baseline.a0
        } else {
            &self.visits[k - 1].a
        }
    }

    /// `Y_k` for `k` in `1..=K`.
    pub fn y(&self, k: usize) -> &[u8] {
        &self.visits[k - 1].y
    }

    pub fn d(&self, k: usize) -> &[u8] {
        &self.visits[k - 1].d
    }

    pub fn c(&self, k: usize) -> &[u8] {
        &self.visits[k - 1].c
    }

    /// Subject `i` has left the risk set strictly before visit `k`
    /// (some `Y_j`, `D_j` or `C_j` with `j < k` equals one).
    pub fn absorbed_before(&self, i: usize, k: usize) -> bool {
        (1..k.min(self.n_visits() + 1)).any(|j| {
            let v = &self.visits[j - 1];
            v.y[i] == 1 || v.d[i] == 1 || v.c[i] == 1
        })
    }

    /// Restricts the panel to its first `horizon` visits.
    pub fn truncate(&self, horizon: usize) -> Result<TrialPanel> {
        if horizon == 0 || horizon > self.n_visits() {
            return Err(Error::VisitOutOfRange {
                k: horizon,
                max: self.n_visits(),
            });
        }
        let mut visits = self.visits[..horizon].to_vec();
        if horizon < self.n_visits() {
            let last = visits.last_mut().expect("horizon >= 1");
            last.l.clear();
            last.z.clear();
            last.a.clear();
        }
        TrialPanel::new(
            self.ids.clone(),
            self.visit_times[..=horizon].to_vec(),
            self.baseline.clone(),
            visits,
            self.randomized,
        )
    }
}

/// Checks absorbing states, exclusive first transitions, binary coding and
/// covariate finiteness. Violations are returned as data.
pub fn validate_panel(panel: &TrialPanel) -> ValidationReport {
    let mut violations = Vec::new();
    let n = panel.n();
    let k_max = panel.n_visits();

    let check_binary = |name: String, values: &[u8], violations: &mut Vec<Violation>| {
        for (i, &v) in values.iter().enumerate() {
            if v > 1 {
                violations.push(Violation::NonBinary {
                    variable: name.clone(),
                    subject: i,
                    value: v,
                });
            }
        }
    };
    check_binary("Z0".into(), &panel.baseline.z0, &mut violations);
    check_binary("A0".into(), &panel.baseline.a0, &mut violations);
    for k in 1..=k_max {
        let v = panel.visit(k);
        check_binary(format!("Y{k}"), &v.y, &mut violations);
        check_binary(format!("D{k}"), &v.d, &mut violations);
        check_binary(format!("C{k}"), &v.c, &mut violations);
        check_binary(format!("Z{k}"), &v.z, &mut violations);
        check_binary(format!("A{k}"), &v.a, &mut violations);
    }

    for (j, col) in panel.baseline.l0.iter().enumerate() {
        for (i, x) in col.iter().enumerate() {
            if !x.is_finite() {
                violations.push(Violation::NonFiniteCovariate {
                    variable: format!("L0_{}", j + 1),
                    subject: i,
                });
            }
        }
    }
    for k in 1..k_max {
        for (j, col) in panel.visit(k).l.iter().enumerate() {
            for (i, x) in col.iter().enumerate() {
                // post-absorption payload is ignored downstream
                if !x.is_finite() && !panel.absorbed_before(i, k + 1) {
                    violations.push(Violation::NonFiniteCovariate {
                        variable: format!("L{k}_{}", j + 1),
                        subject: i,
                    });
                }
            }
        }
    }

    for i in 0..n {
        let mut first_seen = false;
        for k in 1..=k_max {
            let v = panel.visit(k);
            if k > 1 {
                let prev = panel.visit(k - 1);
                for (process, before, now) in [
                    (Process::Event, prev.y[i], v.y[i]),
                    (Process::Death, prev.d[i], v.d[i]),
                    (Process::Censoring, prev.c[i], v.c[i]),
                ] {
                    if before == 1 && now == 0 {
                        violations.push(Violation::AbsorbingBroken {
                            process,
                            subject: i,
                            visit: k,
                        });
                    }
                }
            }
            if !first_seen {
                let count = (v.y[i] == 1) as u8 + (v.d[i] == 1) as u8 + (v.c[i] == 1) as u8;
                if count > 1 {
                    violations.push(Violation::ExclusiveFirstTransition {
                        subject: i,
                        visit: k,
                    });
                }
                first_seen = count > 0;
            }
        }
    }

    ValidationReport { violations }
}

/// Subjects still alive, event-free and uncensored entering visit `k`
/// (`Y_{k-1} = D_{k-1} = C_{k-1} = 0` over the whole history).
pub fn at_risk_mask(panel: &TrialPanel, k: usize) -> Result<Vec<bool>> {
    let k_max = panel.n_visits();
    if k == 0 || k > k_max {
        return Err(Error::VisitOutOfRange { k, max: k_max });
    }
    let mut mask = vec![true; panel.n()];
    for j in 1..k {
        let v = panel.visit(j);
        for (i, m) in mask.iter_mut().enumerate() {
            if v.y[i] == 1 || v.d[i] == 1 || v.c[i] == 1 {
                *m = false;
            }
        }
    }
    Ok(mask)
}
