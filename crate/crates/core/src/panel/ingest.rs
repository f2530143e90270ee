//! Continuous-time event records to visit-grid panels.
//!
//! Discretization rules:
//! * an outcome at `T` belongs to the right-closed interval `(t_{k-1}, t_k]`
//!   and is carried forward as an absorbing state;
//! * `Z_k = 1` iff the subject is exposed at any time in `(t_{k-1}, t_k]`;
//! * `L_k` is the last measurement taken at or before `t_{k-1}` (covariates
//!   are lagged one visit), column-wise last-observation-carried-forward,
//!   falling back to `L0` when no post-baseline value exists yet;
//! * `A_k = A_0` (records carry no adherence information).

use log::warn;

use super::{Baseline, TrialPanel, Visit};
use crate::error::{Error, Result};

/// Observed terminal status `Δ̃` of a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Censored = 0,
    Primary = 1,
    CompetingDeath = 2,
}

impl EventKind {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EventKind::Censored),
            1 => Some(EventKind::Primary),
            2 => Some(EventKind::CompetingDeath),
            _ => None,
        }
    }
}

/// Long-format history of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub id: String,
    /// Minimum of event and censoring time, in months.
    pub time: f64,
    pub kind: EventKind,
    /// Concomitant exposure intervals `(start, stop)`.
    pub exposures: Vec<(f64, f64)>,
    /// Post-baseline covariate measurements; `NaN` marks a missing entry.
    pub measurements: Vec<(f64, Vec<f64>)>,
    pub l0: Vec<f64>,
    pub z0: u8,
    pub a0: u8,
}

/// Sorts and merges overlapping exposure intervals.
fn normalize_intervals(intervals: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<(f64, f64)> = intervals
        .iter()
        .map(|&(s, e)| if s <= e { (s, e) } else { (e, s) })
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(sorted.len());
    for (s, e) in sorted {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
}

/// Closed exposure interval `[s, e]` meets the visit window `(lo, hi]`.
fn overlaps(interval: (f64, f64), lo: f64, hi: f64) -> bool {
    interval.0 <= hi && interval.1 > lo
}

/// Builds a panel on the grid `t_0 < ... < t_K` from long-format records.
pub fn ingest_long_events(records: &[EventRecord], visit_times: &[f64]) -> Result<TrialPanel> {
    if visit_times.len() < 2 {
        return Err(Error::Ingest(
            "visit grid needs t_0 and at least one follow-up visit".into(),
        ));
    }
    if visit_times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Ingest("visit times must be strictly increasing".into()));
    }
    if records.is_empty() {
        return Err(Error::Ingest("no event records".into()));
    }
    let k_max = visit_times.len() - 1;
    let last_time = visit_times[k_max];
    let d = records[0].l0.len();
    if d == 0 {
        return Err(Error::Ingest("baseline covariates L0 are empty".into()));
    }
    let width = records
        .iter()
        .flat_map(|r| r.measurements.iter().map(|m| m.1.len()))
        .next()
        .unwrap_or(d);

    let n = records.len();
    let mut baseline = Baseline {
        l0: vec![vec![0.0; n]; d],
        z0: vec![0; n],
        a0: vec![0; n],
    };
    let mut visits: Vec<Visit> = (1..=k_max)
        .map(|k| Visit::zeros(n, width, k < k_max))
        .collect();

    for (i, rec) in records.iter().enumerate() {
        if rec.l0.len() != d {
            return Err(Error::Ingest(format!(
                "subject {}: L0 has {} columns, expected {d}",
                rec.id,
                rec.l0.len()
            )));
        }
        if rec.l0.iter().any(|x| !x.is_finite()) {
            return Err(Error::Ingest(format!(
                "subject {}: baseline covariates must be complete",
                rec.id
            )));
        }
        if !(rec.time >= 0.0) {
            return Err(Error::Ingest(format!(
                "subject {}: event time must be nonnegative",
                rec.id
            )));
        }
        if rec.z0 > 1 || rec.a0 > 1 {
            return Err(Error::Ingest(format!(
                "subject {}: Z0 and A0 must be binary",
                rec.id
            )));
        }
        for (j, x) in rec.l0.iter().enumerate() {
            baseline.l0[j][i] = *x;
        }
        baseline.z0[i] = rec.z0;
        baseline.a0[i] = rec.a0;

        for k in 1..=k_max {
            if rec.time <= visit_times[k] {
                let v = &mut visits[k - 1];
                match rec.kind {
                    EventKind::Primary => v.y[i] = 1,
                    EventKind::CompetingDeath => v.d[i] = 1,
                    EventKind::Censored => v.c[i] = 1,
                }
            }
        }

        let exposures = normalize_intervals(&rec.exposures);
        let mut measurements: Vec<&(f64, Vec<f64>)> = Vec::with_capacity(rec.measurements.len());
        for m in &rec.measurements {
            if m.1.len() != width {
                return Err(Error::Ingest(format!(
                    "subject {}: measurement at {} has {} columns, expected {width}",
                    rec.id,
                    m.0,
                    m.1.len()
                )));
            }
            if m.0 > last_time {
                warn!(
                    "subject {}: dropping measurement at {} after last visit {last_time}",
                    rec.id, m.0
                );
                continue;
            }
            if m.0 > rec.time {
                warn!(
                    "subject {}: dropping measurement at {} after exit time {}",
                    rec.id, m.0, rec.time
                );
                continue;
            }
            measurements.push(m);
        }
        measurements.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut carried: Vec<Option<f64>> = if width == d {
            rec.l0.iter().copied().map(Some).collect()
        } else {
            vec![None; width]
        };
        let mut next_m = 0;
        for k in 1..k_max {
            let lag_time = visit_times[k - 1];
            while next_m < measurements.len() && measurements[next_m].0 <= lag_time {
                for (j, x) in measurements[next_m].1.iter().enumerate() {
                    if x.is_finite() {
                        carried[j] = Some(*x);
                    }
                }
                next_m += 1;
            }
            let v = &mut visits[k - 1];
            for j in 0..width {
                v.l[j][i] = carried[j].ok_or_else(|| {
                    Error::Ingest(format!(
                        "subject {}: no value of covariate {} available for visit {k}",
                        rec.id,
                        j + 1
                    ))
                })?;
            }
            v.a[i] = rec.a0;
            let (lo, hi) = (visit_times[k - 1], visit_times[k]);
            v.z[i] = exposures.iter().any(|&iv| overlaps(iv, lo, hi)) as u8;
        }
    }

    let ids = records.iter().map(|r| r.id.clone()).collect();
    TrialPanel::new(ids, visit_times.to_vec(), baseline, visits, true)
}

/// Renders a panel back to long-format records on its own visit grid.
/// Ingesting the rendered records reproduces the panel's discretized
/// content (absorption visit, exposures, lagged covariates).
pub fn render_events(panel: &TrialPanel) -> Vec<EventRecord> {
    let times = panel.visit_times();
    let k_max = panel.n_visits();
    (0..panel.n())
        .map(|i| {
            let mut time = times[k_max] + 1.0;
            let mut kind = EventKind::Censored;
            for k in 1..=k_max {
                let v = panel.visit(k);
                let hit = if v.y[i] == 1 {
                    Some(EventKind::Primary)
                } else if v.d[i] == 1 {
                    Some(EventKind::CompetingDeath)
                } else if v.c[i] == 1 {
                    Some(EventKind::Censored)
                } else {
                    None
                };
                if let Some(h) = hit {
                    time = times[k];
                    kind = h;
                    break;
                }
            }
            let exposures = (1..k_max)
                .filter(|&k| panel.z(k)[i] == 1)
                .map(|k| (times[k], times[k]))
                .collect();
            let measurements = (1..k_max)
                .filter(|&k| times[k - 1] <= time)
                .map(|k| (times[k - 1], panel.l(k).iter().map(|col| col[i]).collect()))
                .collect();
            EventRecord {
                id: panel.ids()[i].clone(),
                time,
                kind,
                exposures,
                measurements,
                l0: panel.l(0).iter().map(|col| col[i]).collect(),
                z0: panel.z(0)[i],
                a0: panel.a(0)[i],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::validate_panel;

    fn record(time: f64, kind: EventKind) -> EventRecord {
        EventRecord {
            id: "s1".into(),
            time,
            kind,
            exposures: vec![],
            measurements: vec![],
            l0: vec![0.7],
            z0: 0,
            a0: 1,
        }
    }

    #[test]
    fn event_between_visits_lands_on_next_visit() {
        let grid = [0.0, 3.0, 6.0, 9.0];
        let p = ingest_long_events(&[record(4.2, EventKind::Primary)], &grid).unwrap();
        assert_eq!(p.y(1)[0], 0);
        assert_eq!(p.y(2)[0], 1);
        assert_eq!(p.y(3)[0], 1);
        assert!(validate_panel(&p).is_valid());
    }

    #[test]
    fn event_on_visit_time_is_right_closed() {
        let grid = [0.0, 3.0, 6.0];
        let p = ingest_long_events(&[record(3.0, EventKind::CompetingDeath)], &grid).unwrap();
        assert_eq!(p.d(1)[0], 1);
        assert_eq!(p.y(1)[0], 0);
    }

    #[test]
    fn baseline_only_covariate_is_carried_forward() {
        let grid = [0.0, 3.0, 6.0, 9.0, 12.0];
        let p = ingest_long_events(&[record(20.0, EventKind::Censored)], &grid).unwrap();
        for k in 1..4 {
            assert_eq!(p.l(k)[0][0], 0.7);
        }
        assert_eq!(p.c(4)[0], 0);
    }

    #[test]
    fn exposure_interval_marks_overlapping_window() {
        let grid = [0.0, 3.0, 6.0, 9.0];
        let mut r = record(20.0, EventKind::Censored);
        r.exposures = vec![(3.1, 5.0)];
        let p = ingest_long_events(&[r], &grid).unwrap();
        assert_eq!(p.z(1)[0], 0);
        assert_eq!(p.z(2)[0], 1);
    }

    #[test]
    fn covariates_are_lagged_one_visit() {
        let grid = [0.0, 3.0, 6.0, 9.0];
        let mut r = record(20.0, EventKind::Censored);
        r.measurements = vec![(3.0, vec![1.5]), (5.0, vec![f64::NAN]), (6.0, vec![2.5])];
        let p = ingest_long_events(&[r], &grid).unwrap();
        // L1 uses the value at t_0 (baseline), L2 the value at t_1
        assert_eq!(p.l(1)[0][0], 0.7);
        assert_eq!(p.l(2)[0][0], 1.5);
    }

    #[test]
    fn late_measurements_are_dropped() {
        let grid = [0.0, 3.0, 6.0];
        let mut r = record(20.0, EventKind::Censored);
        r.measurements = vec![(7.0, vec![9.0])];
        let p = ingest_long_events(&[r], &grid).unwrap();
        assert_eq!(p.l(1)[0][0], 0.7);
    }

    #[test]
    fn empty_grid_is_an_error() {
        assert!(ingest_long_events(&[record(1.0, EventKind::Primary)], &[]).is_err());
        assert!(ingest_long_events(&[record(1.0, EventKind::Primary)], &[0.0]).is_err());
    }

    #[test]
    fn missing_baseline_is_an_error() {
        let mut r = record(1.0, EventKind::Primary);
        r.l0 = vec![f64::NAN];
        assert!(ingest_long_events(&[r], &[0.0, 3.0]).is_err());
    }

    #[test]
    fn overlapping_intervals_merge() {
        let merged = normalize_intervals(&[(4.0, 6.0), (1.0, 2.0), (1.5, 4.5)]);
        assert_eq!(merged, vec![(1.0, 6.0)]);
    }
}
