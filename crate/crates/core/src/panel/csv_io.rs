//! CSV formats for panels.
//!
//! Wide panel CSV: `id, L0_1..L0_d, Z0, A0`, then for each visit `k < K`
//! `Y{k}, D{k}, C{k}, L{k}_1..L{k}_d', A{k}, Z{k}`, and finally
//! `Y{K}, D{K}, C{K}`.
//!
//! Long event CSV: rows `id, time, kind, value...` with `kind` one of
//! `baseline` (values `A0, Z0, L0_1..L0_d`), `event` (value `0|1|2`, the
//! censoring / primary / competing-death code), `covariate` (values
//! `L_1..L_d'`, empty for missing), `exposure_start`, `exposure_stop`.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use super::{Baseline, EventKind, EventRecord, TrialPanel, Visit};
use crate::error::{Error, Result};

fn panel_header(d: usize, width: usize, k_max: usize) -> Vec<String> {
    let mut h = vec!["id".to_string()];
    h.extend((1..=d).map(|j| format!("L0_{j}")));
    h.push("Z0".into());
    h.push("A0".into());
    for k in 1..=k_max {
        h.push(format!("Y{k}"));
        h.push(format!("D{k}"));
        h.push(format!("C{k}"));
        if k < k_max {
            h.extend((1..=width).map(|j| format!("L{k}_{j}")));
            h.push(format!("A{k}"));
            h.push(format!("Z{k}"));
        }
    }
    h
}

/// Writes the wide panel CSV. Reals use the shortest round-trip form.
pub fn write_panel_csv<W: Write>(panel: &TrialPanel, out: W) -> Result<()> {
    let k_max = panel.n_visits();
    let width = panel.covariate_width();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(panel_header(panel.baseline_width(), width, k_max))?;
    let mut row: Vec<String> = Vec::new();
    for i in 0..panel.n() {
        row.clear();
        row.push(panel.ids()[i].clone());
        row.extend(panel.l(0).iter().map(|c| c[i].to_string()));
        row.push(panel.z(0)[i].to_string());
        row.push(panel.a(0)[i].to_string());
        for k in 1..=k_max {
            row.push(panel.y(k)[i].to_string());
            row.push(panel.d(k)[i].to_string());
            row.push(panel.c(k)[i].to_string());
            if k < k_max {
                row.extend(panel.l(k).iter().map(|c| c[i].to_string()));
                row.push(panel.a(k)[i].to_string());
                row.push(panel.z(k)[i].to_string());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn count_indexed(index: &HashMap<String, usize>, prefix: &str) -> usize {
    let mut j = 0;
    while index.contains_key(&format!("{prefix}{}", j + 1)) {
        j += 1;
    }
    j
}

fn parse_binary(raw: &str, column: &str, row: usize) -> Result<u8> {
    match raw.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Panel(format!(
            "row {row}: column `{column}` must be 0 or 1, got `{other}`"
        ))),
    }
}

fn parse_real(raw: &str, column: &str, row: usize) -> Result<f64> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") {
        return Ok(f64::NAN);
    }
    t.parse::<f64>().map_err(|_| {
        Error::Panel(format!("row {row}: column `{column}` is not a number: `{t}`"))
    })
}

/// Reads the wide panel CSV. Visit times default to `0, 1, ..., K`.
pub fn read_panel_csv<R: Read>(input: R) -> Result<TrialPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let index: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_string(), i))
        .collect();
    let d = count_indexed(&index, "L0_");
    let mut k_max = 0;
    while index.contains_key(&format!("Y{}", k_max + 1)) {
        k_max += 1;
    }
    if k_max == 0 {
        return Err(Error::MissingColumn("Y1".into()));
    }
    if d == 0 {
        return Err(Error::MissingColumn("L0_1".into()));
    }
    let width = if k_max > 1 {
        count_indexed(&index, "L1_")
    } else {
        0
    };
    let expected = panel_header(d, width, k_max);
    for col in &expected {
        if !index.contains_key(col) {
            return Err(Error::MissingColumn(col.clone()));
        }
    }
    let col = |name: &str| index[name];

    let mut ids = Vec::new();
    let mut baseline = Baseline {
        l0: vec![Vec::new(); d],
        z0: Vec::new(),
        a0: Vec::new(),
    };
    let mut visits: Vec<Visit> = (1..=k_max).map(|k| Visit::zeros(0, width, k < k_max)).collect();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 2;
        let get = |name: &str| rec.get(col(name)).unwrap_or("");
        ids.push(get("id").to_string());
        for j in 0..d {
            let name = format!("L0_{}", j + 1);
            baseline.l0[j].push(parse_real(get(&name), &name, row)?);
        }
        baseline.z0.push(parse_binary(get("Z0"), "Z0", row)?);
        baseline.a0.push(parse_binary(get("A0"), "A0", row)?);
        for k in 1..=k_max {
            let v = &mut visits[k - 1];
            for (name, target) in [
                (format!("Y{k}"), &mut v.y),
                (format!("D{k}"), &mut v.d),
                (format!("C{k}"), &mut v.c),
            ] {
                target.push(parse_binary(get(&name), &name, row)?);
            }
            if k < k_max {
                for j in 0..width {
                    let name = format!("L{k}_{}", j + 1);
                    v.l[j].push(parse_real(get(&name), &name, row)?);
                }
                let name = format!("A{k}");
                v.a.push(parse_binary(get(&name), &name, row)?);
                let name = format!("Z{k}");
                v.z.push(parse_binary(get(&name), &name, row)?);
            }
        }
    }
    let times = (0..=k_max).map(|k| k as f64).collect();
    TrialPanel::new(ids, times, baseline, visits, true)
}

#[derive(Default)]
struct PartialRecord {
    baseline: Option<(u8, u8, Vec<f64>)>,
    event: Option<(f64, EventKind)>,
    measurements: Vec<(f64, Vec<f64>)>,
    starts: Vec<f64>,
    stops: Vec<f64>,
}

/// Reads the long event CSV into records, in order of first appearance.
pub fn read_event_csv<R: Read>(input: R) -> Result<Vec<EventRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, PartialRecord> = BTreeMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 2;
        if rec.len() < 3 {
            return Err(Error::Ingest(format!("row {row}: expected `id,time,kind,...`")));
        }
        let id = rec[0].to_string();
        let time = parse_real(&rec[1], "time", row)?;
        if !time.is_finite() {
            return Err(Error::Ingest(format!("row {row}: time is missing")));
        }
        let values: Vec<&str> = rec.iter().skip(3).collect();
        let entry = by_id.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            PartialRecord::default()
        });
        match &rec[2] {
            "baseline" => {
                if values.len() < 3 {
                    return Err(Error::Ingest(format!(
                        "row {row}: baseline needs A0, Z0 and at least one covariate"
                    )));
                }
                let a0 = parse_binary(values[0], "A0", row)?;
                let z0 = parse_binary(values[1], "Z0", row)?;
                let l0 = values[2..]
                    .iter()
                    .map(|v| parse_real(v, "L0", row))
                    .collect::<Result<Vec<_>>>()?;
                entry.baseline = Some((a0, z0, l0));
            }
            "event" => {
                let code = values
                    .first()
                    .and_then(|v| v.parse::<u8>().ok())
                    .and_then(EventKind::from_code)
                    .ok_or_else(|| {
                        Error::Ingest(format!("row {row}: event value must be 0, 1 or 2"))
                    })?;
                entry.event = Some((time, code));
            }
            "covariate" => {
                let vals = values
                    .iter()
                    .map(|v| parse_real(v, "covariate", row))
                    .collect::<Result<Vec<_>>>()?;
                entry.measurements.push((time, vals));
            }
            "exposure_start" => entry.starts.push(time),
            "exposure_stop" => entry.stops.push(time),
            other => {
                return Err(Error::Ingest(format!("row {row}: unknown kind `{other}`")));
            }
        }
    }

    order
        .into_iter()
        .map(|id| {
            let mut p = by_id.remove(&id).expect("id recorded on insert");
            let (a0, z0, l0) = p
                .baseline
                .ok_or_else(|| Error::Ingest(format!("subject {id}: no baseline row")))?;
            let (time, kind) = p
                .event
                .ok_or_else(|| Error::Ingest(format!("subject {id}: no event row")))?;
            p.starts.sort_by(f64::total_cmp);
            p.stops.sort_by(f64::total_cmp);
            let mut exposures = Vec::with_capacity(p.starts.len());
            let mut stops = p.stops.into_iter().peekable();
            for s in p.starts {
                while stops.peek().is_some_and(|&e| e < s) {
                    stops.next();
                }
                // an exposure without a stop runs until exit
                let e = stops.next().unwrap_or(time.max(s));
                exposures.push((s, e));
            }
            Ok(EventRecord {
                id,
                time,
                kind,
                exposures,
                measurements: p.measurements,
                l0,
                z0,
                a0,
            })
        })
        .collect()
}
