use ltmle::panel::{
    ingest_long_events, read_event_csv, read_panel_csv, render_events, validate_panel,
    write_panel_csv, EventKind, EventRecord,
};
use ltmle::sim::{scenario, simulate_trial};
use proptest::prelude::*;

const GRID: [f64; 5] = [0.0, 3.0, 6.0, 9.0, 12.0];

fn record_strategy() -> impl Strategy<Value = EventRecord> {
    (
        0.1f64..15.0,
        0u8..3,
        prop::collection::vec((0.0f64..14.0, 0.0f64..4.0), 0..3),
        prop::collection::vec((0.0f64..14.0, -3.0f64..3.0), 0..5),
        -2.0f64..2.0,
        0u8..2,
        0u8..2,
    )
        .prop_map(|(time, kind, exps, meas, l0, z0, a0)| EventRecord {
            id: String::new(),
            time,
            kind: EventKind::from_code(kind).unwrap(),
            exposures: exps.into_iter().map(|(s, d)| (s, s + d)).collect(),
            measurements: {
                let mut m: Vec<(f64, Vec<f64>)> =
                    meas.into_iter().map(|(t, v)| (t, vec![v])).collect();
                m.sort_by(|a, b| a.0.total_cmp(&b.0));
                m
            },
            l0: vec![l0],
            z0,
            a0,
        })
}

proptest! {
    #[test]
    fn ingest_of_rendered_panel_is_a_fixed_point(
        mut recs in prop::collection::vec(record_strategy(), 1..30)
    ) {
        for (i, r) in recs.iter_mut().enumerate() {
            r.id = format!("s{i}");
        }
        let p = ingest_long_events(&recs, &GRID).unwrap();
        prop_assert!(validate_panel(&p).is_valid());
        let again = ingest_long_events(&render_events(&p), &GRID).unwrap();
        prop_assert_eq!(p, again);
    }
}

#[test]
fn simulated_panel_survives_render_and_ingest() {
    let p = simulate_trial(&scenario("scenario3").unwrap(), 500, 21).unwrap();
    let once = ingest_long_events(&render_events(&p), p.visit_times()).unwrap();
    let twice = ingest_long_events(&render_events(&once), p.visit_times()).unwrap();
    assert_eq!(once, twice);
    for k in 1..=p.n_visits() {
        assert_eq!(p.y(k), once.y(k));
        assert_eq!(p.d(k), once.d(k));
        assert_eq!(p.c(k), once.c(k));
    }
    for k in 0..p.n_visits() {
        assert_eq!(p.z(k), once.z(k));
    }
}

#[test]
fn wide_csv_round_trips_simulated_panel() {
    let p = simulate_trial(&scenario("scenario2").unwrap(), 300, 22).unwrap();
    let mut buf = Vec::new();
    write_panel_csv(&p, &mut buf).unwrap();
    assert_eq!(read_panel_csv(buf.as_slice()).unwrap(), p);
}

#[test]
fn event_csv_reads_every_kind() {
    let text = "\
id,time,kind,v1,v2,v3
a,0,baseline,1,0,0.25
a,2.5,covariate,0.5
a,1,exposure_start
a,4,exposure_stop
a,7.5,event,1
b,0,baseline,0,1,-1
b,12,event,0
";
    let recs = read_event_csv(text.as_bytes()).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].exposures, vec![(1.0, 4.0)]);
    let p = ingest_long_events(&recs, &GRID).unwrap();
    assert_eq!(p.y(3), &[1, 0]);
    assert_eq!(p.z(1), &[1, 0]);
    assert_eq!(p.z(2), &[1, 0]);
    assert_eq!(p.z(3), &[0, 0]);
    assert_eq!(p.l(2)[0], vec![0.5, -1.0]);
    assert_eq!(p.c(4), &[0, 1]);
}
