#![allow(dead_code)]

use ltmle::interventions::{ArmPolicy, GStarForm, InterventionSpec, ZForm};
use ltmle::learners::expit;
use ltmle::panel::{Baseline, TrialPanel, Visit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One subject of the binary K = 2 toy. Values after exit are zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct Rec {
    pub l0: u8,
    pub a0: u8,
    pub z0: u8,
    pub c1: u8,
    pub d1: u8,
    pub y1: u8,
    pub l1: u8,
    pub z1: u8,
    pub a1: u8,
    pub c2: u8,
    pub d2: u8,
    pub y2: u8,
}

impl Rec {
    pub fn at_risk_2(&self) -> bool {
        self.c1 == 0 && self.d1 == 0 && self.y1 == 0
    }
}

fn bern(rng: &mut ChaCha8Rng, p: f64) -> u8 {
    (rng.gen::<f64>() < p) as u8
}

/// Binary toy with censoring and competing death at both visits.
pub fn toy_records(n: usize, seed: u64) -> Vec<Rec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut r = Rec::default();
            r.l0 = bern(&mut rng, 0.4);
            r.a0 = bern(&mut rng, 0.5);
            r.a1 = r.a0;
            r.z0 = bern(&mut rng, expit(-0.5 + r.l0 as f64));
            r.c1 = bern(&mut rng, 0.04 + 0.04 * r.l0 as f64);
            if r.c1 == 1 {
                return r;
            }
            r.d1 = bern(&mut rng, 0.05);
            if r.d1 == 1 {
                return r;
            }
            let (l0, a0, z0) = (r.l0 as f64, r.a0 as f64, r.z0 as f64);
            r.y1 = bern(&mut rng, expit(-2.0 + 0.8 * l0 - 0.5 * a0 - 0.7 * z0));
            if r.y1 == 1 {
                return r;
            }
            r.l1 = bern(&mut rng, expit(-0.3 + l0 - 0.5 * a0));
            r.z1 = bern(&mut rng, expit(-1.0 + 2.0 * z0 + r.l1 as f64));
            r.c2 = bern(&mut rng, 0.05 + 0.05 * r.l1 as f64);
            if r.c2 == 1 {
                return r;
            }
            r.d2 = bern(&mut rng, 0.05);
            if r.d2 == 1 {
                return r;
            }
            let (l1, z1) = (r.l1 as f64, r.z1 as f64);
            r.y2 = bern(&mut rng, expit(-1.8 + 0.8 * l1 - 0.5 * a0 - 0.7 * z1));
            r
        })
        .collect()
}

pub fn toy_panel(recs: &[Rec]) -> TrialPanel {
    let n = recs.len();
    let baseline = Baseline {
        l0: vec![recs.iter().map(|r| r.l0 as f64).collect()],
        z0: recs.iter().map(|r| r.z0).collect(),
        a0: recs.iter().map(|r| r.a0).collect(),
    };
    let mut v1 = Visit::zeros(n, 1, true);
    let mut v2 = Visit::zeros(n, 1, false);
    for (i, r) in recs.iter().enumerate() {
        v1.c[i] = r.c1;
        v1.d[i] = r.d1;
        v1.y[i] = r.y1;
        v1.l[0][i] = r.l1 as f64;
        v1.z[i] = r.z1;
        v1.a[i] = r.a1;
        let absorbed = !r.at_risk_2();
        v2.c[i] = if absorbed { r.c1 } else { r.c2 };
        v2.d[i] = if absorbed { r.d1 } else { r.d2 };
        v2.y[i] = if absorbed { r.y1 } else { r.y2 };
    }
    TrialPanel::new(
        (0..n).map(|i| i.to_string()).collect(),
        vec![0.0, 1.0, 2.0],
        baseline,
        vec![v1, v2],
        true,
    )
    .unwrap()
}

fn frac<F: Fn(&Rec) -> bool>(rs: &[&Rec], f: F) -> f64 {
    rs.iter().filter(|r| f(r)).count() as f64 / rs.len() as f64
}

/// `g*(Z_k = z)`; `None` means the observed value is kept.
fn gstar(spec: &InterventionSpec, k: usize, z: u8, l0: u8, z0: u8, last_z: Option<u8>) -> Option<f64> {
    let ind = |v: u8| Some((z == v) as u8 as f64);
    match spec.form() {
        GStarForm::Static(v) => ind(*v),
        GStarForm::Observational => None,
        GStarForm::Dynamic if k == 0 => None,
        GStarForm::Dynamic => ind(z0),
        GStarForm::Stochastic(Some(law)) => {
            let p1 = law.prob_one(k, &[l0 as f64], last_z).unwrap();
            Some(if z == 1 { p1 } else { 1.0 - p1 })
        }
        GStarForm::Stochastic(None) => unreachable!(),
    }
}

/// Empirical post-interventional risk of the event by `horizon`.
pub fn enumerate(recs: &[Rec], policy: &ArmPolicy, horizon: usize) -> f64 {
    let a = policy.a_value;
    let all: Vec<&Rec> = recs.iter().collect();
    let mut psi = 0.0;
    for l0 in 0..2u8 {
        let with_l0: Vec<&Rec> = all.iter().copied().filter(|r| r.l0 == l0).collect();
        let p_l0 = with_l0.len() as f64 / all.len() as f64;
        for z0 in 0..2u8 {
            let w0 = gstar(&policy.z_spec, 0, z0, l0, z0, None)
                .unwrap_or_else(|| frac(&with_l0, |r| r.z0 == z0));
            if w0 == 0.0 {
                continue;
            }
            let s: Vec<&Rec> = with_l0
                .iter()
                .copied()
                .filter(|r| r.a0 == a && r.z0 == z0 && r.c1 == 0)
                .collect();
            let p_y1 = frac(&s, |r| r.y1 == 1);
            let mut m1 = p_y1;
            if horizon == 2 {
                let risk: Vec<&Rec> = s.iter().copied().filter(|r| r.at_risk_2()).collect();
                let p_risk = risk.len() as f64 / s.len() as f64;
                let mut inner = 0.0;
                for l1 in 0..2u8 {
                    for z1 in 0..2u8 {
                        let w = match gstar(&policy.z_spec, 1, z1, l0, z0, Some(z0)) {
                            Some(g) => frac(&risk, |r| r.l1 == l1) * g,
                            None => frac(&risk, |r| r.l1 == l1 && r.z1 == z1),
                        };
                        if w == 0.0 {
                            continue;
                        }
                        let cell: Vec<&Rec> = risk
                            .iter()
                            .copied()
                            .filter(|r| r.l1 == l1 && r.z1 == z1 && r.a1 == a && r.c2 == 0)
                            .collect();
                        assert!(!cell.is_empty(), "toy lacks support for a policy cell");
                        inner += w * frac(&cell, |r| r.y2 == 1);
                    }
                }
                m1 += p_risk * inner;
            }
            psi += p_l0 * w0 * m1;
        }
    }
    psi
}

pub fn policies(law: &InterventionSpec) -> Vec<ArmPolicy> {
    let mut out = Vec::new();
    for a in 0..2 {
        for form in [
            ZForm::Static0,
            ZForm::Static1,
            ZForm::Dynamic,
            ZForm::Stochastic,
            ZForm::Observational,
        ] {
            out.push(ArmPolicy::from_form(a, form, Some(law)).unwrap());
        }
    }
    out
}
