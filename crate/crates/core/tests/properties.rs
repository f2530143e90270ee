use ltmle::interventions::{
    fit_stochastic_gstar, gstar_prob, ArmPolicy, GStarHistory, GStarProb, InterventionSpec, Node,
    GStarForm, ZForm,
};
use ltmle::learners::{
    expit, fit_binary_glm, fit_intercept_fluctuation, Design, FeatureMap, GlmOptions, LearnerSpec,
};
use ltmle::panel::{at_risk_mask, TrialPanel};
use ltmle::sim::{scenario, simulate_trial, ScenarioConfig};
use proptest::prelude::*;
use std::sync::OnceLock;

fn fitted_law() -> &'static InterventionSpec {
    static LAW: OnceLock<InterventionSpec> = OnceLock::new();
    LAW.get_or_init(|| {
        let p = simulate_trial(&scenario("scenario1").unwrap(), 2000, 9).unwrap();
        fit_stochastic_gstar(&p, &LearnerSpec::new(FeatureMap::Main)).unwrap()
    })
}

fn specs() -> Vec<InterventionSpec> {
    vec![
        InterventionSpec::new(Node::Z, GStarForm::Static(0)).unwrap(),
        InterventionSpec::new(Node::Z, GStarForm::Static(1)).unwrap(),
        InterventionSpec::new(Node::Z, GStarForm::Dynamic).unwrap(),
        fitted_law().clone(),
    ]
}

fn with_a0(panel: &TrialPanel, a0: Vec<u8>) -> TrialPanel {
    let mut b = panel.baseline().clone();
    b.a0 = a0;
    TrialPanel::new(
        panel.ids().to_vec(),
        panel.visit_times().to_vec(),
        b,
        panel.visits().to_vec(),
        true,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn gstar_masses_sum_to_one(
        visit in 0usize..5,
        l0 in -3.0f64..3.0,
        z0 in 0u8..2,
        last in 0u8..2,
        which in 0usize..4,
    ) {
        let spec = &specs()[which];
        let h = GStarHistory {
            visit,
            l0: &[l0],
            z0,
            last_z: (visit > 0).then_some(last),
            y: 0,
            d: 0,
        };
        let p0 = gstar_prob(spec, 0, &h).unwrap();
        let p1 = gstar_prob(spec, 1, &h).unwrap();
        match (p0, p1) {
            (GStarProb::Known(a), GStarProb::Known(b)) => {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }
            (GStarProb::UseObserved, GStarProb::UseObserved) => prop_assert!(visit == 0 && which == 2),
            _ => prop_assert!(false, "mixed answers"),
        }
    }

    #[test]
    fn dynamic_agrees_with_static_at_baseline_value(
        visit in 1usize..5,
        l0 in -3.0f64..3.0,
        z0 in 0u8..2,
        last in 0u8..2,
        value in 0u8..2,
    ) {
        let dynamic = InterventionSpec::new(Node::Z, GStarForm::Dynamic).unwrap();
        let fixed = InterventionSpec::new(Node::Z, GStarForm::Static(z0)).unwrap();
        let h = GStarHistory { visit, l0: &[l0], z0, last_z: Some(last), y: 0, d: 0 };
        prop_assert_eq!(gstar_prob(&dynamic, value, &h).unwrap(), gstar_prob(&fixed, value, &h).unwrap());
    }

    #[test]
    fn glm_predictions_invariant_to_column_rescaling(
        seed in 0u64..1000,
        factor in prop_oneof![0.01f64..0.5, 2.0f64..100.0],
        col in 1usize..3,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 150;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![1.0, rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>()])
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| (rng.gen::<f64>() < expit(-0.5 + r[1] - r[2])) as u8 as f64)
            .collect();
        let w = vec![1.0; n];
        let off = vec![0.0; n];
        let x = Design::from_rows(&rows).unwrap();
        let mut xs = x.clone();
        xs.scale_column(col, factor);
        let opts = GlmOptions { ridge: 0.0, ..GlmOptions::default() };
        let a = fit_binary_glm(&x, &y, &w, &off, &opts).unwrap();
        let b = fit_binary_glm(&xs, &y, &w, &off, &opts).unwrap();
        prop_assert!(a.converged && b.converged);
        prop_assert!((a.coef[col] - b.coef[col] * factor).abs() < 1e-6 * a.coef[col].abs().max(1.0));
        for i in 0..n {
            let pa = expit(x.row(i).iter().zip(&a.coef).map(|(u, v)| u * v).sum());
            let pb = expit(xs.row(i).iter().zip(&b.coef).map(|(u, v)| u * v).sum());
            prop_assert!((pa - pb).abs() < 1e-8);
        }
    }

    #[test]
    fn fluctuation_matches_intercept_glm_and_ignores_weight_scale(
        seed in 0u64..1000,
        scale in 0.1f64..50.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 80;
        let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let off: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 3.0).collect();
        let f = fit_intercept_fluctuation(&y, &off, &w).unwrap();
        let ws: Vec<f64> = w.iter().map(|v| v * scale).collect();
        let g = fit_intercept_fluctuation(&y, &off, &ws).unwrap();
        prop_assert!((f.epsilon - g.epsilon).abs() < 1e-9);
        let glm = fit_binary_glm(
            &Design::intercept(n),
            &y,
            &w,
            &off,
            &GlmOptions { ridge: 0.0, ..GlmOptions::default() },
        )
        .unwrap();
        prop_assert!((glm.coef[0] - f.epsilon).abs() < 1e-8);
        let score: f64 = (0..n).map(|i| w[i] * (y[i] - expit(off[i] + f.epsilon))).sum();
        prop_assert!(score.abs() < 1e-8);
    }

    #[test]
    fn at_risk_sets_are_nested(seed in 0u64..200) {
        let c = ScenarioConfig {
            death_hazard: 0.03,
            censor_hazard: 0.03,
            ..ScenarioConfig::default()
        };
        let p = simulate_trial(&c, 300, seed).unwrap();
        for k in 1..p.n_visits() {
            let now = at_risk_mask(&p, k).unwrap();
            let next = at_risk_mask(&p, k + 1).unwrap();
            prop_assert!(now.iter().zip(&next).all(|(a, b)| *a || !*b));
        }
    }
}

#[test]
fn stochastic_law_does_not_read_treatment_arm() {
    let p = simulate_trial(&scenario("scenario1").unwrap(), 500, 2).unwrap();
    let flipped = with_a0(&p, p.a(0).iter().map(|a| 1 - a).collect());
    let law = fitted_law();
    for a in 0..2 {
        let arm = ArmPolicy::from_form(a, ZForm::Stochastic, Some(law)).unwrap();
        for i in 0..p.n() {
            for k in 0..p.n_visits() {
                assert_eq!(
                    arm.z_prob(&p, i, k, 1).unwrap(),
                    arm.z_prob(&flipped, i, k, 1).unwrap()
                );
            }
        }
    }
}
