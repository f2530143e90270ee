//! Regressor construction from a subject's observed history.

use crate::learners::{Design, FeatureMap};
use crate::panel::TrialPanel;

/// The portion of the record a regression conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scope {
    /// Covariates `L_0..=L_j`.
    pub covariates_through: usize,
    /// Treatments `(Z, A)_0..=t`, if any.
    pub treatments_through: Option<usize>,
    /// Also include `Z_{t+1}` (parents of an `A` node).
    pub next_z: bool,
    /// Only `L_0` and the last `Z` (stochastic intervention laws).
    pub baseline_and_last_z: bool,
}

impl Scope {
    /// `Ō_{l-1}`: parents of `C_l`, `Y_l`, `D_l` and the domain of `Q̄_l`.
    pub fn outcome(l: usize) -> Self {
        debug_assert!(l >= 1);
        Scope {
            covariates_through: l - 1,
            treatments_through: Some(l - 1),
            next_z: false,
            baseline_and_last_z: false,
        }
    }

    /// Parents of `Z_k`.
    pub fn concomitant(k: usize) -> Self {
        Scope {
            covariates_through: k,
            treatments_through: k.checked_sub(1),
            next_z: false,
            baseline_and_last_z: false,
        }
    }

    /// Parents of `A_k` (which follows `Z_k`).
    pub fn adherence(k: usize) -> Self {
        Scope {
            next_z: true,
            ..Scope::concomitant(k)
        }
    }

    /// `(L_0, Z_{k-1})`, the conditioning set of the stochastic law for `Z_k`.
    pub fn stochastic(k: usize) -> Self {
        Scope {
            covariates_through: 0,
            treatments_through: k.checked_sub(1),
            next_z: false,
            baseline_and_last_z: true,
        }
    }
}

/// Replacement values for `A_t`, `Z_t` at the last treatment visit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Override {
    pub a: Option<u8>,
    pub z: Option<u8>,
}

impl Override {
    pub const NONE: Override = Override { a: None, z: None };

    pub fn treatments(a: u8, z: u8) -> Self {
        Override {
            a: Some(a),
            z: Some(z),
        }
    }
}

/// Number of columns `map` produces for `scope` on `panel`.
pub fn feature_count(map: FeatureMap, panel: &TrialPanel, scope: Scope) -> usize {
    let mut buf = Vec::new();
    write_features(map, panel, 0, scope, Override::NONE, &mut buf);
    buf.len()
}

/// Raw values for `(L_0, Z_{k-1})`.
pub fn restricted_raw(l0: &[f64], last_z: Option<u8>, out: &mut Vec<f64>) {
    out.extend_from_slice(l0);
    if let Some(z) = last_z {
        out.push(z as f64);
    }
}

/// Applies a feature map to raw values that have no running-average
/// structure (the stochastic-law conditioning set).
pub fn features_from_raw(map: FeatureMap, raw: &[f64], out: &mut Vec<f64>) {
    match map {
        FeatureMap::Intercept => out.push(1.0),
        FeatureMap::Saturated => out.extend_from_slice(raw),
        FeatureMap::Main | FeatureMap::RunningAvg => {
            out.push(1.0);
            out.extend_from_slice(raw);
        }
        FeatureMap::Interactions => {
            out.push(1.0);
            out.extend_from_slice(raw);
            push_pairwise(raw, out);
        }
    }
}

fn push_pairwise(base: &[f64], out: &mut Vec<f64>) {
    for a in 0..base.len() {
        for b in a + 1..base.len() {
            out.push(base[a] * base[b]);
        }
    }
}

struct View<'a> {
    panel: &'a TrialPanel,
    i: usize,
    scope: Scope,
    ov: Override,
}

impl View<'_> {
    fn z(&self, k: usize) -> f64 {
        match (self.scope.treatments_through, self.ov.z) {
            (Some(t), Some(v)) if t == k => v as f64,
            _ => self.panel.z(k)[self.i] as f64,
        }
    }

    fn a(&self, k: usize) -> f64 {
        match (self.scope.treatments_through, self.ov.a) {
            (Some(t), Some(v)) if t == k => v as f64,
            _ => self.panel.a(k)[self.i] as f64,
        }
    }

    fn raw(&self, out: &mut Vec<f64>) {
        for k in 0..=self.scope.covariates_through {
            out.extend(self.panel.l(k).iter().map(|c| c[self.i]));
        }
        if let Some(t) = self.scope.treatments_through {
            out.extend((0..=t).map(|k| self.z(k)));
            out.extend((0..=t).map(|k| self.a(k)));
        }
        if self.scope.next_z {
            out.push(self.panel.z(self.next_z_visit())[self.i] as f64);
        }
    }

    fn next_z_visit(&self) -> usize {
        self.scope.treatments_through.map_or(0, |t| t + 1)
    }

    fn summary(&self, out: &mut Vec<f64>) {
        let panel = self.panel;
        let j = self.scope.covariates_through;
        out.extend(panel.l(j).iter().map(|c| c[self.i]));
        if let Some(t) = self.scope.treatments_through {
            out.push(self.z(t));
            out.push((0..=t).map(|k| self.a(k)).sum::<f64>() / (t + 1) as f64);
        }
        if self.scope.next_z {
            out.push(panel.z(self.next_z_visit())[self.i] as f64);
        }
        // running mean of covariates, from L_0 when it shares their layout
        let first = if panel.baseline_width() == panel.covariate_width() {
            0
        } else {
            1
        };
        if j >= first + 1 {
            let terms = (j - first + 1) as f64;
            for col in 0..panel.l(j).len() {
                let s: f64 = (first..=j).map(|k| panel.l(k)[col][self.i]).sum();
                out.push(s / terms);
            }
        }
        if let Some(t) = self.scope.treatments_through {
            if t >= 1 {
                out.push((0..=t).map(|k| self.z(k)).sum::<f64>() / (t + 1) as f64);
            }
        }
    }
}

/// Appends the regressors of subject `i` to `out`.
pub fn write_features(
    map: FeatureMap,
    panel: &TrialPanel,
    i: usize,
    scope: Scope,
    ov: Override,
    out: &mut Vec<f64>,
) {
    let view = View {
        panel,
        i,
        scope,
        ov,
    };
    if scope.baseline_and_last_z {
        let mut raw = Vec::with_capacity(panel.baseline_width() + 1);
        let l0: Vec<f64> = panel.l(0).iter().map(|c| c[i]).collect();
        restricted_raw(&l0, scope.treatments_through.map(|t| view.z(t) as u8), &mut raw);
        features_from_raw(map, &raw, out);
        return;
    }
    match map {
        FeatureMap::Intercept => out.push(1.0),
        FeatureMap::Saturated => view.raw(out),
        FeatureMap::Main => {
            out.push(1.0);
            view.raw(out);
        }
        FeatureMap::RunningAvg => {
            out.push(1.0);
            view.summary(out);
        }
        FeatureMap::Interactions => {
            out.push(1.0);
            let start = out.len();
            view.summary(out);
            let base: Vec<f64> = out[start..].to_vec();
            push_pairwise(&base, out);
        }
    }
}

/// Design over `rows` for one feature map.
pub fn build_design(
    map: FeatureMap,
    panel: &TrialPanel,
    rows: &[usize],
    scope: Scope,
    ov: Override,
) -> Design {
    let p = feature_count(map, panel, scope);
    let mut data = Vec::with_capacity(rows.len() * p);
    for &i in rows {
        write_features(map, panel, i, scope, ov, &mut data);
    }
    Design::new(rows.len(), p, data).expect("feature count is constant for a scope")
}
