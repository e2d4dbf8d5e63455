//! Test-error estimation: Monte Carlo for both models, the exact Gaussian
//! mixture for the weak model, and the theorem right-hand sides.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{benign_statistic, easy_statistic, DataConfig, ExperimentConfig};
use crate::data::{sample_example, sample_in_category, Category, Sample};
use crate::linalg::norm;
use crate::models::{StrongModel, WeakModel};
use crate::packed::{stacked_bases, strong_outputs, weak_outputs, PackedSet};
use crate::rng::{Purpose, SeedStream, SignalBase, SignalSet};
use crate::training::RunRecord;

/// Either model, for evaluation entry points.
#[derive(Debug, Clone, Copy)]
pub enum ModelRef<'a> {
    Weak(&'a WeakModel),
    Strong(&'a StrongModel),
}

impl<'a> From<&'a WeakModel> for ModelRef<'a> {
    fn from(m: &'a WeakModel) -> Self {
        ModelRef::Weak(m)
    }
}

impl<'a> From<&'a StrongModel> for ModelRef<'a> {
    fn from(m: &'a StrongModel) -> Self {
        ModelRef::Strong(m)
    }
}

fn outputs(model: ModelRef<'_>, signals: &SignalSet, set: &PackedSet<f64>) -> Vec<f64> {
    match model {
        ModelRef::Weak(w) => weak_outputs(&w.w, signals, set),
        ModelRef::Strong(s) => strong_outputs(&s.filters, s.m, &stacked_bases::<f64>(signals), set),
    }
}

/// Closed-form weak-model errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticErrors {
    /// easy, hard, both.
    pub per_category: [f64; 3],
    /// `sum_k p_k err_k`.
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Plain fraction of misclassified draws (or the category mixture for
    /// stratified reports).
    #[serde(with = "nan_null")]
    pub overall: f64,
    #[serde(with = "nan_null")]
    pub overall_se: f64,
    /// easy, hard, both; NaN for empty strata (`null` in JSON).
    #[serde(with = "nan_null::triple")]
    pub per_category: [f64; 3],
    #[serde(with = "nan_null::triple")]
    pub std_errors: [f64; 3],
    pub counts: [usize; 3],
    pub errors: [usize; 3],
    pub stratified: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analytic: Option<AnalyticErrors>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BTreeMap<String, f64>>,
}

/// JSON has no NaN; empty strata round-trip through `null`.
mod nan_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    fn wrap(x: f64) -> Option<f64> {
        x.is_finite().then_some(x)
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        wrap(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub mod triple {
        use super::*;

        pub fn serialize<S: Serializer>(x: &[f64; 3], s: S) -> Result<S::Ok, S::Error> {
            x.map(wrap).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 3], D::Error> {
            let v = <[Option<f64>; 3]>::deserialize(d)?;
            Ok(v.map(|x| x.unwrap_or(f64::NAN)))
        }
    }
}

fn binomial_se(p: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

impl ErrorReport {
    pub fn from_counts(errors: [usize; 3], counts: [usize; 3]) -> Self {
        let mut per = [f64::NAN; 3];
        let mut se = [f64::NAN; 3];
        for k in 0..3 {
            if counts[k] > 0 {
                per[k] = errors[k] as f64 / counts[k] as f64;
                se[k] = binomial_se(per[k], counts[k]);
            }
        }
        let n: usize = counts.iter().sum();
        let e: usize = errors.iter().sum();
        let overall = if n == 0 {
            f64::NAN
        } else {
            e as f64 / n as f64
        };
        ErrorReport {
            overall,
            overall_se: binomial_se(overall, n),
            per_category: per,
            std_errors: se,
            counts,
            errors,
            stratified: false,
            analytic: None,
            bounds: None,
        }
    }

    pub fn n(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        1.0 - self.overall
    }

    pub fn category(&self, c: Category) -> f64 {
        self.per_category[c.index()]
    }

    /// Error on `S_e ∪ S_b`.
    pub fn easy_or_both(&self) -> f64 {
        let e = self.errors[0] + self.errors[2];
        let n = self.counts[0] + self.counts[2];
        if n == 0 {
            f64::NAN
        } else {
            e as f64 / n as f64
        }
    }

    /// `[easy, hard, both, overall]`.
    pub fn as_array(&self) -> [f64; 4] {
        let [e, h, b] = self.per_category;
        [e, h, b, self.overall]
    }
}

fn tally(
    model: ModelRef<'_>,
    signals: &SignalSet,
    samples: &[Sample],
    errors: &mut [usize; 3],
    counts: &mut [usize; 3],
) {
    let set = PackedSet::<f64>::from_samples(samples, signals.dim(), None);
    let out = outputs(model, signals, &set);
    for (k, f) in out.iter().enumerate() {
        let c = set.categories[k].index();
        counts[c] += 1;
        // Ties and NaN outputs count as errors.
        if !matches!(
            (f * set.targets[k]).partial_cmp(&0.0),
            Some(std::cmp::Ordering::Greater)
        ) {
            errors[c] += 1;
        }
    }
}

const MC_CHUNK: usize = 4096;

/// Errors on `n_eval` fresh draws from `D`; sample `i` uses `stream.item(i)`.
pub fn mc_test_error(
    model: ModelRef<'_>,
    signals: &Arc<SignalSet>,
    dc: &DataConfig,
    n_eval: usize,
    stream: &SeedStream,
) -> ErrorReport {
    let (mut errors, mut counts) = ([0; 3], [0; 3]);
    for start in (0..n_eval).step_by(MC_CHUNK) {
        let end = (start + MC_CHUNK).min(n_eval);
        let samples: Vec<Sample> = (start..end)
            .into_par_iter()
            .map(|i| sample_example(&mut stream.item(i as u64), signals, dc))
            .collect();
        tally(model, signals, &samples, &mut errors, &mut counts);
    }
    ErrorReport::from_counts(errors, counts)
}

/// `(errors, draws)` on `n_eval` draws conditioned on `category`.
pub fn mc_stratum_error(
    model: ModelRef<'_>,
    signals: &Arc<SignalSet>,
    sigma_p: f64,
    category: Category,
    n_eval: usize,
    stream: &SeedStream,
) -> (usize, usize) {
    let (mut errors, mut counts) = ([0; 3], [0; 3]);
    for start in (0..n_eval).step_by(MC_CHUNK) {
        let end = (start + MC_CHUNK).min(n_eval);
        let samples: Vec<Sample> = (start..end)
            .into_par_iter()
            .map(|i| sample_in_category(&mut stream.item(i as u64), signals, sigma_p, category))
            .collect();
        tally(model, signals, &samples, &mut errors, &mut counts);
    }
    let k = category.index();
    (errors[k], counts[k])
}

/// `n_per_stratum` draws in each category (streams `EvalStratum(k)` of
/// `seed`); the overall error is the mixture `sum_k p_k err_k`.
pub fn stratified_mc_error(
    model: ModelRef<'_>,
    signals: &Arc<SignalSet>,
    dc: &DataConfig,
    n_per_stratum: usize,
    seed: u64,
) -> ErrorReport {
    let (mut errors, mut counts) = ([0; 3], [0; 3]);
    for c in Category::ALL {
        let stream = SeedStream::new(seed, Purpose::EvalStratum(c.index() as u8));
        let (e, n) = mc_stratum_error(model, signals, dc.sigma_p, c, n_per_stratum, &stream);
        errors[c.index()] = e;
        counts[c.index()] = n;
    }
    let mut r = ErrorReport::from_counts(errors, counts);
    let p = [dc.p_e, dc.p_h, dc.p_b];
    let (mut overall, mut var) = (0.0, 0.0);
    for ((&pk, &err), &se) in p.iter().zip(&r.per_category).zip(&r.std_errors) {
        if pk > 0.0 {
            overall += pk * err;
            var += pk * pk * se * se;
        }
    }
    r.overall = overall;
    r.overall_se = var.sqrt();
    r.stratified = true;
    r
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Exact weak-model error. Given a signal pair, `y f = a + y <w, xi>` with
/// `a` the signal margin and `y <w, xi> ~ N(0, sigma_p^2 |P_S w|^2)`, so the
/// error is `Phi(-a / (sigma_p |P_S w|))`. With no noise component the
/// margin is deterministic and a zero margin counts one half.
pub fn analytic_weak_error(model: &WeakModel, signals: &SignalSet, dc: &DataConfig) -> ErrorReport {
    let w = &model.w;
    let wn = norm(w);
    let mut resid = w.clone();
    signals.project_out(&mut resid);
    let s = dc.sigma_p * norm(&resid);
    let deterministic = s <= 1e-10 * dc.sigma_p * wn;
    let zero_tol = 1e-10 * wn * signals.mu_norm.max(signals.nu_norm);
    let tail = |a: f64| -> f64 {
        if deterministic {
            if a.abs() <= zero_tol {
                0.5
            } else if a > 0.0 {
                0.0
            } else {
                1.0
            }
        } else {
            phi(-a / s)
        }
    };
    let proj = signals.project(w);
    let mut per = [0.0; 3];
    for (y, mu, nu) in [
        (1.0, SignalBase::MuPos, SignalBase::NuPos),
        (-1.0, SignalBase::MuNeg, SignalBase::NuNeg),
    ] {
        let pm = proj[mu.index()];
        let pn = proj[nu.index()];
        per[0] += 0.5 * tail(y * 2.0 * pm);
        for (s1, s2) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            per[1] += 0.125 * tail(y * (s1 + s2) * pn);
        }
        // (mu, nu), (mu, -nu), (nu, mu), (-nu, mu): the weak output ignores
        // slot order.
        for sg in [1.0, -1.0, 1.0, -1.0] {
            per[2] += 0.125 * tail(y * (pm + sg * pn));
        }
    }
    let overall = dc.p_e * per[0] + dc.p_h * per[1] + dc.p_b * per[2];
    let analytic = AnalyticErrors {
        per_category: per,
        overall,
    };
    ErrorReport {
        overall,
        overall_se: 0.0,
        per_category: per,
        std_errors: [0.0; 3],
        counts: [0; 3],
        errors: [0; 3],
        stratified: false,
        analytic: Some(analytic),
        bounds: None,
    }
}

/// First snapshot (iteration) at which the model classifies every training
/// point correctly against its TRUE label.
pub fn detect_early_stop(records: &[RunRecord]) -> Option<u64> {
    records.iter().find(|r| r.acc_true >= 1.0).map(|r| r.iter)
}

/// Right-hand sides of the convergence and generalization statements with
/// the configured constants. Keys ending in `_applies` are 1 or 0.
pub fn theorem_bounds(cfg: &ExperimentConfig) -> BTreeMap<String, f64> {
    let dc = &cfg.data;
    let th = &cfg.theorem;
    let mut b = BTreeMap::new();
    let weak_stat = easy_statistic(cfg, cfg.weak.n);
    let easy_st = easy_statistic(cfg, cfg.strong.n);
    let hard_st = benign_statistic(cfg, cfg.strong.n);
    b.insert("weak_easy_both_bound".into(), (-weak_stat / th.c1).exp());
    b.insert("benign_statistic".into(), hard_st);
    b.insert("benign_applies".into(), f64::from(hard_st >= th.c2));
    b.insert(
        "benign_bound".into(),
        (dc.p_e + dc.p_b) * (-easy_st / th.c3).exp() + dc.p_h * (-hard_st / th.c3).exp(),
    );
    b.insert("harmful_applies".into(), f64::from(hard_st <= th.c4));
    b.insert("harmful_lower".into(), 0.12 * dc.p_h);
    b.insert(
        "early_stop_bound".into(),
        (dc.p_e + dc.p_b) * (-easy_st / th.c5).exp() + dc.p_h * (-hard_st / th.c5).exp(),
    );
    let rate = cfg.strong.eta * (2.0 * dc.p_e + dc.p_b) * dc.mu_norm * dc.mu_norm;
    b.insert("early_stop_iter_scale".into(), cfg.strong.m as f64 / rate);
    b
}

/// A fixed test set reused at every snapshot.
pub struct Evaluator {
    signals: Arc<SignalSet>,
    set: PackedSet<f64>,
}

impl Evaluator {
    pub fn new(signals: Arc<SignalSet>, dc: &DataConfig, n: usize, stream: &SeedStream) -> Self {
        let samples: Vec<Sample> = (0..n)
            .into_par_iter()
            .map(|i| sample_example(&mut stream.item(i as u64), &signals, dc))
            .collect();
        let set = PackedSet::from_samples(&samples, signals.dim(), None);
        Evaluator { signals, set }
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn errors(&self, model: ModelRef<'_>) -> ErrorReport {
        let out = outputs(model, &self.signals, &self.set);
        let (mut errors, mut counts) = ([0; 3], [0; 3]);
        for (k, f) in out.iter().enumerate() {
            let c = self.set.categories[k].index();
            counts[c] += 1;
            if !matches!(
                (f * self.set.targets[k]).partial_cmp(&0.0),
                Some(std::cmp::Ordering::Greater)
            ) {
                errors[c] += 1;
            }
        }
        ErrorReport::from_counts(errors, counts)
    }

    pub fn weak_errors(&self, model: &WeakModel) -> ErrorReport {
        self.errors(ModelRef::Weak(model))
    }

    pub fn strong_errors(&self, model: &StrongModel) -> ErrorReport {
        self.errors(ModelRef::Strong(model))
    }
}
