//! Experiment parameters, validation, and regime-condition evaluation.
//!
//! A config file is TOML with the sections `[data]`, `[weak]`, `[strong]`
//! and the optional `[regime]`, `[theorem]`, `[eval]`, `[sweep]`. Any key can
//! be overridden from the command line with `section.key=value`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn default_seed() -> u64 {
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub data: DataConfig,
    pub weak: WeakConfig,
    pub strong: StrongConfig,
    #[serde(default)]
    pub regime: RegimeConstants,
    #[serde(default)]
    pub theorem: TheoremConstants,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    /// Qualitative outcome the scenario is expected to show.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<Outcome>,
}

/// Qualitative weak-to-strong outcome of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    /// Strong model fits the pseudo-labels and inherits the weak error.
    Harmful,
    /// Strong model fits the pseudo-labels and beats the weak model.
    Benign,
    /// Test accuracy peaks early, then degrades with overtraining.
    AbundantEarlyGen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub d: usize,
    pub mu_norm: f64,
    pub nu_norm: f64,
    pub sigma_p: f64,
    pub p_e: f64,
    pub p_h: f64,
    pub p_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakConfig {
    pub n: usize,
    pub eta: f64,
    /// 0 means full-batch gradient descent.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongConfig {
    pub n: usize,
    pub m: usize,
    pub sigma_0: f64,
    pub eta: f64,
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<u64>,
    #[serde(default)]
    pub precision: Precision,
    /// Track the signal-noise decomposition alongside training (f64 only).
    #[serde(default)]
    pub track_decomposition: bool,
    /// Keep the dense per-(filter, sample) noise coefficients when tracking.
    #[serde(default = "yes")]
    pub track_rho: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeConstants {
    /// The "sufficiently large" constant of the regime conditions.
    pub c: f64,
    /// Failure probability in the concentration conditions.
    pub delta: f64,
    /// Maximum admissible iterations; defaults to the strong budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_star: Option<u64>,
}

impl Default for RegimeConstants {
    fn default() -> Self {
        RegimeConstants {
            c: 1.0,
            delta: 0.05,
            t_star: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoremConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
}

impl Default for TheoremConstants {
    fn default() -> Self {
        TheoremConstants {
            c1: 4608.0,
            c2: 1.0,
            c3: 1.0,
            c4: 1.0,
            c5: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fixed test set used at every snapshot.
    pub n_snapshot: usize,
    /// Fresh draws for the final report.
    pub n_final: usize,
    /// Snapshot cadence in epochs (full batch: iterations).
    pub snapshot_every: u64,
    /// Snapshot every epoch up to this epoch, then fall back to the cadence.
    pub dense_until: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_snapshot: 10_000,
            n_final: 100_000,
            snapshot_every: 1,
            dense_until: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub n_st: Vec<usize>,
    #[serde(default = "one")]
    pub replicates: usize,
    /// Worker count; 0 uses the global pool.
    #[serde(default)]
    pub parallelism: usize,
    /// Stratified hard-only evaluation size per cell.
    #[serde(default = "default_sweep_eval")]
    pub n_eval_hard: usize,
}

fn one() -> usize {
    1
}

fn default_sweep_eval() -> usize {
    10_000
}

/// Iteration budget of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Epochs(u64),
    Iterations(u64),
}

/// Number of minibatches per epoch for `n` samples and batch size `b`
/// (`b = 0` is full batch).
pub fn batches_per_epoch(n: usize, batch_size: usize) -> u64 {
    if n == 0 {
        return 0;
    }
    if batch_size == 0 || batch_size >= n {
        1
    } else {
        n.div_ceil(batch_size) as u64
    }
}

impl Budget {
    fn from_pair(stage: &str, epochs: Option<u64>, iters: Option<u64>) -> Result<Budget> {
        match (epochs, iters) {
            (Some(e), None) => Ok(Budget::Epochs(e)),
            (None, Some(i)) => Ok(Budget::Iterations(i)),
            (None, None) => Err(Error::InvalidConfig(format!(
                "[{stage}] needs `epochs` or `iters`"
            ))),
            (Some(_), Some(_)) => Err(Error::InvalidConfig(format!(
                "[{stage}] sets both `epochs` and `iters`"
            ))),
        }
    }

    pub fn total_iterations(self, n: usize, batch_size: usize) -> u64 {
        match self {
            Budget::Iterations(i) => i,
            Budget::Epochs(e) => e * batches_per_epoch(n, batch_size),
        }
    }
}

impl WeakConfig {
    pub fn budget(&self) -> Result<Budget> {
        Budget::from_pair("weak", self.epochs, self.iters)
    }
}

impl StrongConfig {
    pub fn budget(&self) -> Result<Budget> {
        Budget::from_pair("strong", self.epochs, self.iters)
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table =
            toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        value
            .try_into()
            .map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    /// The synthetic setting of the reference experiments: d = 2000,
    /// ||mu|| = 0.4, ||nu|| = 0.35, sigma_p = 0.1, (p_e, p_h, p_b) =
    /// (0.4, 0.3, 0.3), weak SGD on 5000 points for 1000 epochs, strong model
    /// with m = 50 filters and sigma_0 = 0.01, both with batch 256 and
    /// eta = 0.1.
    pub fn reference(n_st: usize, strong_epochs: u64) -> Self {
        ExperimentConfig {
            name: format!("reference-n{n_st}"),
            seed: 0,
            data: DataConfig {
                d: 2000,
                mu_norm: 0.4,
                nu_norm: 0.35,
                sigma_p: 0.1,
                p_e: 0.4,
                p_h: 0.3,
                p_b: 0.3,
            },
            weak: WeakConfig {
                n: 5000,
                eta: 0.1,
                batch_size: 256,
                epochs: Some(1000),
                iters: None,
            },
            strong: StrongConfig {
                n: n_st,
                m: 50,
                sigma_0: 0.01,
                eta: 0.1,
                batch_size: 256,
                epochs: Some(strong_epochs),
                iters: None,
                precision: Precision::F64,
                track_decomposition: false,
                track_rho: true,
            },
            regime: RegimeConstants::default(),
            theorem: TheoremConstants::default(),
            eval: EvalConfig::default(),
            sweep: None,
            expect: None,
        }
    }

    /// Small full-batch setting used by the property suite: d = 256,
    /// n_wk = n_st = 64, m = 8, 500 iterations.
    pub fn small() -> Self {
        let mut c = Self::reference(64, 0);
        c.name = "verify-small".into();
        c.data.d = 256;
        c.weak = WeakConfig {
            n: 64,
            eta: 0.1,
            batch_size: 0,
            epochs: None,
            iters: Some(500),
        };
        c.strong.m = 8;
        c.strong.batch_size = 0;
        c.strong.epochs = None;
        c.strong.iters = Some(500);
        c.strong.track_decomposition = true;
        c.eval = EvalConfig {
            n_snapshot: 2000,
            n_final: 10_000,
            snapshot_every: 1,
            dense_until: 0,
        };
        c
    }

    pub fn weak_iterations(&self) -> Result<u64> {
        Ok(self
            .weak
            .budget()?
            .total_iterations(self.weak.n, self.weak.batch_size))
    }

    pub fn strong_iterations(&self) -> Result<u64> {
        Ok(self
            .strong
            .budget()?
            .total_iterations(self.strong.n, self.strong.batch_size))
    }

    /// T*: the configured value, or the strong iteration budget (at least 1).
    pub fn t_star(&self) -> u64 {
        self.regime
            .t_star
            .unwrap_or_else(|| self.strong_iterations().unwrap_or(1))
            .max(1)
    }
}

fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::ConfigParse(format!("override `{ov}` is not key=value")))?;
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::ConfigParse(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveScale { name, value })
    }
}

/// Checks every invariant and returns the normalized config.
///
/// Category probabilities that sum to 1 within 1e-9 are rescaled to sum to 1
/// exactly (to 1e-12); anything further off is rejected.
pub fn validate(config: &ExperimentConfig) -> Result<ExperimentConfig> {
    let mut c = config.clone();
    if c.seed > i64::MAX as u64 {
        return Err(Error::InvalidConfig(format!(
            "seed {} does not fit a TOML integer (max {})",
            c.seed,
            i64::MAX
        )));
    }
    let data = &mut c.data;
    if data.d < 5 {
        return Err(Error::DimensionTooSmall { d: data.d, min: 5 });
    }
    check_positive("mu_norm", data.mu_norm)?;
    check_positive("nu_norm", data.nu_norm)?;
    check_positive("sigma_p", data.sigma_p)?;
    let probs = [data.p_e, data.p_h, data.p_b];
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidConfig(format!(
            "category probabilities must lie in [0, 1], got {probs:?}"
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::ProbabilitySumError { sum });
    }
    data.p_e /= sum;
    data.p_h /= sum;
    data.p_b /= sum;

    check_positive("weak.eta", c.weak.eta)?;
    check_positive("strong.eta", c.strong.eta)?;
    if !(c.strong.sigma_0 >= 0.0 && c.strong.sigma_0.is_finite()) {
        return Err(Error::NonPositiveScale {
            name: "sigma_0",
            value: c.strong.sigma_0,
        });
    }
    if c.strong.m == 0 {
        return Err(Error::InvalidConfig("strong.m must be at least 1".into()));
    }
    c.weak.budget()?;
    c.strong.budget()?;
    if c.strong.track_decomposition && c.strong.precision != Precision::F64 {
        return Err(Error::InvalidConfig(
            "decomposition tracking requires strong.precision = \"f64\"".into(),
        ));
    }
    check_positive("regime.c", c.regime.c)?;
    if !(c.regime.delta > 0.0 && c.regime.delta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "regime.delta must lie in (0, 1), got {}",
            c.regime.delta
        )));
    }
    let t = &c.theorem;
    for (name, v) in [
        ("theorem.c1", t.c1),
        ("theorem.c2", t.c2),
        ("theorem.c3", t.c3),
        ("theorem.c4", t.c4),
        ("theorem.c5", t.c5),
    ] {
        check_positive(name, v)?;
    }
    if c.eval.snapshot_every == 0 {
        return Err(Error::InvalidConfig(
            "eval.snapshot_every must be >= 1".into(),
        ));
    }
    if let Some(s) = &c.sweep {
        if s.n_st.is_empty() {
            return Err(Error::InvalidConfig("sweep.n_st grid is empty".into()));
        }
        if s.replicates == 0 {
            return Err(Error::InvalidConfig("sweep.replicates must be >= 1".into()));
        }
    }
    Ok(c)
}

/// One inequality of a regime condition, evaluated literally.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inequality {
    pub description: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl Inequality {
    fn at_least(description: &str, lhs: f64, rhs: f64) -> Self {
        Inequality {
            description: description.into(),
            lhs,
            rhs,
            holds: lhs.is_finite() && !rhs.is_nan() && lhs >= rhs,
        }
    }

    fn at_most(description: &str, lhs: f64, rhs: f64) -> Self {
        Inequality {
            description: description.into(),
            lhs,
            rhs,
            holds: lhs.is_finite() && !rhs.is_nan() && lhs <= rhs,
        }
    }

    /// Marks the inequality violated, e.g. for degenerate sample sizes.
    fn violated_if(mut self, cond: bool) -> Self {
        if cond {
            self.holds = false;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub name: String,
    pub parts: Vec<Inequality>,
    pub satisfied: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ConditionCheck {
    fn new(name: &str, parts: Vec<Inequality>, note: Option<&str>) -> Self {
        ConditionCheck {
            name: name.into(),
            satisfied: parts.iter().all(|p| p.holds),
            parts,
            note: note.map(Into::into),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeReport {
    /// C1 through C6 in order.
    pub conditions: Vec<ConditionCheck>,
    pub condition1_holds: bool,
    /// n_wk, n_st below the scarce cap (and not above the abundant floor).
    pub data_scarce: bool,
    /// n_st above the abundant floor.
    pub data_abundant: bool,
    /// Both side inequalities hold at once; only possible when the
    /// easy/hard separation (C5) fails.
    pub side_conditions_overlap: bool,
    pub thresholds: BTreeMap<String, f64>,
}

impl RegimeReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionCheck> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

/// `n p_b^2 ||nu||^4 / (sigma_p^4 d)`: the statistic governing benign vs.
/// harmful overfitting of the strong model.
pub fn benign_statistic(config: &ExperimentConfig, n: usize) -> f64 {
    let dc = &config.data;
    n as f64 * dc.p_b.powi(2) * dc.nu_norm.powi(4) / (dc.sigma_p.powi(4) * dc.d as f64)
}

/// `n (2 p_e + p_b)^2 ||mu||^4 / (sigma_p^4 d)`: the easy-signal analogue.
pub fn easy_statistic(config: &ExperimentConfig, n: usize) -> f64 {
    let dc = &config.data;
    n as f64 * (2.0 * dc.p_e + dc.p_b).powi(2) * dc.mu_norm.powi(4)
        / (dc.sigma_p.powi(4) * dc.d as f64)
}

/// Evaluates C1-C6 and the two regime side conditions with the configured
/// constant C. Pure in `config`.
pub fn classify_regime(config: &ExperimentConfig) -> RegimeReport {
    let dc = &config.data;
    let c = config.regime.c;
    let delta = config.regime.delta;
    let d = dc.d as f64;
    let (n_wk, n_st) = (config.weak.n as f64, config.strong.n as f64);
    let m = config.strong.m as f64;
    let sp2 = dc.sigma_p * dc.sigma_p;
    let mu2 = dc.mu_norm * dc.mu_norm;
    let nu2 = dc.nu_norm * dc.nu_norm;
    let easy_mass = 2.0 * dc.p_e + dc.p_b;
    let t_star = config.t_star();
    let log_t = (t_star as f64).ln();
    let zero_wk = config.weak.n == 0;
    let zero_st = config.strong.n == 0;
    let any_zero = zero_wk || zero_st;

    let xlog = |n: f64, inner: f64| if n > 0.0 { n * inner.ln() } else { 0.0 };

    let c1_rhs =
        c * f64::max(
            xlog(n_wk * n_wk, c * n_wk * n_wk / delta),
            xlog(n_st, c * n_st / delta),
        ) * log_t
            * log_t;
    let c1 = ConditionCheck::new(
        "C1",
        vec![Inequality::at_least(
            "d >= C max{n_wk^2 log(C n_wk^2/delta), n_st log(C n_st/delta)} (log T*)^2",
            d,
            c1_rhs,
        )
        .violated_if(any_zero)],
        None,
    );

    let inv_p2 = [dc.p_e, dc.p_b, dc.p_h]
        .iter()
        .map(|p| if *p > 0.0 { p.powi(-2) } else { f64::INFINITY })
        .fold(0.0f64, f64::max);
    let n_floor = c * inv_p2 * (c / delta).ln();
    let c2 = ConditionCheck::new(
        "C2",
        vec![
            Inequality::at_least("n_wk >= C max{p^-2} log(C/delta)", n_wk, n_floor),
            Inequality::at_least("n_st >= C max{p^-2} log(C/delta)", n_st, n_floor),
            Inequality::at_least("m >= C log(C n_st/delta)", m, c * (c * n_st / delta).ln())
                .violated_if(zero_st),
        ],
        None,
    );

    let scale_min = f64::min(
        f64::min(1.0 / dc.mu_norm, 1.0 / dc.nu_norm),
        1.0 / (dc.sigma_p * d.sqrt()),
    );
    let size_min = f64::min(
        n_st * dc.p_b * nu2 / (sp2 * d),
        sp2 * d / (easy_mass * n_st * mu2),
    );
    let c3_rhs = scale_min * size_min * (c * m * n_st / delta).ln().powf(-0.5) / c;
    let c3 = ConditionCheck::new(
        "C3",
        vec![Inequality::at_most(
            "sigma_0 <= C^-1 min{1/||mu||, 1/||nu||, 1/(sigma_p sqrt d)} min{n_st p_b ||nu||^2/(sigma_p^2 d), sigma_p^2 d/((2p_e+p_b) n_st ||mu||^2)} log(C m n_st/delta)^-1/2",
            config.strong.sigma_0,
            c3_rhs,
        )
        .violated_if(zero_st)],
        Some("evaluated exactly as printed, with n_st to the first power in the second minimum"),
    );

    let lr_cap = 1.0 / (c * sp2 * d.powf(1.5));
    let c4 = ConditionCheck::new(
        "C4",
        vec![
            Inequality::at_most(
                "weak eta <= C^-1 sigma_p^-2 d^-3/2",
                config.weak.eta,
                lr_cap,
            ),
            Inequality::at_most(
                "strong eta <= C^-1 sigma_p^-2 d^-3/2",
                config.strong.eta,
                lr_cap,
            ),
        ],
        None,
    );

    let easy_floor = c * sp2 * sp2 * d / (easy_mass * easy_mass * mu2 * mu2);
    let c5 = ConditionCheck::new(
        "C5",
        vec![
            Inequality::at_least(
                "(2p_e+p_b)||mu||^2 >= C p_b ||nu||^2",
                easy_mass * mu2,
                c * dc.p_b * nu2,
            ),
            Inequality::at_least(
                "n_wk >= C sigma_p^4 d/((2p_e+p_b)^2 ||mu||^4)",
                n_wk,
                easy_floor,
            ),
            Inequality::at_least(
                "n_st >= C sigma_p^4 d/((2p_e+p_b)^2 ||mu||^4)",
                n_st,
                easy_floor,
            ),
        ],
        Some("the omega(.) growth requirement is read as n >= C * (bracket)"),
    );

    let c6 = ConditionCheck::new(
        "C6",
        vec![Inequality::at_least(
            "p_b >= C max{p_h, sigma_p ||mu|| ||nu||^-2 (log T*)^1/2}",
            dc.p_b,
            c * f64::max(
                dc.p_h,
                dc.sigma_p * dc.mu_norm / nu2 * log_t.max(0.0).sqrt(),
            ),
        )],
        None,
    );

    let conditions = vec![c1, c2, c3, c4, c5, c6];
    let condition1_holds = conditions.iter().all(|c| c.satisfied);

    let scarce_cap = sp2 * d / (c * easy_mass * mu2 * log_t);
    let abundant_floor = c * sp2 * d * log_t / (dc.p_b * nu2);
    let scarce_side = !any_zero && n_wk <= scarce_cap && n_st <= scarce_cap;
    let abundant_side = !zero_st && n_st >= abundant_floor;

    let mut thresholds = BTreeMap::new();
    thresholds.insert(
        "benign_statistic".into(),
        benign_statistic(config, config.strong.n),
    );
    thresholds.insert(
        "weak_easy_statistic".into(),
        easy_statistic(config, config.weak.n),
    );
    thresholds.insert("scarce_cap".into(), scarce_cap);
    thresholds.insert("abundant_floor".into(), abundant_floor);
    thresholds.insert("eta_cap".into(), lr_cap);
    thresholds.insert("t_star".into(), t_star as f64);
    thresholds.insert("log_t_star".into(), log_t);

    RegimeReport {
        conditions,
        condition1_holds,
        data_scarce: scarce_side && !abundant_side,
        data_abundant: abundant_side,
        side_conditions_overlap: scarce_side && abundant_side,
        thresholds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_config_validates() {
        let c = validate(&ExperimentConfig::reference(2000, 2000)).unwrap();
        assert_eq!(c.data.p_e, 0.4);
        assert!((c.data.p_e + c.data.p_h + c.data.p_b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probability_sum_error() {
        let mut c = ExperimentConfig::reference(75, 1);
        c.data.p_e = 0.5;
        c.data.p_h = 0.5;
        c.data.p_b = 0.5;
        assert!(matches!(
            validate(&c),
            Err(Error::ProbabilitySumError { .. })
        ));
    }

    #[test]
    fn near_unit_sum_is_renormalized() {
        let mut c = ExperimentConfig::reference(75, 1);
        c.data.p_e = 0.4 + 5e-10;
        let v = validate(&c).unwrap();
        assert!((v.data.p_e + v.data.p_h + v.data.p_b - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn small_dimension_rejected() {
        let mut c = ExperimentConfig::reference(75, 1);
        c.data.d = 4;
        assert!(matches!(
            validate(&c),
            Err(Error::DimensionTooSmall { d: 4, .. })
        ));
    }

    #[test]
    fn non_positive_scale_rejected() {
        let mut c = ExperimentConfig::reference(75, 1);
        c.data.sigma_p = 0.0;
        assert!(matches!(
            validate(&c),
            Err(Error::NonPositiveScale {
                name: "sigma_p",
                ..
            })
        ));
        let mut c = ExperimentConfig::reference(75, 1);
        c.strong.eta = -0.1;
        assert!(matches!(validate(&c), Err(Error::NonPositiveScale { .. })));
    }

    #[test]
    fn budget_must_be_unique() {
        let mut c = ExperimentConfig::reference(75, 1);
        c.strong.iters = Some(3);
        assert!(matches!(validate(&c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn benign_statistic_values() {
        // 75 * 0.09 * 0.35^4 / (0.1^4 * 2000)
        let expect = |n: f64| n * 0.09 * 0.35f64.powi(4) / (1e-4 * 2000.0);
        for (n, approx) in [(75usize, 0.506), (2000, 13.5), (20000, 135.0)] {
            let c = ExperimentConfig::reference(n, 10);
            let r = classify_regime(&c);
            let got = r.thresholds["benign_statistic"];
            assert!((got - expect(n as f64)).abs() < 1e-9 * got);
            assert!((got - approx).abs() < 0.01 * approx, "{n}: {got}");
        }
    }

    #[test]
    fn zero_strong_size_violates_size_conditions() {
        let mut c = ExperimentConfig::reference(0, 10);
        c.weak.n = 0;
        let r = classify_regime(&c);
        for name in ["C1", "C2", "C3"] {
            assert!(!r.condition(name).unwrap().satisfied, "{name}");
        }
        assert!(!r.data_scarce && !r.data_abundant);
    }

    #[test]
    fn regime_flags_match_side_conditions_when_c5_holds() {
        // Tiny d makes the conditions easy to reason about.
        let mut c = ExperimentConfig::reference(10, 10);
        c.regime.t_star = Some(1000);
        let r = classify_regime(&c);
        let cap = r.thresholds["scarce_cap"];
        let floor = r.thresholds["abundant_floor"];
        assert!(cap < floor);
        assert_eq!(r.data_scarce, [10.0, 5000.0].iter().all(|&n| n <= cap));
        c.strong.n = floor.ceil() as usize;
        assert!(classify_regime(&c).data_abundant);
    }

    #[test]
    fn overrides_apply() {
        let text = ExperimentConfig::reference(75, 2000).to_toml();
        let c = ExperimentConfig::from_toml_str(
            &text,
            &[
                "strong.n=2000".into(),
                "seed=9".into(),
                "strong.precision=f32".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.strong.n, 2000);
        assert_eq!(c.seed, 9);
        assert_eq!(c.strong.precision, Precision::F32);
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::small();
        let back = ExperimentConfig::from_toml_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }

    proptest! {
        #[test]
        fn regime_is_pure_and_monotone_in_n_st(
            n1 in 0usize..50_000,
            extra in 0usize..50_000,
            c in 1.0f64..20.0,
            mu in 0.05f64..2.0,
            nu in 0.05f64..2.0,
            t_star in 1u64..1_000_000,
        ) {
            let mut cfg = ExperimentConfig::reference(n1, 10);
            cfg.regime.c = c;
            cfg.regime.t_star = Some(t_star);
            cfg.data.mu_norm = mu;
            cfg.data.nu_norm = nu;
            let a = classify_regime(&cfg);
            prop_assert_eq!(&a, &classify_regime(&cfg));
            prop_assert!(!(a.data_scarce && a.data_abundant));
            let mut bigger = cfg.clone();
            bigger.strong.n = n1 + extra;
            let b = classify_regime(&bigger);
            prop_assert!(b.thresholds["benign_statistic"] >= a.thresholds["benign_statistic"]);
            prop_assert!(!(a.data_abundant && !b.data_abundant));
        }
    }
}
