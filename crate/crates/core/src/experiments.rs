//! Scenario pipelines (weak training, pseudo-labeling, strong training),
//! the sample-size sweep, and the property suite.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{
    classify_regime, validate, ExperimentConfig, Outcome, Precision, RegimeReport,
};
use crate::data::{generate_dataset, pseudo_label, Category, Dataset, FlipStats};
use crate::decomposition::DecompRow;
use crate::error::{Error, Result};
use crate::evaluation::{
    analytic_weak_error, detect_early_stop, mc_stratum_error, mc_test_error, stratified_mc_error,
    theorem_bounds, AnalyticErrors, ErrorReport, Evaluator, ModelRef,
};
use crate::io::{self, Stamp};
use crate::models::{
    construct_optimal_strong, init_strong, strong_forward, weak_forward, StrongModel, WeakModel,
};
use crate::rng::{derive_seed, make_signal_set, Purpose, Rng, SeedStream, SignalBase, SignalSet};
use crate::run_dir::RunDir;
use crate::training::{
    logistic_loss, strong_gradient, train_strong, train_weak, weak_gradient, BatchMode, RunRecord,
    SnapshotSchedule, TrainOptions,
};

/// Stage names, in pipeline order.
pub mod stage {
    pub const DATA: &str = "data";
    pub const WEAK: &str = "weak";
    pub const PSEUDO: &str = "pseudo";
    pub const STRONG: &str = "strong";
    pub const REPORT: &str = "report";
    pub const ALL: [&str; 5] = [DATA, WEAK, PSEUDO, STRONG, REPORT];
}

/// Artifact file names inside a run directory.
pub mod files {
    pub const SIGNALS: &str = "signals.bin";
    pub const WEAK_DATA: &str = "weak_data.bin";
    pub const WEAK_DATA_META: &str = "weak_data.csv";
    pub const STRONG_DATA: &str = "strong_data.bin";
    pub const STRONG_DATA_META: &str = "strong_data.csv";
    pub const WEAK_MODEL: &str = "weak_model.bin";
    pub const WEAK_RECORDS: &str = "weak_records.csv";
    pub const WEAK_REPORT: &str = "weak_report.json";
    pub const PSEUDO_META: &str = "pseudo_data.csv";
    pub const STRONG_MODEL: &str = "strong_model.bin";
    pub const STRONG_RECORDS: &str = "strong_records.csv";
    pub const STRONG_DECOMP: &str = "strong_decomp.csv";
    pub const STRONG_REPORT: &str = "strong_report.json";
    pub const SUMMARY: &str = "summary.json";
    pub const PLOT: &str = "accuracy.svg";
}

// ------------------------------------------------------------ scenarios --

/// Tolerances of the qualitative outcome checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    /// Harmful: |strong - weak| test accuracy at most this.
    pub harmful_tol: f64,
    /// Benign: strong test accuracy exceeds weak by at least this.
    pub benign_margin: f64,
    /// Early generalization: peak test accuracy at least this ...
    pub early_peak: f64,
    /// ... reached while accuracy against the pseudo-labels is below this ...
    pub early_pseudo_cap: f64,
    /// ... and the last snapshot is at least this far below the peak.
    pub early_drop: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            harmful_tol: 0.05,
            benign_margin: 0.02,
            early_peak: 0.97,
            early_pseudo_cap: 0.9,
            early_drop: 0.03,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub config: ExperimentConfig,
    pub expect: Option<Outcome>,
    pub thresholds: Thresholds,
}

impl Scenario {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let config = validate(config)?;
        Ok(Scenario {
            name: config.name.clone(),
            expect: config.expect,
            config,
            thresholds: Thresholds::default(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct WeakOutcome {
    pub model: WeakModel,
    pub records: Vec<RunRecord>,
    /// Fresh draws from the final-evaluation stream.
    pub report: ErrorReport,
}

#[derive(Debug, Clone)]
pub struct StrongOutcome {
    pub model: StrongModel,
    pub records: Vec<RunRecord>,
    pub decomp_rows: Vec<DecompRow>,
    /// Same draws as the weak model's final report.
    pub report: ErrorReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeakSummary {
    pub test: ErrorReport,
    pub test_accuracy: f64,
    pub analytic: AnalyticErrors,
    pub train_accuracy: f64,
    pub iterations: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StrongSummary {
    pub test: ErrorReport,
    pub test_accuracy: f64,
    pub iterations: u64,
    /// Highest snapshot test accuracy and where it occurred.
    pub peak_test_accuracy: f64,
    pub peak_iter: u64,
    pub peak_epoch: f64,
    pub acc_pseudo_at_peak: f64,
    pub last_snapshot_test_accuracy: f64,
    pub final_acc_pseudo: f64,
    pub final_acc_true: f64,
    pub max_acc_pseudo: f64,
    pub early_stop_iter: Option<u64>,
    /// First snapshot where the flipped hard-signal gradient mass exceeds
    /// the clean one.
    pub flipped_hard_dominance_iter: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub expect: Option<Outcome>,
    pub weak: WeakSummary,
    pub flips: Option<FlipStats>,
    pub strong: Option<StrongSummary>,
    pub checks: Vec<Check>,
    pub bounds: BTreeMap<String, f64>,
    pub regime: RegimeReport,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn strong_summary(out: &StrongOutcome) -> StrongSummary {
    let recs = &out.records;
    let peak =
        recs.iter()
            .filter(|r| r.test_acc().is_finite())
            .fold(None::<&RunRecord>, |best, r| match best {
                Some(b) if b.test_acc() >= r.test_acc() => Some(b),
                _ => Some(r),
            });
    let last = recs.last();
    StrongSummary {
        test: out.report.clone(),
        test_accuracy: out.report.accuracy(),
        iterations: last.map_or(0, |r| r.iter),
        peak_test_accuracy: peak.map_or(f64::NAN, |r| r.test_acc()),
        peak_iter: peak.map_or(0, |r| r.iter),
        peak_epoch: peak.map_or(0.0, |r| r.epoch),
        acc_pseudo_at_peak: peak.map_or(f64::NAN, |r| r.acc_pseudo),
        last_snapshot_test_accuracy: last.map_or(f64::NAN, |r| r.test_acc()),
        final_acc_pseudo: last.map_or(f64::NAN, |r| r.acc_pseudo),
        final_acc_true: last.map_or(f64::NAN, |r| r.acc_true),
        max_acc_pseudo: recs.iter().map(|r| r.acc_pseudo).fold(f64::NAN, f64::max),
        early_stop_iter: detect_early_stop(recs),
        flipped_hard_dominance_iter: recs
            .iter()
            .find(|r| r.mass_flipped_hard > r.mass_clean_hard)
            .map(|r| r.iter),
    }
}

/// The qualitative checks of `expect` on a finished run.
pub fn outcome_checks(
    expect: Outcome,
    th: &Thresholds,
    weak_acc: f64,
    strong: &StrongSummary,
) -> Vec<Check> {
    let chk = |name: &str, passed: bool, value: f64, threshold: f64, detail: String| Check {
        name: name.into(),
        passed,
        value,
        threshold,
        detail,
    };
    match expect {
        Outcome::Harmful => {
            let gap = (strong.test_accuracy - weak_acc).abs();
            vec![
                chk(
                    "fits_pseudo_labels",
                    strong.final_acc_pseudo >= 1.0,
                    strong.final_acc_pseudo,
                    1.0,
                    "final accuracy against the pseudo-labels".into(),
                ),
                chk(
                    "inherits_weak_error",
                    gap <= th.harmful_tol,
                    gap,
                    th.harmful_tol,
                    format!("strong {:.4} vs weak {:.4}", strong.test_accuracy, weak_acc),
                ),
            ]
        }
        Outcome::Benign => {
            let gain = strong.test_accuracy - weak_acc;
            vec![chk(
                "beats_weak",
                gain >= th.benign_margin,
                gain,
                th.benign_margin,
                format!("strong {:.4} vs weak {:.4}", strong.test_accuracy, weak_acc),
            )]
        }
        Outcome::AbundantEarlyGen => {
            let drop = strong.peak_test_accuracy - strong.last_snapshot_test_accuracy;
            vec![
                chk(
                    "early_peak",
                    strong.peak_test_accuracy >= th.early_peak,
                    strong.peak_test_accuracy,
                    th.early_peak,
                    format!(
                        "at iteration {} (epoch {})",
                        strong.peak_iter, strong.peak_epoch
                    ),
                ),
                chk(
                    "peak_before_fit",
                    strong.acc_pseudo_at_peak < th.early_pseudo_cap,
                    strong.acc_pseudo_at_peak,
                    th.early_pseudo_cap,
                    "pseudo-label accuracy at the peak snapshot".into(),
                ),
                chk(
                    "degrades",
                    drop >= th.early_drop,
                    drop,
                    th.early_drop,
                    format!(
                        "last snapshot {:.4} vs peak {:.4}",
                        strong.last_snapshot_test_accuracy, strong.peak_test_accuracy
                    ),
                ),
            ]
        }
    }
}

// ------------------------------------------------------------- pipeline --

/// One scenario's stages, optionally persisted to a run directory. Stages
/// completed on disk are loaded instead of recomputed.
pub struct Pipeline {
    pub scenario: Scenario,
    dir: Option<RunDir>,
    force: bool,
    stamp: Stamp,
    signals: Option<Arc<SignalSet>>,
    evaluator: Option<Arc<Evaluator>>,
    weak_data: Option<Dataset>,
    strong_data: Option<Dataset>,
    weak: Option<WeakOutcome>,
    strong: Option<StrongOutcome>,
    summary: Option<Summary>,
}

impl Pipeline {
    pub fn in_memory(scenario: Scenario) -> Self {
        let stamp = Stamp {
            config_hash: scenario.config.hash(),
            seed: scenario.config.seed,
        };
        Pipeline {
            scenario,
            dir: None,
            force: false,
            stamp,
            signals: None,
            evaluator: None,
            weak_data: None,
            strong_data: None,
            weak: None,
            strong: None,
            summary: None,
        }
    }

    pub fn persisted(
        scenario: Scenario,
        path: &Path,
        command: &[String],
        force: bool,
    ) -> Result<Self> {
        let dir = RunDir::open(path, &scenario.config, command, force)?;
        let mut p = Self::in_memory(scenario);
        p.dir = Some(dir);
        p.force = force;
        Ok(p)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.scenario.config
    }

    pub fn run_dir(&self) -> Option<&RunDir> {
        self.dir.as_ref()
    }

    /// True when the stage must be loaded from disk. Otherwise marks it (and
    /// everything downstream) as in progress.
    fn resume(&mut self, name: &str, explicit: bool) -> Result<bool> {
        let Some(dir) = &mut self.dir else {
            return Ok(false);
        };
        if dir.is_complete(name) && !self.force {
            if explicit {
                return Err(Error::StageComplete(name.to_string()));
            }
            dir.verify(name)?;
            return Ok(true);
        }
        let at = stage::ALL
            .iter()
            .position(|s| *s == name)
            .expect("known stage");
        dir.invalidate(&stage::ALL[at..])?;
        dir.begin(name, true)?;
        Ok(false)
    }

    fn finish(&mut self, name: &str, artifacts: &[&str]) -> Result<()> {
        if let Some(dir) = &mut self.dir {
            dir.complete(name, artifacts)?;
        }
        Ok(())
    }

    fn path(&self, file: &str) -> std::path::PathBuf {
        self.dir.as_ref().expect("persisted pipeline").file(file)
    }

    fn evaluator(&mut self) -> Arc<Evaluator> {
        if let Some(e) = &self.evaluator {
            return e.clone();
        }
        let cfg = &self.scenario.config;
        let e = Arc::new(Evaluator::new(
            self.signals.clone().expect("signals before evaluation"),
            &cfg.data,
            cfg.eval.n_snapshot,
            &SeedStream::new(cfg.seed, Purpose::SnapshotEval),
        ));
        self.evaluator = Some(e.clone());
        e
    }

    fn final_report(&self, model: ModelRef<'_>) -> ErrorReport {
        let cfg = &self.scenario.config;
        mc_test_error(
            model,
            self.signals.as_ref().expect("signals"),
            &cfg.data,
            cfg.eval.n_final,
            &SeedStream::new(cfg.seed, Purpose::Eval),
        )
    }

    /// Signal frame, the labeled weak training set, and the unlabeled strong
    /// training set.
    pub fn data(&mut self, explicit: bool) -> Result<()> {
        if self.weak_data.is_some() && !explicit {
            return Ok(());
        }
        let cfg = self.scenario.config.clone();
        if self.resume(stage::DATA, explicit)? {
            let (signals, _) = io::load_signals(&self.path(files::SIGNALS))?;
            let signals = Arc::new(signals);
            let (wd, _) = io::load_dataset(
                &self.path(files::WEAK_DATA),
                &self.path(files::WEAK_DATA_META),
                signals.clone(),
            )?;
            let (sd, _) = io::load_dataset(
                &self.path(files::STRONG_DATA),
                &self.path(files::STRONG_DATA_META),
                signals.clone(),
            )?;
            self.signals = Some(signals);
            self.weak_data = Some(wd);
            self.strong_data = Some(sd);
            return Ok(());
        }
        let signals = Arc::new(make_signal_set(
            &mut Rng::from_seed(cfg.seed, Purpose::Signals),
            cfg.data.d,
            cfg.data.mu_norm,
            cfg.data.nu_norm,
        )?);
        let wd = generate_dataset(
            &SeedStream::new(cfg.seed, Purpose::WeakData),
            &signals,
            &cfg.data,
            cfg.weak.n,
        );
        let sd = generate_dataset(
            &SeedStream::new(cfg.seed, Purpose::StrongData),
            &signals,
            &cfg.data,
            cfg.strong.n,
        );
        if self.dir.is_some() {
            io::save_signals(&self.path(files::SIGNALS), &signals, self.stamp)?;
            io::save_dataset(
                &self.path(files::WEAK_DATA),
                &self.path(files::WEAK_DATA_META),
                &wd,
                self.stamp,
            )?;
            io::save_dataset(
                &self.path(files::STRONG_DATA),
                &self.path(files::STRONG_DATA_META),
                &sd,
                self.stamp,
            )?;
            self.finish(
                stage::DATA,
                &[
                    files::SIGNALS,
                    files::WEAK_DATA,
                    files::WEAK_DATA_META,
                    files::STRONG_DATA,
                    files::STRONG_DATA_META,
                ],
            )?;
        }
        self.signals = Some(signals);
        self.weak_data = Some(wd);
        self.strong_data = Some(sd);
        self.evaluator = None;
        Ok(())
    }

    pub fn weak(&mut self, explicit: bool) -> Result<&WeakOutcome> {
        if self.weak.is_none() || explicit {
            self.data(false)?;
            let out = if self.resume(stage::WEAK, explicit)? {
                let (model, _) = io::load_weak(&self.path(files::WEAK_MODEL))?;
                WeakOutcome {
                    model,
                    records: io::read_records(&self.path(files::WEAK_RECORDS))?,
                    report: serde_json::from_str(&std::fs::read_to_string(
                        self.path(files::WEAK_REPORT),
                    )?)?,
                }
            } else {
                let cfg = self.scenario.config.clone();
                let eval = self.evaluator();
                let run = train_weak(
                    WeakModel::zeros(cfg.data.d),
                    self.weak_data.as_ref().expect("data stage"),
                    &TrainOptions::weak(&cfg)?,
                    Some(&eval),
                )?;
                log::info!("weak model trained ({} snapshots)", run.records.len());
                let mut report = self.final_report(ModelRef::Weak(&run.model));
                report.analytic =
                    analytic_weak_error(&run.model, self.signals.as_ref().unwrap(), &cfg.data)
                        .analytic;
                let out = WeakOutcome {
                    model: run.model,
                    records: run.records,
                    report,
                };
                if self.dir.is_some() {
                    io::save_weak(&self.path(files::WEAK_MODEL), &out.model, self.stamp)?;
                    io::write_records(&self.path(files::WEAK_RECORDS), &out.records)?;
                    std::fs::write(
                        self.path(files::WEAK_REPORT),
                        serde_json::to_string_pretty(&out.report)? + "\n",
                    )?;
                    self.finish(
                        stage::WEAK,
                        &[files::WEAK_MODEL, files::WEAK_RECORDS, files::WEAK_REPORT],
                    )?;
                }
                out
            };
            self.weak = Some(out);
        }
        Ok(self.weak.as_ref().unwrap())
    }

    /// Attaches the weak model's labels to the strong training set.
    pub fn pseudo(&mut self, explicit: bool) -> Result<&Dataset> {
        let labeled = self
            .strong_data
            .as_ref()
            .is_some_and(|d| d.pseudo_labels.is_some());
        if !labeled || explicit {
            self.weak(false)?;
            let ds = if self.resume(stage::PSEUDO, explicit)? {
                io::load_dataset(
                    &self.path(files::STRONG_DATA),
                    &self.path(files::PSEUDO_META),
                    self.signals.clone().unwrap(),
                )?
                .0
            } else {
                let mut raw = self.strong_data.take().expect("data stage");
                raw.pseudo_labels = None;
                let ds = pseudo_label(raw, &self.weak.as_ref().unwrap().model);
                if self.dir.is_some() {
                    io::write_sidecar(&self.path(files::PSEUDO_META), &ds)?;
                    self.finish(stage::PSEUDO, &[files::STRONG_DATA, files::PSEUDO_META])?;
                }
                ds
            };
            if ds.pseudo_labels.is_none() {
                return Err(Error::MissingPseudoLabels);
            }
            self.strong_data = Some(ds);
        }
        Ok(self.strong_data.as_ref().unwrap())
    }

    pub fn strong(&mut self, explicit: bool) -> Result<&StrongOutcome> {
        if self.strong.is_none() || explicit {
            self.pseudo(false)?;
            let out = if self.resume(stage::STRONG, explicit)? {
                let (model, _) = io::load_strong(&self.path(files::STRONG_MODEL))?;
                StrongOutcome {
                    model,
                    records: io::read_records(&self.path(files::STRONG_RECORDS))?,
                    decomp_rows: Vec::new(),
                    report: serde_json::from_str(&std::fs::read_to_string(
                        self.path(files::STRONG_REPORT),
                    )?)?,
                }
            } else {
                let cfg = self.scenario.config.clone();
                let eval = self.evaluator();
                let init = init_strong(
                    &mut Rng::from_seed(cfg.seed, Purpose::StrongInit),
                    cfg.strong.m,
                    cfg.data.d,
                    cfg.strong.sigma_0,
                );
                let run = train_strong(
                    init,
                    self.strong_data.as_ref().unwrap(),
                    &TrainOptions::strong(&cfg)?,
                    Some(&eval),
                    cfg.strong.precision,
                )?;
                log::info!("strong model trained ({} snapshots)", run.records.len());
                let report = self.final_report(ModelRef::Strong(&run.model));
                let out = StrongOutcome {
                    model: run.model,
                    records: run.records,
                    decomp_rows: run.decomp_rows,
                    report,
                };
                if self.dir.is_some() {
                    io::save_strong(&self.path(files::STRONG_MODEL), &out.model, self.stamp)?;
                    io::write_records(&self.path(files::STRONG_RECORDS), &out.records)?;
                    std::fs::write(
                        self.path(files::STRONG_REPORT),
                        serde_json::to_string_pretty(&out.report)? + "\n",
                    )?;
                    let mut arts = vec![
                        files::STRONG_MODEL,
                        files::STRONG_RECORDS,
                        files::STRONG_REPORT,
                    ];
                    if !out.decomp_rows.is_empty() {
                        io::write_decomp(&self.path(files::STRONG_DECOMP), &out.decomp_rows)?;
                        arts.push(files::STRONG_DECOMP);
                    }
                    self.finish(stage::STRONG, &arts)?;
                }
                out
            };
            self.strong = Some(out);
        }
        Ok(self.strong.as_ref().unwrap())
    }

    /// Summary of whatever stages have run, plus the accuracy plot.
    pub fn report(&mut self) -> Result<&Summary> {
        self.weak(false)?;
        let cfg = self.scenario.config.clone();
        let weak = self.weak.as_ref().unwrap();
        let weak_acc = weak.report.accuracy();
        let train_accuracy = weak.records.last().map_or(f64::NAN, |r| r.acc_true);
        let analytic = analytic_weak_error(&weak.model, self.signals.as_ref().unwrap(), &cfg.data)
            .analytic
            .expect("closed form");
        let strong = self.strong.as_ref().map(strong_summary);
        let mut checks = Vec::new();
        if let (Some(expect), Some(s)) = (self.scenario.expect, &strong) {
            checks = outcome_checks(expect, &self.scenario.thresholds, weak_acc, s);
        }
        let summary = Summary {
            name: cfg.name.clone(),
            seed: cfg.seed,
            config_hash: cfg.hash_hex(),
            expect: self.scenario.expect,
            weak: WeakSummary {
                test: weak.report.clone(),
                test_accuracy: weak_acc,
                analytic,
                train_accuracy,
                iterations: weak.records.last().map_or(0, |r| r.iter),
            },
            flips: self.strong_data.as_ref().and_then(|d| d.flip_stats()),
            strong,
            checks,
            bounds: theorem_bounds(&cfg),
            regime: classify_regime(&cfg),
        };
        if self.dir.is_some() {
            self.resume(stage::REPORT, false).map(|_| ())?;
            std::fs::write(
                self.path(files::SUMMARY),
                serde_json::to_string_pretty(&summary)? + "\n",
            )?;
            let records = self
                .strong
                .as_ref()
                .map_or(&self.weak.as_ref().unwrap().records, |s| &s.records);
            std::fs::write(
                self.path(files::PLOT),
                crate::plot::accuracy_svg(records, Some(weak_acc), &cfg.name),
            )?;
            self.finish(stage::REPORT, &[files::SUMMARY, files::PLOT])?;
        }
        self.summary = Some(summary);
        Ok(self.summary.as_ref().unwrap())
    }

    /// All stages end to end.
    pub fn run(&mut self) -> Result<&Summary> {
        self.strong(false)?;
        self.report()
    }

    pub fn weak_outcome(&self) -> Option<&WeakOutcome> {
        self.weak.as_ref()
    }

    pub fn strong_outcome(&self) -> Option<&StrongOutcome> {
        self.strong.as_ref()
    }

    pub fn signals(&self) -> Option<&Arc<SignalSet>> {
        self.signals.as_ref()
    }

    pub fn strong_dataset(&self) -> Option<&Dataset> {
        self.strong_data.as_ref()
    }
}

/// Runs a scenario end to end, persisting stages under `out` when given.
pub fn run_scenario(scenario: &Scenario, out: Option<&Path>) -> Result<Pipeline> {
    let mut p = match out {
        Some(path) => Pipeline::persisted(scenario.clone(), path, &[], false)?,
        None => Pipeline::in_memory(scenario.clone()),
    };
    p.run()?;
    Ok(p)
}

// ---------------------------------------------------------------- sweep --

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub grid: Vec<usize>,
    pub replicates: usize,
    /// Worker threads; 0 uses the global pool.
    pub parallelism: usize,
    pub n_eval_hard: usize,
}

impl SweepSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let cfg = validate(cfg)?;
        let sw = cfg
            .sweep
            .clone()
            .ok_or_else(|| Error::InvalidConfig("config has no [sweep] section".into()))?;
        let spec = SweepSpec {
            base: cfg,
            grid: sw.n_st,
            replicates: sw.replicates,
            parallelism: sw.parallelism,
            n_eval_hard: sw.n_eval_hard,
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.contains(&0) {
            return Err(Error::InvalidConfig(
                "sweep grid must be non-empty with n_st > 0".into(),
            ));
        }
        if self.replicates == 0 || self.n_eval_hard == 0 {
            return Err(Error::InvalidConfig(
                "sweep needs replicates >= 1 and n_eval_hard >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub cell: usize,
    pub replicate: usize,
    pub n_st: usize,
    pub seed: u64,
    pub hard_error: f64,
    pub hard_se: f64,
    pub final_acc_pseudo: f64,
    pub iterations: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub n_st: usize,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation across replicates (0 for one replicate).
    pub std: f64,
    /// Standard error of `mean`: replicate spread and evaluation noise.
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
    /// Adjacent grid points where the error goes up, with the rise in units
    /// of the combined standard error.
    pub inversions: Vec<(usize, usize, f64)>,
    /// At most one inversion, and it within two standard errors.
    pub monotone: bool,
    pub crossing_threshold: f64,
    /// First grid value whose mean hard-only error is below the threshold.
    pub crossing: Option<usize>,
}

fn train_cell(
    spec: &SweepSpec,
    weak: &WeakModel,
    signals: &Arc<SignalSet>,
    cell: usize,
    rep: usize,
) -> Result<SweepCell> {
    let cfg = &spec.base;
    let n_st = spec.grid[cell];
    let seed = derive_seed(cfg.seed, &[cell as u64, rep as u64]);
    let mut c = cfg.clone();
    c.strong.n = n_st;
    c.strong.track_decomposition = false;
    let ds = pseudo_label(
        generate_dataset(
            &SeedStream::new(seed, Purpose::StrongData),
            signals,
            &c.data,
            n_st,
        ),
        weak,
    );
    let init = init_strong(
        &mut Rng::from_seed(seed, Purpose::StrongInit),
        c.strong.m,
        c.data.d,
        c.strong.sigma_0,
    );
    let mut opts = TrainOptions::strong(&c)?;
    opts.shuffle = Some(SeedStream::new(seed, Purpose::StrongShuffle));
    opts.schedule = SnapshotSchedule {
        every: u64::MAX,
        dense_until: 0,
    };
    let run = train_strong(init, &ds, &opts, None, c.strong.precision)?;
    // Common evaluation draws across cells.
    let (errors, n) = mc_stratum_error(
        ModelRef::Strong(&run.model),
        signals,
        c.data.sigma_p,
        Category::HardOnly,
        spec.n_eval_hard,
        &SeedStream::new(
            cfg.seed,
            Purpose::EvalStratum(Category::HardOnly.index() as u8),
        ),
    );
    let p = errors as f64 / n as f64;
    let last = run.records.last();
    Ok(SweepCell {
        cell,
        replicate: rep,
        n_st,
        seed,
        hard_error: p,
        hard_se: (p * (1.0 - p) / n as f64).sqrt(),
        final_acc_pseudo: last.map_or(f64::NAN, |r| r.acc_pseudo),
        iterations: last.map_or(0, |r| r.iter),
        error: None,
    })
}

/// Trains one strong model per grid cell and replicate on pseudo-labels
/// from the shared `weak` model and records its hard-only test error.
pub fn run_sweep(
    spec: &SweepSpec,
    weak: &WeakModel,
    signals: &Arc<SignalSet>,
) -> Result<SweepSummary> {
    spec.check()?;
    let jobs: Vec<(usize, usize)> = (0..spec.grid.len())
        .flat_map(|c| (0..spec.replicates).map(move |r| (c, r)))
        .collect();
    let work = || -> Vec<SweepCell> {
        jobs.par_iter()
            .map(|&(c, r)| {
                train_cell(spec, weak, signals, c, r).unwrap_or_else(|e| SweepCell {
                    cell: c,
                    replicate: r,
                    n_st: spec.grid[c],
                    seed: derive_seed(spec.base.seed, &[c as u64, r as u64]),
                    hard_error: f64::NAN,
                    hard_se: f64::NAN,
                    final_acc_pseudo: f64::NAN,
                    iterations: 0,
                    error: Some(e.to_string()),
                })
            })
            .collect()
    };
    let mut cells = if spec.parallelism > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(spec.parallelism)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(work)
    } else {
        work()
    };
    cells.sort_by_key(|c| (c.cell, c.replicate));
    Ok(summarize_sweep(spec, cells))
}

pub fn summarize_sweep(spec: &SweepSpec, cells: Vec<SweepCell>) -> SweepSummary {
    let rows: Vec<SweepRow> = spec
        .grid
        .iter()
        .enumerate()
        .map(|(k, &n_st)| {
            let ok: Vec<&SweepCell> = cells
                .iter()
                .filter(|c| c.cell == k && c.error.is_none())
                .collect();
            let r = ok.len();
            if r == 0 {
                return SweepRow {
                    n_st,
                    runs: 0,
                    mean: f64::NAN,
                    std: f64::NAN,
                    se: f64::NAN,
                };
            }
            let mean = ok.iter().map(|c| c.hard_error).sum::<f64>() / r as f64;
            let std = if r > 1 {
                (ok.iter()
                    .map(|c| (c.hard_error - mean).powi(2))
                    .sum::<f64>()
                    / (r - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            let eval_var = ok.iter().map(|c| c.hard_se * c.hard_se).sum::<f64>() / (r * r) as f64;
            SweepRow {
                n_st,
                runs: r,
                mean,
                std,
                se: (std * std / r as f64 + eval_var).sqrt(),
            }
        })
        .collect();
    let mut inversions = Vec::new();
    for w in rows.windows(2) {
        let rise = w[1].mean - w[0].mean;
        if rise > 0.0 {
            let se = (w[0].se.powi(2) + w[1].se.powi(2)).sqrt();
            inversions.push((w[0].n_st, w[1].n_st, rise / se));
        }
    }
    let any_nan = rows.iter().any(|r| !r.mean.is_finite());
    let monotone =
        !any_nan && inversions.len() <= 1 && inversions.iter().all(|&(_, _, z)| z <= 2.0);
    let threshold = 0.12 * spec.base.data.p_h / 2.0;
    SweepSummary {
        crossing: rows.iter().find(|r| r.mean < threshold).map(|r| r.n_st),
        crossing_threshold: threshold,
        cells,
        rows,
        inversions,
        monotone,
    }
}

// ------------------------------------------------------- gradient oracles --

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdCheck {
    /// `max_j |g_j - fd_j| / max_j |g_j|`.
    pub rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn rel_inf(g: &[f64], fd: &[Option<f64>]) -> FdCheck {
    let scale = g.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for (a, b) in g.iter().zip(fd) {
        match b {
            Some(b) => {
                checked += 1;
                worst = worst.max((a - b).abs());
            }
            None => skipped += 1,
        }
    }
    FdCheck {
        rel_error: if scale > 0.0 { worst / scale } else { worst },
        checked,
        skipped,
    }
}

/// Analytic weak gradient against central differences of the mean loss,
/// evaluated with the per-sample forward pass.
pub fn fd_check_weak(model: &WeakModel, ds: &Dataset, h: f64) -> Result<FdCheck> {
    let g = weak_gradient(model, ds)?;
    let loss = |w: &WeakModel| -> f64 {
        ds.samples
            .iter()
            .map(|s| logistic_loss(s.label.sign() * weak_forward(w, s, &ds.signals).unwrap()))
            .sum::<f64>()
            / ds.len() as f64
    };
    let mut w = model.clone();
    let fd = (0..model.dim())
        .map(|j| {
            let x = w.w[j];
            w.w[j] = x + h;
            let up = loss(&w);
            w.w[j] = x - h;
            let down = loss(&w);
            w.w[j] = x;
            Some((up - down) / (2.0 * h))
        })
        .collect::<Vec<_>>();
    Ok(rel_inf(&g, &fd))
}

/// Strong counterpart of [`fd_check_weak`] against the pseudo-labels.
/// Coordinate `(f, j)` is skipped when a step of `h` could move some
/// pre-activation of filter `f` across zero.
pub fn fd_check_strong(model: &StrongModel, ds: &Dataset, h: f64) -> Result<FdCheck> {
    let g = strong_gradient(model, ds)?;
    let targets = ds
        .pseudo_labels
        .as_ref()
        .ok_or(Error::MissingPseudoLabels)?;
    let d = model.d;
    let patches: Vec<[Vec<f64>; 3]> = ds.samples.iter().map(|s| s.patches(&ds.signals)).collect();
    let loss = |m: &StrongModel| -> f64 {
        ds.samples
            .iter()
            .zip(targets)
            .map(|(s, y)| logistic_loss(y.sign() * strong_forward(m, s, &ds.signals).unwrap()))
            .sum::<f64>()
            / ds.len() as f64
    };
    let mut m = model.clone();
    let mut fd = Vec::with_capacity(g.len());
    for f in 0..2 * model.m {
        let w = &model.filters[f * d..(f + 1) * d];
        let pre: Vec<(f64, &Vec<f64>)> = patches
            .iter()
            .flat_map(|ps| ps.iter().map(|x| (crate::linalg::dot(w, x), x)))
            .collect();
        for j in 0..d {
            let near_kink = pre
                .iter()
                .any(|(z, x)| z.abs() <= (2.0 * h * x[j].abs()).max(1e-7));
            if near_kink {
                fd.push(None);
                continue;
            }
            let k = f * d + j;
            let x = m.filters[k];
            m.filters[k] = x + h;
            let up = loss(&m);
            m.filters[k] = x - h;
            let down = loss(&m);
            m.filters[k] = x;
            fd.push(Some((up - down) / (2.0 * h)));
        }
    }
    Ok(rel_inf(&g, &fd))
}

// -------------------------------------------------------- property suite --

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub skipped: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyReport {
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }

    pub fn get(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }

    fn at_most(&mut self, name: &str, measured: f64, threshold: f64, detail: String) {
        self.properties.push(PropertyResult {
            name: name.into(),
            passed: measured <= threshold,
            skipped: false,
            measured,
            threshold,
            detail,
        });
    }

    fn skip(&mut self, name: &str, detail: &str) {
        self.properties.push(PropertyResult {
            name: name.into(),
            passed: true,
            skipped: true,
            measured: f64::NAN,
            threshold: f64::NAN,
            detail: detail.into(),
        });
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Mutation fixture: train (and track) with `-eta`.
    pub flip_eta_sign: bool,
}

pub const RECON_TOL: f64 = 1e-8;
pub const PERM_TOL: f64 = 1e-12;
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL_WEAK: f64 = 1e-6;
pub const FD_TOL_STRONG: f64 = 1e-5;
pub const LOSS_SLACK: f64 = 1e-9;
pub const LOSS_CHECK_ITERS: usize = 200;

/// Random weak model: Gaussian noise-space weights plus random signal
/// components, so every stratum has a non-trivial error.
pub fn random_weak_model(
    rng: &mut Rng,
    signals: &SignalSet,
    noise_scale: f64,
    signal_scale: f64,
) -> WeakModel {
    let d = signals.dim();
    let mut w: Vec<f64> = (0..d)
        .map(|_| noise_scale * rng.normal() / (d as f64).sqrt())
        .collect();
    for base in [
        SignalBase::MuPos,
        SignalBase::MuNeg,
        SignalBase::NuPos,
        SignalBase::NuNeg,
    ] {
        let a = signal_scale * rng.normal();
        crate::linalg::axpy(a, signals.unit(base), &mut w);
    }
    WeakModel::new(w)
}

fn losses_non_increasing(records: &[RunRecord], iters: usize) -> (f64, usize) {
    let mut worst = f64::NEG_INFINITY;
    let mut bad = 0;
    for w in records.windows(2).take(iters) {
        let rise = w[1].loss - w[0].loss;
        worst = worst.max(rise);
        if rise > LOSS_SLACK {
            bad += 1;
        }
    }
    (worst, bad)
}

/// Runs every property on a small full-batch config and reports each with
/// its measured margin.
pub fn verify_suite(cfg: &ExperimentConfig, opts: &VerifyOptions) -> Result<VerifyReport> {
    let cfg = validate(cfg)?;
    let mut rep = VerifyReport::default();
    let sign = if opts.flip_eta_sign { -1.0 } else { 1.0 };
    let signals = Arc::new(make_signal_set(
        &mut Rng::from_seed(cfg.seed, Purpose::Signals),
        cfg.data.d,
        cfg.data.mu_norm,
        cfg.data.nu_norm,
    )?);
    let weak_ds = generate_dataset(
        &SeedStream::new(cfg.seed, Purpose::WeakData),
        &signals,
        &cfg.data,
        cfg.weak.n,
    );
    let full = |eta: f64, budget, track| TrainOptions {
        mode: BatchMode::FullBatch,
        eta,
        budget,
        shuffle: None,
        schedule: SnapshotSchedule {
            every: 1,
            dense_until: 0,
        },
        track_decomposition: track,
        track_rho: true,
    };

    // Weak decomposition.
    let wo = full(sign * cfg.weak.eta, cfg.weak.budget()?, true);
    let wrun = train_weak(WeakModel::zeros(cfg.data.d), &weak_ds, &wo, None)?;
    let worst = |rows: &[DecompRow], key: &str| {
        rows.iter()
            .map(|r| r.get(key).unwrap_or(f64::NAN))
            .fold(
                0.0f64,
                |a, x| if x.is_nan() { f64::INFINITY } else { a.max(x) },
            )
    };
    rep.at_most(
        "weak_reconstruction",
        worst(&wrun.decomp_rows, "recon_err"),
        RECON_TOL,
        format!(
            "max relative error over {} snapshots",
            wrun.decomp_rows.len()
        ),
    );
    rep.at_most(
        "weak_signal_projection",
        worst(&wrun.decomp_rows, "proj_err"),
        RECON_TOL,
        "recursive M, N against projections of w - w0".into(),
    );
    let wd = wrun.decomposition.as_ref().expect("tracked");
    rep.at_most(
        "weak_monotonicity",
        (wd.violations_m + wd.violations_rho) as f64,
        0.0,
        format!(
            "M violations {}, rho violations {}",
            wd.violations_m, wd.violations_rho
        ),
    );
    let (rise, bad) = losses_non_increasing(&wrun.records, LOSS_CHECK_ITERS);
    rep.at_most(
        "weak_loss_non_increasing",
        bad as f64,
        0.0,
        format!("largest one-step rise {rise:.3e} (slack {LOSS_SLACK:e})"),
    );

    // Strong decomposition on pseudo-labels of the trained weak model.
    let strong_ds = pseudo_label(
        generate_dataset(
            &SeedStream::new(cfg.seed, Purpose::StrongData),
            &signals,
            &cfg.data,
            cfg.strong.n,
        ),
        &wrun.model,
    );
    let init = init_strong(
        &mut Rng::from_seed(cfg.seed, Purpose::StrongInit),
        cfg.strong.m,
        cfg.data.d,
        cfg.strong.sigma_0,
    );
    let so = full(sign * cfg.strong.eta, cfg.strong.budget()?, true);
    let srun = train_strong(init.clone(), &strong_ds, &so, None, Precision::F64)?;
    rep.at_most(
        "strong_reconstruction",
        worst(&srun.decomp_rows, "recon_err"),
        RECON_TOL,
        format!(
            "max relative error over {} snapshots",
            srun.decomp_rows.len()
        ),
    );
    let sd = srun.decomposition.as_ref().expect("tracked");
    rep.at_most(
        "strong_monotonicity",
        (sd.violations_rho_bar + sd.violations_rho_under) as f64,
        0.0,
        format!(
            "rho_bar violations {}, rho_under violations {}",
            sd.violations_rho_bar, sd.violations_rho_under
        ),
    );
    let dead = cfg.strong.sigma_0 == 0.0;
    if dead {
        let moved = srun
            .model
            .filters
            .iter()
            .fold(0.0f64, |a, x| a.max(x.abs()));
        let coef = sd
            .mbar
            .iter()
            .chain(&sd.munder)
            .chain(&sd.nbar)
            .chain(&sd.nunder)
            .chain(sd.rho.iter().flatten())
            .fold(0.0f64, |a, x| a.max(x.abs()));
        rep.at_most(
            "dead_init_frozen",
            moved.max(coef),
            0.0,
            "zero init: weights and coefficients stay zero".into(),
        );
        rep.skip("strong_loss_non_increasing", "skipped: zero init");
        rep.skip(
            "strong_gradient_fd",
            "skipped: zero init has no kink-free coordinate",
        );
    } else {
        rep.skip("dead_init_frozen", "skipped: sigma_0 > 0");
        let (rise, bad) = losses_non_increasing(&srun.records, LOSS_CHECK_ITERS);
        rep.at_most(
            "strong_loss_non_increasing",
            bad as f64,
            0.0,
            format!("largest one-step rise {rise:.3e} (slack {LOSS_SLACK:e})"),
        );
    }

    // Each randomized property draws from its own stream, so skipping one
    // does not change the models another one sees.
    let prop_rng = |k: u64| Rng::from_seed(derive_seed(cfg.seed, &[k]), Purpose::Verify);

    // Permutation invariance of both forwards.
    let mut rng = prop_rng(0);
    let probe = generate_dataset(
        &SeedStream::new(cfg.seed, Purpose::Custom(1)),
        &signals,
        &cfg.data,
        200,
    );
    let rand_strong = init_strong(&mut rng, cfg.strong.m, cfg.data.d, 1.0);
    let perms = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut perm_err = 0.0f64;
    for s in &probe.samples {
        let fw = weak_forward(&wrun.model, s, &signals)?;
        let fs = strong_forward(&rand_strong, s, &signals)?;
        for p in perms {
            let q = s.permuted(p);
            let a = (weak_forward(&wrun.model, &q, &signals)? - fw).abs() / fw.abs().max(1.0);
            let b = (strong_forward(&rand_strong, &q, &signals)? - fs).abs() / fs.abs().max(1.0);
            perm_err = perm_err.max(a).max(b);
        }
    }
    rep.at_most(
        "permutation_invariance",
        perm_err,
        PERM_TOL,
        "all 6 patch orders, 200 samples, weak and strong".into(),
    );

    // Gradient oracles.
    let mut rng = prop_rng(1);
    let fd_ds = Dataset::new(
        strong_ds.samples[..8.min(strong_ds.len())].to_vec(),
        signals.clone(),
    );
    let wfd = fd_check_weak(
        &random_weak_model(&mut rng, &signals, 1.0, 2.0),
        &fd_ds,
        FD_STEP,
    )?;
    rep.at_most(
        "weak_gradient_fd",
        wfd.rel_error,
        FD_TOL_WEAK,
        format!("{} coordinates", wfd.checked),
    );
    if !dead {
        let mut lab = fd_ds.clone();
        lab.pseudo_labels = Some(lab.samples.iter().map(|_| rng.label()).collect());
        let probe_model = init_strong(
            &mut rng,
            cfg.strong.m,
            cfg.data.d,
            cfg.strong.sigma_0.max(0.1),
        );
        let sfd = fd_check_strong(&probe_model, &lab, FD_STEP)?;
        rep.at_most(
            "strong_gradient_fd",
            sfd.rel_error,
            FD_TOL_STRONG,
            format!(
                "{} coordinates, {} near a kink skipped",
                sfd.checked, sfd.skipped
            ),
        );
    }

    // Hard-only symmetry of linear models.
    let mut rng = prop_rng(2);
    let n_eval = cfg.eval.n_final.max(1);
    let mut models = vec![wrun.model.clone()];
    for _ in 0..5 {
        models.push(random_weak_model(&mut rng, &signals, 1.0, 2.0));
    }
    let mut worst_z = 0.0f64;
    for (k, w) in models.iter().enumerate() {
        let (e, n) = mc_stratum_error(
            ModelRef::Weak(w),
            &signals,
            cfg.data.sigma_p,
            Category::HardOnly,
            n_eval,
            &SeedStream::new(derive_seed(cfg.seed, &[k as u64]), Purpose::EvalStratum(1)),
        );
        let z = (e as f64 / n as f64 - 0.5).abs() / (0.25 / n as f64).sqrt();
        worst_z = worst_z.max(z);
    }
    rep.at_most(
        "weak_hard_symmetry",
        worst_z,
        3.0,
        format!("|err - 0.5| in binomial sigmas, trained + 5 random models, n = {n_eval}"),
    );

    // Optimal strong construction.
    let opt = construct_optimal_strong(&signals, cfg.strong.m.max(2))?;
    let r = mc_test_error(
        ModelRef::Strong(&opt),
        &signals,
        &cfg.data,
        cfg.eval.n_final,
        &SeedStream::new(cfg.seed, Purpose::Eval),
    );
    rep.at_most(
        "optimal_strong_zero_error",
        r.errors.iter().sum::<usize>() as f64,
        0.0,
        format!("errors on {} draws", r.n()),
    );

    // Closed-form weak error against stratified Monte Carlo.
    let mut rng = prop_rng(3);
    let mut worst_z = 0.0f64;
    for k in 0..10u64 {
        let w = random_weak_model(&mut rng, &signals, 1.0, 2.0);
        let a = analytic_weak_error(&w, &signals, &cfg.data).per_category;
        let mc = stratified_mc_error(
            ModelRef::Weak(&w),
            &signals,
            &cfg.data,
            cfg.eval.n_final,
            derive_seed(cfg.seed, &[100 + k]),
        );
        for ((&ac, &mcc), &n) in a.iter().zip(&mc.per_category).zip(&mc.counts) {
            let sigma = (ac * (1.0 - ac) / n as f64).sqrt();
            let z = (mcc - ac).abs() / sigma.max(1e-300);
            if (mcc - ac).abs() > 1e-12 {
                worst_z = worst_z.max(z);
            }
        }
    }
    rep.at_most(
        "analytic_vs_mc",
        worst_z,
        4.0,
        format!(
            "max deviation in binomial sigmas, 10 models x 3 strata, {} per stratum",
            cfg.eval.n_final
        ),
    );
    Ok(rep)
}
