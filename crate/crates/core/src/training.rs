//! Logistic-loss objectives and the (S)GD trainers for both models.

use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::config::{Budget, ExperimentConfig, Precision};
use crate::data::Dataset;
use crate::decomposition::{record_gradient_mass, DecompRow, IndexSets, StrongDecomp, WeakDecomp};
use crate::error::{Error, Result};
use crate::evaluation::Evaluator;
use crate::linalg::{axpy, dot, to_real, Real};
use crate::models::{StrongModel, WeakModel};
use crate::packed::{
    stacked_bases, strong_direction, strong_outputs, PackedSet, StrongScratch, StrongTrace,
};
use crate::rng::{Purpose, SeedStream, SignalSet};

/// `log(1 + exp(-z))`, stable for any finite `z`.
pub fn logistic_loss(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `-l'(z) = 1 / (1 + exp(z))`.
pub fn neg_loss_derivative(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Loss-side quantities of one step, in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossState {
    pub g: Vec<f64>,
    pub margins: Vec<f64>,
    pub mean_loss: f64,
}

impl LossState {
    fn from_margins(margins: Vec<f64>) -> Self {
        let g = margins.iter().map(|&z| neg_loss_derivative(z)).collect();
        let mean_loss = mean(margins.iter().map(|&z| logistic_loss(z)));
        LossState {
            g,
            margins,
            mean_loss,
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut k) = (0.0, 0usize);
    for x in xs {
        s += x;
        k += 1;
    }
    if k == 0 {
        0.0
    } else {
        s / k as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    FullBatch,
    Minibatch(usize),
}

impl BatchMode {
    /// `0` means full batch. A batch larger than the dataset is clamped to
    /// `n`: one shuffled batch per epoch.
    pub fn from_size(batch_size: usize, n: usize) -> Self {
        if batch_size == 0 {
            BatchMode::FullBatch
        } else {
            BatchMode::Minibatch(batch_size.min(n.max(1)))
        }
    }

    fn size(self) -> usize {
        match self {
            BatchMode::FullBatch => 0,
            BatchMode::Minibatch(b) => b,
        }
    }
}

/// When metrics are recorded: after every `every`-th epoch, after each of
/// the first `dense_until` epochs, and always at the start and the end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapshotSchedule {
    pub every: u64,
    pub dense_until: u64,
}

impl SnapshotSchedule {
    pub fn hits(&self, epoch: u64) -> bool {
        epoch <= self.dense_until || epoch.is_multiple_of(self.every.max(1))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub mode: BatchMode,
    pub eta: f64,
    pub budget: Budget,
    /// Per-epoch shuffle stream (item = epoch); `None` keeps index order.
    pub shuffle: Option<SeedStream>,
    pub schedule: SnapshotSchedule,
    pub track_decomposition: bool,
    pub track_rho: bool,
}

impl TrainOptions {
    pub fn weak(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(TrainOptions {
            mode: BatchMode::from_size(cfg.weak.batch_size, cfg.weak.n),
            eta: cfg.weak.eta,
            budget: cfg.weak.budget()?,
            shuffle: Some(SeedStream::new(cfg.seed, Purpose::WeakShuffle)),
            schedule: SnapshotSchedule {
                every: cfg.eval.snapshot_every,
                dense_until: cfg.eval.dense_until,
            },
            track_decomposition: false,
            track_rho: true,
        })
    }

    pub fn strong(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(TrainOptions {
            mode: BatchMode::from_size(cfg.strong.batch_size, cfg.strong.n),
            eta: cfg.strong.eta,
            budget: cfg.strong.budget()?,
            shuffle: Some(SeedStream::new(cfg.seed, Purpose::StrongShuffle)),
            schedule: SnapshotSchedule {
                every: cfg.eval.snapshot_every,
                dense_until: cfg.eval.dense_until,
            },
            track_decomposition: cfg.strong.track_decomposition,
            track_rho: cfg.strong.track_rho,
        })
    }
}

/// Metrics at one snapshot. Errors are NaN when no evaluator is attached;
/// `acc_pseudo` is accuracy against the supervision actually used (true
/// labels for the weak model).
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub iter: u64,
    pub epoch: f64,
    pub loss: f64,
    pub acc_pseudo: f64,
    pub acc_true: f64,
    pub err_easy: f64,
    pub err_hard: f64,
    pub err_both: f64,
    pub err_all: f64,
    /// Largest minus smallest training margin.
    pub margin_spread: f64,
    /// Sum of g over clean / flipped samples carrying an easy / hard signal
    /// (one term per slot).
    pub mass_clean_easy: f64,
    pub mass_flipped_easy: f64,
    pub mass_clean_hard: f64,
    pub mass_flipped_hard: f64,
}

impl RunRecord {
    pub const COLUMNS: [&'static str; 14] = [
        "iter",
        "epoch",
        "loss",
        "acc_pseudo",
        "acc_true",
        "err_easy",
        "err_hard",
        "err_both",
        "err_all",
        "margin_spread",
        "mass_clean_easy",
        "mass_flipped_easy",
        "mass_clean_hard",
        "mass_flipped_hard",
    ];

    pub fn values(&self) -> [f64; 14] {
        [
            self.iter as f64,
            self.epoch,
            self.loss,
            self.acc_pseudo,
            self.acc_true,
            self.err_easy,
            self.err_hard,
            self.err_both,
            self.err_all,
            self.margin_spread,
            self.mass_clean_easy,
            self.mass_flipped_easy,
            self.mass_clean_hard,
            self.mass_flipped_hard,
        ]
    }

    pub fn from_values(v: &[f64]) -> Result<Self> {
        if v.len() != Self::COLUMNS.len() {
            return Err(Error::SchemaError(format!(
                "run record has {} fields, expected {}",
                v.len(),
                Self::COLUMNS.len()
            )));
        }
        Ok(RunRecord {
            iter: v[0] as u64,
            epoch: v[1],
            loss: v[2],
            acc_pseudo: v[3],
            acc_true: v[4],
            err_easy: v[5],
            err_hard: v[6],
            err_both: v[7],
            err_all: v[8],
            margin_spread: v[9],
            mass_clean_easy: v[10],
            mass_flipped_easy: v[11],
            mass_clean_hard: v[12],
            mass_flipped_hard: v[13],
        })
    }

    pub fn test_acc(&self) -> f64 {
        1.0 - self.err_all
    }
}

/// Builds a snapshot record from full-train-set outputs.
fn train_record(
    iter: u64,
    epoch: f64,
    outputs: &[f64],
    targets: &[f64],
    truth: &[f64],
    sets: &IndexSets,
    eval: Option<[f64; 4]>,
) -> RunRecord {
    let n = outputs.len();
    let margins: Vec<f64> = outputs.iter().zip(targets).map(|(f, y)| f * y).collect();
    let loss = mean(margins.iter().map(|&z| logistic_loss(z)));
    let frac = |hits: usize| {
        if n == 0 {
            f64::NAN
        } else {
            hits as f64 / n as f64
        }
    };
    let acc_pseudo = frac(margins.iter().filter(|&&z| z > 0.0).count());
    let acc_true = frac(
        outputs
            .iter()
            .zip(truth)
            .filter(|(f, y)| **f * **y > 0.0)
            .count(),
    );
    let spread = if n == 0 {
        0.0
    } else {
        let lo = margins.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    let g: Vec<f64> = margins.iter().map(|&z| neg_loss_derivative(z)).collect();
    let mass = record_gradient_mass(&g, sets);
    let [ce, fe, ch, fh] = mass.by_signal_type();
    let [err_easy, err_hard, err_both, err_all] = eval.unwrap_or([f64::NAN; 4]);
    RunRecord {
        iter,
        epoch,
        loss,
        acc_pseudo,
        acc_true,
        err_easy,
        err_hard,
        err_both,
        err_all,
        margin_spread: spread,
        mass_clean_easy: ce,
        mass_flipped_easy: fe,
        mass_clean_hard: ch,
        mass_flipped_hard: fh,
    }
}

trait Stepper {
    fn step(&mut self, batch: &[usize], eta: f64) -> Result<()>;
    fn snapshot(&mut self, iter: u64, epoch: f64) -> Result<()>;
}

/// Runs the iteration budget, calling `snapshot` per the schedule.
fn drive<S: Stepper>(s: &mut S, n: usize, opts: &TrainOptions) -> Result<()> {
    let b = opts.mode.size();
    if let BatchMode::Minibatch(size) = opts.mode {
        if size == 0 || size > n {
            return Err(Error::InvalidConfig(format!(
                "minibatch size {size} must lie in [1, {n}]"
            )));
        }
    }
    let total = opts.budget.total_iterations(n, b);
    let per_epoch = crate::config::batches_per_epoch(n, b).max(1);
    s.snapshot(0, 0.0)?;
    if n == 0 || total == 0 {
        return Ok(());
    }
    let mut iter = 0u64;
    let mut epoch = 0u64;
    let mut order: Vec<usize> = (0..n).collect();
    let chunk = if b == 0 { n } else { b };
    while iter < total {
        if let Some(stream) = &opts.shuffle {
            if opts.mode != BatchMode::FullBatch {
                order.sort_unstable();
                order.shuffle(&mut stream.item(epoch));
            }
        }
        for batch in order.chunks(chunk) {
            s.step(batch, opts.eta)?;
            iter += 1;
            if iter == total {
                break;
            }
        }
        let finished = iter.is_multiple_of(per_epoch);
        if finished {
            epoch += 1;
        }
        let last = iter == total;
        if (finished && opts.schedule.hits(epoch)) || last {
            s.snapshot(iter, iter as f64 / per_epoch as f64)?;
        }
        if !finished {
            break;
        }
    }
    Ok(())
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

// ---------------------------------------------------------------- weak --

/// Descent direction `-grad` of the batch loss for the weak model.
fn weak_direction(
    w: &[f64],
    signals: &SignalSet,
    set: &PackedSet<f64>,
    batch: &[usize],
    u: &mut [f64],
) -> Vec<f64> {
    let proj = signals.project(w);
    let margins: Vec<f64> = batch
        .iter()
        .map(|&i| {
            let sig: f64 = set.slots[i]
                .iter()
                .map(|sp| sp.sign() * proj[sp.base.index()])
                .sum();
            set.targets[i] * (sig + dot(w, set.noise_row(i)))
        })
        .collect();
    u.fill(0.0);
    let inv_b = 1.0 / batch.len() as f64;
    let mut sig = [0.0f64; 4];
    for (k, &i) in batch.iter().enumerate() {
        let c = set.targets[i] * neg_loss_derivative(margins[k]) * inv_b;
        axpy(c, set.noise_row(i), u);
        for sp in set.slots[i] {
            sig[sp.base.index()] += c * sp.sign();
        }
    }
    for base in crate::rng::SignalBase::ALL {
        axpy(sig[base.index()], signals.vector(base), u);
    }
    margins
}

/// One weak step on `batch` against the true labels.
pub fn weak_step(
    model: &WeakModel,
    dataset: &Dataset,
    batch: &[usize],
    eta: f64,
) -> Result<(WeakModel, LossState)> {
    check_dim(dataset.dim(), model.dim())?;
    let set = PackedSet::<f64>::from_dataset(dataset, false);
    let mut u = vec![0.0; model.dim()];
    let margins = weak_direction(&model.w, &dataset.signals, &set, batch, &mut u);
    let mut next = model.clone();
    axpy(eta, &u, &mut next.w);
    Ok((next, LossState::from_margins(margins)))
}

/// Mean logistic loss of the weak model on the true labels.
pub fn weak_loss(model: &WeakModel, dataset: &Dataset) -> Result<f64> {
    check_dim(dataset.dim(), model.dim())?;
    let set = PackedSet::<f64>::from_dataset(dataset, false);
    let out = crate::packed::weak_outputs(&model.w, &dataset.signals, &set);
    Ok(mean(
        out.iter()
            .zip(&set.targets)
            .map(|(f, y)| logistic_loss(f * y)),
    ))
}

/// Full-batch gradient of `weak_loss`.
pub fn weak_gradient(model: &WeakModel, dataset: &Dataset) -> Result<Vec<f64>> {
    check_dim(dataset.dim(), model.dim())?;
    let set = PackedSet::<f64>::from_dataset(dataset, false);
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut u = vec![0.0; model.dim()];
    if !all.is_empty() {
        weak_direction(&model.w, &dataset.signals, &set, &all, &mut u);
    }
    Ok(u.into_iter().map(|x| -x).collect())
}

pub struct WeakRun {
    pub model: WeakModel,
    pub records: Vec<RunRecord>,
    pub decomposition: Option<WeakDecomp>,
    pub decomp_rows: Vec<DecompRow>,
}

struct WeakStepper<'a> {
    w: Vec<f64>,
    u: Vec<f64>,
    signals: Arc<SignalSet>,
    set: PackedSet<f64>,
    truth: Vec<f64>,
    sets: IndexSets,
    eval: Option<&'a Evaluator>,
    records: Vec<RunRecord>,
    tracker: Option<WeakDecomp>,
    rows: Vec<DecompRow>,
}

impl Stepper for WeakStepper<'_> {
    fn step(&mut self, batch: &[usize], eta: f64) -> Result<()> {
        let margins = weak_direction(&self.w, &self.signals, &self.set, batch, &mut self.u);
        axpy(eta, &self.u, &mut self.w);
        if let Some(t) = &mut self.tracker {
            let g: Vec<f64> = margins.iter().map(|&z| neg_loss_derivative(z)).collect();
            t.step(batch, &g, eta)?;
        }
        Ok(())
    }

    fn snapshot(&mut self, iter: u64, epoch: f64) -> Result<()> {
        let out = crate::packed::weak_outputs(&self.w, &self.signals, &self.set);
        let model = WeakModel::new(self.w.clone());
        let eval = self.eval.map(|e| e.weak_errors(&model).as_array());
        self.records.push(train_record(
            iter,
            epoch,
            &out,
            &self.set.targets,
            &self.truth,
            &self.sets,
            eval,
        ));
        if let Some(t) = &mut self.tracker {
            self.rows.push(t.snapshot(iter, &model));
        }
        Ok(())
    }
}

/// Trains the weak model on the true labels of `dataset`.
pub fn train_weak(
    model: WeakModel,
    dataset: &Dataset,
    opts: &TrainOptions,
    eval: Option<&Evaluator>,
) -> Result<WeakRun> {
    check_dim(dataset.dim(), model.dim())?;
    let set = PackedSet::<f64>::from_dataset(dataset, false);
    let tracker = if opts.track_decomposition {
        Some(WeakDecomp::new(
            &model,
            dataset,
            opts.mode == BatchMode::FullBatch,
        )?)
    } else {
        None
    };
    let mut st = WeakStepper {
        u: vec![0.0; model.dim()],
        w: model.w,
        signals: dataset.signals.clone(),
        truth: set.targets.clone(),
        set,
        sets: IndexSets::build(dataset, false),
        eval,
        records: Vec::new(),
        tracker,
        rows: Vec::new(),
    };
    drive(&mut st, dataset.len(), opts)?;
    Ok(WeakRun {
        model: WeakModel::new(st.w),
        records: st.records,
        decomposition: st.tracker,
        decomp_rows: st.rows,
    })
}

// -------------------------------------------------------------- strong --

/// Strong model weights in element type `T` together with its packed
/// pseudo-labeled training set.
pub struct StrongTrainer<T: Real> {
    m: usize,
    d: usize,
    w: Vec<T>,
    u: Vec<T>,
    bases: Vec<T>,
    set: PackedSet<T>,
    sc: StrongScratch<T>,
}

impl<T: Real> StrongTrainer<T> {
    pub fn new(model: &StrongModel, dataset: &Dataset) -> Result<Self> {
        check_dim(dataset.dim(), model.d)?;
        if dataset.pseudo_labels.is_none() {
            return Err(Error::MissingPseudoLabels);
        }
        Ok(StrongTrainer {
            m: model.m,
            d: model.d,
            w: to_real(&model.filters),
            u: vec![T::ZERO; model.filters.len()],
            bases: stacked_bases(&dataset.signals),
            set: PackedSet::from_dataset(dataset, true),
            sc: StrongScratch::default(),
        })
    }

    /// One step on `batch`; returns the margins and, if asked, the trace.
    pub fn step(
        &mut self,
        batch: &[usize],
        eta: f64,
        trace: bool,
    ) -> (LossState, Option<StrongTrace>) {
        let out = strong_direction(
            &self.w,
            self.m,
            &self.bases,
            &self.set,
            batch,
            &mut self.sc,
            &mut self.u,
            trace,
        );
        let e = T::from_f64(eta);
        for (w, &u) in self.w.iter_mut().zip(&self.u) {
            *w += e * u;
        }
        let trace = out.trace.map(|mut t| {
            t.eta = eta;
            t
        });
        let mean_loss = mean(out.losses.iter().copied());
        (
            LossState {
                g: out.g,
                margins: out.margins,
                mean_loss,
            },
            trace,
        )
    }

    /// Descent direction of the full-batch loss, without stepping.
    fn direction(&mut self) -> Vec<T> {
        let all: Vec<usize> = (0..self.set.len()).collect();
        if !all.is_empty() {
            strong_direction(
                &self.w,
                self.m,
                &self.bases,
                &self.set,
                &all,
                &mut self.sc,
                &mut self.u,
                false,
            );
        } else {
            self.u.fill(T::ZERO);
        }
        self.u.clone()
    }

    pub fn outputs(&self) -> Vec<f64> {
        strong_outputs(&self.w, self.m, &self.bases, &self.set)
    }

    pub fn model(&self) -> StrongModel {
        StrongModel {
            m: self.m,
            d: self.d,
            filters: self.w.iter().map(|x| x.to_f64()).collect(),
        }
    }
}

/// One strong step on `batch` against the pseudo-labels.
pub fn strong_step(
    model: &StrongModel,
    dataset: &Dataset,
    batch: &[usize],
    eta: f64,
) -> Result<(StrongModel, LossState)> {
    let mut tr = StrongTrainer::<f64>::new(model, dataset)?;
    let (loss, _) = tr.step(batch, eta, false);
    Ok((tr.model(), loss))
}

/// Mean logistic loss of the strong model on the pseudo-labels.
pub fn strong_loss(model: &StrongModel, dataset: &Dataset) -> Result<f64> {
    let tr = StrongTrainer::<f64>::new(model, dataset)?;
    let out = tr.outputs();
    Ok(mean(
        out.iter()
            .zip(&tr.set.targets)
            .map(|(f, y)| logistic_loss(f * y)),
    ))
}

/// Full-batch gradient of `strong_loss` (filters layout), with the
/// subgradient 0 at ReLU kinks.
pub fn strong_gradient(model: &StrongModel, dataset: &Dataset) -> Result<Vec<f64>> {
    let mut tr = StrongTrainer::<f64>::new(model, dataset)?;
    Ok(tr.direction().into_iter().map(|x| -x).collect())
}

pub struct StrongRun {
    pub model: StrongModel,
    pub records: Vec<RunRecord>,
    pub decomposition: Option<StrongDecomp>,
    pub decomp_rows: Vec<DecompRow>,
}

struct StrongStepper<'a, T: Real> {
    tr: StrongTrainer<T>,
    truth: Vec<f64>,
    sets: IndexSets,
    eval: Option<&'a Evaluator>,
    records: Vec<RunRecord>,
    tracker: Option<StrongDecomp>,
    rows: Vec<DecompRow>,
}

impl<T: Real> Stepper for StrongStepper<'_, T> {
    fn step(&mut self, batch: &[usize], eta: f64) -> Result<()> {
        let (_, trace) = self.tr.step(batch, eta, self.tracker.is_some());
        if let (Some(t), Some(trace)) = (&mut self.tracker, trace) {
            t.step(&trace)?;
        }
        Ok(())
    }

    fn snapshot(&mut self, iter: u64, epoch: f64) -> Result<()> {
        let out = self.tr.outputs();
        let model = self.tr.model();
        let eval = self.eval.map(|e| e.strong_errors(&model).as_array());
        self.records.push(train_record(
            iter,
            epoch,
            &out,
            &self.tr.set.targets,
            &self.truth,
            &self.sets,
            eval,
        ));
        if let Some(t) = &mut self.tracker {
            self.rows.push(t.snapshot(iter, &model));
        }
        log::debug!("strong iter {iter}: {:?}", self.records.last());
        Ok(())
    }
}

fn run_strong<T: Real>(
    model: StrongModel,
    dataset: &Dataset,
    opts: &TrainOptions,
    eval: Option<&Evaluator>,
) -> Result<StrongRun> {
    let tracker = if opts.track_decomposition {
        Some(StrongDecomp::new(
            &model,
            dataset,
            opts.mode == BatchMode::FullBatch,
            opts.track_rho,
        )?)
    } else {
        None
    };
    let mut st = StrongStepper {
        tr: StrongTrainer::<T>::new(&model, dataset)?,
        truth: dataset.samples.iter().map(|s| s.label.sign()).collect(),
        sets: IndexSets::build(dataset, true),
        eval,
        records: Vec::new(),
        tracker,
        rows: Vec::new(),
    };
    drive(&mut st, dataset.len(), opts)?;
    Ok(StrongRun {
        model: st.tr.model(),
        records: st.records,
        decomposition: st.tracker,
        decomp_rows: st.rows,
    })
}

/// Trains the strong model on the pseudo-labels of `dataset`, carrying the
/// weights in the requested precision.
pub fn train_strong(
    model: StrongModel,
    dataset: &Dataset,
    opts: &TrainOptions,
    eval: Option<&Evaluator>,
    precision: Precision,
) -> Result<StrongRun> {
    match precision {
        Precision::F64 => run_strong::<f64>(model, dataset, opts, eval),
        Precision::F32 if opts.track_decomposition => Err(Error::ModeMismatch(
            "decomposition tracking needs f64 weights".into(),
        )),
        Precision::F32 => run_strong::<f32>(model, dataset, opts, eval),
    }
}
