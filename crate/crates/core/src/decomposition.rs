//! Online signal-noise decomposition of the weights of both models.
//!
//! Weak model:
//! `w = w0 + M_1 mu_1/|mu|^2 - M_-1 mu_-1/|mu|^2 + N_1 nu_1/|nu|^2
//!      - N_-1 nu_-1/|nu|^2 + sum_i y_i rho_i xi_i/|xi_i|^2`.
//!
//! Strong filter `(s, r)`:
//! `w = w0 + Mbar mu_s/|mu|^2 + Munder mu_-s/|mu|^2 + Nbar nu_s/|nu|^2
//!      + Nunder nu_-s/|nu|^2 + sum_i rho_i xi_i/|xi_i|^2`.
//!
//! The coefficients are advanced by their own recursions, driven only by
//! the loss derivatives, clean/flipped index sets and activation
//! indicators, so agreement with the trainer's weights is a real check.

use std::sync::Arc;

use crate::data::{Dataset, SignalPatch};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, norm_sq};
use crate::models::{StrongModel, WeakModel};
use crate::packed::StrongTrace;
use crate::rng::{SignalBase, SignalSet};

/// Value indices into `SignalPatch::VALUES`.
const MU_POS: usize = 0;
const MU_NEG: usize = 1;
const NU_POS: usize = 2;
const NEG_NU_POS: usize = 3;
const NU_NEG: usize = 4;
const NEG_NU_NEG: usize = 5;

/// `C_v^(l)` and `F_v^(l)`: for each of the six signal values `v` and slot
/// `l`, the indices holding `v` in slot `l` whose supervision agrees /
/// disagrees with the true label. Without pseudo-labels every sample is
/// clean and these are the sets `S_v^(l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexSets {
    pub clean: [[Vec<usize>; 2]; 6],
    pub flipped: [[Vec<usize>; 2]; 6],
    /// Per sample: `(value index, flipped)` of each slot.
    membership: Vec<[(usize, bool); 2]>,
}

impl IndexSets {
    /// Uses the pseudo-labels when `pseudo` is set and they exist.
    pub fn build(dataset: &Dataset, pseudo: bool) -> Self {
        let flips = if pseudo { dataset.flip_mask() } else { None };
        let mut clean: [[Vec<usize>; 2]; 6] = Default::default();
        let mut flipped: [[Vec<usize>; 2]; 6] = Default::default();
        let mut membership = Vec::with_capacity(dataset.len());
        for (i, s) in dataset.samples.iter().enumerate() {
            let f = flips.as_ref().is_some_and(|m| m[i]);
            let mut mem = [(0, false); 2];
            for (l, sp) in s.signals.iter().enumerate() {
                let v = sp.value_index();
                if f {
                    flipped[v][l].push(i);
                } else {
                    clean[v][l].push(i);
                }
                mem[l] = (v, f);
            }
            membership.push(mem);
        }
        IndexSets {
            clean,
            flipped,
            membership,
        }
    }

    pub fn len(&self) -> usize {
        self.membership.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membership.is_empty()
    }
}

pub fn build_index_sets(dataset: &Dataset, pseudo: bool) -> IndexSets {
    IndexSets::build(dataset, pseudo)
}

/// Sums of `g` over every `C_v^(l)` and `F_v^(l)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradientMassRecord {
    pub clean: [[f64; 2]; 6],
    pub flipped: [[f64; 2]; 6],
}

impl GradientMassRecord {
    /// Sums restricted to a batch; `g[k]` belongs to sample `batch[k]`.
    pub fn from_batch(sets: &IndexSets, batch: &[usize], g: &[f64]) -> Self {
        let mut r = GradientMassRecord::default();
        for (&i, &gi) in batch.iter().zip(g) {
            for (l, &(v, f)) in sets.membership[i].iter().enumerate() {
                if f {
                    r.flipped[v][l] += gi;
                } else {
                    r.clean[v][l] += gi;
                }
            }
        }
        r
    }

    /// `sum_l (C - F)` for value `v`.
    fn net(&self, v: usize) -> f64 {
        (self.clean[v][0] - self.flipped[v][0]) + (self.clean[v][1] - self.flipped[v][1])
    }

    /// `[clean easy, flipped easy, clean hard, flipped hard]`, summed over
    /// values and slots.
    pub fn by_signal_type(&self) -> [f64; 4] {
        let mut out = [0.0; 4];
        for v in 0..6 {
            let k = if v < 2 { 0 } else { 2 };
            out[k] += self.clean[v][0] + self.clean[v][1];
            out[k + 1] += self.flipped[v][0] + self.flipped[v][1];
        }
        out
    }
}

/// Sums `g` (indexed by sample) over every clean and flipped set.
pub fn record_gradient_mass(g: &[f64], sets: &IndexSets) -> GradientMassRecord {
    let mut r = GradientMassRecord::default();
    for v in 0..6 {
        for l in 0..2 {
            r.clean[v][l] = sets.clean[v][l].iter().map(|&i| g[i]).sum();
            r.flipped[v][l] = sets.flipped[v][l].iter().map(|&i| g[i]).sum();
        }
    }
    r
}

/// One row of decomposition telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompRow {
    pub iter: u64,
    /// Minibatch tracking: the recursions run on per-batch sets and are not
    /// the full-batch statements.
    pub generalized: bool,
    pub fields: Vec<(&'static str, f64)>,
}

impl DecompRow {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.fields
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
    }
}

fn rel_err(w: &[f64], rec: &[f64]) -> f64 {
    let diff: f64 = w
        .iter()
        .zip(rec)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if diff == 0.0 {
        0.0
    } else {
        diff / norm(w).max(norm(rec)).max(f64::MIN_POSITIVE)
    }
}

struct NoiseCache {
    d: usize,
    noise: Vec<f64>,
    norm_sq: Vec<f64>,
}

impl NoiseCache {
    fn new(dataset: &Dataset) -> Self {
        let d = dataset.dim();
        let mut noise = Vec::with_capacity(dataset.len() * d);
        let mut ns = Vec::with_capacity(dataset.len());
        for s in &dataset.samples {
            noise.extend_from_slice(&s.noise);
            ns.push(norm_sq(&s.noise));
        }
        NoiseCache {
            d,
            noise,
            norm_sq: ns,
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.noise[i * self.d..(i + 1) * self.d]
    }

    /// `sum_i c_i xi_i / |xi_i|^2` added into `out`.
    fn accumulate(&self, coef: impl Fn(usize) -> f64, out: &mut [f64]) {
        for (i, &nsq) in self.norm_sq.iter().enumerate() {
            let c = coef(i);
            if c != 0.0 && nsq > 0.0 {
                axpy(c / nsq, self.row(i), out);
            }
        }
    }
}

fn check_batch(n: usize, exact: bool, batch: &[usize], g_len: usize) -> Result<()> {
    if g_len != batch.len() {
        return Err(Error::ModeMismatch(format!(
            "{} loss derivatives for a batch of {}",
            g_len,
            batch.len()
        )));
    }
    if let Some(&i) = batch.iter().find(|&&i| i >= n) {
        return Err(Error::ModeMismatch(format!(
            "batch index {i} outside the tracked dataset of {n}"
        )));
    }
    if exact && batch.len() != n {
        return Err(Error::ModeMismatch(format!(
            "full-batch tracker got a batch of {} out of {n}",
            batch.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- weak --

pub struct WeakDecomp {
    /// `[M_1, M_-1]`.
    pub m: [f64; 2],
    /// `[N_1, N_-1]`.
    pub n: [f64; 2],
    pub rho: Vec<f64>,
    /// Steps where some `M_s` decreased / some `rho_i` decreased.
    pub violations_m: u64,
    pub violations_rho: u64,
    pub steps: u64,
    exact: bool,
    w0: Vec<f64>,
    labels: Vec<f64>,
    sets: IndexSets,
    noise: NoiseCache,
    signals: Arc<SignalSet>,
}

impl WeakDecomp {
    /// `exact` marks full-batch tracking; otherwise the run is generalized.
    pub fn new(model: &WeakModel, dataset: &Dataset, exact: bool) -> Result<Self> {
        if model.dim() != dataset.dim() {
            return Err(Error::DimensionMismatch {
                expected: dataset.dim(),
                got: model.dim(),
            });
        }
        Ok(WeakDecomp {
            m: [0.0; 2],
            n: [0.0; 2],
            rho: vec![0.0; dataset.len()],
            violations_m: 0,
            violations_rho: 0,
            steps: 0,
            exact,
            w0: model.w.clone(),
            labels: dataset.samples.iter().map(|s| s.label.sign()).collect(),
            sets: IndexSets::build(dataset, false),
            noise: NoiseCache::new(dataset),
            signals: dataset.signals.clone(),
        })
    }

    pub fn generalized(&self) -> bool {
        !self.exact
    }

    /// Advances the recursions by one step on `batch` with the trainer's
    /// loss derivatives `g` (batch order).
    pub fn step(&mut self, batch: &[usize], g: &[f64], eta: f64) -> Result<()> {
        check_batch(self.rho.len(), self.exact, batch, g.len())?;
        if batch.is_empty() {
            return Ok(());
        }
        let scale = eta / batch.len() as f64;
        let mu2 = self.signals.mu_norm * self.signals.mu_norm;
        let nu2 = self.signals.nu_norm * self.signals.nu_norm;
        let mass = GradientMassRecord::from_batch(&self.sets, batch, g);
        let old_m = self.m;
        self.m[0] += scale * (mass.clean[MU_POS][0] + mass.clean[MU_POS][1]) * mu2;
        self.m[1] += scale * (mass.clean[MU_NEG][0] + mass.clean[MU_NEG][1]) * mu2;
        self.n[0] += scale * (mass.net(NU_POS) - mass.net(NEG_NU_POS)) * nu2;
        self.n[1] += scale * (mass.net(NU_NEG) - mass.net(NEG_NU_NEG)) * nu2;
        if self.m[0] < old_m[0] || self.m[1] < old_m[1] {
            self.violations_m += 1;
        }
        let mut bad = false;
        for (&i, &gi) in batch.iter().zip(g) {
            let old = self.rho[i];
            self.rho[i] += scale * gi * self.noise.norm_sq[i];
            bad |= self.rho[i] < old;
        }
        self.violations_rho += bad as u64;
        self.steps += 1;
        Ok(())
    }

    pub fn reconstruct(&self) -> Vec<f64> {
        let s = &self.signals;
        let mu2 = s.mu_norm * s.mu_norm;
        let nu2 = s.nu_norm * s.nu_norm;
        let mut w = self.w0.clone();
        axpy(self.m[0] / mu2, s.vector(SignalBase::MuPos), &mut w);
        axpy(-self.m[1] / mu2, s.vector(SignalBase::MuNeg), &mut w);
        axpy(self.n[0] / nu2, s.vector(SignalBase::NuPos), &mut w);
        axpy(-self.n[1] / nu2, s.vector(SignalBase::NuNeg), &mut w);
        self.noise
            .accumulate(|i| self.labels[i] * self.rho[i], &mut w);
        w
    }

    pub fn reconstruction_error(&self, model: &WeakModel) -> f64 {
        rel_err(&model.w, &self.reconstruct())
    }

    /// Largest relative gap between the recursive `M`, `N` and the
    /// projections of `w - w0` on the signals.
    pub fn projection_error(&self, model: &WeakModel) -> f64 {
        let s = &self.signals;
        let delta: Vec<f64> = model.w.iter().zip(&self.w0).map(|(a, b)| a - b).collect();
        let expect = [
            (SignalBase::MuPos, self.m[0]),
            (SignalBase::MuNeg, -self.m[1]),
            (SignalBase::NuPos, self.n[0]),
            (SignalBase::NuNeg, -self.n[1]),
        ];
        let scale = expect
            .iter()
            .map(|(_, v)| v.abs())
            .fold(f64::MIN_POSITIVE, f64::max);
        expect
            .iter()
            .map(|&(b, v)| (dot(&delta, s.vector(b)) - v).abs() / scale)
            .fold(0.0, f64::max)
    }

    pub fn snapshot(&mut self, iter: u64, model: &WeakModel) -> DecompRow {
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for &r in &self.rho {
            lo = lo.min(r);
            hi = hi.max(r);
            sum += r;
        }
        let mean = if self.rho.is_empty() {
            0.0
        } else {
            sum / self.rho.len() as f64
        };
        DecompRow {
            iter,
            generalized: self.generalized(),
            fields: vec![
                ("m_pos", self.m[0]),
                ("m_neg", self.m[1]),
                ("n_pos", self.n[0]),
                ("n_neg", self.n[1]),
                ("rho_mean", mean),
                ("rho_max", if self.rho.is_empty() { 0.0 } else { hi }),
                ("rho_min", if self.rho.is_empty() { 0.0 } else { lo }),
                ("recon_err", self.reconstruction_error(model)),
                ("proj_err", self.projection_error(model)),
                ("violations_m", self.violations_m as f64),
                ("violations_rho", self.violations_rho as f64),
            ],
        }
    }
}

// -------------------------------------------------------------- strong --

pub struct StrongDecomp {
    pub m: usize,
    /// Per filter (row order of `StrongModel`).
    pub mbar: Vec<f64>,
    pub munder: Vec<f64>,
    pub nbar: Vec<f64>,
    pub nunder: Vec<f64>,
    /// `rho[f * n + i]`, absent when rho tracking is off.
    pub rho: Option<Vec<f64>>,
    /// `r in A_s`: `<w0_{s,r}, nu_s> > 0`, frozen at construction.
    pub in_a: Vec<bool>,
    /// Steps where some `rho_bar` decreased / some `rho_under` increased.
    pub violations_rho_bar: u64,
    pub violations_rho_under: u64,
    pub steps: u64,
    pub last_mass: GradientMassRecord,
    exact: bool,
    n: usize,
    w0: Vec<f64>,
    targets: Vec<f64>,
    sets: IndexSets,
    noise: NoiseCache,
    signals: Arc<SignalSet>,
}

fn own_bases(f: usize, m: usize) -> (SignalBase, SignalBase, SignalBase, SignalBase) {
    use SignalBase::*;
    if f < m {
        (MuPos, MuNeg, NuPos, NuNeg)
    } else {
        (MuNeg, MuPos, NuNeg, NuPos)
    }
}

impl StrongDecomp {
    pub fn new(
        model: &StrongModel,
        dataset: &Dataset,
        exact: bool,
        track_rho: bool,
    ) -> Result<Self> {
        if model.d != dataset.dim() {
            return Err(Error::DimensionMismatch {
                expected: dataset.dim(),
                got: model.d,
            });
        }
        let pseudo = dataset
            .pseudo_labels
            .as_ref()
            .ok_or(Error::MissingPseudoLabels)?;
        let rows = 2 * model.m;
        let in_a = (0..rows)
            .map(|f| {
                let (_, _, nu_s, _) = own_bases(f, model.m);
                dot(
                    &model.filters[f * model.d..(f + 1) * model.d],
                    dataset.signals.vector(nu_s),
                ) > 0.0
            })
            .collect();
        Ok(StrongDecomp {
            m: model.m,
            mbar: vec![0.0; rows],
            munder: vec![0.0; rows],
            nbar: vec![0.0; rows],
            nunder: vec![0.0; rows],
            rho: track_rho.then(|| vec![0.0; rows * dataset.len()]),
            in_a,
            violations_rho_bar: 0,
            violations_rho_under: 0,
            steps: 0,
            last_mass: GradientMassRecord::default(),
            exact,
            n: dataset.len(),
            w0: model.filters.clone(),
            targets: pseudo.iter().map(|l| l.sign()).collect(),
            sets: IndexSets::build(dataset, true),
            noise: NoiseCache::new(dataset),
            signals: dataset.signals.clone(),
        })
    }

    pub fn generalized(&self) -> bool {
        !self.exact
    }

    /// Advances every recursion by one step, using the pre-step activation
    /// pattern recorded in `trace`.
    pub fn step(&mut self, trace: &StrongTrace) -> Result<()> {
        let rows = 2 * self.m;
        let b = trace.batch.len();
        check_batch(self.n, self.exact, &trace.batch, trace.g.len())?;
        if trace.proj.len() != rows * 4 || trace.noise_active.len() != rows * b {
            return Err(Error::ModeMismatch(format!(
                "trace shaped for {} filters, tracker has {rows}",
                trace.proj.len() / 4
            )));
        }
        if b == 0 {
            return Ok(());
        }
        let scale = trace.eta / (self.m as f64 * b as f64);
        let mu2 = self.signals.mu_norm * self.signals.mu_norm;
        let nu2 = self.signals.nu_norm * self.signals.nu_norm;
        let mass = GradientMassRecord::from_batch(&self.sets, &trace.batch, &trace.g);
        let net = |v: SignalPatch| mass.net(v.value_index());
        let mut bad_bar = false;
        let mut bad_under = false;
        for f in 0..rows {
            let (mu_s, mu_o, nu_s, nu_o) = own_bases(f, self.m);
            let p = |base: SignalBase| trace.proj[f * 4 + base.index()];
            let ind = |c: bool| if c { 1.0 } else { 0.0 };
            self.mbar[f] += scale * net(SignalPatch::plus(mu_s)) * mu2 * ind(p(mu_s) > 0.0);
            self.munder[f] -= scale * net(SignalPatch::plus(mu_o)) * mu2 * ind(p(mu_o) > 0.0);
            self.nbar[f] += scale * net(SignalPatch::plus(nu_s)) * nu2 * ind(p(nu_s) > 0.0)
                - scale * net(SignalPatch::minus(nu_s)) * nu2 * ind(p(nu_s) < 0.0);
            self.nunder[f] += -scale * net(SignalPatch::plus(nu_o)) * nu2 * ind(p(nu_o) > 0.0)
                + scale * net(SignalPatch::minus(nu_o)) * nu2 * ind(p(nu_o) < 0.0);

            if let Some(rho) = &mut self.rho {
                let s = if f < self.m { 1.0 } else { -1.0 };
                for (k, &i) in trace.batch.iter().enumerate() {
                    if !trace.noise_active[f * b + k] {
                        continue;
                    }
                    let slot = &mut rho[f * self.n + i];
                    let old = *slot;
                    *slot += s * self.targets[i] * scale * trace.g[k] * self.noise.norm_sq[i];
                    if s == self.targets[i] {
                        bad_bar |= *slot < old;
                    } else {
                        bad_under |= *slot > old;
                    }
                }
            }
        }
        self.violations_rho_bar += bad_bar as u64;
        self.violations_rho_under += bad_under as u64;
        self.last_mass = mass;
        self.steps += 1;
        Ok(())
    }

    /// Expansion of filter `f`, or `None` without rho tracking.
    pub fn reconstruct_filter(&self, f: usize) -> Option<Vec<f64>> {
        let rho = self.rho.as_ref()?;
        let d = self.noise.d;
        let s = &self.signals;
        let mu2 = s.mu_norm * s.mu_norm;
        let nu2 = s.nu_norm * s.nu_norm;
        let (mu_s, mu_o, nu_s, nu_o) = own_bases(f, self.m);
        let mut w = self.w0[f * d..(f + 1) * d].to_vec();
        axpy(self.mbar[f] / mu2, s.vector(mu_s), &mut w);
        axpy(self.munder[f] / mu2, s.vector(mu_o), &mut w);
        axpy(self.nbar[f] / nu2, s.vector(nu_s), &mut w);
        axpy(self.nunder[f] / nu2, s.vector(nu_o), &mut w);
        self.noise.accumulate(|i| rho[f * self.n + i], &mut w);
        Some(w)
    }

    /// Largest per-filter relative reconstruction error (NaN without rho).
    pub fn reconstruction_error(&self, model: &StrongModel) -> f64 {
        let d = model.d;
        (0..2 * self.m)
            .map(|f| match self.reconstruct_filter(f) {
                Some(rec) => rel_err(&model.filters[f * d..(f + 1) * d], &rec),
                None => f64::NAN,
            })
            .fold(0.0, |a: f64, b| if b.is_nan() { b } else { a.max(b) })
    }

    pub fn snapshot(&mut self, iter: u64, model: &StrongModel) -> DecompRow {
        let m = self.m;
        let sum = |v: &[f64], range: std::ops::Range<usize>| v[range].iter().sum::<f64>();
        let part = |pos: bool, a: bool| -> f64 {
            let range = if pos { 0..m } else { m..2 * m };
            range
                .filter(|&f| self.in_a[f] == a)
                .map(|f| self.nbar[f])
                .sum()
        };
        let (mut bar_sum, mut bar_n, mut bar_max, mut under_min) =
            (0.0, 0usize, f64::NEG_INFINITY, f64::INFINITY);
        if let Some(rho) = &self.rho {
            for f in 0..2 * m {
                let s = if f < m { 1.0 } else { -1.0 };
                for i in 0..self.n {
                    let r = rho[f * self.n + i];
                    if s == self.targets[i] {
                        bar_sum += r;
                        bar_n += 1;
                        bar_max = bar_max.max(r);
                    } else {
                        under_min = under_min.min(r);
                    }
                }
            }
        }
        let or_nan = |x: f64, ok: bool| if ok { x } else { f64::NAN };
        let [ce, fe, ch, fh] = self.last_mass.by_signal_type();
        DecompRow {
            iter,
            generalized: self.generalized(),
            fields: vec![
                ("mbar_pos", sum(&self.mbar, 0..m)),
                ("mbar_neg", sum(&self.mbar, m..2 * m)),
                ("munder_pos", sum(&self.munder, 0..m)),
                ("munder_neg", sum(&self.munder, m..2 * m)),
                ("nbar_a_pos", part(true, true)),
                ("nbar_b_pos", part(true, false)),
                ("nbar_a_neg", part(false, true)),
                ("nbar_b_neg", part(false, false)),
                ("nunder_pos", sum(&self.nunder, 0..m)),
                ("nunder_neg", sum(&self.nunder, m..2 * m)),
                (
                    "rho_bar_mean",
                    or_nan(bar_sum / bar_n.max(1) as f64, bar_n > 0),
                ),
                ("rho_bar_max", or_nan(bar_max, bar_n > 0)),
                ("rho_under_min", or_nan(under_min, under_min.is_finite())),
                ("mass_clean_easy", ce),
                ("mass_flipped_easy", fe),
                ("mass_clean_hard", ch),
                ("mass_flipped_hard", fh),
                ("recon_err", self.reconstruction_error(model)),
                ("violations_rho_bar", self.violations_rho_bar as f64),
                ("violations_rho_under", self.violations_rho_under as f64),
            ],
        }
    }
}
