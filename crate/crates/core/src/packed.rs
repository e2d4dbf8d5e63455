//! Contiguous, precision-generic views of a dataset and the batched forward
//! and gradient kernels built on them.
//!
//! Every patch is either `±v` for one of the four signal vectors or the
//! sample's noise vector, so a filter's pre-activations on a batch reduce to
//! four signal projections per filter plus one GEMM against the batch's
//! noise rows.

use crate::data::{Category, Dataset, Label, Sample, SignalPatch};
use crate::linalg::{gemm_abt, gemm_acc, to_real, Real};
use crate::rng::SignalSet;

/// Noise rows plus per-sample metadata, in element type `T`.
#[derive(Debug, Clone)]
pub struct PackedSet<T> {
    pub d: usize,
    pub noise: Vec<T>,
    pub slots: Vec<[SignalPatch; 2]>,
    /// Supervision (`±1`): pseudo-labels when requested, else true labels.
    pub targets: Vec<f64>,
    pub truth: Vec<Label>,
    pub categories: Vec<Category>,
}

impl<T: Real> PackedSet<T> {
    pub fn from_samples(samples: &[Sample], d: usize, targets: Option<&[Label]>) -> Self {
        let mut noise = Vec::with_capacity(samples.len() * d);
        for s in samples {
            noise.extend(s.noise.iter().map(|&x| T::from_f64(x)));
        }
        let truth: Vec<Label> = samples.iter().map(|s| s.label).collect();
        let targets = match targets {
            Some(t) => t.iter().map(|l| l.sign()).collect(),
            None => truth.iter().map(|l| l.sign()).collect(),
        };
        PackedSet {
            d,
            noise,
            slots: samples.iter().map(|s| s.signals).collect(),
            targets,
            truth,
            categories: samples.iter().map(|s| s.category).collect(),
        }
    }

    /// Packs a dataset supervised by its pseudo-labels (if `pseudo`) or its
    /// true labels.
    pub fn from_dataset(ds: &Dataset, pseudo: bool) -> Self {
        let targets = if pseudo {
            ds.pseudo_labels.as_deref()
        } else {
            None
        };
        Self::from_samples(&ds.samples, ds.dim(), targets)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    #[inline]
    pub fn noise_row(&self, i: usize) -> &[T] {
        &self.noise[i * self.d..(i + 1) * self.d]
    }
}

/// Signal vectors stacked as a 4 x d matrix in `SignalBase` order.
pub fn stacked_bases<T: Real>(signals: &SignalSet) -> Vec<T> {
    to_real(&signals.stacked())
}

#[inline]
fn relu<T: Real>(x: T) -> f64 {
    if x > T::ZERO {
        x.to_f64()
    } else {
        0.0
    }
}

/// Reusable buffers for the strong kernels.
#[derive(Debug, Default)]
pub(crate) struct StrongScratch<T> {
    pub xb: Vec<T>,
    pub z: Vec<T>,
    pub proj: Vec<T>,
    pub coef: Vec<T>,
    pub sig_coef: Vec<T>,
}

/// Pre-activations of all `rows` filters: `z = W X^T` (rows x b) on the
/// noise rows `x` (b x d), and `proj = W B^T` (rows x 4) on the signals.
#[allow(clippy::too_many_arguments)]
fn preactivations<T: Real>(
    w: &[T],
    rows: usize,
    d: usize,
    bases: &[T],
    x: &[T],
    b: usize,
    z: &mut Vec<T>,
    proj: &mut Vec<T>,
) {
    z.resize(rows * b, T::ZERO);
    gemm_abt(rows, d, b, w, x, z);
    proj.resize(rows * 4, T::ZERO);
    gemm_abt(rows, d, 4, w, bases, proj);
}

/// Strong outputs `F_+ - F_-` from pre-activations; sample `k` of the block
/// carries the signal patches `slots(k)`.
fn outputs_from_preacts<T: Real>(
    z: &[T],
    proj: &[T],
    m: usize,
    b: usize,
    slots: impl Fn(usize) -> [SignalPatch; 2],
    out: &mut Vec<f64>,
) {
    out.clear();
    let inv_m = 1.0 / m as f64;
    for k in 0..b {
        let sl = slots(k);
        let mut acc = 0.0;
        for f in 0..2 * m {
            let mut a = relu(z[f * b + k]);
            for sp in sl {
                let pre = proj[f * 4 + sp.base.index()];
                a += relu(if sp.negated { -pre } else { pre });
            }
            if f < m {
                acc += a;
            } else {
                acc -= a;
            }
        }
        out.push(acc * inv_m);
    }
}

const EVAL_CHUNK: usize = 1024;

/// Strong outputs on every sample of `set`.
pub fn strong_outputs<T: Real>(w: &[T], m: usize, bases: &[T], set: &PackedSet<T>) -> Vec<f64> {
    let d = set.d;
    let n = set.len();
    let mut out = Vec::with_capacity(n);
    let (mut z, mut proj, mut buf) = (Vec::new(), Vec::new(), Vec::new());
    for start in (0..n).step_by(EVAL_CHUNK) {
        let b = EVAL_CHUNK.min(n - start);
        let x = &set.noise[start * d..(start + b) * d];
        preactivations(w, 2 * m, d, bases, x, b, &mut z, &mut proj);
        outputs_from_preacts(&z, &proj, m, b, |k| set.slots[start + k], &mut buf);
        out.extend_from_slice(&buf);
    }
    out
}

/// Weak outputs on every sample of `set` (f64 only).
pub fn weak_outputs(w: &[f64], signals: &SignalSet, set: &PackedSet<f64>) -> Vec<f64> {
    let proj = signals.project(w);
    let n = set.len();
    let mut noise_part = vec![0.0; n];
    gemm_abt(1, set.d, n, w, &set.noise, &mut noise_part);
    (0..n)
        .map(|i| {
            let sig: f64 = set.slots[i]
                .iter()
                .map(|sp| sp.sign() * proj[sp.base.index()])
                .sum();
            sig + noise_part[i]
        })
        .collect()
}

/// What a strong step saw, for the decomposition tracker.
#[derive(Debug, Clone)]
pub struct StrongTrace {
    pub batch: Vec<usize>,
    pub g: Vec<f64>,
    /// `<w_f, signal_k>` before the step (rows x 4).
    pub proj: Vec<f64>,
    /// `<w_f, xi_i> > 0` before the step (rows x batch).
    pub noise_active: Vec<bool>,
    pub eta: f64,
}

pub(crate) struct StrongStepOut {
    pub margins: Vec<f64>,
    pub g: Vec<f64>,
    pub losses: Vec<f64>,
    pub trace: Option<StrongTrace>,
}

/// Computes the descent direction `U = -grad L_batch` into `u` (rows x d)
/// and returns the per-sample loss state. Does not touch `w`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn strong_direction<T: Real>(
    w: &[T],
    m: usize,
    bases: &[T],
    set: &PackedSet<T>,
    batch: &[usize],
    sc: &mut StrongScratch<T>,
    u: &mut [T],
    want_trace: bool,
) -> StrongStepOut {
    let d = set.d;
    let rows = 2 * m;
    let b = batch.len();
    sc.xb.resize(b * d, T::ZERO);
    for (k, &i) in batch.iter().enumerate() {
        sc.xb[k * d..(k + 1) * d].copy_from_slice(set.noise_row(i));
    }
    preactivations(w, rows, d, bases, &sc.xb, b, &mut sc.z, &mut sc.proj);
    let mut outputs = Vec::with_capacity(b);
    outputs_from_preacts(&sc.z, &sc.proj, m, b, |k| set.slots[batch[k]], &mut outputs);

    let mut margins = Vec::with_capacity(b);
    let mut g = Vec::with_capacity(b);
    let mut losses = Vec::with_capacity(b);
    for (k, &i) in batch.iter().enumerate() {
        let margin = set.targets[i] * outputs[k];
        margins.push(margin);
        g.push(crate::training::neg_loss_derivative(margin));
        losses.push(crate::training::logistic_loss(margin));
    }

    let scale = 1.0 / (m as f64 * b as f64);
    sc.coef.clear();
    sc.coef.resize(rows * b, T::ZERO);
    let mut sig = vec![0.0f64; rows * 4];
    for f in 0..rows {
        let s = if f < m { 1.0 } else { -1.0 };
        for (k, &i) in batch.iter().enumerate() {
            let c = s * set.targets[i] * g[k] * scale;
            if sc.z[f * b + k] > T::ZERO {
                sc.coef[f * b + k] = T::from_f64(c);
            }
            for sp in set.slots[i] {
                let pre = sc.proj[f * 4 + sp.base.index()];
                let active = if sp.negated {
                    -pre > T::ZERO
                } else {
                    pre > T::ZERO
                };
                if active {
                    sig[f * 4 + sp.base.index()] += c * sp.sign();
                }
            }
        }
    }
    sc.sig_coef.clear();
    sc.sig_coef.extend(sig.iter().map(|&x| T::from_f64(x)));
    u.fill(T::ZERO);
    gemm_acc(rows, b, d, &sc.coef, &sc.xb, u);
    gemm_acc(rows, 4, d, &sc.sig_coef, bases, u);

    let trace = want_trace.then(|| StrongTrace {
        batch: batch.to_vec(),
        g: g.clone(),
        proj: sc.proj.iter().map(|x| x.to_f64()).collect(),
        noise_active: sc.z.iter().map(|&x| x > T::ZERO).collect(),
        eta: f64::NAN,
    });
    StrongStepOut {
        margins,
        g,
        losses,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::data::generate_dataset;
    use crate::models::{init_strong, strong_forward, weak_forward, WeakModel};
    use crate::rng::{make_signal_set, Purpose, Rng, SeedStream};
    use std::sync::Arc;

    #[test]
    fn batched_outputs_match_per_sample_forward() {
        let d = 48;
        let signals = Arc::new(
            make_signal_set(&mut Rng::from_seed(1, Purpose::Signals), d, 0.4, 0.35).unwrap(),
        );
        let dc = ExperimentConfig::reference(1, 1).data;
        let ds = generate_dataset(&SeedStream::new(2, Purpose::WeakData), &signals, &dc, 1500);
        let mut rng = Rng::from_seed(3, Purpose::Custom(0));
        let strong = init_strong(&mut rng, 5, d, 0.3);
        let weak = WeakModel::new((0..d).map(|_| rng.normal()).collect());
        let set = PackedSet::<f64>::from_dataset(&ds, false);
        let bases = stacked_bases::<f64>(&signals);
        let so = strong_outputs(&strong.filters, strong.m, &bases, &set);
        let wo = weak_outputs(&weak.w, &signals, &set);
        for (i, x) in ds.samples.iter().enumerate() {
            let a = strong_forward(&strong, x, &signals).unwrap();
            assert!(
                (a - so[i]).abs() <= 1e-12 * a.abs().max(1e-3),
                "{a} {}",
                so[i]
            );
            let b = weak_forward(&weak, x, &signals).unwrap();
            assert!((b - wo[i]).abs() <= 1e-12 * b.abs().max(1e-3));
        }
        // f32 path agrees to single precision.
        let set32 = PackedSet::<f32>::from_dataset(&ds, false);
        let w32 = to_real::<f32>(&strong.filters);
        let so32 = strong_outputs(&w32, strong.m, &stacked_bases::<f32>(&signals), &set32);
        for (a, b) in so.iter().zip(&so32) {
            assert!((a - b).abs() < 1e-4 * a.abs().max(1e-2));
        }
    }
}
