//! The patch-structured data distribution, datasets, and pseudo-labeling.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::models::{weak_forward, WeakModel};
use crate::rng::{fill_projected_noise, Rng, SeedStream, SignalBase, SignalSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "1")]
    Pos,
    #[serde(rename = "-1")]
    Neg,
}

impl Label {
    pub const BOTH: [Label; 2] = [Label::Pos, Label::Neg];

    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Label::Pos => 1.0,
            Label::Neg => -1.0,
        }
    }

    #[inline]
    pub fn flip(self) -> Label {
        match self {
            Label::Pos => Label::Neg,
            Label::Neg => Label::Pos,
        }
    }

    /// `sign(x)` with `sign(0) = +1`.
    #[inline]
    pub fn from_output(x: f64) -> Label {
        if x >= 0.0 {
            Label::Pos
        } else {
            Label::Neg
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Label::Pos => 1,
            Label::Neg => -1,
        }
    }

    pub fn from_i8(v: i8) -> Option<Label> {
        match v {
            1 => Some(Label::Pos),
            -1 => Some(Label::Neg),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_i8())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    EasyOnly,
    HardOnly,
    BothSignal,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::EasyOnly, Category::HardOnly, Category::BothSignal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::EasyOnly => "easy",
            Category::HardOnly => "hard",
            Category::BothSignal => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn probability(self, dc: &DataConfig) -> f64 {
        match self {
            Category::EasyOnly => dc.p_e,
            Category::HardOnly => dc.p_h,
            Category::BothSignal => dc.p_b,
        }
    }
}

/// A signal patch `±v` with `v` one of the four signal vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SignalPatch {
    pub base: SignalBase,
    pub negated: bool,
}

impl SignalPatch {
    pub fn plus(base: SignalBase) -> Self {
        SignalPatch {
            base,
            negated: false,
        }
    }

    pub fn minus(base: SignalBase) -> Self {
        SignalPatch {
            base,
            negated: true,
        }
    }

    #[inline]
    pub fn sign(self) -> f64 {
        if self.negated {
            -1.0
        } else {
            1.0
        }
    }

    /// The six values a signal slot can take:
    /// `mu_1, mu_-1, nu_1, -nu_1, nu_-1, -nu_-1`.
    pub const VALUES: [SignalPatch; 6] = [
        SignalPatch {
            base: SignalBase::MuPos,
            negated: false,
        },
        SignalPatch {
            base: SignalBase::MuNeg,
            negated: false,
        },
        SignalPatch {
            base: SignalBase::NuPos,
            negated: false,
        },
        SignalPatch {
            base: SignalBase::NuPos,
            negated: true,
        },
        SignalPatch {
            base: SignalBase::NuNeg,
            negated: false,
        },
        SignalPatch {
            base: SignalBase::NuNeg,
            negated: true,
        },
    ];

    pub fn value_index(self) -> usize {
        Self::VALUES
            .iter()
            .position(|v| *v == self)
            .expect("signal patch is one of the six admissible values")
    }

    pub fn name(self) -> &'static str {
        ["mu1", "mu-1", "nu1", "-nu1", "nu-1", "-nu-1"][self.value_index()]
    }

    pub fn parse(s: &str) -> Option<SignalPatch> {
        Self::VALUES.into_iter().find(|v| v.name() == s)
    }
}

/// What occupies a patch position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    First,
    Second,
    Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: Label,
    pub category: Category,
    /// `(v1, v2)` in draw order.
    pub signals: [SignalPatch; 2],
    /// Patch positions after shuffling.
    pub layout: [Slot; 3],
    pub noise: Vec<f64>,
}

impl Sample {
    pub fn noise_slot(&self) -> usize {
        self.layout
            .iter()
            .position(|s| *s == Slot::Noise)
            .expect("exactly one noise slot")
    }

    pub fn dim(&self) -> usize {
        self.noise.len()
    }

    /// Materializes patch `p`.
    pub fn patch(&self, p: usize, signals: &SignalSet) -> Vec<f64> {
        match self.layout[p] {
            Slot::Noise => self.noise.clone(),
            Slot::First | Slot::Second => {
                let sp = self.signal_at(p).expect("signal slot");
                signals
                    .vector(sp.base)
                    .iter()
                    .map(|x| sp.sign() * x)
                    .collect()
            }
        }
    }

    pub fn patches(&self, signals: &SignalSet) -> [Vec<f64>; 3] {
        [0, 1, 2].map(|p| self.patch(p, signals))
    }

    /// The signal occupying position `p`, if any.
    pub fn signal_at(&self, p: usize) -> Option<SignalPatch> {
        match self.layout[p] {
            Slot::First => Some(self.signals[0]),
            Slot::Second => Some(self.signals[1]),
            Slot::Noise => None,
        }
    }

    /// The same sample with its patches reordered: new position `q` holds
    /// old position `perm[q]`.
    pub fn permuted(&self, perm: [usize; 3]) -> Sample {
        let mut s = self.clone();
        s.layout = perm.map(|p| self.layout[p]);
        s
    }
}

fn category_signals(rng: &mut Rng, y: Label, category: Category) -> [SignalPatch; 2] {
    let mu = SignalPatch::plus(SignalBase::easy(y));
    let nu = SignalPatch::plus(SignalBase::hard(y));
    let neg_nu = SignalPatch::minus(SignalBase::hard(y));
    match category {
        Category::EasyOnly => [mu, mu],
        Category::HardOnly => {
            [[nu, nu], [nu, neg_nu], [neg_nu, nu], [neg_nu, neg_nu]][rng.below(4)]
        }
        Category::BothSignal => [[mu, nu], [mu, neg_nu], [nu, mu], [neg_nu, mu]][rng.below(4)],
    }
}

fn shuffled_layout(rng: &mut Rng) -> [Slot; 3] {
    let mut layout = [Slot::First, Slot::Second, Slot::Noise];
    for i in (1..3).rev() {
        let j = rng.below(i + 1);
        layout.swap(i, j);
    }
    layout
}

fn draw_category(rng: &mut Rng, dc: &DataConfig) -> Category {
    let u = rng.uniform();
    if u < dc.p_e {
        Category::EasyOnly
    } else if u < dc.p_e + dc.p_h {
        Category::HardOnly
    } else {
        Category::BothSignal
    }
}

/// One draw `(X, y) ~ D`.
pub fn sample_example(rng: &mut Rng, signals: &SignalSet, dc: &DataConfig) -> Sample {
    let label = rng.label();
    let category = draw_category(rng, dc);
    finish_sample(rng, signals, dc.sigma_p, label, category)
}

/// One draw from `D` conditioned on the category.
pub fn sample_in_category(
    rng: &mut Rng,
    signals: &SignalSet,
    sigma_p: f64,
    category: Category,
) -> Sample {
    let label = rng.label();
    finish_sample(rng, signals, sigma_p, label, category)
}

fn finish_sample(
    rng: &mut Rng,
    signals: &SignalSet,
    sigma_p: f64,
    label: Label,
    category: Category,
) -> Sample {
    let pair = category_signals(rng, label, category);
    let mut noise = vec![0.0; signals.dim()];
    fill_projected_noise(rng, signals, sigma_p, &mut noise);
    let layout = shuffled_layout(rng);
    Sample {
        label,
        category,
        signals: pair,
        layout,
        noise,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub pseudo_labels: Option<Vec<Label>>,
    pub signals: Arc<SignalSet>,
}

/// Flip counts of pseudo-labels against true labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FlipStats {
    pub flipped: [usize; 3],
    pub total: [usize; 3],
}

impl FlipStats {
    pub fn rate(&self, c: Category) -> f64 {
        let t = self.total[c.index()];
        if t == 0 {
            0.0
        } else {
            self.flipped[c.index()] as f64 / t as f64
        }
    }

    pub fn overall(&self) -> f64 {
        let t: usize = self.total.iter().sum();
        if t == 0 {
            0.0
        } else {
            self.flipped.iter().sum::<usize>() as f64 / t as f64
        }
    }
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, signals: Arc<SignalSet>) -> Self {
        Dataset {
            samples,
            pseudo_labels: None,
            signals,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.signals.dim()
    }

    pub fn true_labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// `pseudo[i] != y[i]`, or `None` without pseudo-labels.
    pub fn flip_mask(&self) -> Option<Vec<bool>> {
        self.pseudo_labels.as_ref().map(|p| {
            p.iter()
                .zip(&self.samples)
                .map(|(l, s)| *l != s.label)
                .collect()
        })
    }

    pub fn flip_stats(&self) -> Option<FlipStats> {
        let mask = self.flip_mask()?;
        let mut stats = FlipStats::default();
        for (s, f) in self.samples.iter().zip(mask) {
            let k = s.category.index();
            stats.total[k] += 1;
            stats.flipped[k] += f as usize;
        }
        Some(stats)
    }

    pub fn category_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for s in &self.samples {
            counts[s.category.index()] += 1;
        }
        counts
    }
}

/// `n` i.i.d. draws; sample `i` uses `stream.item(i)`, so the result does
/// not depend on the thread count.
pub fn generate_dataset(
    stream: &SeedStream,
    signals: &Arc<SignalSet>,
    dc: &DataConfig,
    n: usize,
) -> Dataset {
    let samples = (0..n)
        .into_par_iter()
        .map(|i| sample_example(&mut stream.item(i as u64), signals, dc))
        .collect();
    Dataset::new(samples, signals.clone())
}

/// Labels every sample with `sign(f_wk(w, X))`, `sign(0) = +1`.
pub fn pseudo_label(mut dataset: Dataset, weak: &WeakModel) -> Dataset {
    let signals = dataset.signals.clone();
    let labels = dataset
        .samples
        .par_iter()
        .map(|s| {
            Label::from_output(
                weak_forward(weak, s, &signals).expect("weak model matches data dim"),
            )
        })
        .collect();
    dataset.pseudo_labels = Some(labels);
    dataset
}
