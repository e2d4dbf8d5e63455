//! Seeded random streams and the orthonormal signal frame.
//!
//! Every random quantity in a run comes from a ChaCha8 generator keyed by
//! the run seed. The 64-bit ChaCha stream id is split into a purpose tag
//! (top 16 bits) and an item index (low 48 bits), so e.g. sample `i` of the
//! strong training set is always drawn from the same stream no matter how
//! many threads generate the dataset or what else was sampled before it.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};

/// What a stream is used for. Tags are part of the reproducibility
/// contract: never renumber them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Signals,
    WeakData,
    StrongData,
    WeakShuffle,
    StrongShuffle,
    StrongInit,
    Eval,
    EvalStratum(u8),
    SnapshotEval,
    Verify,
    Custom(u16),
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Signals => 1,
            Purpose::WeakData => 2,
            Purpose::StrongData => 3,
            Purpose::WeakShuffle => 4,
            Purpose::StrongShuffle => 5,
            Purpose::StrongInit => 6,
            Purpose::Eval => 7,
            Purpose::SnapshotEval => 8,
            Purpose::Verify => 9,
            Purpose::EvalStratum(k) => 0x100 + k as u64,
            Purpose::Custom(k) => 0x1000 + k as u64,
        }
    }
}

const INDEX_BITS: u32 = 48;

/// A family of independent generators `(seed, purpose, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    pub seed: u64,
    pub purpose: Purpose,
}

impl SeedStream {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        SeedStream { seed, purpose }
    }

    /// Generator for item `index` of this family.
    pub fn item(&self, index: u64) -> Rng {
        assert!(index < (1 << INDEX_BITS), "stream index out of range");
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream((self.purpose.tag() << INDEX_BITS) | index);
        Rng(inner)
    }
}

/// Derives a child seed, e.g. for sweep cell `(cell, replicate)`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix(base ^ 0x5753_325f_4c41_4221);
    for &p in parts {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Single-owner generator handed out by [`SeedStream::item`].
#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn from_seed(seed: u64, purpose: Purpose) -> Self {
        SeedStream::new(seed, purpose).item(0)
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    /// Uniform in `0..n`.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    #[inline]
    pub fn label(&mut self) -> Label {
        if self.0.random::<bool>() {
            Label::Pos
        } else {
            Label::Neg
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64], scale: f64) {
        for x in out {
            *x = scale * self.normal();
        }
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// The four signal directions, indexed consistently everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SignalBase {
    MuPos,
    MuNeg,
    NuPos,
    NuNeg,
}

impl SignalBase {
    pub const ALL: [SignalBase; 4] = [
        SignalBase::MuPos,
        SignalBase::MuNeg,
        SignalBase::NuPos,
        SignalBase::NuNeg,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn easy(class: Label) -> Self {
        match class {
            Label::Pos => SignalBase::MuPos,
            Label::Neg => SignalBase::MuNeg,
        }
    }

    pub fn hard(class: Label) -> Self {
        match class {
            Label::Pos => SignalBase::NuPos,
            Label::Neg => SignalBase::NuNeg,
        }
    }

    pub fn is_easy(self) -> bool {
        matches!(self, SignalBase::MuPos | SignalBase::MuNeg)
    }

    /// Class `s` such that this vector is `mu_s` or `nu_s`.
    pub fn class(self) -> Label {
        match self {
            SignalBase::MuPos | SignalBase::NuPos => Label::Pos,
            SignalBase::MuNeg | SignalBase::NuNeg => Label::Neg,
        }
    }
}

/// Mutually orthogonal signals `mu_{+1}, mu_{-1}, nu_{+1}, nu_{-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSet {
    /// Rows in [`SignalBase`] order.
    vectors: [Vec<f64>; 4],
    /// Unit vectors in the same order.
    units: [Vec<f64>; 4],
    pub mu_norm: f64,
    pub nu_norm: f64,
}

impl SignalSet {
    /// Builds a set from explicit vectors. The caller guarantees
    /// orthogonality; norms are measured.
    pub fn from_vectors(vectors: [Vec<f64>; 4]) -> Result<Self> {
        let d = vectors[0].len();
        for v in &vectors {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                });
            }
        }
        let norms: Vec<f64> = vectors.iter().map(|v| norm(v)).collect();
        if norms.iter().any(|&n| n <= 0.0 || !n.is_finite()) {
            return Err(Error::NonPositiveScale {
                name: "signal norm",
                value: norms.iter().cloned().fold(f64::INFINITY, f64::min),
            });
        }
        let units = [0, 1, 2, 3].map(|k| vectors[k].iter().map(|x| x / norms[k]).collect());
        Ok(SignalSet {
            mu_norm: 0.5 * (norms[0] + norms[1]),
            nu_norm: 0.5 * (norms[2] + norms[3]),
            vectors,
            units,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    #[inline]
    pub fn vector(&self, base: SignalBase) -> &[f64] {
        &self.vectors[base.index()]
    }

    #[inline]
    pub fn unit(&self, base: SignalBase) -> &[f64] {
        &self.units[base.index()]
    }

    pub fn norm_of(&self, base: SignalBase) -> f64 {
        if base.is_easy() {
            self.mu_norm
        } else {
            self.nu_norm
        }
    }

    /// Rows `mu_+, mu_-, nu_+, nu_-` concatenated (4 x d).
    pub fn stacked(&self) -> Vec<f64> {
        self.vectors.iter().flatten().copied().collect()
    }

    /// Inner products of `w` with the four signals.
    pub fn project(&self, w: &[f64]) -> [f64; 4] {
        [0, 1, 2, 3].map(|k| dot(w, &self.vectors[k]))
    }

    /// Removes the components of `v` along the four signal directions
    /// (applies the projector `Lambda`).
    pub fn project_out(&self, v: &mut [f64]) {
        for u in &self.units {
            let c = dot(v, u);
            axpy(-c, u, v);
        }
    }
}

/// Draws four Gaussian vectors, orthonormalizes them, and scales them to the
/// requested norms.
pub fn make_signal_set(rng: &mut Rng, d: usize, mu_norm: f64, nu_norm: f64) -> Result<SignalSet> {
    if d < 5 {
        return Err(Error::DimensionTooSmall { d, min: 5 });
    }
    for (name, value) in [("mu_norm", mu_norm), ("nu_norm", nu_norm)] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::NonPositiveScale { name, value });
        }
    }
    const MAX_ATTEMPTS: usize = 8;
    for _ in 0..MAX_ATTEMPTS {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(4);
        let mut degenerate = false;
        for _ in 0..4 {
            let mut v = vec![0.0; d];
            rng.fill_normal(&mut v, 1.0);
            let scale = norm(&v);
            // Modified Gram-Schmidt, two passes for orthogonality at the
            // 1e-16 level.
            for _ in 0..2 {
                for u in &basis {
                    let c = dot(&v, u);
                    axpy(-c, u, &mut v);
                }
            }
            let r = norm(&v);
            if r < 1e-12 * scale.max(1.0) {
                degenerate = true;
                break;
            }
            v.iter_mut().for_each(|x| *x /= r);
            basis.push(v);
        }
        if degenerate {
            continue;
        }
        let scaled = |k: usize, s: f64| basis[k].iter().map(|x| x * s).collect::<Vec<f64>>();
        let vectors = [
            scaled(0, mu_norm),
            scaled(1, mu_norm),
            scaled(2, nu_norm),
            scaled(3, nu_norm),
        ];
        // Norms and units are re-measured from the vectors so that a set
        // read back from disk is bit-identical to a fresh one.
        return SignalSet::from_vectors(vectors);
    }
    Err(Error::DegenerateDraw {
        attempts: MAX_ATTEMPTS,
    })
}

/// Noise `xi ~ N(0, sigma_p^2 Lambda)`: an isotropic draw with its
/// components along the signals removed.
pub fn sample_projected_noise(rng: &mut Rng, signals: &SignalSet, sigma_p: f64) -> Vec<f64> {
    let mut xi = vec![0.0; signals.dim()];
    fill_projected_noise(rng, signals, sigma_p, &mut xi);
    xi
}

pub fn fill_projected_noise(rng: &mut Rng, signals: &SignalSet, sigma_p: f64, out: &mut [f64]) {
    rng.fill_normal(out, sigma_p);
    if sigma_p == 0.0 {
        out.fill(0.0);
        return;
    }
    signals.project_out(out);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(seed: u64, d: usize, mu: f64, nu: f64) -> SignalSet {
        let mut rng = Rng::from_seed(seed, Purpose::Signals);
        make_signal_set(&mut rng, d, mu, nu).unwrap()
    }

    #[test]
    fn signal_frame_is_orthogonal_with_requested_norms() {
        let s = frame(1, 2000, 0.4, 0.35);
        for a in SignalBase::ALL {
            let na = s.norm_of(a);
            assert!((norm(s.vector(a)) - na).abs() <= 1e-10 * na);
            for b in SignalBase::ALL {
                if a != b {
                    let ip = dot(s.vector(a), s.vector(b));
                    assert!(ip.abs() <= 1e-10 * na * s.norm_of(b), "{a:?} {b:?} {ip}");
                }
            }
        }
    }

    #[test]
    fn minimal_dimension_works() {
        let s = frame(3, 5, 1.0, 1.0);
        assert_eq!(s.dim(), 5);
        let ip = dot(s.vector(SignalBase::MuPos), s.vector(SignalBase::NuNeg));
        assert!(ip.abs() < 1e-10);
    }

    #[test]
    fn too_small_dimension_rejected() {
        let mut rng = Rng::from_seed(0, Purpose::Signals);
        assert!(matches!(
            make_signal_set(&mut rng, 4, 1.0, 1.0),
            Err(Error::DimensionTooSmall { d: 4, .. })
        ));
    }

    #[test]
    fn same_seed_same_frame() {
        assert_eq!(frame(9, 64, 0.4, 0.35), frame(9, 64, 0.4, 0.35));
        assert_ne!(frame(9, 64, 0.4, 0.35), frame(10, 64, 0.4, 0.35));
    }

    #[test]
    fn noise_is_orthogonal_to_signals() {
        let s = frame(2, 300, 0.4, 0.35);
        let stream = SeedStream::new(5, Purpose::Custom(0));
        for i in 0..50 {
            let xi = sample_projected_noise(&mut stream.item(i), &s, 0.1);
            for b in SignalBase::ALL {
                let ip = dot(&xi, s.vector(b));
                assert!(ip.abs() < 1e-10 * norm(&xi) * s.norm_of(b));
            }
        }
    }

    #[test]
    fn noise_energy_matches_chi_square_mean() {
        // E||xi||^2 = sigma_p^2 (d - 4)
        let (d, sigma) = (200, 0.3);
        let s = frame(4, d, 1.0, 1.0);
        let stream = SeedStream::new(11, Purpose::Custom(1));
        let draws = 2000;
        let mean: f64 = (0..draws)
            .map(|i| {
                let xi = sample_projected_noise(&mut stream.item(i), &s, sigma);
                dot(&xi, &xi) / (sigma * sigma * (d - 4) as f64)
            })
            .sum::<f64>()
            / draws as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean ratio {mean}");
    }

    #[test]
    fn zero_noise_scale_gives_zero_vector() {
        let s = frame(2, 20, 1.0, 1.0);
        let xi = sample_projected_noise(&mut Rng::from_seed(1, Purpose::Eval), &s, 0.0);
        assert!(xi.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn noise_covariance_vanishes_on_signal_directions() {
        let s = frame(6, 64, 0.4, 0.35);
        let stream = SeedStream::new(12, Purpose::Custom(2));
        let draws = 10_000;
        let mut cov = [[0.0f64; 4]; 4];
        for i in 0..draws {
            let xi = sample_projected_noise(&mut stream.item(i), &s, 1.0);
            let p: Vec<f64> = SignalBase::ALL
                .iter()
                .map(|&b| dot(&xi, s.unit(b)))
                .collect();
            for a in 0..4 {
                for b in 0..4 {
                    cov[a][b] += p[a] * p[b] / draws as f64;
                }
            }
        }
        for row in cov {
            for c in row {
                assert!(c.abs() < 1e-9, "{c}");
            }
        }
    }

    #[test]
    fn streams_are_independent_of_interleaving() {
        let a = SeedStream::new(77, Purpose::StrongData);
        let b = SeedStream::new(77, Purpose::Eval);
        let first: Vec<f64> = (0..5).map(|i| a.item(i).normal()).collect();
        // Draw heavily from another purpose, then re-derive.
        for i in 0..100 {
            b.item(i).normal();
        }
        let again: Vec<f64> = (0..5).map(|i| a.item(i).normal()).collect();
        assert_eq!(first, again);
        assert_ne!(a.item(0).normal(), b.item(0).normal());
    }

    #[test]
    fn derived_seeds_differ() {
        let s = derive_seed(7, &[0, 0]);
        assert_ne!(s, derive_seed(7, &[0, 1]));
        assert_ne!(s, derive_seed(7, &[1, 0]));
        assert_eq!(s, derive_seed(7, &[0, 0]));
    }
}
