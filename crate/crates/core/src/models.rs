//! Weak (linear patch-sum CNN) and strong (two-layer ReLU CNN) models.

use serde::{Deserialize, Serialize};

use crate::data::{Label, Sample};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::rng::{Rng, SignalBase, SignalSet};

/// `f(w, X) = <w, x1> + <w, x2> + <w, x3>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakModel {
    pub w: Vec<f64>,
}

impl WeakModel {
    pub fn new(w: Vec<f64>) -> Self {
        WeakModel { w }
    }

    pub fn zeros(d: usize) -> Self {
        WeakModel { w: vec![0.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|x| x.is_finite())
    }
}

/// Filters `w_{s,r}` for `s` in `{+1, -1}` and `r` in `0..m`, stored as
/// `2m` rows of length `d`: rows `0..m` are the positive polarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongModel {
    pub m: usize,
    pub d: usize,
    pub filters: Vec<f64>,
}

impl StrongModel {
    pub fn zeros(m: usize, d: usize) -> Self {
        StrongModel {
            m,
            d,
            filters: vec![0.0; 2 * m * d],
        }
    }

    pub fn from_filters(m: usize, d: usize, filters: Vec<f64>) -> Result<Self> {
        if filters.len() != 2 * m * d {
            return Err(Error::DimensionMismatch {
                expected: 2 * m * d,
                got: filters.len(),
            });
        }
        Ok(StrongModel { m, d, filters })
    }

    #[inline]
    pub fn row(s: Label, r: usize, m: usize) -> usize {
        match s {
            Label::Pos => r,
            Label::Neg => m + r,
        }
    }

    /// Polarity of row `f`.
    #[inline]
    pub fn polarity(&self, f: usize) -> Label {
        if f < self.m {
            Label::Pos
        } else {
            Label::Neg
        }
    }

    pub fn filter(&self, s: Label, r: usize) -> &[f64] {
        let f = Self::row(s, r, self.m);
        &self.filters[f * self.d..(f + 1) * self.d]
    }

    pub fn filter_mut(&mut self, s: Label, r: usize) -> &mut [f64] {
        let f = Self::row(s, r, self.m);
        &mut self.filters[f * self.d..(f + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.filters.chunks_exact(self.d.max(1))
    }

    pub fn scaled(&self, c: f64) -> StrongModel {
        StrongModel {
            m: self.m,
            d: self.d,
            filters: self.filters.iter().map(|x| c * x).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.filters.iter().all(|x| x.is_finite())
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `<w, x_p>` for patch position `p` without materializing the patch.
#[inline]
pub(crate) fn patch_dot(w: &[f64], sample: &Sample, p: usize, signals: &SignalSet) -> f64 {
    match sample.signal_at(p) {
        Some(sp) => sp.sign() * dot(w, signals.vector(sp.base)),
        None => dot(w, &sample.noise),
    }
}

fn check_dims(d: usize, sample: &Sample, signals: &SignalSet) -> Result<()> {
    for got in [sample.dim(), signals.dim()] {
        if got != d {
            return Err(Error::DimensionMismatch { expected: d, got });
        }
    }
    Ok(())
}

pub fn weak_forward(model: &WeakModel, sample: &Sample, signals: &SignalSet) -> Result<f64> {
    check_dims(model.dim(), sample, signals)?;
    Ok((0..3)
        .map(|p| patch_dot(&model.w, sample, p, signals))
        .sum())
}

/// `F_{+1} - F_{-1}` with `F_s = (1/m) sum_r sum_p ReLU(<w_{s,r}, x_p>)`.
pub fn strong_forward(model: &StrongModel, sample: &Sample, signals: &SignalSet) -> Result<f64> {
    check_dims(model.d, sample, signals)?;
    let mut out = 0.0;
    for (f, w) in model.rows().enumerate() {
        let act: f64 = (0..3).map(|p| relu(patch_dot(w, sample, p, signals))).sum();
        out += model.polarity(f).sign() * act;
    }
    Ok(out / model.m as f64)
}

/// i.i.d. `N(0, sigma_0^2)` entries for all `2m` filters.
pub fn init_strong(rng: &mut Rng, m: usize, d: usize, sigma_0: f64) -> StrongModel {
    let mut model = StrongModel::zeros(m, d);
    if sigma_0 > 0.0 {
        rng.fill_normal(&mut model.filters, sigma_0);
    }
    model
}

/// `w_{s,1} = mu_s + nu_s`, `w_{s,2} = mu_s - nu_s`, remaining filters zero.
pub fn construct_optimal_strong(signals: &SignalSet, m: usize) -> Result<StrongModel> {
    if m < 2 {
        return Err(Error::MTooSmall { m });
    }
    let d = signals.dim();
    let mut model = StrongModel::zeros(m, d);
    for s in Label::BOTH {
        let mu = signals.vector(SignalBase::easy(s));
        let nu = signals.vector(SignalBase::hard(s));
        for (r, sign) in [(0, 1.0), (1, -1.0)] {
            let w = model.filter_mut(s, r);
            for j in 0..d {
                w[j] = mu[j] + sign * nu[j];
            }
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::data::{generate_dataset, sample_in_category, Category};
    use crate::rng::{make_signal_set, Purpose, SeedStream};
    use std::sync::Arc;

    fn signals(d: usize) -> Arc<SignalSet> {
        let mut rng = Rng::from_seed(2, Purpose::Signals);
        Arc::new(make_signal_set(&mut rng, d, 0.4, 0.35).unwrap())
    }

    /// Dense oracle: materialize X as a d x 3 matrix and evaluate directly.
    fn dense_weak(w: &[f64], x: &[Vec<f64>; 3]) -> f64 {
        let mut total = 0.0;
        for patch in x {
            for j in 0..w.len() {
                total += w[j] * patch[j];
            }
        }
        total
    }

    fn dense_strong(model: &StrongModel, x: &[Vec<f64>; 3]) -> f64 {
        let mut f = [0.0; 2];
        for (k, s) in Label::BOTH.iter().enumerate() {
            for r in 0..model.m {
                let w = model.filter(*s, r);
                for patch in x {
                    let z: f64 = (0..model.d).map(|j| w[j] * patch[j]).sum();
                    f[k] += z.max(0.0);
                }
            }
            f[k] /= model.m as f64;
        }
        f[0] - f[1]
    }

    #[test]
    fn zero_models_output_zero() {
        let s = signals(16);
        let dc = ExperimentConfig::reference(1, 1).data;
        let ds = generate_dataset(&SeedStream::new(1, Purpose::WeakData), &s, &dc, 20);
        for x in &ds.samples {
            assert_eq!(weak_forward(&WeakModel::zeros(16), x, &s).unwrap(), 0.0);
            assert_eq!(
                strong_forward(&StrongModel::zeros(3, 16), x, &s).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn weak_on_easy_direction_is_exactly_two() {
        let s = signals(50);
        for y in Label::BOTH {
            let base = SignalBase::easy(y);
            let w: Vec<f64> = s.vector(base).iter().map(|x| x / (0.4 * 0.4)).collect();
            let mut rng = Rng::from_seed(4, Purpose::Eval);
            let x = sample_in_category(&mut rng, &s, 0.1, Category::EasyOnly);
            if x.label != y {
                continue;
            }
            let out = weak_forward(&WeakModel::new(w), &x, &s).unwrap();
            assert!((out - 2.0).abs() < 1e-12, "{out}");
        }
    }

    #[test]
    fn forwards_match_dense_oracle() {
        let s = signals(24);
        let dc = ExperimentConfig::reference(1, 1).data;
        let ds = generate_dataset(&SeedStream::new(2, Purpose::WeakData), &s, &dc, 30);
        let mut rng = Rng::from_seed(3, Purpose::Custom(0));
        let weak = WeakModel::new((0..24).map(|_| rng.normal()).collect());
        let strong = init_strong(&mut rng, 4, 24, 1.0);
        for x in &ds.samples {
            let patches = x.patches(&s);
            let a = weak_forward(&weak, x, &s).unwrap();
            let b = dense_weak(&weak.w, &patches);
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-3));
            let a = strong_forward(&strong, x, &s).unwrap();
            let b = dense_strong(&strong, &patches);
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn dimension_mismatch_detected() {
        let s = signals(16);
        let mut rng = Rng::from_seed(1, Purpose::Eval);
        let x = sample_in_category(&mut rng, &s, 0.1, Category::HardOnly);
        assert!(matches!(
            weak_forward(&WeakModel::zeros(15), &x, &s),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            strong_forward(&StrongModel::zeros(2, 17), &x, &s),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn optimal_construction_margins() {
        let s = signals(40);
        let m = 5;
        let opt = construct_optimal_strong(&s, m).unwrap();
        let stream = SeedStream::new(3, Purpose::Eval);
        let (mu2, nu2) = (0.4f64 * 0.4, 0.35f64 * 0.35);
        for i in 0..200 {
            let x = sample_in_category(&mut stream.item(i), &s, 0.1, Category::ALL[i as usize % 3]);
            let margin = x.label.sign() * strong_forward(&opt, &x, &s).unwrap();
            assert!(margin > 0.0);
            match x.category {
                // Two patches, each activating both filters with <mu±nu, mu> = ||mu||^2.
                Category::EasyOnly => assert!((margin - 4.0 * mu2 / m as f64).abs() < 1e-12),
                Category::HardOnly if x.signals[0] == x.signals[1] && !x.signals[0].negated => {
                    assert!((margin - 2.0 * nu2 / m as f64).abs() < 1e-12)
                }
                _ => {}
            }
        }
        assert!(matches!(
            construct_optimal_strong(&s, 1),
            Err(Error::MTooSmall { m: 1 })
        ));
    }

    #[test]
    fn init_scale_and_determinism() {
        let (m, d, sigma) = (50, 2000, 0.01);
        let a = init_strong(&mut Rng::from_seed(5, Purpose::StrongInit), m, d, sigma);
        let b = init_strong(&mut Rng::from_seed(5, Purpose::StrongInit), m, d, sigma);
        assert_eq!(a, b);
        let ratio: f64 = a
            .rows()
            .map(|w| dot(w, w) / (sigma * sigma * d as f64))
            .sum::<f64>()
            / (2 * m) as f64;
        assert!((ratio - 1.0).abs() < 0.1, "{ratio}");
        let z = init_strong(&mut Rng::from_seed(5, Purpose::StrongInit), 3, 8, 0.0);
        assert!(z.filters.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn forwards_are_patch_permutation_invariant() {
        let s = signals(30);
        let dc = ExperimentConfig::reference(1, 1).data;
        let ds = generate_dataset(&SeedStream::new(4, Purpose::WeakData), &s, &dc, 40);
        let mut rng = Rng::from_seed(6, Purpose::Custom(1));
        let weak = WeakModel::new((0..30).map(|_| rng.normal()).collect());
        let strong = init_strong(&mut rng, 3, 30, 1.0);
        let perms = [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for x in &ds.samples {
            let fw = weak_forward(&weak, x, &s).unwrap();
            let fs = strong_forward(&strong, x, &s).unwrap();
            for p in perms {
                let y = x.permuted(p);
                let gw = weak_forward(&weak, &y, &s).unwrap();
                let gs = strong_forward(&strong, &y, &s).unwrap();
                assert!((fw - gw).abs() <= 1e-12 * fw.abs().max(1e-12));
                assert!((fs - gs).abs() <= 1e-12 * fs.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn weak_is_linear_and_strong_is_homogeneous() {
        let s = signals(20);
        let dc = ExperimentConfig::reference(1, 1).data;
        let ds = generate_dataset(&SeedStream::new(5, Purpose::WeakData), &s, &dc, 25);
        let mut rng = Rng::from_seed(7, Purpose::Custom(2));
        let w1: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let w2: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        let strong = init_strong(&mut rng, 4, 20, 1.0);
        for x in &ds.samples {
            let a = weak_forward(&WeakModel::new(w1.clone()), x, &s).unwrap();
            let b = weak_forward(&WeakModel::new(w2.clone()), x, &s).unwrap();
            let c = weak_forward(&WeakModel::new(sum.clone()), x, &s).unwrap();
            assert!((a + b - c).abs() <= 1e-12 * c.abs().max(1.0));
            let f = strong_forward(&strong, x, &s).unwrap();
            let g = strong_forward(&strong.scaled(3.5), x, &s).unwrap();
            assert!((3.5 * f - g).abs() <= 1e-12 * g.abs().max(1e-12));
            assert_eq!(Label::from_output(f), Label::from_output(g));
        }
    }
}
