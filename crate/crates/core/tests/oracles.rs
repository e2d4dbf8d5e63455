use std::sync::Arc;

use w2s_core::config::ExperimentConfig;
use w2s_core::data::{
    generate_dataset, pseudo_label, sample_in_category, Category, Dataset, Label,
};
use w2s_core::experiments::{fd_check_strong, fd_check_weak, random_weak_model};
use w2s_core::linalg::dot;
use w2s_core::models::{init_strong, strong_forward, weak_forward, StrongModel, WeakModel};
use w2s_core::rng::{make_signal_set, Purpose, Rng, SeedStream, SignalBase, SignalSet};
use w2s_core::training::{
    logistic_loss, neg_loss_derivative, strong_step, weak_gradient, weak_step,
};

// (z, log(1 + e^-z), 1 / (1 + e^z)) evaluated at 50 digits.
#[allow(clippy::excessive_precision)]
const LOSS_TABLE: &[(f64, f64, f64)] = &[
    (-5.002808, 5.0095045811490467583, 9.933257909837060006e-1),
    (
        -29.38985,
        2.9389850000000171388e+1,
        9.9999999999982775353e-1,
    ),
    (
        19.512391,
        3.3564196828412581812e-9,
        3.3564196772084816439e-9,
    ),
    (
        -12.081609,
        1.2081614662688201164e+1,
        9.9999433732783208874e-1,
    ),
    (-7.895299, 7.8956714211515075974, 9.9962764818864089089e-1),
    (
        -18.380319,
        1.8380319010411873512e+1,
        9.9999998958812661537e-1,
    ),
    (3.96049, 1.8874525815525324467e-2, 1.8697517352838562713e-2),
    (
        -20.298731,
        2.0298731001528879155e+1,
        9.9999999847112092617e-1,
    ),
    (
        -22.543987,
        2.2543987000161910277e+1,
        9.9999999983809105395e-1,
    ),
    (-4.023824, 4.0415503988142413733, 9.8242978954582620098e-1),
    (3.724709, 2.3833822823883007868e-2, 2.3552040359019422251e-2),
    (
        -19.539386,
        1.953938600326702553e+1,
        9.9999999673297484054e-1,
    ),
    (3.193265, 4.0217969566721037652e-2, 3.9419960883192402452e-2),
    (-8.705917, 8.7060825893224903799, 9.9983442438666423615e-1),
    (
        27.483887,
        1.1585093271646940634e-12,
        1.1585093271640229914e-12,
    ),
    (
        -24.522354,
        2.4522354000022391165e+1,
        9.9999999997760882035e-1,
    ),
    (28.7184, 3.370989120689819933e-13, 3.3709891206892517546e-13),
    (-5.272836, 5.2779519352171372405, 9.9489712889156300809e-1),
    (0.236122, 5.8203925042780474604e-1, 4.4124224302856966595e-1),
    (
        -21.11123,
        2.1111230000678435708e+1,
        9.9999999932156334453e-1,
    ),
    (13.138028, 1.968912920637563088e-6, 1.9689109823297906812e-6),
    (
        -18.601717,
        1.8601717008344051748e+1,
        9.9999999165594901046e-1,
    ),
    (-9.506374, 9.5064483734758576301, 9.9992562928977997533e-1),
    (
        -28.588727,
        2.858872700000038244e+1,
        9.9999999999961622771e-1,
    ),
    (-30.0, 3.0000000000000093576e+1, 9.9999999999990642377e-1),
    (30.0, 9.3576229688397367794e-14, 9.3576229688392989538e-14),
    (1e-08, 6.9314717555994532192e-1, 4.999999975e-1),
    (-1e-08, 6.9314718555994532192e-1, 5.000000025e-1),
    (0.5, 4.7407698418010668087e-1, 3.7754066879814543536e-1),
];

fn signals(d: usize, seed: u64) -> Arc<SignalSet> {
    let mut rng = Rng::from_seed(seed, Purpose::Signals);
    Arc::new(make_signal_set(&mut rng, d, 0.4, 0.35).unwrap())
}

fn small_data(d: usize, n: usize, seed: u64) -> (Arc<SignalSet>, Dataset) {
    let mut cfg = ExperimentConfig::small();
    cfg.data.d = d;
    let s = signals(d, seed);
    let ds = generate_dataset(&SeedStream::new(seed, Purpose::WeakData), &s, &cfg.data, n);
    (s, ds)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

#[test]
fn logistic_loss_matches_high_precision_table() {
    for &(z, loss, g) in LOSS_TABLE {
        assert!(
            rel(logistic_loss(z), loss) < 1e-12,
            "loss at {z}: {} vs {loss}",
            logistic_loss(z)
        );
        assert!(
            rel(neg_loss_derivative(z), g) < 1e-12,
            "g at {z}: {} vs {g}",
            neg_loss_derivative(z)
        );
    }
}

#[test]
fn loss_is_finite_far_out() {
    for z in [-1e6, -800.0, 800.0, 1e6] {
        assert!(logistic_loss(z).is_finite());
        assert!((0.0..=1.0).contains(&neg_loss_derivative(z)));
    }
    assert_eq!(neg_loss_derivative(0.0), 0.5);
}

#[test]
fn weak_gradient_matches_finite_differences() {
    let (s, ds) = small_data(48, 24, 11);
    let mut rng = Rng::from_seed(11, Purpose::Verify);
    for _ in 0..3 {
        let w = random_weak_model(&mut rng, &s, 0.5, 2.0);
        let fd = fd_check_weak(&w, &ds, 1e-5).unwrap();
        assert!(fd.rel_error < 1e-6, "{fd:?}");
        assert_eq!(fd.checked, 48);
    }
}

#[test]
fn strong_gradient_matches_finite_differences() {
    let (s, ds) = small_data(32, 8, 12);
    let mut rng = Rng::from_seed(12, Purpose::Verify);
    let teacher = random_weak_model(&mut rng, &s, 1.0, 1.0);
    let ds = pseudo_label(ds, &teacher);
    let model = init_strong(&mut Rng::from_seed(12, Purpose::StrongInit), 4, 32, 0.5);
    let fd = fd_check_strong(&model, &ds, 1e-5).unwrap();
    assert!(fd.rel_error < 1e-5, "{fd:?}");
    assert!(fd.checked > fd.skipped, "{fd:?}");
}

#[test]
fn strong_fd_needs_pseudo_labels() {
    let (_, ds) = small_data(16, 4, 13);
    let model = init_strong(&mut Rng::from_seed(13, Purpose::StrongInit), 2, 16, 0.1);
    assert!(fd_check_strong(&model, &ds, 1e-5).is_err());
}

#[test]
fn first_step_from_zero_averages_the_labelled_patches() {
    let (s, ds) = small_data(40, 10, 14);
    let eta = 0.3;
    let all: Vec<usize> = (0..ds.len()).collect();
    let (next, loss) = weak_step(&WeakModel::zeros(40), &ds, &all, eta).unwrap();
    assert!(loss.g.iter().all(|&g| g == 0.5));
    let mut expect = vec![0.0; 40];
    for x in &ds.samples {
        for p in x.patches(&s) {
            for (e, pj) in expect.iter_mut().zip(&p) {
                *e += eta / (2.0 * ds.len() as f64) * x.label.sign() * pj;
            }
        }
    }
    for (j, (a, b)) in next.w.iter().zip(&expect).enumerate() {
        assert!((a - b).abs() < 1e-14, "coordinate {j}");
    }
}

#[test]
fn one_easy_sample_moves_weight_along_its_signal() {
    let s = signals(64, 15);
    let mut rng = Rng::from_seed(15, Purpose::Custom(0));
    let x = loop {
        let x = sample_in_category(&mut rng, &s, 0.1, Category::EasyOnly);
        if x.label == Label::Pos {
            break x;
        }
    };
    let ds = Dataset::new(vec![x], s.clone());
    let eta = 0.1;
    let (next, _) = weak_step(&WeakModel::zeros(64), &ds, &[0], eta).unwrap();
    let mu = s.vector(SignalBase::MuPos);
    let got = dot(&next.w, mu);
    let want = eta * s.norm_of(SignalBase::MuPos).powi(2);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!(dot(&next.w, s.vector(SignalBase::NuPos)).abs() < 1e-12);
}

#[test]
fn weak_step_raises_the_margin_of_its_sample() {
    let s = signals(64, 16);
    let mut rng = Rng::from_seed(16, Purpose::Custom(1));
    let x = sample_in_category(&mut rng, &s, 0.1, Category::EasyOnly);
    let ds = Dataset::new(vec![x.clone()], s.clone());
    let w = random_weak_model(&mut Rng::from_seed(16, Purpose::Verify), &s, 0.5, 1.0);
    let before = x.label.sign() * weak_forward(&w, &x, &s).unwrap();
    let (next, _) = weak_step(&w, &ds, &[0], 0.1).unwrap();
    let after = x.label.sign() * weak_forward(&next, &x, &s).unwrap();
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn strong_step_from_dead_init_is_zero() {
    let (_, ds) = small_data(24, 6, 17);
    let ds = pseudo_label(ds, &WeakModel::zeros(24));
    let all: Vec<usize> = (0..ds.len()).collect();
    let (next, loss) = strong_step(&StrongModel::zeros(3, 24), &ds, &all, 0.5).unwrap();
    assert!(next.filters.iter().all(|&x| x == 0.0));
    assert!(loss.g.iter().all(|&g| g == 0.5));
}

#[test]
fn strong_step_raises_the_margin_of_a_clean_easy_sample() {
    let s = signals(64, 18);
    let mut rng = Rng::from_seed(18, Purpose::Custom(2));
    let x = sample_in_category(&mut rng, &s, 0.1, Category::EasyOnly);
    let mut ds = Dataset::new(vec![x.clone()], s.clone());
    ds.pseudo_labels = Some(vec![x.label]);
    let model = init_strong(&mut Rng::from_seed(18, Purpose::StrongInit), 4, 64, 0.05);
    let before = x.label.sign() * strong_forward(&model, &x, &s).unwrap();
    let (next, _) = strong_step(&model, &ds, &[0], 0.1).unwrap();
    let after = x.label.sign() * strong_forward(&next, &x, &s).unwrap();
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn empty_batch_leaves_models_unchanged() {
    let (s, ds) = small_data(20, 5, 19);
    let w = random_weak_model(&mut Rng::from_seed(19, Purpose::Verify), &s, 0.5, 1.0);
    assert_eq!(weak_step(&w, &ds, &[], 0.1).unwrap().0, w);
    let ds = pseudo_label(ds, &w);
    let m = init_strong(&mut Rng::from_seed(19, Purpose::StrongInit), 2, 20, 0.1);
    assert_eq!(strong_step(&m, &ds, &[], 0.1).unwrap().0, m);
}

#[test]
fn zero_gradient_at_perfect_separation_limit() {
    // Scaling a separating model up drives the gradient to zero.
    let (s, ds) = small_data(32, 16, 20);
    let mut w = WeakModel::zeros(32);
    for base in [SignalBase::MuPos, SignalBase::MuNeg] {
        let sign = base.class().sign();
        for (wj, mj) in w.w.iter_mut().zip(s.vector(base)) {
            *wj += sign * mj;
        }
    }
    let easy: Vec<_> = ds
        .samples
        .iter()
        .filter(|x| x.category == Category::EasyOnly)
        .cloned()
        .collect();
    let easy = Dataset::new(easy, s.clone());
    let norm = |g: Vec<f64>| g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let g1 = norm(weak_gradient(&w, &easy).unwrap());
    let big = WeakModel::new(w.w.iter().map(|x| x * 100.0).collect());
    let g2 = norm(weak_gradient(&big, &easy).unwrap());
    assert!(g2 < g1 * 1e-3, "{g1} {g2}");
}
