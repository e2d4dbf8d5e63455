//! Acceptance criteria, one PASS/FAIL line each. Runs the full-size
//! reference experiments (about two hours on one core, most of it the
//! n_st = 20000 run); exits nonzero if any criterion fails.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use w2s_core::config::ExperimentConfig;
use w2s_core::data::Category;
use w2s_core::evaluation::{
    analytic_weak_error, mc_stratum_error, mc_test_error, stratified_mc_error, theorem_bounds,
    ModelRef,
};
use w2s_core::experiments::{
    run_sweep, verify_suite, Pipeline, Scenario, Summary, SweepSpec, VerifyOptions,
};
use w2s_core::models::{construct_optimal_strong, WeakModel};
use w2s_core::rng::{derive_seed, make_signal_set, Purpose, Rng, SeedStream, SignalSet};

// Tolerances.
const WEAK_TARGET: f64 = 0.851;
const WEAK_TOL: f64 = 0.01;
const FINAL_EVAL: usize = 100_000;
const HARD_EVAL: usize = 10_000;
const HARD_SIGMAS: f64 = 3.0;
const RANDOM_WEAK_MODELS: usize = 5;
const OPTIMAL_M: usize = 2;
const HARMFUL_GAP: f64 = 0.05;
const BENIGN_GAIN: f64 = 0.02;
const EARLY_PEAK: f64 = 0.97;
const EARLY_PSEUDO_CAP: f64 = 0.9;
const EARLY_DROP: f64 = 0.03;
const RECON_TOL: f64 = 1e-8;
const FD_TOL: f64 = 1e-5;
const MC_MODELS: u64 = 10;
const MC_SIGMAS: f64 = 4.0;
const SWEEP_GRID: [usize; 5] = [75, 300, 1000, 2000, 8000];
const SWEEP_MAX_INVERSIONS: usize = 1;
const SWEEP_INVERSION_Z: f64 = 2.0;
const SWEEP_SMALL_FLOOR: f64 = 0.06;
const SWEEP_LARGE_CEIL: f64 = 0.05;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, passed: bool, detail: String) {
        if !passed {
            self.failed += 1;
        }
        let mut out = std::io::stdout().lock();
        let _ = writeln!(
            out,
            "[{}] {id:>2} {name}: {detail}",
            if passed { "PASS" } else { "FAIL" }
        );
        let _ = out.flush();
    }
}

fn config(name: &str) -> ExperimentConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name]
        .iter()
        .collect();
    ExperimentConfig::load(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn scenario(name: &str) -> Summary {
    let t = Instant::now();
    let mut p = Pipeline::in_memory(Scenario::new(&config(name)).unwrap());
    let s = p.run().unwrap().clone();
    eprintln!("{name}: {:.0?}", t.elapsed());
    s
}

fn binomial_sigma(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

fn random_weak(rng: &mut Rng, signals: &SignalSet) -> WeakModel {
    w2s_core::experiments::random_weak_model(rng, signals, 3.0, 1.0)
}

fn main() {
    let mut rep = Report { failed: 0 };
    let base = config("weak-baseline.toml");

    // 1: weak baseline.
    let t = Instant::now();
    let mut weak_pipe = Pipeline::in_memory(Scenario::new(&base).unwrap());
    let weak = weak_pipe.weak(false).unwrap().clone();
    let signals: Arc<SignalSet> = weak_pipe.signals().unwrap().clone();
    drop(weak_pipe);
    eprintln!("weak stage: {:.0?}", t.elapsed());
    let acc = weak.report.accuracy();
    rep.line(
        1,
        "weak baseline accuracy",
        weak.report.n() == FINAL_EVAL && (acc - WEAK_TARGET).abs() <= WEAK_TOL,
        format!(
            "{acc:.4} on {} draws, target {WEAK_TARGET} +/- {WEAK_TOL}",
            weak.report.n()
        ),
    );

    // 2: hard-only error is a coin flip for any linear model.
    let mut rng = Rng::from_seed(base.seed, Purpose::Custom(2));
    let mut models = vec![weak.model.clone()];
    models.extend((0..RANDOM_WEAK_MODELS).map(|_| random_weak(&mut rng, &signals)));
    let mut worst = 0.0f64;
    let mut rates = Vec::new();
    for (k, w) in models.iter().enumerate() {
        let stream = SeedStream::new(
            derive_seed(base.seed, &[200 + k as u64]),
            Purpose::EvalStratum(1),
        );
        let (e, n) = mc_stratum_error(
            ModelRef::Weak(w),
            &signals,
            base.data.sigma_p,
            Category::HardOnly,
            HARD_EVAL,
            &stream,
        );
        let p = e as f64 / n as f64;
        worst = worst.max((p - 0.5).abs() / binomial_sigma(0.5, n));
        rates.push(format!("{p:.4}"));
    }
    rep.line(
        2,
        "hard-only weak error at chance",
        worst <= HARD_SIGMAS,
        format!(
            "errors [{}] (trained first), max {worst:.2} sigma, limit {HARD_SIGMAS}",
            rates.join(", ")
        ),
    );

    // 3: the constructed strong model is perfect.
    let opt = construct_optimal_strong(&signals, OPTIMAL_M).unwrap();
    let r = mc_test_error(
        ModelRef::Strong(&opt),
        &signals,
        &base.data,
        FINAL_EVAL,
        &SeedStream::new(base.seed, Purpose::Custom(3)),
    );
    let errors: usize = r.errors.iter().sum();
    rep.line(
        3,
        "optimal strong model error",
        errors == 0 && r.n() == FINAL_EVAL,
        format!("{errors} errors on {} draws (m = {OPTIMAL_M})", r.n()),
    );

    // 4-6: the three reference regimes.
    let a = scenario("fig1a.toml");
    let sa = a.strong.as_ref().unwrap();
    let gap = (sa.test_accuracy - a.weak.test_accuracy).abs();
    rep.line(
        4,
        "small n_st fits pseudo-labels and keeps weak error",
        sa.max_acc_pseudo >= 1.0 && gap <= HARMFUL_GAP,
        format!(
            "pseudo acc max {:.4} final {:.4}; strong {:.4} vs weak {:.4}, gap {gap:.4} <= {HARMFUL_GAP}",
            sa.max_acc_pseudo, sa.final_acc_pseudo, sa.test_accuracy, a.weak.test_accuracy
        ),
    );
    drop(a);

    let b = scenario("fig1b.toml");
    let sb = b.strong.as_ref().unwrap();
    let gain = sb.test_accuracy - b.weak.test_accuracy;
    rep.line(
        5,
        "moderate n_st beats the weak model",
        gain >= BENIGN_GAIN,
        format!(
            "strong {:.4} vs weak {:.4}, gain {gain:.4} >= {BENIGN_GAIN} (pseudo acc {:.4})",
            sb.test_accuracy, b.weak.test_accuracy, sb.final_acc_pseudo
        ),
    );
    drop(b);

    let c = scenario("fig1c.toml");
    let sc = c.strong.as_ref().unwrap();
    let drop_ = sc.peak_test_accuracy - sc.last_snapshot_test_accuracy;
    rep.line(
        6,
        "large n_st peaks early then degrades",
        sc.peak_test_accuracy >= EARLY_PEAK && sc.acc_pseudo_at_peak < EARLY_PSEUDO_CAP && drop_ >= EARLY_DROP,
        format!(
            "peak {:.4} >= {EARLY_PEAK} at epoch {} with pseudo acc {:.4} < {EARLY_PSEUDO_CAP}; final {:.4}, drop {drop_:.4} >= {EARLY_DROP}",
            sc.peak_test_accuracy, sc.peak_epoch, sc.acc_pseudo_at_peak, sc.last_snapshot_test_accuracy
        ),
    );
    drop(c);

    // 7-8: small-config property suite.
    let small = ExperimentConfig::small();
    let suite = verify_suite(&small, &VerifyOptions::default()).unwrap();
    let get = |n: &str| {
        suite
            .get(n)
            .unwrap_or_else(|| panic!("property {n} missing"))
    };
    let recon = ["weak_reconstruction", "strong_reconstruction"].map(|n| get(n).measured);
    let mono = ["weak_monotonicity", "strong_monotonicity"].map(get);
    rep.line(
        7,
        "decomposition exact and monotone",
        recon.iter().all(|&r| r < RECON_TOL) && mono.iter().all(|p| p.passed && p.measured == 0.0),
        format!(
            "reconstruction {:.2e} / {:.2e} < {RECON_TOL:e}; violations {} / {}",
            recon[0], recon[1], mono[0].measured, mono[1].measured
        ),
    );
    let fd = ["weak_gradient_fd", "strong_gradient_fd"].map(|n| get(n).measured);
    rep.line(
        8,
        "gradients match finite differences",
        fd.iter().all(|&e| e < FD_TOL),
        format!(
            "relative error weak {:.2e}, strong {:.2e} < {FD_TOL:e}",
            fd[0], fd[1]
        ),
    );

    // 9: closed-form weak error against stratified Monte Carlo.
    let mut rng = Rng::from_seed(base.seed, Purpose::Custom(9));
    let signals9 =
        make_signal_set(&mut rng, base.data.d, base.data.mu_norm, base.data.nu_norm).unwrap();
    let signals9 = Arc::new(signals9);
    let mut worst = 0.0f64;
    for k in 0..MC_MODELS {
        let w = random_weak(&mut rng, &signals9);
        let an = analytic_weak_error(&w, &signals9, &base.data).per_category;
        let mc = stratified_mc_error(
            ModelRef::Weak(&w),
            &signals9,
            &base.data,
            FINAL_EVAL,
            derive_seed(base.seed, &[900 + k]),
        );
        for ((&a, &m), &n) in an.iter().zip(&mc.per_category).zip(&mc.counts) {
            let dev = (m - a).abs();
            let sigma = binomial_sigma(a, n);
            // A stratum with zero analytic error must show zero MC errors.
            let z = if sigma > 0.0 {
                dev / sigma
            } else if dev > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            worst = worst.max(z);
        }
    }
    rep.line(
        9,
        "analytic weak error matches Monte Carlo",
        worst <= MC_SIGMAS,
        format!("max {worst:.2} sigma over {MC_MODELS} models x 3 strata of {FINAL_EVAL}, limit {MC_SIGMAS}"),
    );

    // 10: weak easy/both error under the printed bound.
    let bound = theorem_bounds(&base)["weak_easy_both_bound"];
    let eb = weak.report.easy_or_both();
    rep.line(
        10,
        "weak easy/both error below bound",
        eb <= bound,
        format!(
            "empirical {eb:.3e} <= bound {bound:.6} (C1 = {})",
            base.theorem.c1
        ),
    );

    // 11: hard-only strong error falls with n_st.
    let t = Instant::now();
    let sweep_cfg = config("sweep.toml");
    assert_eq!(
        (&sweep_cfg.data, &sweep_cfg.weak, sweep_cfg.seed),
        (&base.data, &base.weak, base.seed),
        "sweep shares the baseline weak model"
    );
    let spec = SweepSpec::from_config(&sweep_cfg).unwrap();
    assert_eq!(spec.grid, SWEEP_GRID);
    let sweep = run_sweep(&spec, &weak.model, &signals).unwrap();
    eprintln!("sweep: {:.0?}", t.elapsed());
    let means: Vec<f64> = sweep.rows.iter().map(|r| r.mean).collect();
    let first = means[0];
    let last = *means.last().unwrap();
    let worst_z = sweep.inversions.iter().map(|i| i.2).fold(0.0, f64::max);
    rep.line(
        11,
        "hard-only error decreases with n_st",
        means.iter().all(|m| m.is_finite())
            && sweep.inversions.len() <= SWEEP_MAX_INVERSIONS
            && worst_z <= SWEEP_INVERSION_Z
            && first >= SWEEP_SMALL_FLOOR
            && last < SWEEP_LARGE_CEIL,
        format!(
            "errors {:?} at n_st {SWEEP_GRID:?}; {} inversion(s), worst {worst_z:.2} sigma; first {first:.4} >= {SWEEP_SMALL_FLOOR}, last {last:.4} < {SWEEP_LARGE_CEIL}",
            means.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>(),
            sweep.inversions.len()
        ),
    );

    println!("{} of 11 criteria passed", 11 - rep.failed);
    if rep.failed > 0 {
        std::process::exit(1);
    }
}
