use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use w2s_core::config::ExperimentConfig;
use w2s_core::experiments::{
    files, run_sweep, verify_suite, Pipeline, Scenario, Summary, SweepSpec, SweepSummary,
    VerifyOptions, VerifyReport,
};
use w2s_core::io;
use w2s_core::plot::accuracy_svg;
use w2s_core::run_dir::{RunDir, CONFIG_FILE};
use w2s_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "w2s",
    version,
    about = "Weak-to-strong training on synthetic patch data"
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Recompute and overwrite completed stages.
    #[arg(long, global = true)]
    force: bool,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Draw the signal frame and both training sets.
    GenData,
    /// Train the weak model on true labels.
    TrainWeak,
    /// Label the strong training set with the weak model.
    PseudoLabel,
    /// Train the strong model on the pseudo-labels.
    TrainStrong,
    /// Every stage end to end, then the summary.
    W2s,
    /// Sweep the strong training-set size.
    Sweep,
    /// Run the property suite (small config unless --config is given).
    Verify {
        /// Mutation fixture: train and track with the learning rate negated.
        #[arg(long, hide = true)]
        flip_eta_sign: bool,
    },
    /// Print a run's summary and the command that reproduces it.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Write the accuracy-vs-epoch SVG of a run.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

enum Failure {
    Error(Error),
    Properties,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Properties) => ExitCode::from(2),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// `--config`, else the config stored in `--out`.
fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&cli.config, &cli.out) {
        (Some(p), _) => ExperimentConfig::load(p, &cli.overrides)?,
        (None, Some(out)) if out.join(CONFIG_FILE).exists() => {
            ExperimentConfig::load(&out.join(CONFIG_FILE), &cli.overrides)?
        }
        _ => return Err(Error::InvalidConfig("--config is required".into())),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path, Error> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("--out is required".into()))
}

fn pipeline(cli: &Cli) -> Result<Pipeline, Error> {
    let cfg = load_config(cli)?;
    let argv: Vec<String> = std::env::args().collect();
    Pipeline::persisted(Scenario::new(&cfg)?, out_dir(cli)?, &argv, cli.force)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.cmd {
        Cmd::GenData => {
            let mut p = pipeline(cli)?;
            p.data(true)?;
            println!("data written to {}", out_dir(cli)?.display());
        }
        Cmd::TrainWeak => {
            let mut p = pipeline(cli)?;
            let w = p.weak(true)?;
            println!("weak test accuracy {:.4}", w.report.accuracy());
        }
        Cmd::PseudoLabel => {
            let mut p = pipeline(cli)?;
            let ds = p.pseudo(true)?;
            if let Some(f) = ds.flip_stats() {
                println!(
                    "flipped: easy {}/{}, hard {}/{}, both {}/{}",
                    f.flipped[0], f.total[0], f.flipped[1], f.total[1], f.flipped[2], f.total[2]
                );
            }
        }
        Cmd::TrainStrong => {
            let mut p = pipeline(cli)?;
            let s = p.strong(true)?;
            println!("strong test accuracy {:.4}", s.report.accuracy());
        }
        Cmd::W2s => {
            let mut p = pipeline(cli)?;
            let s = p.run()?;
            print_summary(s);
        }
        Cmd::Sweep => {
            let cfg = load_config(cli)?;
            let spec = SweepSpec::from_config(&cfg)?;
            let argv: Vec<String> = std::env::args().collect();
            let mut p = Pipeline::persisted(Scenario::new(&cfg)?, out_dir(cli)?, &argv, cli.force)?;
            p.weak(false)?;
            let weak = p.weak_outcome().expect("weak stage").model.clone();
            let signals = p.signals().expect("data stage").clone();
            let sw = run_sweep(&spec, &weak, &signals)?;
            write_sweep(out_dir(cli)?, &sw)?;
            print_sweep(&sw);
        }
        Cmd::Verify { flip_eta_sign } => {
            let cfg = match &cli.config {
                Some(_) => load_config(cli)?,
                None => {
                    let mut c = ExperimentConfig::from_toml_str(
                        &ExperimentConfig::small().to_toml(),
                        &cli.overrides,
                    )?;
                    if let Some(s) = cli.seed {
                        c.seed = s;
                    }
                    c
                }
            };
            let rep = verify_suite(
                &cfg,
                &VerifyOptions {
                    flip_eta_sign: *flip_eta_sign,
                },
            )?;
            print_verify(&rep);
            if let Some(out) = &cli.out {
                fs::create_dir_all(out).map_err(Error::from)?;
                fs::write(
                    out.join("verify.json"),
                    serde_json::to_string_pretty(&rep).map_err(Error::from)? + "\n",
                )
                .map_err(Error::from)?;
            }
            if !rep.all_passed() {
                return Err(Failure::Properties);
            }
        }
        Cmd::Report { input } => {
            let dir = RunDir::open_existing(input)?;
            let text = fs::read_to_string(dir.file(files::SUMMARY)).map_err(|_| {
                Error::MissingArtifact(dir.file(files::SUMMARY).display().to_string())
            })?;
            let v: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
            print_report(&v);
            for stage in dir.manifest.stages.keys() {
                dir.verify(stage)?;
            }
            println!("artifacts match the manifest hashes");
            println!(
                "reproduce: w2s w2s --config {} --out {}",
                dir.file(CONFIG_FILE).display(),
                input.display()
            );
        }
        Cmd::Plot { input } => {
            let strong = input.join(files::STRONG_RECORDS);
            let path = if strong.exists() {
                strong
            } else {
                input.join(files::WEAK_RECORDS)
            };
            let records = io::read_records(&path)?;
            let weak_acc = fs::read_to_string(input.join(files::WEAK_REPORT))
                .ok()
                .and_then(|t| serde_json::from_str::<w2s_core::evaluation::ErrorReport>(&t).ok())
                .map(|r| r.accuracy());
            let title = RunDir::open_existing(input)
                .and_then(|d| d.config())
                .map(|c| c.name)
                .unwrap_or_default();
            let target = cli.out.clone().unwrap_or_else(|| input.join(files::PLOT));
            fs::write(&target, accuracy_svg(&records, weak_acc, &title)).map_err(Error::from)?;
            println!("wrote {}", target.display());
        }
    }
    Ok(())
}

fn print_summary(s: &Summary) {
    println!("scenario {} (seed {})", s.name, s.seed);
    println!("  weak test accuracy   {:.4}", s.weak.test_accuracy);
    if let Some(st) = &s.strong {
        println!("  strong test accuracy {:.4}", st.test_accuracy);
        println!(
            "  peak snapshot accuracy {:.4} at epoch {} (pseudo accuracy {:.4})",
            st.peak_test_accuracy, st.peak_epoch, st.acc_pseudo_at_peak
        );
        println!("  final pseudo accuracy {:.4}", st.final_acc_pseudo);
    }
    for c in &s.checks {
        println!(
            "  [{}] {}: {:.4} vs {:.4} ({})",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold,
            c.detail
        );
    }
}

fn print_report(v: &serde_json::Value) {
    let f = |p: &str| v.pointer(p).and_then(|x| x.as_f64()).unwrap_or(f64::NAN);
    println!(
        "scenario {} (seed {})",
        v["name"].as_str().unwrap_or("?"),
        v["seed"].as_u64().unwrap_or(0)
    );
    println!("  weak test accuracy   {:.4}", f("/weak/test_accuracy"));
    if !v["strong"].is_null() {
        println!("  strong test accuracy {:.4}", f("/strong/test_accuracy"));
        println!(
            "  peak snapshot accuracy {:.4}",
            f("/strong/peak_test_accuracy")
        );
    }
    if let Some(checks) = v["checks"].as_array() {
        for c in checks {
            println!(
                "  [{}] {}",
                if c["passed"].as_bool() == Some(true) {
                    "pass"
                } else {
                    "FAIL"
                },
                c["name"].as_str().unwrap_or("?")
            );
        }
    }
}

fn print_verify(rep: &VerifyReport) {
    for p in &rep.properties {
        let tag = if p.skipped {
            "skip"
        } else if p.passed {
            "pass"
        } else {
            "FAIL"
        };
        println!(
            "[{tag}] {:<28} measured {:.3e}  threshold {:.3e}  {}",
            p.name, p.measured, p.threshold, p.detail
        );
    }
}

fn print_sweep(sw: &SweepSummary) {
    println!(
        "{:>8} {:>5} {:>10} {:>10} {:>10}",
        "n_st", "runs", "mean", "std", "se"
    );
    for r in &sw.rows {
        println!(
            "{:>8} {:>5} {:>10.4} {:>10.4} {:>10.4}",
            r.n_st, r.runs, r.mean, r.std, r.se
        );
    }
    for c in sw.cells.iter().filter(|c| c.error.is_some()) {
        println!(
            "cell n_st={} rep={} failed: {}",
            c.n_st,
            c.replicate,
            c.error.as_deref().unwrap()
        );
    }
    println!(
        "monotone: {} ({} inversions); first n_st below {:.3}: {}",
        sw.monotone,
        sw.inversions.len(),
        sw.crossing_threshold,
        sw.crossing.map_or("none".to_string(), |n| n.to_string())
    );
}

fn write_sweep(out: &Path, sw: &SweepSummary) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    fs::write(
        out.join("sweep.json"),
        serde_json::to_string_pretty(sw)? + "\n",
    )?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record([
        "n_st",
        "replicate",
        "seed",
        "hard_error",
        "hard_se",
        "final_acc_pseudo",
        "iterations",
        "error",
    ])?;
    for c in &sw.cells {
        w.write_record([
            c.n_st.to_string(),
            c.replicate.to_string(),
            c.seed.to_string(),
            io::fmt_f64(c.hard_error),
            io::fmt_f64(c.hard_se),
            io::fmt_f64(c.final_acc_pseudo),
            c.iterations.to_string(),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
