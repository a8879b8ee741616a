use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::{s, Array2};
use proxflow::datasets::TargetKind;
use proxflow::flow::{generate, read_potential, train_with, write_potential, Field, MetricsRecord, Mode, Termination, TrainOutcome};
use proxflow::nn::write_params;
use proxflow::oracles::empirical_w1_exact;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{RawConfig, RunConfig, VERSION};

pub const MANIFEST: &str = "manifest.cfg";
pub const METRICS: &str = "metrics.jsonl";
pub const POTENTIAL: &str = "potential.ckpt";
pub const DISCRIMINATOR: &str = "discriminator.ckpt";
pub const SWEEP_MANIFEST: &str = "sweep.txt";
pub const SWEEP_TABLE: &str = "comparison.tsv";

/// Largest sample size handed to the exact assignment solver.
pub const EVAL_CAP: usize = 256;

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut raw = RawConfig::load(path)?;
    for o in overrides {
        raw.set_override(o)?;
    }
    Ok(raw.resolve()?)
}

/// What `train` reports back to `sweep`.
pub struct RunSummary {
    pub mode: Mode,
    pub dir: PathBuf,
    pub termination: Termination,
    pub iterations: usize,
    pub final_record: Option<MetricsRecord>,
    pub tail_dual: f64,
}

pub fn run_training(cfg: &RunConfig) -> Result<RunSummary> {
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(MANIFEST), cfg.manifest()).context("writing manifest")?;
    let target = cfg.target.build(cfg.flow.seed)?;

    let metrics_path = dir.join(METRICS);
    let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| metrics_path.display().to_string())?);
    let mut write_err = None;
    let outcome = train_with(target.sampler(), &cfg.flow, &cfg.divergence, |rec| {
        if write_err.is_none() {
            let line = serde_json::to_string(rec).map_err(anyhow::Error::from);
            if let Err(e) = line.and_then(|l| writeln!(metrics, "{l}").map_err(Into::into)) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.context("writing metrics"));
    }
    metrics.flush()?;
    save_checkpoints(dir, cfg, &outcome)?;

    let tail = &outcome.history[outcome.history.len().saturating_sub(100)..];
    let tail_dual = tail.iter().map(|r| r.dual_estimate).sum::<f64>() / tail.len().max(1) as f64;
    Ok(RunSummary {
        mode: cfg.flow.mode,
        dir: dir.clone(),
        iterations: outcome.history.len(),
        final_record: outcome.history.last().cloned(),
        termination: outcome.termination,
        tail_dual,
    })
}

fn save_checkpoints(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.join(POTENTIAL))?);
    write_potential(&mut w, &outcome.potential, cfg.flow.lambda, cfg.flow.steps)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join(DISCRIMINATOR))?);
    write_params(&mut w, &outcome.discriminator.net)?;
    w.flush()?;
    Ok(())
}

pub fn describe(t: &Termination) -> String {
    match t {
        Termination::Completed => "completed".into(),
        Termination::Converged { iteration } => format!("converged at {iteration}"),
        Termination::BlowUp { iteration, estimate } => format!("blow-up at {iteration} (dual {estimate:.4e})"),
        Termination::NonFinite { iteration, detail } => format!("non-finite at {iteration} ({detail})"),
    }
}

/// Trains one run; the error carries mode and iteration on divergence.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let summary = run_training(cfg)?;
    print_summary(&summary);
    if summary.termination.diverged() {
        bail!(
            "mode {} diverged at iteration {}: {}",
            summary.mode,
            summary.termination.iteration().unwrap_or_default(),
            describe(&summary.termination)
        );
    }
    Ok(())
}

fn print_summary(s: &RunSummary) {
    let last = s.final_record.as_ref();
    println!(
        "{}: {} after {} iterations, final dual {:.4}, kinetic {:.4}, run dir {}",
        s.mode,
        describe(&s.termination),
        s.iterations,
        last.map_or(f64::NAN, |r| r.dual_estimate),
        last.map_or(f64::NAN, |r| r.kinetic_energy),
        s.dir.display()
    );
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

/// Runs all four modes under one base configuration.
pub fn cmd_sweep(base: &RunConfig) -> Result<()> {
    let root = base.out_dir.clone();
    fs::create_dir_all(&root)?;
    let mut summaries = Vec::new();
    for mode in Mode::ALL {
        let mut cfg = base.clone();
        cfg.flow.mode = mode;
        cfg.out_dir = root.join(mode.name());
        cfg.overrides.push(format!("mode={mode}"));
        summaries.push(run_training(&cfg)?);
    }

    let mut table = String::from("mode\tstatus\titerations\tfinal_dual\ttail_dual\tkinetic\thj_residual\tterminal_error\n");
    for s in &summaries {
        let last = s.final_record.as_ref();
        table.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.4}\t{}\t{}\t{}\n",
            s.mode,
            describe(&s.termination),
            s.iterations,
            fmt_opt(last.map(|r| r.dual_estimate)),
            s.tail_dual,
            fmt_opt(last.map(|r| r.kinetic_energy)),
            fmt_opt(last.and_then(|r| r.hj_residual)),
            fmt_opt(last.and_then(|r| r.terminal_error)),
        ));
    }
    fs::write(root.join(SWEEP_TABLE), &table)?;
    let mut listing = format!("# {VERSION}\n");
    for s in &summaries {
        listing.push_str(&format!("{}\t{}\n", s.mode, s.dir.display()));
    }
    fs::write(root.join(SWEEP_MANIFEST), listing)?;
    print!("{table}");
    Ok(())
}

/// Writes `n` generated samples as CSV.
pub fn cmd_generate(checkpoint: &Path, n: usize, steps: Option<usize>, seed: u64, out: &Path) -> Result<()> {
    let file = File::open(checkpoint).with_context(|| format!("cannot open checkpoint {}", checkpoint.display()))?;
    let (potential, lambda, trained_steps) =
        read_potential(BufReader::new(file)).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let d = potential.dim();
    let samples = generate(&potential, n, steps.unwrap_or(trained_steps), lambda, potential.horizon, seed)?;
    write_csv(out, d, &samples)
}

pub fn write_csv(path: &Path, d: usize, samples: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record((0..d).map(|j| format!("x{j}")))?;
    for row in samples.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot open samples {}", path.display()))?;
    let d = r.headers()?.len();
    let mut data = Vec::new();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        for field in rec.iter() {
            data.push(field.trim().parse::<f64>().with_context(|| format!("bad number `{field}` in {}", path.display()))?);
        }
        n += 1;
    }
    Ok(Array2::from_shape_vec((n, d), data)?)
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub dim: usize,
    /// Exact W1 between (up to [`EVAL_CAP`]) generated and fresh target samples.
    pub w1: f64,
    /// Same statistic between two independent target draws.
    pub w1_baseline: f64,
    pub mean_error: f64,
    /// Frobenius norm of the covariance difference.
    pub covariance_error: f64,
    pub manifold_residual: Option<f64>,
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn moments(m: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = m.nrows().max(1) as f64;
    let mean = m.mean_axis(ndarray::Axis(0)).map(|a| a.to_vec()).unwrap_or_default();
    let centered = m - &ndarray::Array1::from(mean.clone());
    (mean, centered.t().dot(&centered) / n)
}

pub fn evaluate(samples: &Array2<f64>, cfg: &RunConfig, seed: u64) -> Result<EvalReport> {
    let target = cfg.target.build(cfg.flow.seed)?;
    let d = target.sampler().dim();
    if samples.ncols() != d {
        bail!("samples have dimension {} but the target has dimension {d}", samples.ncols());
    }
    if samples.nrows() == 0 {
        bail!("no samples to evaluate");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.nrows().min(EVAL_CAP);
    let gen = samples.slice(s![..n, ..]).to_owned();
    let a = target.draw(n, &mut rng);
    let b = target.draw(n, &mut rng);
    let w1 = empirical_w1_exact(&rows(&gen), &rows(&a))?;
    let w1_baseline = empirical_w1_exact(&rows(&b), &rows(&a))?;

    let big = target.draw(samples.nrows().max(4096), &mut rng);
    let (mg, cg) = moments(samples);
    let (mt, ct) = moments(&big);
    let mean_error = mg.iter().zip(&mt).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let covariance_error = (&cg - &ct).mapv(|v| v * v).sum().sqrt();
    let manifold_residual = target.kind().and_then(|k: &TargetKind| k.manifold_residual(samples.view()));
    Ok(EvalReport {
        samples: samples.nrows(),
        dim: d,
        w1,
        w1_baseline,
        mean_error,
        covariance_error,
        manifold_residual,
    })
}

pub fn cmd_evaluate(samples_path: &Path, cfg: &RunConfig, seed: u64, out: Option<&Path>) -> Result<()> {
    let samples = read_csv(samples_path)?;
    let report = evaluate(&samples, cfg, seed)?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}
