//! Experiment drivers behind the command-line verbs: seeded servo runs with
//! reports, update-cost benchmarks, side-by-side model comparisons and the
//! forgetting study.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{rngs::StdRng, RngExt, SeedableRng};
use rand_distr::StandardNormal;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::controller::{run_servo_loop, warm_start, ControlConfig, TrajectoryLog};
use crate::error::{Error, Result};
use crate::fo_gpr::GpState;
use crate::gp_core::{Hyperparams, Posterior};
use crate::model::{AnyModel, DeformationModel, ModelKind};
use crate::task::{TaskFile, Trial};

/// Leading samples dropped from every timing series (cache and allocator
/// warm-up).
pub const TIMING_WARMUP: usize = 10;

/// Warm-start excitation draws from its own stream so that changing the
/// number of warm-up steps does not shift the servo loop's noise.
const WARM_START_STREAM: u64 = 0x5741_524d_5354_4152;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingStats {
    pub count: usize,
    pub mean_us: f64,
    pub p95_us: f64,
    pub max_us: f64,
}

impl TimingStats {
    /// Statistics of `samples` after dropping the first [`TIMING_WARMUP`];
    /// `None` when nothing is left.
    pub fn from_series(samples: &[f64]) -> Option<Self> {
        let kept = samples.get(TIMING_WARMUP..).filter(|s| !s.is_empty())?;
        let mut sorted = kept.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        // nearest-rank percentile
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(TimingStats {
            count: n,
            mean_us: sorted.iter().sum::<f64>() / n as f64,
            p95_us: sorted[rank - 1],
            max_us: sorted[n - 1],
        })
    }
}

/// What happened for one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub success: bool,
    /// Commands sent by the servo loop (warm-up excluded).
    pub steps: usize,
    pub final_error: f64,
    /// Norm of the last command the loop sent.
    pub terminal_command_norm: f64,
    /// Observations held by the model at the end.
    pub stored: usize,
    pub warm_start_pairs: usize,
    pub update_time: Option<TimingStats>,
    pub cycle_time: Option<TimingStats>,
    /// Set when the run stopped on an error rather than finishing.
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub outcome: SeedOutcome,
    pub log: Option<TrajectoryLog>,
}

/// Runs one seed of a trial: a fresh copy of the world and model, the warm
/// start, then the servo loop with `rng_seed = seed`.
pub fn run_seed(trial: &Trial, seed: u64, explore: Option<bool>) -> SeedRun {
    let mut outcome = SeedOutcome {
        seed,
        success: false,
        steps: 0,
        final_error: f64::NAN,
        terminal_command_norm: 0.0,
        stored: 0,
        warm_start_pairs: 0,
        update_time: None,
        cycle_time: None,
        error: None,
    };
    let mut cfg = trial.control;
    cfg.rng_seed = seed;
    if let Some(explore) = explore {
        cfg.explore = explore;
    }
    let result = (|| {
        let mut world = trial.world.clone();
        let dim = trial.task.target.len();
        let mut model = AnyModel::build(&trial.model, trial.hyperparams, dim, world.control_dim())?;
        let mut rng = StdRng::seed_from_u64(seed ^ WARM_START_STREAM);
        let ws = trial.warm_start;
        outcome.warm_start_pairs =
            warm_start(&mut world, &trial.task.spec, &mut model, ws.steps, ws.amplitude, &mut rng)?;
        let log = run_servo_loop(&mut world, &trial.task, &mut model, &cfg)?;
        outcome.stored = model.stored();
        Ok::<_, Error>(log)
    })();
    match result {
        Ok(log) => {
            outcome.success = log.success;
            outcome.steps = log.steps;
            outcome.final_error = log.final_error;
            outcome.terminal_command_norm = log.command_norms().last().copied().unwrap_or(0.0);
            if cfg.record_timings {
                let sent = &log.records[..log.steps];
                let update: Vec<f64> = sent.iter().map(|r| r.timings.update_us).collect();
                let cycle: Vec<f64> = sent.iter().map(|r| r.timings.total_us).collect();
                outcome.update_time = TimingStats::from_series(&update);
                outcome.cycle_time = TimingStats::from_series(&cycle);
            }
            SeedRun { outcome, log: Some(log) }
        }
        Err(e) => {
            log::warn!("{} seed {seed}: {e}", trial.name);
            outcome.error = Some(e.to_string());
            SeedRun { outcome, log: None }
        }
    }
}

/// Runs every seed, spreading them over the available cores. Results come
/// back in seed order and do not depend on the scheduling.
pub fn run_trial(trial: &Trial, seeds: &[u64], explore: Option<bool>) -> Vec<SeedRun> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len().max(1));
    if workers <= 1 {
        return seeds.iter().map(|&s| run_seed(trial, s, explore)).collect();
    }
    let mut runs: Vec<Option<SeedRun>> = vec![None; seeds.len()];
    std::thread::scope(|scope| {
        let chunk = seeds.len().div_ceil(workers);
        for (slot, seeds) in runs.chunks_mut(chunk).zip(seeds.chunks(chunk)) {
            scope.spawn(move || {
                for (out, &seed) in slot.iter_mut().zip(seeds) {
                    *out = Some(run_seed(trial, seed, explore));
                }
            });
        }
    });
    runs.into_iter().map(|r| r.expect("every slot is filled")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub task: String,
    pub model: String,
    pub seeds: Vec<SeedOutcome>,
}

impl Report {
    pub fn successes(&self) -> usize {
        self.seeds.iter().filter(|s| s.success).count()
    }

    pub fn success_rate(&self) -> f64 {
        self.successes() as f64 / self.seeds.len().max(1) as f64
    }

    /// Median steps over the successful seeds.
    pub fn median_steps(&self) -> Option<f64> {
        median(self.seeds.iter().filter(|s| s.success).map(|s| s.steps as f64).collect())
    }

    pub fn errored(&self) -> bool {
        self.seeds.iter().any(|s| s.error.is_some())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Command-line overrides of a task file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seeds: Option<Vec<u64>>,
    pub explore: Option<bool>,
    pub out_dir: Option<PathBuf>,
}

/// Output directory: the override, else the file's `run.out_dir`, else
/// `out/<task name>`.
pub fn output_dir(file: &TaskFile, opts: &RunOptions) -> PathBuf {
    opts.out_dir
        .clone()
        .or_else(|| file.run.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("out").join(file.display_name()))
}

/// Runs a task file and writes `trajectory_seed<seed>.csv` per completed seed
/// plus `report.json` into the output directory.
pub fn run(file: &TaskFile, opts: &RunOptions) -> Result<Report> {
    let trial = file.build()?;
    let seeds = opts.seeds.clone().unwrap_or_else(|| file.run.seeds.clone());
    let runs = run_trial(&trial, &seeds, opts.explore);
    let dir = output_dir(file, opts);
    fs::create_dir_all(&dir)?;
    for run in &runs {
        if let Some(log) = &run.log {
            let path = dir.join(format!("trajectory_seed{}.csv", run.outcome.seed));
            let mut buf = Vec::new();
            log.write_csv(&mut buf)?;
            fs::write(path, buf)?;
        }
    }
    let report = Report {
        task: trial.name.clone(),
        model: trial.model.name(),
        seeds: runs.into_iter().map(|r| r.outcome).collect(),
    };
    fs::write(dir.join("report.json"), report.to_json()?)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Update-cost benchmark

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub m_values: Vec<usize>,
    pub n_stream: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub seed: u64,
    /// Passes over the same stream; each update's time is the fastest pass.
    pub repeats: usize,
    pub hyperparams: Hyperparams,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            m_values: vec![300],
            n_stream: 1000,
            in_dim: 4,
            out_dim: 6,
            seed: 0,
            repeats: 5,
            hyperparams: Hyperparams::default(),
        }
    }
}

/// Least-squares line through a timing series after capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Trend {
    /// Change in microseconds per 100 updates.
    pub slope_per_100: f64,
    pub mean_us: f64,
    /// Two-sided p-value of the slope under the usual t test.
    pub p_value: f64,
}

impl Trend {
    pub fn fit(steps: &[f64], times: &[f64]) -> Option<Trend> {
        let n = steps.len();
        if n < 3 || times.len() != n {
            return None;
        }
        let nf = n as f64;
        let (mx, my) = (steps.iter().sum::<f64>() / nf, times.iter().sum::<f64>() / nf);
        let sxx: f64 = steps.iter().map(|x| (x - mx).powi(2)).sum();
        let sxy: f64 = steps.iter().zip(times).map(|(x, y)| (x - mx) * (y - my)).sum();
        if sxx == 0.0 {
            return None;
        }
        let slope = sxy / sxx;
        let sse: f64 = steps.iter().zip(times).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
        let se = (sse / (nf - 2.0) / sxx).sqrt();
        let p_value = if se == 0.0 {
            if slope == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            let t = StudentsT::new(0.0, 1.0, nf - 2.0).ok()?;
            2.0 * t.sf((slope / se).abs())
        };
        Some(Trend { slope_per_100: slope * 100.0, mean_us: my, p_value })
    }

    /// No detectable growth: the slope is not significant, or it is below
    /// 1% of the mean per 100 updates.
    pub fn is_flat(&self) -> bool {
        self.p_value > 0.05 || self.slope_per_100.abs() < 0.01 * self.mean_us
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityBench {
    pub capacity: usize,
    /// Per-update wall time (µs), one entry per stream element.
    pub times_us: Vec<f64>,
    pub stats: Option<TimingStats>,
    /// Trend of the update time once the model is full.
    pub after_capacity: Option<Trend>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub n_stream: usize,
    pub fo_gpr: Vec<CapacityBench>,
    pub standard_times_us: Vec<f64>,
    /// Median standard-GPR update time near the end of the stream over the
    /// median near the smallest capacity.
    pub standard_growth: Option<f64>,
}

/// Half-width of the windows whose medians summarise a noisy timing series.
const WINDOW: usize = 25;

fn window_median(times: &[f64], centre: usize) -> Option<f64> {
    let lo = centre.saturating_sub(WINDOW);
    let hi = (centre + WINDOW).min(times.len());
    (lo < hi).then(|| median(times[lo..hi].to_vec())).flatten()
}

impl BenchReport {
    /// Ratio of median update times around step `late` and step `early`.
    pub fn standard_ratio(&self, early: usize, late: usize) -> Option<f64> {
        Some(window_median(&self.standard_times_us, late)? / window_median(&self.standard_times_us, early)?)
    }

    /// `step, fo_gpr_m<M>..., standard_gpr` in microseconds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for b in &self.fo_gpr {
            let _ = write!(out, ",fo_gpr_m{}", b.capacity);
        }
        out.push_str(",standard_gpr\n");
        for t in 0..self.n_stream {
            let _ = write!(out, "{t}");
            for b in &self.fo_gpr {
                let _ = write!(out, ",{}", b.times_us[t]);
            }
            let _ = writeln!(out, ",{}", self.standard_times_us[t]);
        }
        out
    }
}

/// A reproducible synthetic observation stream: inputs drawn from
/// `N(0, 0.05^2 I)` and outputs from a fixed smooth nonlinear map, so every
/// input is distinct and stored.
pub fn synthetic_stream(n: usize, in_dim: usize, out_dim: usize, seed: u64) -> Vec<(DVector<f64>, DVector<f64>)> {
    let mut rng = StdRng::seed_from_u64(seed);
    let w = DMatrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-1.0..1.0));
    (0..n)
        .map(|_| {
            let x = DVector::from_fn(in_dim, |_, _| 0.05 * rng.sample::<f64, _>(StandardNormal));
            let y = (&w * &x).map(|v| v + 0.3 * (5.0 * v).sin());
            (x, y)
        })
        .collect()
}

type Fresh<'a> = Box<dyn Fn() -> Result<GpState> + 'a>;

/// Per-update wall time (µs) of each engine over `repeats` replays of the
/// stream from a fresh state, keeping each update's fastest time. Every
/// replay performs identical work, while scheduler and frequency noise only
/// ever add time; the engines take turns so that one slow spell cannot cover
/// all replays of one engine.
fn timed_streams(
    engines: &[Fresh<'_>],
    stream: &[(DVector<f64>, DVector<f64>)],
    repeats: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut best = vec![vec![f64::INFINITY; stream.len()]; engines.len()];
    for _ in 0..repeats {
        for (fresh, best) in engines.iter().zip(best.iter_mut()) {
            let mut state = fresh()?;
            for ((x, y), b) in stream.iter().zip(best.iter_mut()) {
                let t = Instant::now();
                state.add_observation(x.clone(), y.clone())?;
                *b = b.min(t.elapsed().as_secs_f64() * 1e6);
            }
        }
    }
    Ok(best)
}

/// Times every update of FO-GPR at each capacity and of the unbounded GPR on
/// the same stream.
pub fn bench_update_cost(cfg: &BenchConfig) -> Result<BenchReport> {
    let largest = cfg.m_values.iter().copied().max().unwrap_or(0);
    if cfg.m_values.is_empty() || cfg.n_stream <= largest {
        return Err(Error::config(
            "bench.n_stream",
            format!("must exceed the largest capacity ({largest}), got {}", cfg.n_stream),
        ));
    }
    if cfg.repeats == 0 {
        return Err(Error::config("bench.repeats", "at least one pass is required"));
    }
    let stream = synthetic_stream(cfg.n_stream, cfg.in_dim, cfg.out_dim, cfg.seed);
    let mut engines: Vec<Fresh<'_>> = cfg
        .m_values
        .iter()
        .map(|&m| {
            let hp = Hyperparams { max_size: m, ..cfg.hyperparams };
            Box::new(move || GpState::new(hp, cfg.in_dim, cfg.out_dim)) as Fresh<'_>
        })
        .collect();
    engines.push(Box::new(|| GpState::unbounded(cfg.hyperparams, cfg.in_dim, cfg.out_dim)));
    let mut times = timed_streams(&engines, &stream, cfg.repeats)?;
    let standard_times_us = times.pop().expect("standard engine timed");
    let fo_gpr = cfg
        .m_values
        .iter()
        .zip(times)
        .map(|(&m, times_us)| {
            let steps: Vec<f64> = (m..cfg.n_stream).map(|t| t as f64).collect();
            CapacityBench {
                capacity: m,
                stats: TimingStats::from_series(&times_us[m..]),
                after_capacity: Trend::fit(&steps, &times_us[m..]),
                times_us,
            }
        })
        .collect();
    let smallest = cfg.m_values.iter().copied().min().unwrap_or(0);
    let mut report = BenchReport { n_stream: cfg.n_stream, fo_gpr, standard_times_us, standard_growth: None };
    report.standard_growth = report.standard_ratio(smallest, cfg.n_stream - WINDOW);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Model comparison

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub model: String,
    pub successes: usize,
    pub runs: usize,
    pub median_steps: Option<f64>,
    pub mean_final_error: f64,
    pub seeds: Vec<SeedOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub task: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, model: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("## {}\n\nseeds: {:?}\n\n", self.task, self.seeds);
        out.push_str("| model | success | median steps | mean final error |\n|---|---|---|---|\n");
        for r in &self.rows {
            let steps = r.median_steps.map_or_else(|| "-".to_string(), |s| format!("{s}"));
            let _ =
                writeln!(out, "| {} | {}/{} | {} | {:.3e} |", r.model, r.successes, r.runs, steps, r.mean_final_error);
        }
        out
    }

    /// One line per (model, seed): `model,seed,success,steps,final_error,error`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,seed,success,steps,final_error,error\n");
        for r in &self.rows {
            for s in &r.seeds {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.model,
                    s.seed,
                    s.success,
                    s.steps,
                    s.final_error,
                    s.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
                );
            }
        }
        out
    }

    pub fn errored(&self) -> bool {
        self.rows.iter().any(|r| r.seeds.iter().any(|s| s.error.is_some()))
    }
}

fn row(model: String, seeds: Vec<SeedOutcome>) -> ComparisonRow {
    let report = Report { task: String::new(), model: model.clone(), seeds };
    let finite: Vec<f64> = report.seeds.iter().map(|s| s.final_error).filter(|e| e.is_finite()).collect();
    ComparisonRow {
        model,
        successes: report.successes(),
        runs: report.seeds.len(),
        median_steps: report.median_steps(),
        mean_final_error: if finite.is_empty() { f64::NAN } else { finite.iter().sum::<f64>() / finite.len() as f64 },
        seeds: report.seeds,
    }
}

/// Runs one trial under several models on the same seeds.
pub fn compare_trials(trial: &Trial, kinds: &[ModelKind], seeds: &[u64], explore: Option<bool>) -> Comparison {
    let rows = kinds
        .iter()
        .map(|kind| {
            let variant = Trial { model: kind.clone(), ..trial.clone() };
            let outcomes = run_trial(&variant, seeds, explore).into_iter().map(|r| r.outcome).collect();
            row(kind.name(), outcomes)
        })
        .collect();
    Comparison { task: trial.name.clone(), seeds: seeds.to_vec(), rows }
}

/// Compares task files that differ only in their model (and name or output
/// directory). Anything else differing is a configuration error.
pub fn compare_models(files: &[TaskFile], opts: &RunOptions) -> Result<Comparison> {
    let Some(first) = files.first() else {
        return Err(Error::config("config", "compare needs at least one task file"));
    };
    let strip = |f: &TaskFile| {
        let mut f = f.clone();
        f.name = None;
        f.model = Default::default();
        f.run.out_dir = None;
        f
    };
    let reference = strip(first);
    for (i, f) in files.iter().enumerate().skip(1) {
        let other = strip(f);
        let field = if other.run.seeds != reference.run.seeds {
            Some("run.seeds")
        } else if other != reference {
            Some("task")
        } else {
            None
        };
        if let Some(field) = field {
            return Err(Error::config(
                field,
                format!("config {} ({}) does not share the task and seeds of the first", i + 1, f.display_name()),
            ));
        }
    }
    let seeds = opts.seeds.clone().unwrap_or_else(|| first.run.seeds.clone());
    let mut rows = Vec::new();
    for f in files {
        let trial = f.build()?;
        let outcomes = run_trial(&trial, &seeds, opts.explore).into_iter().map(|r| r.outcome).collect();
        rows.push(row(trial.model.name(), outcomes));
    }
    Ok(Comparison { task: first.display_name(), seeds, rows })
}

// ---------------------------------------------------------------------------
// Forgetting study

/// Feeds every observation to a driving model and to shadow models that never
/// influence the commands.
struct Shadowed<'a> {
    driver: &'a mut GpState,
    shadows: Vec<&'a mut dyn DeformationModel>,
}

impl DeformationModel for Shadowed<'_> {
    fn predict(&self, query: &DVector<f64>) -> Result<Posterior> {
        DeformationModel::predict(self.driver, query)
    }

    fn observe(&mut self, dx: DVector<f64>, dp: DVector<f64>) -> Result<()> {
        for s in &mut self.shadows {
            s.observe(dx.clone(), dp.clone())?;
        }
        self.driver.observe(dx, dp)
    }

    fn stored(&self) -> usize {
        self.driver.stored()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ForgettingOutcome {
    pub seed: u64,
    pub final_error: f64,
    pub warm_start_pairs: usize,
    /// `|mu|` of each model at the final query `eta (x_d - x_final)`.
    pub fo_gpr_command: f64,
    pub standard_command: f64,
    pub offline_command: f64,
}

/// Warm-starts with `warm_start.steps` exploratory commands, then servos for
/// `control.max_steps` steps with FO-GPR in the loop while an unbounded GPR
/// and a copy frozen after the warm start see the same stream. Each model is
/// then asked for the command at the final error; a model that has kept up
/// with the local deformation asks for (almost) nothing.
pub fn forgetting_study(trial: &Trial, seed: u64) -> Result<ForgettingOutcome> {
    let mut world = trial.world.clone();
    let dim = trial.task.target.len();
    let out = world.control_dim();
    let mut fo = GpState::new(trial.hyperparams, dim, out)?;
    let mut standard = GpState::unbounded(trial.hyperparams, dim, out)?;
    let mut rng = StdRng::seed_from_u64(seed ^ WARM_START_STREAM);
    let ws = trial.warm_start;
    let warm_start_pairs = {
        let mut tee = Shadowed { driver: &mut fo, shadows: vec![&mut standard] };
        warm_start(&mut world, &trial.task.spec, &mut tee, ws.steps, ws.amplitude, &mut rng)?
    };
    let offline = fo.clone();
    let cfg = ControlConfig { rng_seed: seed, ..trial.control };
    {
        let mut tee = Shadowed { driver: &mut fo, shadows: vec![&mut standard] };
        run_servo_loop(&mut world, &trial.task, &mut tee, &cfg)?;
    }
    let x = world.features(&trial.task.spec)?.values;
    let delta = &trial.task.target.values - &x;
    let query = &delta * cfg.eta;
    let norm = |m: &GpState| -> Result<f64> { Ok(m.predict(&query)?.mu.norm()) };
    Ok(ForgettingOutcome {
        seed,
        final_error: delta.norm(),
        warm_start_pairs,
        fo_gpr_command: norm(&fo)?,
        standard_command: norm(&standard)?,
        offline_command: norm(&offline)?,
    })
}
