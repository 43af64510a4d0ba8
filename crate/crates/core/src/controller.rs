//! Closed-loop servo control: query the learned deformation model at the
//! scaled feature error, optionally sample from the posterior to explore,
//! move the manipulated points, and train on what actually happened.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rand::{rngs::StdRng, RngExt, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::features::{FeatureSpec, FeatureVector};
use crate::gp_core::Posterior;
use crate::model::DeformationModel;
use crate::sim::World;

/// Pairs whose observed feature change is smaller than this carry no
/// information and are not used for training.
pub const MIN_OBSERVED_CHANGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    /// Feedback gain on the feature error.
    pub eta: f64,
    pub max_steps: usize,
    /// Success threshold on `|x_d - x|`, in feature units.
    pub success_tol: f64,
    /// Sample the command from the posterior instead of using its mean.
    pub explore: bool,
    pub rng_seed: u64,
    /// Largest command norm per step (m).
    pub velocity_cap: f64,
    /// Measure per-phase wall-clock time; when off the timing columns are zero.
    pub record_timings: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            eta: 0.1,
            max_steps: 500,
            success_tol: 1e-3,
            explore: true,
            rng_seed: 0,
            velocity_cap: 0.01,
            record_timings: true,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        positive("control.eta", self.eta)?;
        positive("control.success_tol", self.success_tol)?;
        positive("control.velocity_cap", self.velocity_cap)
    }
}

/// Per-phase wall-clock time of one step, in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timings {
    pub feature_us: f64,
    pub predict_us: f64,
    pub sim_us: f64,
    pub update_us: f64,
    pub total_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub x: DVector<f64>,
    /// `x_d - x` before the command.
    pub delta_x: DVector<f64>,
    pub command: DVector<f64>,
    pub posterior_var: f64,
    /// Whether the realised pair was used for training.
    pub trained: bool,
    pub timings: Timings,
}

impl StepRecord {
    pub fn err_norm(&self) -> f64 {
        self.delta_x.norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub records: Vec<StepRecord>,
    pub success: bool,
    /// Number of commands sent to the world.
    pub steps: usize,
    pub final_error: f64,
}

impl TrajectoryLog {
    /// Command norms in execution order; the zero row logged on success is excluded.
    pub fn command_norms(&self) -> Vec<f64> {
        self.records.iter().take(self.steps).map(|r| r.command.norm()).collect()
    }

    /// Writes the log as CSV with the columns
    /// `step, err_norm, posterior_var, t_feature_us, t_predict_us, t_sim_us,
    /// t_update_us, t_total_us, x_0.., cmd_0..`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let (nx, np) = self.records.first().map_or((0, 0), |r| (r.x.len(), r.command.len()));
        let mut header = vec![
            "step".to_string(),
            "err_norm".into(),
            "posterior_var".into(),
            "t_feature_us".into(),
            "t_predict_us".into(),
            "t_sim_us".into(),
            "t_update_us".into(),
            "t_total_us".into(),
        ];
        header.extend((0..nx).map(|i| format!("x_{i}")));
        header.extend((0..np).map(|i| format!("cmd_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for r in &self.records {
            let t = &r.timings;
            let mut row = vec![
                r.step.to_string(),
                r.err_norm().to_string(),
                r.posterior_var.to_string(),
                t.feature_us.to_string(),
                t.predict_us.to_string(),
                t.sim_us.to_string(),
                t.update_us.to_string(),
                t.total_us.to_string(),
            ];
            row.extend(r.x.iter().map(f64::to_string));
            row.extend(r.command.iter().map(f64::to_string));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// What the controller is asked to achieve.
#[derive(Debug, Clone, PartialEq)]
pub struct ServoTask {
    pub spec: FeatureSpec,
    pub target: FeatureVector,
}

/// One control decision: query the model at `eta (x_d - x)`, add
/// `sqrt(var) z` per command dimension when exploring, and clamp the result
/// to the velocity cap.
pub fn control_step<M: DeformationModel + ?Sized>(
    model: &M,
    x_d: &DVector<f64>,
    x: &DVector<f64>,
    cfg: &ControlConfig,
    rng: &mut StdRng,
) -> Result<(DVector<f64>, Posterior)> {
    check_dim(x_d.len(), x.len())?;
    let query = (x_d - x) * cfg.eta;
    let post = model.predict(&query)?;
    if post.mu.iter().any(|v| !v.is_finite()) || !post.var.is_finite() {
        return Err(Error::NumericalHealth("non-finite prediction".into()));
    }
    let mut command = post.mu.clone();
    if cfg.explore {
        let std = post.var.sqrt();
        for c in command.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *c += std * z;
        }
    }
    let norm = command.norm();
    if norm > cfg.velocity_cap {
        command *= cfg.velocity_cap / norm;
    }
    Ok((command, post))
}

struct Clock(Option<Instant>);

impl Clock {
    fn start(enabled: bool) -> Self {
        Clock(enabled.then(Instant::now))
    }

    /// Microseconds since the last lap.
    fn lap(&mut self) -> f64 {
        match &mut self.0 {
            Some(t) => {
                let now = Instant::now();
                let us = now.duration_since(*t).as_secs_f64() * 1e6;
                *t = now;
                us
            }
            None => 0.0,
        }
    }
}

/// Runs the servo loop until `|x_d - x| <= success_tol` or `max_steps`
/// commands have been sent. On success a final record with a zero command is
/// logged. The model is trained in place on every informative step.
pub fn run_servo_loop<M: DeformationModel + ?Sized>(
    world: &mut World,
    task: &ServoTask,
    model: &mut M,
    cfg: &ControlConfig,
) -> Result<TrajectoryLog> {
    cfg.validate()?;
    let mut rng = StdRng::seed_from_u64(cfg.rng_seed);
    let x_d = &task.target.values;
    let mut records = Vec::new();
    let mut x = world.features(&task.spec)?.values;
    check_dim(x.len(), x_d.len())?;

    for step in 0..=cfg.max_steps {
        let delta_x = x_d - &x;
        let err = delta_x.norm();
        if err <= cfg.success_tol || step == cfg.max_steps {
            let success = err <= cfg.success_tol;
            if success {
                records.push(StepRecord {
                    step,
                    x: x.clone(),
                    delta_x,
                    command: DVector::zeros(world.control_dim()),
                    posterior_var: 0.0,
                    trained: false,
                    timings: Timings::default(),
                });
            }
            log::debug!("servo loop finished at step {step}: success = {success}, error = {err:e}");
            return Ok(TrajectoryLog { records, success, steps: step, final_error: err });
        }

        let mut clock = Clock::start(cfg.record_timings);
        let mut total = Clock::start(cfg.record_timings);
        let (command, post) = control_step(model, x_d, &x, cfg, &mut rng).map_err(|e| e.at_step(step))?;
        let predict_us = clock.lap();
        world.apply_control(&command).map_err(|e| e.at_step(step))?;
        let sim_us = clock.lap();
        let x_next = world.features(&task.spec).map_err(|e| e.at_step(step))?.values;
        let feature_us = clock.lap();
        let observed = &x_next - &x;
        let trained = observed.norm() >= MIN_OBSERVED_CHANGE;
        if trained {
            model.observe(observed, command.clone()).map_err(|e| e.at_step(step))?;
        }
        let update_us = clock.lap();
        records.push(StepRecord {
            step,
            x,
            delta_x,
            command,
            posterior_var: post.var,
            trained,
            timings: Timings { feature_us, predict_us, sim_us, update_us, total_us: total.lap() },
        });
        x = x_next;
    }
    unreachable!("the loop returns at step == max_steps")
}

/// Random excitation before servoing: `n` commands of norm at most
/// `amplitude`, each a random direction plus a pull back towards the
/// manipulated points' starting pose, with every realised pair added to the
/// model. Returns the number of pairs used for training.
pub fn warm_start<M: DeformationModel + ?Sized>(
    world: &mut World,
    spec: &FeatureSpec,
    model: &mut M,
    n: usize,
    amplitude: f64,
    rng: &mut StdRng,
) -> Result<usize> {
    if n == 0 {
        return Ok(0);
    }
    if !(amplitude > 0.0 && amplitude.is_finite()) {
        return Err(Error::config("warm_start.amplitude", format!("must be positive, got {amplitude}")));
    }
    let home = world.manipulated_positions();
    let dim = home.len();
    let mut x = world.features(spec)?.values;
    let mut used = 0;
    for step in 0..n {
        let mut dp = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let scale = amplitude * rng.random_range(0.2..1.0) / dp.norm().max(f64::MIN_POSITIVE);
        dp *= scale;
        dp -= (world.manipulated_positions() - &home) * 0.1;
        let norm = dp.norm();
        if norm > amplitude {
            dp *= amplitude / norm;
        }
        world.apply_control(&dp).map_err(|e| e.at_step(step))?;
        let x_next = world.features(spec).map_err(|e| e.at_step(step))?.values;
        let observed = &x_next - &x;
        if observed.norm() >= MIN_OBSERVED_CHANGE {
            model.observe(observed, dp).map_err(|e| e.at_step(step))?;
            used += 1;
        }
        x = x_next;
    }
    Ok(used)
}
