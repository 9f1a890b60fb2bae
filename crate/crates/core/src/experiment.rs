//! Experiment orchestration: seeded closed-loop trials of the adaptive
//! controller against the simulated arm, the payload-drop variant, the
//! identification protocols, cross-trial statistics, and reproducible
//! output directories.

use crate::config::SimConfig;
use crate::controller::{AdaptiveController, ControllerError};
use crate::monitor::{
    check_ultimate_bound, estimate_error_bound, vdot_sign_audit, BoundParams, MonitorError,
    StabilityReport,
};
use crate::plant::{
    integrate, ArmState, PlantBuildError, PlantFault, PlantModel, Pressures, N_DOF,
};
use crate::sysid::{
    hysteresis_metrics, log_decrement, HysteresisMetrics, LogDecrementConfig, SysIdError,
};
use crate::trace::{AuxRow, ExperimentLog, LogRow, RunMeta, ThetaSnapshot};
use crate::trajgen::{command_at, pressure_ramp, random_steps, StepSequence, TrajError};
use nalgebra::{DVector, Vector6};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Plant(#[from] PlantBuildError),
    #[error(transparent)]
    Trajectory(#[from] TrajError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    SysId(#[from] SysIdError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("trace error: {0}")]
    Trace(#[from] crate::trace::TraceError),
}

/// Run-level options, typically from the CLI.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    pub trials: usize,
    pub out_dir: Option<PathBuf>,
    pub lockstep: bool,
    /// Per-trial seed offset; zero reproduces the identical-trials
    /// degenerate case.
    pub seed_stride: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            trials: 5,
            out_dir: None,
            lockstep: true,
            seed_stride: 1,
        }
    }
}

/// One named pass/fail gate of an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

/// A payload strapped on at t = 0 and released mid-run.
#[derive(Debug, Clone, Copy)]
struct PayloadEvent {
    mass: f64,
    link: usize,
    remove_at: f64,
}

/// Everything produced by one closed-loop trial.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trial: usize,
    pub log: ExperimentLog,
    pub report: StabilityReport,
    pub wall_s: f64,
    pub net_json: String,
    pub timescale_warning: Option<String>,
}

fn now() -> Option<std::time::Instant> {
    #[cfg(not(target_arch = "wasm32"))]
    {
        Some(std::time::Instant::now())
    }
    #[cfg(target_arch = "wasm32")]
    {
        None
    }
}

fn elapsed_s(t0: &Option<std::time::Instant>) -> f64 {
    t0.as_ref().map(|t| t.elapsed().as_secs_f64()).unwrap_or(0.0)
}

/// Deterministic lock-step simulation of one trial: controller and plant
/// advance on one clock, ten plant substeps per control tick.
fn simulate_trial(
    cfg: &SimConfig,
    mut model: PlantModel,
    schedule: &[(f64, DVector<f64>)],
    noise_seed: u64,
    payload: Option<PayloadEvent>,
    duration: f64,
) -> Result<ExperimentLog, ExperimentError> {
    if let Some(ev) = payload {
        model.apply_payload(ev.mass, ev.link)?;
    }
    let mut ctl = AdaptiveController::new(&cfg.controller, Vector6::zeros())?;
    let mut state = ArmState::at_rest();
    let dt_c = 1.0 / cfg.controller.control_rate_hz;
    let substeps = 10usize;
    let dt_p = dt_c / substeps as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let sigma = cfg.trajectory.velocity_noise_sigma;

    let steps = (duration / dt_c).round() as usize;
    let mut log = ExperimentLog {
        step_times: schedule.iter().map(|(t, _)| *t).collect(),
        ..Default::default()
    };
    log.rows.reserve(steps);
    log.aux.reserve(steps);

    let mut payload_pending = payload;
    for k in 0..steps {
        let t = k as f64 * dt_c;
        if let Some(ev) = payload_pending {
            if t >= ev.remove_at {
                model.remove_payload();
                payload_pending = None;
            }
        }

        // Plant-truth acceleration at the sample instant (white-box data
        // for the offline monitor).
        let tau = model.joint_torque(&state.p);
        let d = model.disturbance_torque(&state.q, &state.q_dot, &state.hyst_z, state.t);
        let q_ddot = match model.rigid_dynamics(&state.q, &state.q_dot, &tau, &d) {
            Ok(a) => a,
            Err(fault) => {
                log.fault = Some(fault);
                break;
            }
        };

        let q_meas = state.q;
        let q_dot_meas = if sigma > 0.0 {
            Vector6::from_fn(|i, _| state.q_dot[i] + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
        } else {
            state.q_dot
        };
        let q_cmd_d = command_at(schedule, t);
        let q_cmd = Vector6::from_fn(|i, _| q_cmd_d[i]);

        let (p_des, diag) = ctl.step(&q_meas, &q_dot_meas, &q_cmd, dt_c);

        log.rows.push(LogRow {
            t,
            q: state.q,
            q_des: diag.setpoint.q_des,
            s: diag.s,
            tau_des: diag.tau_des,
            p_des,
            p: state.p,
            sat_flags: diag.sat_mask,
            step_us: diag.step_us,
        });
        log.aux.push(AuxRow {
            t,
            q_dot: state.q_dot,
            q_ddot,
            q_r_dot: diag.q_r_dot,
            q_r_ddot: diag.q_r_ddot,
            net_out: diag.net_out,
        });
        if k % cfg.monitor.theta_snap_every == 0 {
            log.theta_snaps.push(ThetaSnapshot {
                t,
                theta: ctl.net.theta.clone(),
            });
        }

        let mut faulted = false;
        for _ in 0..substeps {
            match integrate(&state, &p_des, &model, dt_p) {
                Ok(next) => state = next,
                Err(fault) => {
                    log.fault = Some(fault);
                    faulted = true;
                    break;
                }
            }
        }
        if faulted {
            break;
        }
    }
    // Persist the adapted network for resumption alongside the log.
    log.theta_snaps.push(ThetaSnapshot {
        t: state.t,
        theta: ctl.net.theta.clone(),
    });
    Ok(log)
}

/// Real-time variant: the plant advances on its own task, the controller
/// reads coherent state snapshots, and log rows pass through a bounded
/// drop-oldest queue so logging can never stall the loop. Not
/// deterministic; the white-box audit data is only collected in lock-step.
#[cfg(not(target_arch = "wasm32"))]
fn simulate_trial_realtime(
    cfg: &SimConfig,
    model: PlantModel,
    schedule: &[(f64, DVector<f64>)],
    noise_seed: u64,
    duration: f64,
) -> Result<ExperimentLog, ExperimentError> {
    use crossbeam_queue::ArrayQueue;
    use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
    use std::sync::{Arc, Mutex};

    #[derive(Clone, Copy)]
    struct Snapshot {
        q: Vector6<f64>,
        q_dot: Vector6<f64>,
        p: Pressures,
        t: f64,
        fault: bool,
    }

    let dt_c = 1.0 / cfg.controller.control_rate_hz;
    let dt_p = dt_c / 10.0;
    let snapshot = Arc::new(Mutex::new(Snapshot {
        q: Vector6::zeros(),
        q_dot: Vector6::zeros(),
        p: Pressures::zeros(),
        t: 0.0,
        fault: false,
    }));
    let command = Arc::new(Mutex::new(Pressures::from_element(0.0)));
    let done = Arc::new(AtomicBool::new(false));
    // Simulated time of the last completed control tick; the plant never
    // runs more than one control period past the commands it has.
    let ctl_time = Arc::new(AtomicU64::new(0f64.to_bits()));
    let queue: Arc<ArrayQueue<LogRow>> = Arc::new(ArrayQueue::new(1 << 14));
    let fault_slot: Arc<Mutex<Option<PlantFault>>> = Arc::new(Mutex::new(None));

    // Plant task.
    let plant_handle = {
        let snapshot = snapshot.clone();
        let command = command.clone();
        let done = done.clone();
        let ctl_time = ctl_time.clone();
        let fault_slot = fault_slot.clone();
        std::thread::spawn(move || {
            let mut state = ArmState::at_rest();
            loop {
                let horizon = f64::from_bits(ctl_time.load(Ordering::Acquire)) + dt_c;
                if state.t >= horizon {
                    if done.load(Ordering::Relaxed) {
                        break;
                    }
                    std::thread::yield_now();
                    continue;
                }
                let p_des = *command.lock().unwrap();
                match integrate(&state, &p_des, &model, dt_p) {
                    Ok(next) => state = next,
                    Err(fault) => {
                        *fault_slot.lock().unwrap() = Some(fault);
                        snapshot.lock().unwrap().fault = true;
                        break;
                    }
                }
                {
                    let mut snap = snapshot.lock().unwrap();
                    snap.q = state.q;
                    snap.q_dot = state.q_dot;
                    snap.p = state.p;
                    snap.t = state.t;
                }
                if state.t >= duration || done.load(Ordering::Relaxed) {
                    break;
                }
            }
            done.store(true, Ordering::Relaxed);
        })
    };

    // Log consumer task.
    let rows_handle = {
        let queue = queue.clone();
        let done = done.clone();
        std::thread::spawn(move || {
            let mut rows = Vec::new();
            loop {
                while let Some(row) = queue.pop() {
                    rows.push(row);
                }
                if done.load(Ordering::Relaxed) && queue.is_empty() {
                    break;
                }
                std::thread::yield_now();
            }
            rows
        })
    };

    // Controller on the calling task.
    let mut ctl = AdaptiveController::new(&cfg.controller, Vector6::zeros())?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let sigma = cfg.trajectory.velocity_noise_sigma;
    let mut next_tick = 0.0f64;
    loop {
        let snap = *snapshot.lock().unwrap();
        if snap.fault || snap.t >= duration {
            break;
        }
        if snap.t < next_tick {
            if done.load(std::sync::atomic::Ordering::Relaxed) {
                break;
            }
            std::thread::yield_now();
            continue;
        }
        let q_dot_meas = if sigma > 0.0 {
            Vector6::from_fn(|i, _| snap.q_dot[i] + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
        } else {
            snap.q_dot
        };
        let q_cmd_d = command_at(schedule, snap.t);
        let q_cmd = Vector6::from_fn(|i, _| q_cmd_d[i]);
        let (p_des, diag) = ctl.step(&snap.q, &q_dot_meas, &q_cmd, dt_c);
        *command.lock().unwrap() = p_des;
        // force_push drops the oldest row under backpressure.
        queue.force_push(LogRow {
            t: snap.t,
            q: snap.q,
            q_des: diag.setpoint.q_des,
            s: diag.s,
            tau_des: diag.tau_des,
            p_des,
            p: snap.p,
            sat_flags: diag.sat_mask,
            step_us: diag.step_us,
        });
        next_tick += dt_c;
        ctl_time.store(next_tick.to_bits(), Ordering::Release);
    }
    done.store(true, Ordering::Relaxed);
    plant_handle.join().expect("plant task panicked");
    let rows = rows_handle.join().expect("log task panicked");
    let fault = fault_slot.lock().unwrap().clone();

    Ok(ExperimentLog {
        rows,
        aux: Vec::new(),
        theta_snaps: vec![ThetaSnapshot {
            t: duration,
            theta: ctl.net.theta.clone(),
        }],
        step_times: schedule.iter().map(|(t, _)| *t).collect(),
        fault,
    })
}

/// Build the stability report for a finished trial (error bound, ultimate
/// bound, and in lock-step mode the Lyapunov-trend audit).
fn analyze_trial(
    cfg: &SimConfig,
    model: &PlantModel,
    log: &ExperimentLog,
    extra_edges: &[f64],
) -> StabilityReport {
    let settle_time = cfg.monitor.settle_factor * cfg.controller.tau_filter;
    let e_hat = match estimate_error_bound(log, model, &cfg.monitor) {
        Ok(e) => e,
        Err(e) => {
            log::warn!("error-bound estimate unavailable ({e}); using 0");
            0.0
        }
    };
    let params = BoundParams {
        e_hat,
        lambda_min_kd: cfg.controller.kd,
        lambda_max_k: cfg.controller.k_ff,
        sup_q_d: None,
        settle_time,
    };
    let mut audited = log.clone();
    audited.step_times.extend_from_slice(extra_edges);
    audited
        .step_times
        .sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut report = check_ultimate_bound(&audited, &params);
    if !log.aux.is_empty() {
        let gamma = DVector::from_element(cfg.controller.p + 1, cfg.controller.gamma);
        match vdot_sign_audit(&audited, model, &gamma, report.r_bound, &cfg.monitor) {
            Ok(a) => report.vdot = Some(a),
            Err(e) => log::warn!("vdot audit unavailable: {e}"),
        }
    }
    report
}

/// Per-DOF convergence gate: within `window` after each edge, every
/// |s_i| must be inside the band and stay there for the rest of the hold.
fn hold_convergence(
    log: &ExperimentLog,
    edges: &[f64],
    band: f64,
    window: f64,
    duration: f64,
) -> (bool, String) {
    let mut edges = edges.to_vec();
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut worst: Option<(f64, usize, f64)> = None;
    for (k, &edge) in edges.iter().enumerate() {
        let end = edges.get(k + 1).copied().unwrap_or(duration);
        if edge + window >= end {
            continue;
        }
        for row in &log.rows {
            if row.t < edge + window || row.t >= end {
                continue;
            }
            for i in 0..N_DOF {
                let v = row.s[i].abs();
                if v > band && worst.map(|w| v > w.2).unwrap_or(true) {
                    worst = Some((row.t, i, v));
                }
            }
        }
    }
    match worst {
        None => (true, format!("all holds inside the +/-{band:.3} rad/s band")),
        Some((t, dof, v)) => (
            false,
            format!("|s_{dof}| = {v:.3} rad/s at t = {t:.2} s exceeds band {band:.3}"),
        ),
    }
}

/// Frobenius-norm boundedness of the adapted weights: over the final ten
/// seconds the norm must change by less than 10% of its final value.
///
/// Healthy runs show a bounded sawtooth (the bias re-learns each hold's
/// static torque), so the final value is compared against the window median
/// rather than the window's first sample; a genuinely growing norm still
/// leaves its median well below the endpoint and fails.
fn weight_boundedness(log: &ExperimentLog) -> (bool, String) {
    let Some(last) = log.theta_snaps.last() else {
        return (false, "no weight snapshots".into());
    };
    let t_end = last.t;
    let final_norm = last.theta.norm();
    let mut window: Vec<f64> = log
        .theta_snaps
        .iter()
        .filter(|s| s.t >= t_end - 10.0)
        .map(|s| s.theta.norm())
        .collect();
    if log.theta_snaps.first().map(|s| t_end - s.t).unwrap_or(0.0) < 10.0 {
        return (false, "log shorter than 10 s".into());
    }
    if final_norm == 0.0 {
        return (true, "weights identically zero".into());
    }
    window.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = window[window.len() / 2];
    let change = (final_norm - median).abs() / final_norm;
    (
        change < 0.10,
        format!(
            "||theta||_F = {final_norm:.2}, {:.1}% from the final-10 s median {median:.2}",
            100.0 * change
        ),
    )
}

/// Mean of per-DOF |s_i| over all post-settle samples: the steady-state
/// statistic used for cross-configuration comparisons.
pub fn steady_state_mean_abs_s(log: &ExperimentLog, settle_time: f64) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for row in &log.rows {
        let mut last_edge = f64::NEG_INFINITY;
        for &e in &log.step_times {
            if e <= row.t {
                last_edge = e;
            } else {
                break;
            }
        }
        if row.t - last_edge < settle_time {
            continue;
        }
        for i in 0..N_DOF {
            acc += row.s[i].abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Cross-trial mean-of-s confidence band at one decimated instant.
#[derive(Debug, Clone, Serialize)]
pub struct CiRow {
    pub t: f64,
    pub dof: usize,
    pub mean_s: f64,
    pub ci_half_width: f64,
}

/// Two-sided confidence band on the mean of s across trials, per DOF,
/// decimated in time. Degenerates to zero width for identical trials.
pub fn cross_trial_ci(trials: &[&ExperimentLog], confidence: f64, decimate: usize) -> Vec<CiRow> {
    let n = trials.len();
    if n == 0 {
        return Vec::new();
    }
    let len = trials.iter().map(|l| l.rows.len()).min().unwrap_or(0);
    let t_crit = if n > 1 {
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof");
        dist.inverse_cdf(0.5 + confidence / 2.0)
    } else {
        0.0
    };
    let mut out = Vec::new();
    let mut k = 0;
    while k < len {
        for dof in 0..N_DOF {
            let samples: Vec<f64> = trials.iter().map(|l| l.rows[k].s[dof]).collect();
            let mean = samples.iter().sum::<f64>() / n as f64;
            // Bit-identical trials collapse exactly, not to rounding dust.
            let half = if n > 1 && samples.iter().any(|v| *v != samples[0]) {
                let var =
                    samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
                t_crit * (var / n as f64).sqrt()
            } else {
                0.0
            };
            out.push(CiRow {
                t: trials[0].rows[k].t,
                dof,
                mean_s: mean,
                ci_half_width: half,
            });
        }
        k += decimate;
    }
    out
}

fn write_ci_csv(path: &Path, rows: &[CiRow]) -> Result<(), std::io::Error> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,dof,mean_s,ci_half_width")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.t, r.dof, r.mean_s, r.ci_half_width)?;
    }
    Ok(())
}

/// Result of the random-step tracking experiment.
#[derive(Debug)]
pub struct StepOutcome {
    pub trials: Vec<TrialOutcome>,
    pub ci: Vec<CiRow>,
    pub checks: Vec<Check>,
}

fn prepare_out_dir(
    out: &Option<PathBuf>,
    cfg: &SimConfig,
    opts: &RunOptions,
    experiment: &str,
) -> Result<Option<PathBuf>, ExperimentError> {
    let Some(dir) = out else { return Ok(None) };
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let meta = serde_json::json!({
        "experiment": experiment,
        "seed": opts.seed,
        "trials": opts.trials,
        "seed_stride": opts.seed_stride,
        "lockstep": opts.lockstep,
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(Some(dir.clone()))
}

fn run_tracking_trials(
    cfg: &SimConfig,
    opts: &RunOptions,
    payload: Option<PayloadEvent>,
    extra_edges: &[f64],
) -> Result<Vec<TrialOutcome>, ExperimentError> {
    let duration = cfg.experiment_duration();
    let seq = StepSequence::new(
        cfg.trajectory.hold_duration,
        DVector::from_element(N_DOF, -cfg.trajectory.step_amplitude),
        DVector::from_element(N_DOF, cfg.trajectory.step_amplitude),
        cfg.trajectory.step_count,
        opts.seed,
    );
    let schedule = random_steps(&seq)?;

    let mut trials = Vec::with_capacity(opts.trials);
    for trial in 0..opts.trials {
        let trial_seed = opts.seed.wrapping_add(opts.seed_stride.wrapping_mul(trial as u64));
        let mut plant_cfg = cfg.plant.clone();
        plant_cfg.mismatch_seed = trial_seed;
        let model = PlantModel::build(plant_cfg)?;
        let noise_seed = trial_seed ^ 0x5DEECE66D;

        let t0 = now();
        let log = if opts.lockstep {
            simulate_trial(cfg, model.clone(), &schedule, noise_seed, payload, duration)?
        } else {
            #[cfg(not(target_arch = "wasm32"))]
            {
                simulate_trial_realtime(cfg, model.clone(), &schedule, noise_seed, duration)?
            }
            #[cfg(target_arch = "wasm32")]
            {
                simulate_trial(cfg, model.clone(), &schedule, noise_seed, payload, duration)?
            }
        };
        let wall_s = elapsed_s(&t0);
        if let Some(fault) = &log.fault {
            log::error!("trial {trial} aborted: {fault}");
        }
        let report = analyze_trial(cfg, &model, &log, extra_edges);
        let net_json = serde_json::json!({
            "theta": log.theta_snaps.last().map(|s| s.theta.iter().cloned().collect::<Vec<f64>>()),
            "seed": cfg.controller.seed,
        })
        .to_string();
        trials.push(TrialOutcome {
            trial,
            log,
            report,
            wall_s,
            net_json,
            timescale_warning: crate::controller::ControllerGains::from_config(&cfg.controller)
                .timescale_warning(cfg.plant.tau_p),
        });
    }
    Ok(trials)
}

fn write_trial_outputs(
    dir: &Path,
    trials: &[TrialOutcome],
    ci: &[CiRow],
    checks: &[Check],
) -> Result<(), ExperimentError> {
    for t in trials {
        t.log
            .write_csv_file(&dir.join(format!("trial_{}.csv", t.trial)))?;
        std::fs::write(
            dir.join(format!("stability_report_{}.json", t.trial)),
            t.report.to_json()?,
        )?;
        std::fs::write(dir.join(format!("net_{}.json", t.trial)), &t.net_json)?;
    }
    write_ci_csv(&dir.join("mean_ci.csv"), ci)?;
    std::fs::write(dir.join("checks.json"), serde_json::to_string_pretty(checks)?)?;
    Ok(())
}

/// The random-step tracking study: N seeded trials, per-trial logs and
/// stability reports, cross-trial mean-of-s confidence band, and the
/// experiment gates.
pub fn run_step_experiment(
    cfg: &SimConfig,
    opts: &RunOptions,
) -> Result<StepOutcome, ExperimentError> {
    let dir = prepare_out_dir(&opts.out_dir, cfg, opts, "step")?;
    let trials = run_tracking_trials(cfg, opts, None, &[])?;
    let duration = cfg.experiment_duration();

    let mut checks = Vec::new();
    for t in &trials {
        let label = format!("trial{}", t.trial);
        checks.push(Check::new(
            &format!("{label}/no-fault"),
            t.log.fault.is_none(),
            t.log
                .fault
                .as_ref()
                .map(|f| f.to_string())
                .unwrap_or_else(|| "completed".into()),
        ));
        let band = cfg.monitor.steady_band.max(t.report.r_bound);
        let (ok, detail) = hold_convergence(&t.log, &t.log.step_times, band, 5.0, duration);
        checks.push(Check::new(&format!("{label}/hold-convergence"), ok, detail));
        if opts.lockstep {
            checks.push(Check::new(
                &format!("{label}/runtime"),
                t.wall_s <= 60.0,
                format!("{:.1} s wall for {duration:.0} s simulated", t.wall_s),
            ));
        }
        checks.push(Check::new(
            &format!("{label}/ultimate-bound"),
            t.report.violations == 0,
            format!(
                "{} violations of r = {:.2} rad/s, max post-settle ||s|| = {:.3}",
                t.report.violations, t.report.r_bound, t.report.s_steady_max
            ),
        ));
        if let Some(vdot) = &t.report.vdot {
            checks.push(Check::new(
                &format!("{label}/vdot-trend"),
                vdot.passed(cfg.monitor.vdot_min_fraction),
                format!(
                    "fraction {:.3} over {} qualifying samples{}",
                    vdot.fraction,
                    vdot.qualifying_samples,
                    if vdot.vacuous { " (vacuous)" } else { "" }
                ),
            ));
        }
        let (ok, detail) = weight_boundedness(&t.log);
        checks.push(Check::new(&format!("{label}/weight-boundedness"), ok, detail));
    }

    let logs: Vec<&ExperimentLog> = trials.iter().map(|t| &t.log).collect();
    let ci = cross_trial_ci(&logs, 0.99, 10);
    if let Some(dir) = dir {
        write_trial_outputs(&dir, &trials, &ci, &checks)?;
    }
    Ok(StepOutcome { trials, ci, checks })
}

/// Result of the payload-release experiment.
#[derive(Debug)]
pub struct WeightDropOutcome {
    pub trials: Vec<TrialOutcome>,
    pub checks: Vec<Check>,
    /// Seconds from release until every DOF re-entered the band, per trial.
    pub reconvergence_s: Vec<Option<f64>>,
}

/// Step schedule with a distal payload released mid-run; no controller
/// reconfiguration of any kind.
pub fn run_weight_drop(
    cfg: &SimConfig,
    opts: &RunOptions,
) -> Result<WeightDropOutcome, ExperimentError> {
    let duration = cfg.experiment_duration();
    let drop_t = cfg.trajectory.drop_time;
    let payload = if cfg.trajectory.payload_mass > 0.0 {
        if drop_t >= duration {
            log::warn!(
                "drop time {drop_t} s is beyond the schedule end {duration} s; payload stays on"
            );
        }
        Some(PayloadEvent {
            mass: cfg.trajectory.payload_mass,
            link: cfg.trajectory.payload_link,
            remove_at: drop_t,
        })
    } else {
        None
    };
    let dir = prepare_out_dir(&opts.out_dir, cfg, opts, "weight-drop")?;
    let extra_edges: Vec<f64> = payload
        .iter()
        .filter(|e| e.remove_at < duration)
        .map(|e| e.remove_at)
        .collect();
    let trials = run_tracking_trials(cfg, opts, payload, &extra_edges)?;

    let mut checks = Vec::new();
    let mut reconv = Vec::new();
    for t in &trials {
        let label = format!("trial{}", t.trial);
        checks.push(Check::new(
            &format!("{label}/no-fault"),
            t.log.fault.is_none(),
            t.log
                .fault
                .as_ref()
                .map(|f| f.to_string())
                .unwrap_or_else(|| "completed".into()),
        ));
        let band = cfg.monitor.steady_band.max(t.report.r_bound);
        let mut edges = t.log.step_times.clone();
        edges.extend_from_slice(&extra_edges);
        let (ok, detail) = hold_convergence(&t.log, &edges, band, 5.0, duration);
        checks.push(Check::new(&format!("{label}/hold-convergence"), ok, detail));

        // Re-convergence: first time after the release from which every
        // DOF stays inside the band until the next command edge.
        let rc = if payload.is_some() && drop_t < duration {
            let next_edge = t
                .log
                .step_times
                .iter()
                .copied()
                .find(|e| *e > drop_t)
                .unwrap_or(duration);
            let mut last_bad = drop_t;
            for row in &t.log.rows {
                if row.t <= drop_t || row.t >= next_edge {
                    continue;
                }
                if (0..N_DOF).any(|i| row.s[i].abs() > band) {
                    last_bad = row.t;
                }
            }
            Some(last_bad - drop_t)
        } else {
            None
        };
        if let Some(rc_s) = rc {
            checks.push(Check::new(
                &format!("{label}/reconvergence"),
                rc_s <= 5.0,
                format!("re-entered the band {rc_s:.2} s after release"),
            ));
        }
        reconv.push(rc);
    }

    let logs: Vec<&ExperimentLog> = trials.iter().map(|t| &t.log).collect();
    let ci = cross_trial_ci(&logs, 0.99, 10);
    if let Some(dir) = dir {
        write_trial_outputs(&dir, &trials, &ci, &checks)?;
    }
    Ok(WeightDropOutcome {
        trials,
        checks,
        reconvergence_s: reconv,
    })
}

/// One free-response identification result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreeResponseEstimate {
    pub dof: usize,
    pub zeta_hat: f64,
    pub omega_d_hz_hat: f64,
    pub zeta_target: f64,
    pub omega_d_hz_target: f64,
    /// Estimate restricted to the first five peaks, reported for
    /// sensitivity to the peak count.
    pub zeta_hat_5_peaks: f64,
    pub peaks_used: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RampEstimate {
    pub dof: usize,
    pub metrics: HysteresisMetrics,
}

#[derive(Debug)]
pub struct SysIdOutcome {
    pub free: Vec<FreeResponseEstimate>,
    pub ramps: Vec<RampEstimate>,
    pub checks: Vec<Check>,
}

/// Free-response trace of a single DOF at the plant rate, control off
/// (pressures held at nominal).
pub fn free_response_trace(
    model: &PlantModel,
    dof: usize,
    displacement: f64,
    duration: f64,
    p_nom: f64,
) -> Result<Vec<(f64, f64)>, PlantFault> {
    let mut s = ArmState::with_pressures(p_nom);
    s.q[dof] = displacement;
    let p_des = Pressures::from_element(p_nom);
    let dt = 2e-4;
    let steps = (duration / dt) as usize;
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        s = integrate(&s, &p_des, model, dt)?;
        trace.push((s.t, s.q[dof]));
    }
    Ok(trace)
}

/// Quasi-static differential ramp on one DOF; returns the (dp, q) trace.
pub fn ramp_trace(
    model: &PlantModel,
    dof: usize,
    dp_max: f64,
    period: f64,
    cycles: usize,
    p_nom: f64,
) -> Result<Vec<(f64, f64)>, ExperimentError> {
    let schedule = pressure_ramp(dp_max, period, cycles, 200.0, p_nom, 0.0)?;
    let joint = dof / 2;
    let base = 4 * joint + 2 * (dof % 2);
    let mut s = ArmState::with_pressures(p_nom);
    let dt = 1e-3;
    let mut trace = Vec::new();
    for window in schedule.windows(2) {
        let (t0, dp) = window[0];
        let t1 = window[1].0;
        let mut p_des = Pressures::from_element(p_nom);
        p_des[base] = p_nom + dp / 2.0;
        p_des[base + 1] = p_nom - dp / 2.0;
        let n = ((t1 - t0) / dt).round() as usize;
        for _ in 0..n.max(1) {
            s = integrate(&s, &p_des, model, dt).map_err(|f| {
                ExperimentError::Io(std::io::Error::other(f.to_string()))
            })?;
        }
        trace.push((dp, s.q[dof]));
    }
    Ok(trace)
}

fn write_two_column(path: &Path, rows: &[(f64, f64)], header: &str) -> Result<(), std::io::Error> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{header}")?;
    for (a, b) in rows {
        writeln!(w, "{a},{b}")?;
    }
    Ok(())
}

/// The identification protocols against the simulated plant, compared to
/// the configured ground truth. Runs with the pressure-map mismatch and
/// drift disabled, the bench conditions of a clean identification.
pub fn run_sysid(cfg: &SimConfig, opts: &RunOptions) -> Result<SysIdOutcome, ExperimentError> {
    let mut plant_cfg = cfg.plant.clone();
    plant_cfg.k_tau_mismatch = 0.0;
    plant_cfg.stiffness_drift_per_s = 0.0;
    let model = PlantModel::build(plant_cfg.clone())?;
    let dir = prepare_out_dir(&opts.out_dir, cfg, opts, "sysid")?;
    let p_nom = cfg.controller.p_nom;

    let mut ld_cfg = LogDecrementConfig::default();
    if let Some(p) = cfg.trajectory.log_dec_prominence {
        ld_cfg.prominence = p;
    }
    let mut free = Vec::new();
    let mut checks = Vec::new();
    for dof in 0..N_DOF {
        let trace = free_response_trace(
            &model,
            dof,
            cfg.trajectory.free_response_displacement,
            cfg.trajectory.free_response_duration,
            p_nom,
        )
        .map_err(|f| ExperimentError::Io(std::io::Error::other(f.to_string())))?;
        let est = log_decrement(&trace, &ld_cfg)?;
        // Sensitivity: restrict to roughly the first five peaks.
        let five_span = 5.5 / plant_cfg.f_d_hz[dof];
        let short: Vec<(f64, f64)> = trace.iter().copied().filter(|(t, _)| *t <= five_span).collect();
        let est5 = log_decrement(&short, &ld_cfg);

        let zeta_target = plant_cfg.zeta[dof];
        let f_target = plant_cfg.f_d_hz[dof];
        let zeta_err = (est.zeta - zeta_target).abs() / zeta_target;
        let f_err = (est.omega_d_hz - f_target).abs() / f_target;
        checks.push(Check::new(
            &format!("dof{dof}/zeta"),
            zeta_err < 0.20,
            format!("zeta_hat = {:.6} vs {zeta_target} ({:.1}% off)", est.zeta, 100.0 * zeta_err),
        ));
        checks.push(Check::new(
            &format!("dof{dof}/omega_d"),
            f_err < 0.10,
            format!(
                "f_hat = {:.3} Hz vs {f_target} ({:.2}% off)",
                est.omega_d_hz,
                100.0 * f_err
            ),
        ));
        if let Some(dir) = &dir {
            write_two_column(&dir.join(format!("freeresp_dof{dof}.csv")), &trace, "t,q")?;
        }
        free.push(FreeResponseEstimate {
            dof,
            zeta_hat: est.zeta,
            omega_d_hz_hat: est.omega_d_hz,
            zeta_target,
            omega_d_hz_target: f_target,
            zeta_hat_5_peaks: est5.map(|e| e.zeta).unwrap_or(f64::NAN),
            peaks_used: est.peaks_used,
        });
    }

    let mut ramps = Vec::new();
    for dof in [4usize, 5] {
        let trace = ramp_trace(
            &model,
            dof,
            cfg.trajectory.ramp_dp_max,
            cfg.trajectory.ramp_period,
            cfg.trajectory.ramp_cycles,
            p_nom,
        )?;
        let metrics = hysteresis_metrics(&trace)?;
        checks.push(Check::new(
            &format!("dof{dof}/hysteresis-area"),
            metrics.loop_area > 0.0,
            format!(
                "loop area {:.3} kPa rad, width {:.4} rad, drift/cycle {:.5}",
                metrics.loop_area, metrics.width_at_zero_dp, metrics.drift_per_cycle
            ),
        ));
        if let Some(dir) = &dir {
            write_two_column(&dir.join(format!("ramp_dof{dof}.csv")), &trace, "dp,q")?;
        }
        ramps.push(RampEstimate { dof, metrics });
    }

    if let Some(dir) = &dir {
        let estimates = serde_json::json!({ "free_response": free, "ramps": ramps });
        std::fs::write(
            dir.join("sysid_estimates.json"),
            serde_json::to_string_pretty(&estimates)?,
        )?;
        std::fs::write(dir.join("checks.json"), serde_json::to_string_pretty(&checks)?)?;
    }
    Ok(SysIdOutcome { free, ramps, checks })
}

/// Recompute the stability report over a saved run directory (the `report`
/// entry point). Works from the diagnostics stream alone: black-box mode,
/// no Lyapunov-trend audit.
pub fn reanalyze_dir(dir: &Path) -> Result<(StabilityReport, Vec<Check>), ExperimentError> {
    let cfg = SimConfig::load(&dir.join("config.toml"))?;
    let mut reports = Vec::new();
    let mut checks = Vec::new();
    for trial in 0.. {
        let path = dir.join(format!("trial_{trial}.csv"));
        if !path.exists() {
            break;
        }
        let mut log = ExperimentLog::read_csv_file(&path)?;
        // Step edges from the schedule parameters.
        log.step_times = (0..cfg.trajectory.step_count)
            .map(|k| k as f64 * cfg.trajectory.hold_duration)
            .collect();
        let saved: StabilityReport = serde_json::from_str(&std::fs::read_to_string(
            dir.join(format!("stability_report_{trial}.json")),
        )?)?;
        let params = BoundParams {
            e_hat: saved.e_hat,
            lambda_min_kd: cfg.controller.kd,
            lambda_max_k: cfg.controller.k_ff,
            sup_q_d: None,
            settle_time: cfg.monitor.settle_factor * cfg.controller.tau_filter,
        };
        let report = check_ultimate_bound(&log, &params);
        checks.push(Check::new(
            &format!("trial{trial}/ultimate-bound"),
            report.violations == 0,
            format!(
                "{} violations of r = {:.2}, max post-settle ||s|| = {:.3}",
                report.violations, report.r_bound, report.s_steady_max
            ),
        ));
        reports.push(report);
    }
    let report = reports
        .into_iter()
        .next()
        .ok_or_else(|| ExperimentError::Io(std::io::Error::other("no trial logs in directory")))?;
    Ok((report, checks))
}

/// Write the RunMeta record used by single-log dumps.
pub fn write_meta(dir: &Path, meta: &RunMeta) -> Result<(), ExperimentError> {
    std::fs::write(dir.join("run_meta.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}
