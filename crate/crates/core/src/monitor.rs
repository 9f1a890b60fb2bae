//! Online-stability instrumentation: empirical approximation-error bound,
//! ultimate-bound checking of the sliding variable, and a white-box audit of
//! the Lyapunov decrease outside the bound radius.
//!
//! The bound radius follows the stiffness-feedforward form
//!
//! `r = (E + lambda_max(K) sup||q_d||) / lambda_min(K_D)`
//!
//! which degenerates to `E / lambda_min(K_D)` when the feedforward gain is
//! zero.

use crate::plant::PlantModel;
use crate::trace::ExperimentLog;
use nalgebra::{DVector, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("trace too short: {have:.1} s of post-adaptation data, need {need:.1} s")]
    WindowTooShort { have: f64, need: f64 },
    #[error("log carries no {0} data")]
    MissingData(&'static str),
    #[error("invalid parameter: {0}")]
    BadParameter(String),
}

/// Monitor knobs with their declared defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    /// Percentile of the residual distribution used as the error bound E.
    pub error_percentile: f64,
    /// Residuals before this time are considered pre-adaptation and skipped.
    pub error_window_start: f64,
    /// Minimum span of usable residual data, seconds.
    pub min_error_window: f64,
    /// Settle window after each step edge, as a multiple of the command
    /// filter constant (4 x 0.75 s = 3 s at the experimental values).
    pub settle_factor: f64,
    /// Per-DOF steady-state band floor on |s_i|, rad/s.
    pub steady_band: f64,
    /// Weight-snapshot decimation in control ticks.
    pub theta_snap_every: usize,
    /// Half-window for the Lyapunov slope estimate, seconds.
    pub vdot_window: f64,
    /// Required fraction of decreasing samples outside the bound radius.
    pub vdot_min_fraction: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            error_percentile: 0.99,
            error_window_start: 20.0,
            min_error_window: 10.0,
            settle_factor: 4.0,
            steady_band: 0.05,
            theta_snap_every: 25,
            vdot_window: 0.25,
            vdot_min_fraction: 0.95,
        }
    }
}

/// Inputs to the bound check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundParams {
    pub e_hat: f64,
    pub lambda_min_kd: f64,
    pub lambda_max_k: f64,
    /// Largest desired-position norm; if absent it is taken from the log.
    pub sup_q_d: Option<f64>,
    pub settle_time: f64,
}

impl BoundParams {
    pub fn r_bound(&self, sup_q_d: f64) -> f64 {
        (self.e_hat + self.lambda_max_k * sup_q_d) / self.lambda_min_kd
    }
}

/// Result of the Lyapunov-decrease audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VdotAudit {
    /// Fraction of qualifying samples whose smoothed V-trend decreases.
    pub fraction: f64,
    pub qualifying_samples: usize,
    pub decreasing_samples: usize,
    /// True when no sample ever left the bound radius on a healthy log.
    pub vacuous: bool,
}

impl VdotAudit {
    pub fn passed(&self, min_fraction: f64) -> bool {
        self.vacuous || self.fraction >= min_fraction
    }
}

/// Stability summary of one experiment log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub e_hat: f64,
    /// The bound E is a statistical estimate, not an analytic constant;
    /// this records how it was obtained.
    pub e_hat_basis: String,
    pub lambda_min_kd: f64,
    pub lambda_max_k: f64,
    pub sup_q_d: f64,
    pub r_bound: f64,
    pub settle_time: f64,
    pub s_steady_max: f64,
    pub violations: usize,
    pub violation_times: Vec<f64>,
    pub fault: Option<String>,
    pub vdot: Option<VdotAudit>,
}

impl StabilityReport {
    /// The audit as a whole: a faulted run, any post-settle bound violation,
    /// or a failing V-trend fraction means failure.
    pub fn passed(&self, cfg: &MonitorConfig) -> bool {
        self.fault.is_none()
            && self.violations == 0
            && self
                .vdot
                .as_ref()
                .map(|v| v.passed(cfg.vdot_min_fraction))
                .unwrap_or(true)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

/// Empirical approximation-error bound: the configured percentile of
/// `|| f_true(x) - net_out ||` where `f_true` is reconstructed from logged
/// plant accelerations via
///
/// `f = tau_applied - M(q)(q_ddot - q_r_ddot) - C(q, q_dot)(q_dot - q_r_dot)`
///
/// expressed in controller units through the nominal chamber gains.
pub fn estimate_error_bound(
    log: &ExperimentLog,
    plant: &PlantModel,
    cfg: &MonitorConfig,
) -> Result<f64, MonitorError> {
    if log.aux.is_empty() {
        return Err(MonitorError::MissingData("auxiliary"));
    }
    if !(0.0..=1.0).contains(&cfg.error_percentile) {
        return Err(MonitorError::BadParameter(format!(
            "percentile {} outside [0, 1]",
            cfg.error_percentile
        )));
    }
    let gains: [f64; 3] = std::array::from_fn(|j| plant.nominal_chamber_gain(j));
    let mut residuals: Vec<f64> = Vec::new();
    let mut window = (f64::MAX, f64::MIN);
    for (row, aux) in log.rows.iter().zip(log.aux.iter()) {
        if row.t < cfg.error_window_start {
            continue;
        }
        window.0 = window.0.min(row.t);
        window.1 = window.1.max(row.t);
        let m = plant.mass_matrix(&row.q);
        let c = plant.coriolis_matrix(&row.q, &aux.q_dot);
        let tau = plant.joint_torque(&row.p);
        let f_si = tau - m * (aux.q_ddot - aux.q_r_ddot) - c * (aux.q_dot - aux.q_r_dot);
        let f_ctl = Vector6::from_fn(|i, _| f_si[i] / gains[i / 2]);
        residuals.push((f_ctl - aux.net_out).norm());
    }
    let have = if residuals.is_empty() {
        0.0
    } else {
        window.1 - window.0
    };
    if have < cfg.min_error_window {
        return Err(MonitorError::WindowTooShort {
            have,
            need: cfg.min_error_window,
        });
    }
    Ok(percentile(&mut residuals, cfg.error_percentile))
}

/// Percentile by sorting; `p = 1` returns the maximum.
fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if values.is_empty() {
        return 0.0;
    }
    let idx = ((p * values.len() as f64).ceil() as usize).max(1) - 1;
    values[idx.min(values.len() - 1)]
}

/// Check that after each setpoint's transient the sliding variable enters
/// and remains inside the bound radius. Violations are data, not faults.
pub fn check_ultimate_bound(log: &ExperimentLog, params: &BoundParams) -> StabilityReport {
    let sup_q_d = params.sup_q_d.unwrap_or_else(|| {
        log.rows
            .iter()
            .map(|r| r.q_des.norm())
            .fold(0.0, f64::max)
    });
    let r_bound = params.r_bound(sup_q_d);

    let mut violations = Vec::new();
    let mut s_steady_max = 0.0f64;
    for row in &log.rows {
        if !post_settle(row.t, &log.step_times, params.settle_time) {
            continue;
        }
        let sn = row.s.norm();
        s_steady_max = s_steady_max.max(sn);
        if sn > r_bound {
            violations.push(row.t);
        }
    }

    StabilityReport {
        e_hat: params.e_hat,
        e_hat_basis: "empirical percentile of reconstructed residuals".into(),
        lambda_min_kd: params.lambda_min_kd,
        lambda_max_k: params.lambda_max_k,
        sup_q_d,
        r_bound,
        settle_time: params.settle_time,
        s_steady_max,
        violations: violations.len(),
        violation_times: violations.into_iter().take(100).collect(),
        fault: log.fault.as_ref().map(|f| f.to_string()),
        vdot: None,
    }
}

/// True when `t` lies at least `settle` after the most recent step edge.
fn post_settle(t: f64, step_times: &[f64], settle: f64) -> bool {
    let mut last_edge = f64::NEG_INFINITY;
    for &edge in step_times {
        if edge <= t {
            last_edge = edge;
        } else {
            break;
        }
    }
    last_edge.is_finite() && t - last_edge >= settle
}

/// White-box Lyapunov-trend audit (lock-step mode only: requires the plant
/// mass matrix and the weight snapshots).
///
/// `V(t) = 1/2 s^T M(q) s + 1/2 tr((Theta - Theta_end)^T Gamma^-1 (Theta - Theta_end))`
///
/// is evaluated at the snapshot rate; among samples with `||s|| >= r_bound`
/// the audit reports the fraction whose smoothed trend decreases. The true
/// optimal weights are unknowable, so the final weights proxy them; the
/// audit therefore tests the consequence of the bound (decrease outside the
/// ball), not V itself.
pub fn vdot_sign_audit(
    log: &ExperimentLog,
    plant: &PlantModel,
    gamma_diag: &DVector<f64>,
    r_bound: f64,
    cfg: &MonitorConfig,
) -> Result<VdotAudit, MonitorError> {
    if log.theta_snaps.len() < 5 {
        return Err(MonitorError::MissingData("weight snapshot"));
    }
    if log.rows.is_empty() {
        return Err(MonitorError::MissingData("diagnostics"));
    }
    let theta_end = &log.theta_snaps.last().unwrap().theta;

    // V and ||s|| sampled at snapshot times.
    let mut v = Vec::with_capacity(log.theta_snaps.len());
    let mut s_norm = Vec::with_capacity(log.theta_snaps.len());
    let mut times = Vec::with_capacity(log.theta_snaps.len());
    for snap in &log.theta_snaps {
        let row_idx = match log
            .rows
            .binary_search_by(|r| r.t.partial_cmp(&snap.t).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.min(log.rows.len() - 1),
        };
        let row = &log.rows[row_idx];
        let m = plant.mass_matrix(&row.q);
        let vs = 0.5 * (row.s.transpose() * m * row.s)[(0, 0)];
        let dth = &snap.theta - theta_end;
        let mut vtr = 0.0;
        for i in 0..dth.nrows() {
            let g = gamma_diag[i];
            if g > 0.0 {
                for j in 0..dth.ncols() {
                    vtr += dth[(i, j)] * dth[(i, j)] / g;
                }
            }
        }
        v.push(vs + 0.5 * vtr);
        s_norm.push(row.s.norm());
        times.push(snap.t);
    }

    let snap_dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    let half = ((cfg.vdot_window / snap_dt).round() as usize).max(1);

    let mut qualifying = 0usize;
    let mut decreasing = 0usize;
    for k in half..v.len() - half {
        if s_norm[k] < r_bound {
            continue;
        }
        qualifying += 1;
        let slope = (v[k + half] - v[k - half]) / (times[k + half] - times[k - half]);
        if slope < 0.0 {
            decreasing += 1;
        }
    }
    let vacuous = qualifying == 0 && log.fault.is_none();
    let fraction = if qualifying == 0 {
        if log.fault.is_none() {
            1.0
        } else {
            0.0
        }
    } else {
        decreasing as f64 / qualifying as f64
    };
    Ok(VdotAudit {
        fraction,
        qualifying_samples: qualifying,
        decreasing_samples: decreasing,
        vacuous,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{PlantConfig, Pressures};
    use crate::trace::{AuxRow, LogRow, ThetaSnapshot};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::DMatrix;

    fn default_plant() -> PlantModel {
        PlantModel::build(PlantConfig::default()).unwrap()
    }

    /// Build a log whose residual norm is exactly `res(t)` by fabricating a
    /// static state whose reconstruction is zero and a net output opposing
    /// the residual on the first DOF.
    fn residual_log(res: impl Fn(f64) -> f64, duration: f64) -> ExperimentLog {
        let mut log = ExperimentLog::default();
        let plant = default_plant();
        let dt = 0.01;
        let n = (duration / dt) as usize;
        for k in 0..n {
            let t = k as f64 * dt;
            let q = Vector6::zeros();
            // Equal pressures: zero torque; zero accelerations: f_true = 0.
            log.rows.push(LogRow {
                t,
                q,
                q_des: Vector6::zeros(),
                s: Vector6::zeros(),
                tau_des: Vector6::zeros(),
                p_des: Pressures::from_element(150.0),
                p: Pressures::from_element(150.0),
                sat_flags: 0,
                step_us: 50.0,
            });
            let mut net_out = Vector6::zeros();
            net_out[0] = -res(t);
            log.aux.push(AuxRow {
                t,
                q_dot: Vector6::zeros(),
                q_ddot: Vector6::zeros(),
                q_r_dot: Vector6::zeros(),
                q_r_ddot: Vector6::zeros(),
                net_out,
            });
        }
        log.step_times = vec![0.0];
        log
    }

    #[test]
    fn perfect_network_has_zero_bound() {
        let log = residual_log(|_| 0.0, 40.0);
        let e = estimate_error_bound(&log, &default_plant(), &MonitorConfig::default()).unwrap();
        assert_abs_diff_eq!(e, 0.0);
    }

    #[test]
    fn constant_residual_is_recovered() {
        let log = residual_log(|_| 1.75, 40.0);
        let e = estimate_error_bound(&log, &default_plant(), &MonitorConfig::default()).unwrap();
        assert_relative_eq!(e, 1.75, max_relative = 1e-12);
    }

    #[test]
    fn bound_is_monotone_in_percentile() {
        // Residual ramps with time: higher percentile, higher bound.
        let log = residual_log(|t| t * 0.1, 60.0);
        let plant = default_plant();
        let mut last = 0.0;
        for p in [0.5, 0.9, 0.99, 1.0] {
            let cfg = MonitorConfig {
                error_percentile: p,
                ..Default::default()
            };
            let e = estimate_error_bound(&log, &plant, &cfg).unwrap();
            assert!(e >= last, "percentile {p} gave {e} < {last}");
            last = e;
        }
    }

    #[test]
    fn short_window_is_rejected() {
        let log = residual_log(|_| 1.0, 25.0); // only 5 s past the 20 s start
        assert!(matches!(
            estimate_error_bound(&log, &default_plant(), &MonitorConfig::default()),
            Err(MonitorError::WindowTooShort { .. })
        ));
    }

    fn s_trace_log(s_of_t: impl Fn(f64) -> f64, q_des_norm: f64) -> ExperimentLog {
        let mut log = ExperimentLog::default();
        let dt = 0.002;
        for k in 0..30000 {
            let t = k as f64 * dt;
            let mut s = Vector6::zeros();
            s[0] = s_of_t(t);
            let mut q_des = Vector6::zeros();
            q_des[0] = q_des_norm;
            log.rows.push(LogRow {
                t,
                q: Vector6::zeros(),
                q_des,
                s,
                tau_des: Vector6::zeros(),
                p_des: Pressures::from_element(150.0),
                p: Pressures::from_element(150.0),
                sat_flags: 0,
                step_us: 40.0,
            });
        }
        log.step_times = vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0];
        log
    }

    #[test]
    fn zero_s_trace_reports_clean() {
        let log = s_trace_log(|_| 0.0, 0.4);
        let params = BoundParams {
            e_hat: 1.0,
            lambda_min_kd: 2.5,
            lambda_max_k: 35.0,
            sup_q_d: None,
            settle_time: 3.0,
        };
        let rep = check_ultimate_bound(&log, &params);
        assert_eq!(rep.violations, 0);
        assert_abs_diff_eq!(rep.s_steady_max, 0.0);
        assert!(rep.passed(&MonitorConfig::default()));
        assert_relative_eq!(rep.sup_q_d, 0.4, max_relative = 1e-12);
    }

    #[test]
    fn k_zero_reduces_to_basic_bound() {
        let params = BoundParams {
            e_hat: 2.0,
            lambda_min_kd: 2.5,
            lambda_max_k: 0.0,
            sup_q_d: Some(10.0),
            settle_time: 3.0,
        };
        assert_relative_eq!(params.r_bound(10.0), 0.8, max_relative = 1e-12);
    }

    #[test]
    fn r_bound_shrinks_as_kd_grows() {
        let mut last = f64::MAX;
        for kd in [0.5, 1.0, 2.5, 10.0, 100.0] {
            let params = BoundParams {
                e_hat: 2.0,
                lambda_min_kd: kd,
                lambda_max_k: 35.0,
                sup_q_d: Some(0.8),
                settle_time: 3.0,
            };
            let r = params.r_bound(0.8);
            assert!(r < last);
            last = r;
        }
    }

    #[test]
    fn violations_have_timestamps_and_respect_settle_window() {
        // |s| spikes above the bound inside a settle window (ignored) and
        // once after it (counted).
        let log = s_trace_log(|t| if (12.0..12.1).contains(&t) { 9.0 } else if (15.0..15.1).contains(&t) { 9.0 } else { 0.1 }, 0.0);
        let params = BoundParams {
            e_hat: 5.0,
            lambda_min_kd: 2.5,
            lambda_max_k: 0.0,
            sup_q_d: None,
            settle_time: 3.0,
        };
        let rep = check_ultimate_bound(&log, &params);
        // r = 2; spike at 12.0-12.1 is inside the settle window of the 10 s
        // edge; spike at 15.0 is post-settle.
        assert!(rep.violations > 0);
        assert!(rep.violation_times.iter().all(|t| *t >= 15.0));
        assert!(!rep.passed(&MonitorConfig::default()));
    }

    fn audited_log(s_of_t: impl Fn(f64) -> f64) -> ExperimentLog {
        let mut log = s_trace_log(s_of_t, 0.0);
        // Constant weights: the tr term vanishes; V follows s^T M s.
        for k in (0..log.rows.len()).step_by(25) {
            log.theta_snaps.push(ThetaSnapshot {
                t: log.rows[k].t,
                theta: DMatrix::zeros(11, 6),
            });
        }
        log
    }

    #[test]
    fn decaying_energy_passes_the_audit() {
        let log = audited_log(|t| 5.0 * (-0.2 * t).exp());
        let audit = vdot_sign_audit(
            &log,
            &default_plant(),
            &DVector::from_element(11, 15.0),
            0.5,
            &MonitorConfig::default(),
        )
        .unwrap();
        assert!(audit.qualifying_samples > 100);
        assert!(audit.fraction > 0.99, "fraction = {}", audit.fraction);
        assert!(!audit.vacuous);
    }

    #[test]
    fn growing_energy_fails_the_audit() {
        let log = audited_log(|t| 0.6 * (0.05 * t).exp());
        let audit = vdot_sign_audit(
            &log,
            &default_plant(),
            &DVector::from_element(11, 15.0),
            0.5,
            &MonitorConfig::default(),
        )
        .unwrap();
        assert!(audit.qualifying_samples > 0);
        assert!(audit.fraction < 0.5, "fraction = {}", audit.fraction);
        assert!(!audit.passed(0.95));
    }

    #[test]
    fn all_inside_bound_is_a_vacuous_pass() {
        let log = audited_log(|_| 0.01);
        let audit = vdot_sign_audit(
            &log,
            &default_plant(),
            &DVector::from_element(11, 15.0),
            5.0,
            &MonitorConfig::default(),
        )
        .unwrap();
        assert!(audit.vacuous);
        assert!(audit.passed(0.95));
        assert_eq!(audit.qualifying_samples, 0);
    }

    #[test]
    fn report_serializes_to_json() {
        let log = s_trace_log(|_| 0.0, 0.2);
        let params = BoundParams {
            e_hat: 1.0,
            lambda_min_kd: 2.5,
            lambda_max_k: 35.0,
            sup_q_d: None,
            settle_time: 3.0,
        };
        let rep = check_ultimate_bound(&log, &params);
        let json = rep.to_json().unwrap();
        for key in ["e_hat", "r_bound", "violations", "s_steady_max"] {
            assert!(json.contains(key));
        }
        let back: StabilityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.violations, 0);
    }
}
