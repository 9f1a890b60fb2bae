//! Adaptive joint-space controller: command filtering, sliding surface,
//! RBF-network control law with stiffness feedforward, antagonistic
//! pressure allocation, and the online adaptation update.
//!
//! The controller works in pressure-differential torque units: its nominal
//! per-joint pressure-to-torque map is the unit antagonistic pattern
//! `[[1, -1, 0, 0], [0, 0, 1, -1]]`, so commanded generalized torques are
//! chamber differentials in kPa. Whatever the true plant map is, the
//! adaptation absorbs the difference.

use crate::plant::{Pressures, N_DOF, N_JOINTS};
use crate::rbfnn::{RbfError, RbfNetwork};
use nalgebra::{DVector, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("gain validation failed: {0}")]
    BadGains(String),
    #[error(transparent)]
    Network(#[from] RbfError),
}

/// Control parameters. Defaults are the experimental values used throughout
/// the tracking studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Number of Gaussian centers P.
    pub p: usize,
    /// Seed for the Latin hypercube center draw.
    pub seed: u64,
    /// Learning rate (diagonal of Gamma, including the bias row).
    pub gamma: f64,
    /// Sliding-surface gain diagonal (1/s), one entry per DOF.
    pub lambda: [f64; 6],
    /// Sliding damping gain (torque per rad/s), scalar times identity.
    pub kd: f64,
    /// Stiffness feedforward gain (torque per rad), scalar times identity.
    pub k_ff: f64,
    /// Command filter time constant tau = 1/(omega_n zeta), seconds.
    pub tau_filter: f64,
    /// Command filter damping ratio.
    pub zeta_filter: f64,
    pub p_max: f64,
    pub p_nom: f64,
    pub control_rate_hz: f64,
    /// Controller-side per-joint pressure gain (torque units per kPa).
    pub k_tau_gain: [f64; 3],
    /// RBF input box: per-coordinate bounds for q, q_dot, q_r_dot, q_r_ddot.
    pub q_bound: f64,
    pub qd_bound: f64,
    pub qrd_bound: f64,
    pub qrdd_bound: f64,
    /// Explicit RBF width override, required when p < 2.
    pub width_override: Option<f64>,
    /// Pressure-command lead shaping (1 + tau_lead s)/(1 + tau_roll s),
    /// standing in for the inner-loop pressure controller's small-signal
    /// bandwidth. Without it, damping injected through the 0.1 s pressure
    /// lag arrives ~79 degrees late at the 8 Hz joint resonance and pumps
    /// it instead. Set `pressure_lead = false` to study the bare loop.
    pub pressure_lead: bool,
    pub pressure_lead_tau: f64,
    pub pressure_lead_rolloff: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            p: 10,
            seed: 1,
            gamma: 15.0,
            lambda: [12.0, 12.0, 12.0, 12.0, 25.0, 25.0],
            kd: 2.5,
            k_ff: 35.0,
            tau_filter: 0.75,
            zeta_filter: 1.0,
            p_max: 300.0,
            p_nom: 150.0,
            control_rate_hz: 500.0,
            k_tau_gain: [1.0, 1.0, 1.0],
            q_bound: std::f64::consts::FRAC_PI_2,
            qd_bound: 2.0,
            qrd_bound: 2.0,
            qrdd_bound: 5.0,
            width_override: None,
            pressure_lead: true,
            pressure_lead_tau: 0.1,
            pressure_lead_rolloff: 0.015,
        }
    }
}

/// Resolved gain set used by the control loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    pub lambda: Vector6<f64>,
    /// Diagonal of the learning-rate matrix, length P + 1.
    pub gamma_diag: DVector<f64>,
    pub kd: Vector6<f64>,
    pub k_ff: Vector6<f64>,
    pub k_tau_gain: [f64; 3],
    pub p_max: f64,
    pub p_nom: f64,
    pub control_rate_hz: f64,
    pub tau_filter: f64,
    pub zeta_filter: f64,
    pub pressure_lead: Option<(f64, f64)>,
}

impl ControllerGains {
    pub fn from_config(cfg: &ControllerConfig) -> Self {
        Self {
            lambda: Vector6::from_column_slice(&cfg.lambda),
            gamma_diag: DVector::from_element(cfg.p + 1, cfg.gamma),
            kd: Vector6::from_element(cfg.kd),
            k_ff: Vector6::from_element(cfg.k_ff),
            k_tau_gain: cfg.k_tau_gain,
            p_max: cfg.p_max,
            p_nom: cfg.p_nom,
            control_rate_hz: cfg.control_rate_hz,
            tau_filter: cfg.tau_filter,
            zeta_filter: cfg.zeta_filter,
            pressure_lead: cfg
                .pressure_lead
                .then_some((cfg.pressure_lead_tau, cfg.pressure_lead_rolloff)),
        }
    }

    /// Hard invariants on the gain set.
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |msg: &str| Err(ControllerError::BadGains(msg.into()));
        if self.lambda.iter().any(|v| *v <= 0.0) {
            return bad("lambda diagonal must be strictly positive");
        }
        if self.gamma_diag.iter().any(|v| *v <= 0.0) {
            return bad("gamma diagonal must be strictly positive");
        }
        if self.kd.iter().any(|v| *v <= 0.0) {
            return bad("kd diagonal must be strictly positive");
        }
        if self.k_ff.iter().any(|v| *v < 0.0) {
            return bad("k_ff diagonal must be non-negative");
        }
        if !(self.p_nom > 0.0 && self.p_nom < self.p_max) {
            return bad("require 0 < p_nom < p_max");
        }
        if self.control_rate_hz <= 0.0 || self.tau_filter <= 0.0 || self.zeta_filter <= 0.0 {
            return bad("control rate and filter constants must be positive");
        }
        if self.k_tau_gain.iter().any(|g| *g <= 0.0) {
            return bad("k_tau gains must be positive");
        }
        Ok(())
    }

    /// Timescale-separation check against the plant's pressure dynamics:
    /// commanded trajectories should be an order of magnitude slower than
    /// the pressure loop. The experimental filter constant (0.75 s) sits
    /// slightly below 10x the 0.1 s pressure lag, so this is reported as a
    /// warning rather than enforced.
    pub fn timescale_warning(&self, plant_tau_p: f64) -> Option<String> {
        if self.tau_filter < 10.0 * plant_tau_p {
            Some(format!(
                "tau_filter = {} s is below 10x the pressure time constant ({} s); \
                 command content near the pressure-loop bandwidth will be tracked poorly",
                self.tau_filter, plant_tau_p
            ))
        } else {
            None
        }
    }
}

/// Filtered setpoint with exact internal derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySetpoint {
    pub q_des: Vector6<f64>,
    pub q_dot_des: Vector6<f64>,
    pub q_ddot_des: Vector6<f64>,
}

impl TrajectorySetpoint {
    pub fn hold(q: Vector6<f64>) -> Self {
        Self {
            q_des: q,
            q_dot_des: Vector6::zeros(),
            q_ddot_des: Vector6::zeros(),
        }
    }
}

/// Second-order low-pass trajectory generator producing (q_des, q_dot_des,
/// q_ddot_des) from step commands, with natural frequency
/// `omega_n = 1/(tau zeta)`. Critically damped at zeta = 1, giving
/// overshoot-free steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandFilter {
    pub q_des: Vector6<f64>,
    pub q_dot_des: Vector6<f64>,
    omega_n: f64,
    zeta: f64,
    last: TrajectorySetpoint,
}

impl CommandFilter {
    pub fn new(q0: Vector6<f64>, tau: f64, zeta: f64) -> Self {
        let omega_n = 1.0 / (tau * zeta);
        Self {
            q_des: q0,
            q_dot_des: Vector6::zeros(),
            omega_n,
            zeta,
            last: TrajectorySetpoint::hold(q0),
        }
    }

    fn accel(&self, q: &Vector6<f64>, qd: &Vector6<f64>, cmd: &Vector6<f64>) -> Vector6<f64> {
        self.omega_n * self.omega_n * (cmd - q) - 2.0 * self.zeta * self.omega_n * qd
    }

    /// Advance the filter by `dt`. A non-finite command holds the previous
    /// setpoint and reports `held = true`.
    pub fn step(&mut self, q_cmd: &Vector6<f64>, dt: f64) -> (TrajectorySetpoint, bool) {
        if q_cmd.iter().any(|v| !v.is_finite()) {
            return (self.last, true);
        }
        // RK4 on the two-state filter ODE; the returned acceleration is the
        // ODE right-hand side at the new state, not a finite difference.
        let (q0, v0) = (self.q_des, self.q_dot_des);
        let a1 = self.accel(&q0, &v0, q_cmd);
        let q1 = q0 + 0.5 * dt * v0;
        let v1 = v0 + 0.5 * dt * a1;
        let a2 = self.accel(&q1, &v1, q_cmd);
        let q2 = q0 + 0.5 * dt * v1;
        let v2 = v0 + 0.5 * dt * a2;
        let a3 = self.accel(&q2, &v2, q_cmd);
        let q3 = q0 + dt * v2;
        let v3 = v0 + dt * a3;
        let a4 = self.accel(&q3, &v3, q_cmd);

        self.q_des = q0 + (dt / 6.0) * (v0 + 2.0 * v1 + 2.0 * v2 + v3);
        self.q_dot_des = v0 + (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
        let sp = TrajectorySetpoint {
            q_des: self.q_des,
            q_dot_des: self.q_dot_des,
            q_ddot_des: self.accel(&self.q_des, &self.q_dot_des, q_cmd),
        };
        self.last = sp;
        (sp, false)
    }
}

/// Sliding-surface bookkeeping: `s = q_tilde_dot + Lambda q_tilde`, equal to
/// the velocity error against the virtual reference trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlidingState {
    pub q_tilde_integral: Vector6<f64>,
    pub s: Vector6<f64>,
    pub q_r_dot: Vector6<f64>,
    pub q_r_ddot: Vector6<f64>,
}

impl Default for SlidingState {
    fn default() -> Self {
        Self {
            q_tilde_integral: Vector6::zeros(),
            s: Vector6::zeros(),
            q_r_dot: Vector6::zeros(),
            q_r_ddot: Vector6::zeros(),
        }
    }
}

/// Advance the sliding state one control tick. `freeze_integral` masks the
/// error-integral accumulation per DOF (anti-windup under saturation).
pub fn update_sliding(
    q: &Vector6<f64>,
    q_dot: &Vector6<f64>,
    sp: &TrajectorySetpoint,
    lambda: &Vector6<f64>,
    state: &SlidingState,
    dt: f64,
    freeze_integral: [bool; N_DOF],
) -> SlidingState {
    let q_tilde = q - sp.q_des;
    let q_tilde_dot = q_dot - sp.q_dot_des;
    let mut integral = state.q_tilde_integral;
    for i in 0..N_DOF {
        if !freeze_integral[i] {
            integral[i] += q_tilde[i] * dt;
        }
    }
    let q_r_dot = sp.q_dot_des - lambda.component_mul(&q_tilde);
    let q_r_ddot = sp.q_ddot_des - lambda.component_mul(&q_tilde_dot);
    SlidingState {
        q_tilde_integral: integral,
        s: q_dot - q_r_dot,
        q_r_dot,
        q_r_ddot,
    }
}

/// `tau_des = net_output - K_D s + K q_des`. With `k_ff = 0` this is the
/// unmodified sliding-damping control law.
pub fn control_law(
    net_output: &Vector6<f64>,
    s: &Vector6<f64>,
    q_des: &Vector6<f64>,
    gains: &ControllerGains,
) -> Vector6<f64> {
    net_output - gains.kd.component_mul(s) + gains.k_ff.component_mul(q_des)
}

/// Antagonistic allocation about the nominal pressure: for each DOF the
/// chamber pair splits `p_nom +/- tau / (2 g)`, then clips to `[0, p_max]`.
/// Returns the commanded pressures and a 12-bit per-chamber saturation mask.
/// When no chamber clips, `K_tau * p = tau` exactly.
pub fn allocate_pressures(tau_des: &Vector6<f64>, gains: &ControllerGains) -> (Pressures, u16) {
    let mut p = Pressures::zeros();
    let mut sat = 0u16;
    for j in 0..N_JOINTS {
        let g = gains.k_tau_gain[j];
        for a in 0..2usize {
            let tau = tau_des[2 * j + a];
            let half = tau / (2.0 * g);
            let base = 4 * j + 2 * a;
            for (offset, sign) in [(0usize, 1.0f64), (1usize, -1.0f64)] {
                let raw = gains.p_nom + sign * half;
                let clipped = raw.clamp(0.0, gains.p_max);
                if clipped != raw {
                    sat |= 1 << (base + offset);
                }
                p[base + offset] = clipped;
            }
        }
    }
    (p, sat)
}

/// Discrete lead shaping `(1 + tau_lead s)/(1 + tau_roll s)` applied per
/// chamber to the commanded pressures, backward-Euler at the control rate.
/// Compensates the known first-order lag of the pressure stage within the
/// rolloff bandwidth, the role the embedded pressure PD loops play on the
/// hardware. Unity DC gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureLead {
    tau_lead: f64,
    tau_roll: f64,
    state: Option<(Pressures, Pressures)>, // (prev input, prev output)
}

impl PressureLead {
    pub fn new(tau_lead: f64, tau_roll: f64) -> Self {
        Self {
            tau_lead,
            tau_roll,
            state: None,
        }
    }

    pub fn step(&mut self, u: &Pressures, dt: f64) -> Pressures {
        let (prev_u, prev_y) = match self.state {
            Some(s) => s,
            None => (*u, *u),
        };
        let y = (self.tau_roll * prev_y + dt * u + self.tau_lead * (u - prev_u))
            / (self.tau_roll + dt);
        self.state = Some((*u, y));
        y
    }
}

/// Controller-side torque map: the unit antagonistic pattern scaled by the
/// per-joint gain (used by the allocation round-trip checks).
pub fn k_tau_apply(p: &Pressures, gains: &ControllerGains) -> Vector6<f64> {
    Vector6::from_fn(|i, _| {
        let j = i / 2;
        let base = 4 * j + 2 * (i % 2);
        gains.k_tau_gain[j] * (p[base] - p[base + 1])
    })
}

/// Per-step diagnostics surfaced to the logging and monitoring layers.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub setpoint: TrajectorySetpoint,
    pub s: Vector6<f64>,
    pub q_r_dot: Vector6<f64>,
    pub q_r_ddot: Vector6<f64>,
    pub net_out: Vector6<f64>,
    pub tau_des: Vector6<f64>,
    pub phi: DVector<f64>,
    pub sat_mask: u16,
    pub step_us: f64,
    pub fault: bool,
    pub filter_held: bool,
}

/// The complete adaptive controller: owns the network, the command filter
/// and the sliding state. Single-writer; snapshots may be cloned freely.
#[derive(Debug, Clone)]
pub struct AdaptiveController {
    pub gains: ControllerGains,
    pub net: RbfNetwork,
    pub filter: CommandFilter,
    pub sliding: SlidingState,
    lead: Option<PressureLead>,
    prev_sat_mask: u16,
    nominal_p: Pressures,
    pub fault_count: u64,
}

impl AdaptiveController {
    /// Build the controller for an arm currently measured at `q0`.
    pub fn new(cfg: &ControllerConfig, q0: Vector6<f64>) -> Result<Self, ControllerError> {
        let gains = ControllerGains::from_config(cfg);
        gains.validate()?;
        let n = 4 * N_DOF;
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        for i in 0..N_DOF {
            lo[i] = -cfg.q_bound;
            hi[i] = cfg.q_bound;
            lo[N_DOF + i] = -cfg.qd_bound;
            hi[N_DOF + i] = cfg.qd_bound;
            lo[2 * N_DOF + i] = -cfg.qrd_bound;
            hi[2 * N_DOF + i] = cfg.qrd_bound;
            lo[3 * N_DOF + i] = -cfg.qrdd_bound;
            hi[3 * N_DOF + i] = cfg.qrdd_bound;
        }
        let net = match cfg.width_override {
            Some(w) => RbfNetwork::with_width(lo, hi, cfg.p, N_DOF, cfg.seed, w)?,
            None => RbfNetwork::new(lo, hi, cfg.p, N_DOF, cfg.seed)?,
        };
        let nominal_p = Pressures::from_element(gains.p_nom);
        Ok(Self {
            filter: CommandFilter::new(q0, gains.tau_filter, gains.zeta_filter),
            sliding: SlidingState::default(),
            lead: gains
                .pressure_lead
                .map(|(tau_lead, tau_roll)| PressureLead::new(tau_lead, tau_roll)),
            prev_sat_mask: 0,
            nominal_p,
            fault_count: 0,
            gains,
            net,
        })
    }

    /// Stack the network input `x = [q, q_dot, q_r_dot, q_r_ddot]`.
    fn network_input(
        q: &Vector6<f64>,
        q_dot: &Vector6<f64>,
        sliding: &SlidingState,
    ) -> DVector<f64> {
        let mut x = DVector::zeros(4 * N_DOF);
        for i in 0..N_DOF {
            x[i] = q[i];
            x[N_DOF + i] = q_dot[i];
            x[2 * N_DOF + i] = sliding.q_r_dot[i];
            x[3 * N_DOF + i] = sliding.q_r_ddot[i];
        }
        x
    }

    /// One control tick: filter the command, update the sliding state,
    /// evaluate and apply the control law, allocate pressures, then adapt.
    /// Any sub-operation error holds the all-nominal pressure command and
    /// raises the fault flag; the controller keeps running.
    pub fn step(
        &mut self,
        q_meas: &Vector6<f64>,
        q_dot_meas: &Vector6<f64>,
        q_cmd: &Vector6<f64>,
        dt: f64,
    ) -> (Pressures, StepDiagnostics) {
        #[cfg(not(target_arch = "wasm32"))]
        let t0 = std::time::Instant::now();

        let (setpoint, filter_held) = self.filter.step(q_cmd, dt);

        // Anti-windup: freeze the error integral of both DOFs of any joint
        // that saturated a chamber on the previous tick.
        let mut freeze = [false; N_DOF];
        for j in 0..N_JOINTS {
            let joint_bits = 0xFu16 << (4 * j);
            if self.prev_sat_mask & joint_bits != 0 {
                freeze[2 * j] = true;
                freeze[2 * j + 1] = true;
            }
        }
        let sliding = update_sliding(
            q_meas,
            q_dot_meas,
            &setpoint,
            &self.gains.lambda,
            &self.sliding,
            dt,
            freeze,
        );

        let lead = &mut self.lead;
        let net = &mut self.net;
        let gains = &self.gains;
        let result = (|| -> Result<(Pressures, Vector6<f64>, Vector6<f64>, DVector<f64>, u16), RbfError> {
            let x = Self::network_input(q_meas, q_dot_meas, &sliding);
            let phi = net.eval_basis(&x)?;
            let net_out_d = net.forward(&phi)?;
            let net_out = Vector6::from_fn(|i, _| net_out_d[i]);
            let tau_des = control_law(&net_out, &sliding.s, &setpoint.q_des, gains);
            let (mut p_des, mut sat_mask) = allocate_pressures(&tau_des, gains);
            if let Some(lead) = lead.as_mut() {
                p_des = lead.step(&p_des, dt);
                for (ch, v) in p_des.iter_mut().enumerate() {
                    let clipped = v.clamp(0.0, gains.p_max);
                    if clipped != *v {
                        sat_mask |= 1 << ch;
                        *v = clipped;
                    }
                }
            }
            net.adapt(&phi, &DVector::from_row_slice(sliding.s.as_slice()), &gains.gamma_diag, dt)?;
            Ok((p_des, net_out, tau_des, phi, sat_mask))
        })();

        self.sliding = sliding;

        let (p_des, net_out, tau_des, phi, sat_mask, fault) = match result {
            Ok((p, n, t, phi, m)) => (p, n, t, phi, m, false),
            Err(e) => {
                self.fault_count += 1;
                log::error!("controller fault, holding nominal pressures: {e}");
                (
                    self.nominal_p,
                    Vector6::zeros(),
                    Vector6::zeros(),
                    DVector::zeros(self.net.num_centers() + 1),
                    0,
                    true,
                )
            }
        };
        self.prev_sat_mask = sat_mask;

        #[cfg(not(target_arch = "wasm32"))]
        let step_us = t0.elapsed().as_secs_f64() * 1e6;
        #[cfg(target_arch = "wasm32")]
        let step_us = 0.0;

        let diag = StepDiagnostics {
            setpoint,
            s: self.sliding.s,
            q_r_dot: self.sliding.q_r_dot,
            q_r_ddot: self.sliding.q_r_ddot,
            net_out,
            tau_des,
            phi,
            sat_mask,
            step_us,
            fault,
            filter_held,
        };
        (p_des, diag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn gains() -> ControllerGains {
        ControllerGains::from_config(&ControllerConfig::default())
    }

    #[test]
    fn default_gains_validate() {
        assert!(gains().validate().is_ok());
        let mut bad = gains();
        bad.kd[2] = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = gains();
        bad.p_nom = 400.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn timescale_warning_fires_below_ten_tau_p() {
        let g = gains();
        assert!(g.timescale_warning(0.1).is_some());
        assert!(g.timescale_warning(0.05).is_none());
    }

    #[test]
    fn filter_at_equilibrium_stays_constant() {
        let q0 = Vector6::from_element(0.3);
        let mut f = CommandFilter::new(q0, 0.75, 1.0);
        for _ in 0..100 {
            let (sp, held) = f.step(&q0, 0.002);
            assert!(!held);
            assert_abs_diff_eq!((sp.q_des - q0).norm(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(sp.q_dot_des.norm(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(sp.q_ddot_des.norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn filter_matches_critically_damped_step_response() {
        // Unit step with tau = 0.75, zeta = 1:
        // q_des(t) = 1 - (1 + t/0.75) exp(-t/0.75), so q_des(0.75) = 1 - 2/e.
        let mut f = CommandFilter::new(Vector6::zeros(), 0.75, 1.0);
        let cmd = Vector6::from_element(1.0);
        let dt = 0.002;
        let mut sp = TrajectorySetpoint::hold(Vector6::zeros());
        for _ in 0..375 {
            sp = f.step(&cmd, dt).0;
        }
        let expect = 1.0 - 2.0 * (-1.0f64).exp(); // 0.26424111765711533
        assert_relative_eq!(sp.q_des[0], expect, max_relative = 1e-8);
        assert_relative_eq!(sp.q_des[0], 0.2642, max_relative = 1e-3);
    }

    #[test]
    fn filter_never_overshoots_when_critically_damped() {
        let mut f = CommandFilter::new(Vector6::zeros(), 0.75, 1.0);
        let cmd = Vector6::from_element(0.5);
        for _ in 0..5000 {
            let (sp, _) = f.step(&cmd, 0.002);
            assert!(sp.q_des[0] <= 0.5 + 1e-9, "overshoot: {}", sp.q_des[0]);
        }
        // And it converges.
        let (sp, _) = f.step(&cmd, 0.002);
        assert_relative_eq!(sp.q_des[0], 0.5, max_relative = 1e-4);
    }

    #[test]
    fn filter_holds_setpoint_on_non_finite_command() {
        let mut f = CommandFilter::new(Vector6::zeros(), 0.75, 1.0);
        let cmd = Vector6::from_element(1.0);
        for _ in 0..50 {
            f.step(&cmd, 0.002);
        }
        let before = f.step(&cmd, 0.002).0;
        let mut bad = cmd;
        bad[3] = f64::NAN;
        let (sp, held) = f.step(&bad, 0.002);
        assert!(held);
        assert_eq!(sp.q_des, before.q_des);
        assert_eq!(sp.q_dot_des, before.q_dot_des);
    }

    #[test]
    fn sliding_zero_for_perfect_tracking() {
        let sp = TrajectorySetpoint {
            q_des: Vector6::from_element(0.2),
            q_dot_des: Vector6::from_element(0.1),
            q_ddot_des: Vector6::zeros(),
        };
        let st = update_sliding(
            &sp.q_des,
            &sp.q_dot_des,
            &sp,
            &gains().lambda,
            &SlidingState::default(),
            0.002,
            [false; 6],
        );
        assert_abs_diff_eq!(st.s.norm(), 0.0);
    }

    #[test]
    fn sliding_position_error_scales_with_lambda() {
        // q_tilde = 0.1 rad on DOF 0 with Lambda_0 = 12 gives s_0 = 1.2.
        let sp = TrajectorySetpoint::hold(Vector6::zeros());
        let mut q = Vector6::zeros();
        q[0] = 0.1;
        let st = update_sliding(
            &q,
            &Vector6::zeros(),
            &sp,
            &gains().lambda,
            &SlidingState::default(),
            0.002,
            [false; 6],
        );
        assert_relative_eq!(st.s[0], 1.2, max_relative = 1e-12);
        // Distal DOFs use Lambda = 25.
        let mut q = Vector6::zeros();
        q[5] = 0.1;
        let st = update_sliding(
            &q,
            &Vector6::zeros(),
            &sp,
            &gains().lambda,
            &SlidingState::default(),
            0.002,
            [false; 6],
        );
        assert_relative_eq!(st.s[5], 2.5, max_relative = 1e-12);
    }

    #[test]
    fn sliding_both_formulas_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        use rand::{Rng as _, SeedableRng as _};
        for _ in 0..50 {
            let sp = TrajectorySetpoint {
                q_des: Vector6::from_fn(|_, _| rng.random_range(-0.5..0.5)),
                q_dot_des: Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                q_ddot_des: Vector6::from_fn(|_, _| rng.random_range(-2.0..2.0)),
            };
            let q = Vector6::from_fn(|_, _| rng.random_range(-0.5..0.5));
            let q_dot = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let lambda = gains().lambda;
            let st = update_sliding(
                &q,
                &q_dot,
                &sp,
                &lambda,
                &SlidingState::default(),
                0.002,
                [false; 6],
            );
            // s = q_tilde_dot + Lambda q_tilde must equal q_dot - q_r_dot.
            let alt = (q_dot - sp.q_dot_des) + lambda.component_mul(&(q - sp.q_des));
            assert_abs_diff_eq!((st.s - alt).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn integral_freeze_masks_accumulation() {
        let sp = TrajectorySetpoint::hold(Vector6::zeros());
        let q = Vector6::from_element(0.1);
        let mut freeze = [false; 6];
        freeze[2] = true;
        let st = update_sliding(
            &q,
            &Vector6::zeros(),
            &sp,
            &gains().lambda,
            &SlidingState::default(),
            0.5,
            freeze,
        );
        assert_abs_diff_eq!(st.q_tilde_integral[0], 0.05);
        assert_abs_diff_eq!(st.q_tilde_integral[2], 0.0);
    }

    #[test]
    fn control_law_zero_inputs_zero_output() {
        let tau = control_law(
            &Vector6::zeros(),
            &Vector6::zeros(),
            &Vector6::zeros(),
            &gains(),
        );
        assert_abs_diff_eq!(tau.norm(), 0.0);
    }

    #[test]
    fn control_law_damping_term() {
        let mut s = Vector6::zeros();
        s[0] = 1.0;
        let tau = control_law(&Vector6::zeros(), &s, &Vector6::zeros(), &gains());
        assert_relative_eq!(tau[0], -2.5, max_relative = 1e-12);
    }

    #[test]
    fn control_law_stiffness_feedforward() {
        let mut q_des = Vector6::zeros();
        q_des[0] = 0.1;
        let tau = control_law(&Vector6::zeros(), &Vector6::zeros(), &q_des, &gains());
        assert_relative_eq!(tau[0], 3.5, max_relative = 1e-12);
    }

    #[test]
    fn control_law_reduces_to_pure_sliding_damping() {
        // Gamma = 0, K = 0, theta = 0: tau_des = -K_D s identically.
        let mut g = gains();
        g.k_ff = Vector6::zeros();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        use rand::{Rng as _, SeedableRng as _};
        for _ in 0..20 {
            let s = Vector6::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let q_des = Vector6::from_fn(|_, _| rng.random_range(-0.5..0.5));
            let tau = control_law(&Vector6::zeros(), &s, &q_des, &g);
            assert_abs_diff_eq!((tau + g.kd.component_mul(&s)).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn allocation_zero_torque_gives_nominal() {
        let (p, sat) = allocate_pressures(&Vector6::zeros(), &gains());
        assert_eq!(sat, 0);
        for v in p.iter() {
            assert_abs_diff_eq!(*v, 150.0);
        }
    }

    #[test]
    fn allocation_splits_antagonistically() {
        let mut tau = Vector6::zeros();
        tau[0] = 100.0;
        let (p, sat) = allocate_pressures(&tau, &gains());
        assert_eq!(sat, 0);
        assert_abs_diff_eq!(p[0], 200.0);
        assert_abs_diff_eq!(p[1], 100.0);
        assert_abs_diff_eq!(p[2], 150.0);
        assert_abs_diff_eq!(p[3], 150.0);
        let tau_rt = k_tau_apply(&p, &gains());
        assert_abs_diff_eq!(tau_rt[0], 100.0);
        assert_abs_diff_eq!(tau_rt[1], 0.0);
    }

    #[test]
    fn allocation_round_trip_oracle() {
        // K_tau * allocate(tau) = tau for 1000 random unclipped torques.
        let g = gains();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2718);
        use rand::{Rng as _, SeedableRng as _};
        for _ in 0..1000 {
            let tau = Vector6::from_fn(|_, _| rng.random_range(-290.0..290.0));
            let (p, _) = allocate_pressures(&tau, &g);
            let tau_rt = k_tau_apply(&p, &g);
            assert!(
                (tau_rt - tau).amax() < 1e-9,
                "round-trip error {}",
                (tau_rt - tau).amax()
            );
        }
    }

    #[test]
    fn allocation_clips_and_flags() {
        let mut tau = Vector6::zeros();
        tau[4] = 400.0; // beyond the +/-300 differential envelope
        let (p, sat) = allocate_pressures(&tau, &gains());
        assert!(sat & (1 << 8) != 0);
        assert!(sat & (1 << 9) != 0);
        assert_abs_diff_eq!(p[8], 300.0);
        assert_abs_diff_eq!(p[9], 0.0);
    }

    #[test]
    fn allocation_differential_is_monotone_before_clipping() {
        let g = gains();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..200 {
            let mut tau = Vector6::zeros();
            tau[2] = -420.0 + k as f64 * 4.2;
            let (p, _) = allocate_pressures(&tau, &g);
            let diff = p[4] - p[5];
            assert!(diff >= prev - 1e-12, "differential not monotone");
            prev = diff;
        }
    }

    #[test]
    fn controller_first_step_is_feedforward_allocation() {
        // At rest exactly at the command with zero weights: p_des is the
        // nominal plus the stiffness feedforward split.
        let cfg = ControllerConfig::default();
        let q0 = Vector6::from_element(0.1);
        let mut ctl = AdaptiveController::new(&cfg, q0).unwrap();
        let (p, diag) = ctl.step(&q0, &Vector6::zeros(), &q0, 0.002);
        assert!(!diag.fault);
        assert_abs_diff_eq!(diag.s.norm(), 0.0, epsilon = 1e-12);
        // tau = K q_des = 3.5 on every DOF: chambers at 150 +/- 1.75.
        for j in 0..3 {
            for a in 0..2 {
                let base = 4 * j + 2 * a;
                assert_relative_eq!(p[base], 151.75, max_relative = 1e-9);
                assert_relative_eq!(p[base + 1], 148.25, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn controller_fault_holds_nominal() {
        let cfg = ControllerConfig::default();
        let mut ctl = AdaptiveController::new(&cfg, Vector6::zeros()).unwrap();
        let theta_before = ctl.net.theta.clone();
        let mut bad_qd = Vector6::zeros();
        bad_qd[1] = f64::NAN;
        let (p, diag) = ctl.step(&Vector6::zeros(), &bad_qd, &Vector6::zeros(), 0.002);
        assert!(diag.fault);
        assert_eq!(ctl.fault_count, 1);
        for v in p.iter() {
            assert_abs_diff_eq!(*v, 150.0);
        }
        // No adaptation happened on the faulted tick.
        assert_eq!(ctl.net.theta, theta_before);
    }

    #[test]
    fn controller_steps_are_deterministic() {
        let cfg = ControllerConfig::default();
        let run = || {
            let mut ctl = AdaptiveController::new(&cfg, Vector6::zeros()).unwrap();
            let mut bits = Vec::new();
            let q_cmd = Vector6::from_element(0.25);
            let mut q = Vector6::zeros();
            for k in 0..500 {
                // Synthetic measurement trajectory, deterministic.
                q[0] = 0.2 * (k as f64 * 0.002).sin();
                let (p, d) = ctl.step(&q, &Vector6::zeros(), &q_cmd, 0.002);
                bits.push(p[0].to_bits());
                bits.push(d.tau_des[3].to_bits());
            }
            bits
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_gamma_freezes_weights() {
        // With the adaptation disabled the network output stays zero and
        // the controller is exactly tau = -K_D s + K q_des.
        let cfg = ControllerConfig::default();
        let mut ctl = AdaptiveController::new(&cfg, Vector6::zeros()).unwrap();
        ctl.gains.gamma_diag.fill(0.0);
        ctl.gains.k_ff = Vector6::zeros();
        let q = Vector6::from_element(0.05);
        let (_, diag) = ctl.step(&q, &Vector6::zeros(), &Vector6::zeros(), 0.002);
        assert!(ctl.net.theta.iter().all(|v| *v == 0.0));
        assert_abs_diff_eq!(
            (diag.tau_des + ctl.gains.kd.component_mul(&diag.s)).norm(),
            0.0,
            epsilon = 1e-12
        );
    }
}
