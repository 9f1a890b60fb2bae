//! Fixed-step simulator of a 6-coordinate pneumatically actuated soft arm.
//!
//! Three 2-DOF joints (large, medium, small; bending coordinates u, v per
//! joint) connect three rigid links hanging from a mount. Each joint is
//! driven by four antagonistic chambers, 12 pressures total. The model is
//! behavioral: it is calibrated to present the measured difficulty class of
//! the hardware (near-zero damping around 8 Hz, rate-independent hysteresis,
//! nonlinear and slowly drifting stiffness, pressure-map error) rather than
//! to reproduce any particular arm's exact geometry.
//!
//! State layout: DOF index `2*j + a` for joint `j` in 0..3 and axis
//! `a` (0 = u, 1 = v). Chamber index `4*j + c` with chambers (0, 1) the
//! antagonistic pair for u and (2, 3) the pair for v.

use nalgebra::{Matrix6, SVector, Vector6};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const N_DOF: usize = 6;
pub const N_JOINTS: usize = 3;
pub const N_CHAMBERS: usize = 12;

/// Chamber burst pressure; the simulation aborts above this.
pub const P_FAIL_KPA: f64 = 615.0;

/// Joint excursion beyond which the structure is considered failed.
pub const Q_FAIL_RAD: f64 = std::f64::consts::PI;

pub type Pressures = SVector<f64, N_CHAMBERS>;

#[derive(Debug, Clone, Error, PartialEq, Serialize, Deserialize)]
pub enum PlantFault {
    #[error("chamber {chamber} exceeded failure pressure at t = {t:.4} s ({p:.1} kPa)")]
    OverPressure { chamber: usize, t: f64, p: f64 },
    #[error("DOF {dof} left the mechanical range at t = {t:.4} s (q = {q:.3} rad)")]
    RangeExceeded { dof: usize, t: f64, q: f64 },
    #[error("non-finite state at t = {t:.4} s")]
    NonFinite { t: f64 },
}

/// Bouc-Wen hysteresis parameters for one DOF.
///
/// `z_dot = a * q_dot - beta * |q_dot| * |z|^(n-1) * z - gamma * q_dot * |z|^n`
/// and the hysteresis torque is `alpha * z`. With `a = beta + gamma` the
/// internal state saturates at |z| = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoucWen {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub n: f64,
    pub a: f64,
}

impl BoucWen {
    pub fn rate(&self, q_dot: f64, z: f64) -> f64 {
        let zn1 = z.abs().powf(self.n - 1.0);
        self.a * q_dot - self.beta * q_dot.abs() * zn1 * z - self.gamma * q_dot * zn1 * z.abs()
    }
}

/// Construction parameters for the plant, all overridable from the config
/// file. Defaults encode the identification targets and the declared
/// behavioral choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    /// Link masses, kg (large to small).
    pub link_masses: [f64; 3],
    /// Link lengths, m.
    pub link_lengths: [f64; 3],
    /// Per-DOF damped-frequency targets, Hz. The chambers are not uniform,
    /// so the defaults stagger the nominal 8 Hz by a few percent per DOF.
    pub f_d_hz: [f64; 6],
    /// Per-DOF damping-ratio targets.
    pub zeta: [f64; 6],
    /// Effective joint stiffness seen through the pressure map, kPa/rad.
    /// Sets the per-joint pressure-to-torque gain.
    pub stiffness_kpa_per_rad: f64,
    /// Hysteresis torque amplitude as a fraction of the tangent stiffness.
    pub hyst_ratio: f64,
    /// Bouc-Wen shape parameters shared by all DOFs.
    pub hyst_a: f64,
    pub hyst_beta: f64,
    pub hyst_gamma: f64,
    pub hyst_n: f64,
    /// Cubic spring term as a fraction of the linear term, 1/rad^2.
    pub cubic_ratio: f64,
    /// Normalized inertial coupling between same-axis DOFs of neighboring
    /// joints.
    pub coupling: f64,
    /// Pressure-dynamics time constant, s.
    pub tau_p: f64,
    /// Per-channel multiplicative error on the true pressure-to-torque map
    /// (uniform in +/- this fraction), emulating non-ideal chambers.
    pub k_tau_mismatch: f64,
    /// Seed for the mismatch draw.
    pub mismatch_seed: u64,
    /// Linear stiffness drift rate, fraction per second (0 disables).
    /// The default experiment value of 10%/10 min is 1.6667e-4.
    pub stiffness_drift_per_s: f64,
    /// Gravitational acceleration, m/s^2.
    pub gravity: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            link_masses: [4.0, 2.5, 1.5],
            link_lengths: [0.45, 0.35, 0.25],
            f_d_hz: [7.52, 7.76, 8.0, 8.24, 8.48, 8.72],
            zeta: [0.0015; 6],
            stiffness_kpa_per_rad: 120.0,
            hyst_ratio: 0.06,
            hyst_a: 3.0,
            hyst_beta: 1.5,
            hyst_gamma: 1.5,
            hyst_n: 6.0,
            cubic_ratio: 0.1,
            coupling: 0.005,
            tau_p: 0.1,
            k_tau_mismatch: 0.0,
            mismatch_seed: 0,
            stiffness_drift_per_s: 0.0,
            gravity: 9.81,
        }
    }
}

impl PlantConfig {
    /// Experiment configuration used by the tracking studies: 15% pressure
    /// map error and slow stiffness softening enabled.
    pub fn with_mismatch_and_drift(mut self, seed: u64) -> Self {
        self.k_tau_mismatch = 0.15;
        self.mismatch_seed = seed;
        self.stiffness_drift_per_s = 0.10 / 600.0;
        self
    }
}

/// A distal payload: point mass strapped to the end of a link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub mass: f64,
    pub link: usize,
}

/// Built plant model: derived inertial, stiffness, damping, hysteresis and
/// pressure-map quantities, ready for simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantModel {
    pub config: PlantConfig,
    /// Lumped rotary inertia per DOF about its joint, kg m^2 (no payload).
    pub inertia: Vector6<f64>,
    /// Linear spring constant per DOF, N m / rad (tangent-calibrated).
    pub k1: Vector6<f64>,
    /// Cubic spring constant per DOF, N m / rad^3.
    pub k3: Vector6<f64>,
    /// Viscous damping per DOF, N m s / rad.
    pub c_damp: Vector6<f64>,
    /// Bouc-Wen parameters per DOF.
    pub bw: [BoucWen; 6],
    /// True pressure-to-torque gains per chamber, N m / kPa (signed
    /// antagonism is applied by the map, these are magnitudes).
    pub k_tau_gains: [f64; 12],
    pub payload: Option<Payload>,
}

#[derive(Debug, Error)]
pub enum PlantBuildError {
    #[error("link {0} has non-positive mass or length")]
    BadLink(usize),
    #[error("invalid dynamic target at DOF {0}")]
    BadTarget(usize),
    #[error("pressure time constant must be positive")]
    BadTauP,
    #[error("hysteresis tangent ratio too large (hyst_ratio * hyst_a must be < 1)")]
    HysteresisTooStiff,
    #[error("link index {0} out of range")]
    BadLinkIndex(usize),
    #[error("payload mass must be non-negative")]
    NegativePayload,
}

impl PlantModel {
    pub fn build(config: PlantConfig) -> Result<Self, PlantBuildError> {
        for (i, (&m, &l)) in config
            .link_masses
            .iter()
            .zip(config.link_lengths.iter())
            .enumerate()
        {
            if m <= 0.0 || l <= 0.0 || !m.is_finite() || !l.is_finite() {
                return Err(PlantBuildError::BadLink(i));
            }
        }
        if config.tau_p <= 0.0 {
            return Err(PlantBuildError::BadTauP);
        }
        if config.hyst_ratio * config.hyst_a >= 1.0 {
            return Err(PlantBuildError::HysteresisTooStiff);
        }

        // Lumped inertia of everything distal to joint j, about joint j.
        let mut joint_inertia = [0.0f64; 3];
        for j in 0..N_JOINTS {
            let joint_pos: f64 = config.link_lengths[..j].iter().sum();
            for k in j..N_JOINTS {
                let com: f64 =
                    config.link_lengths[..k].iter().sum::<f64>() + 0.5 * config.link_lengths[k];
                let d = com - joint_pos;
                let i_c = config.link_masses[k] * config.link_lengths[k].powi(2) / 12.0;
                joint_inertia[j] += config.link_masses[k] * d * d + i_c;
            }
        }
        let mut inertia = Vector6::zeros();
        for i in 0..N_DOF {
            inertia[i] = joint_inertia[i / 2];
        }

        let mut model = Self {
            inertia,
            k1: Vector6::zeros(),
            k3: Vector6::zeros(),
            c_damp: Vector6::zeros(),
            bw: [BoucWen {
                alpha: 0.0,
                beta: config.hyst_beta,
                gamma: config.hyst_gamma,
                n: config.hyst_n,
                a: config.hyst_a,
            }; 6],
            k_tau_gains: [0.0; 12],
            payload: None,
            config,
        };

        // Calibrate the per-DOF tangent stiffness so the small-signal free
        // response hits the configured frequency: the linear spring, the
        // Bouc-Wen tangent (alpha * a) and the gravity pendulum term must
        // sum to J * omega_n^2.
        for i in 0..N_DOF {
            let cfg = &model.config;
            let zeta = cfg.zeta[i];
            let f_d = cfg.f_d_hz[i];
            if !(zeta >= 0.0 && zeta < 1.0) || f_d <= 0.0 {
                return Err(PlantBuildError::BadTarget(i));
            }
            let omega_n = 2.0 * std::f64::consts::PI * f_d / (1.0 - zeta * zeta).sqrt();
            let k_tangent = model.inertia[i] * omega_n * omega_n;
            let alpha = cfg.hyst_ratio * k_tangent;
            let k_grav = model.gravity_tangent_stiffness(i);
            model.bw[i].alpha = alpha;
            model.k1[i] = k_tangent - alpha * cfg.hyst_a - k_grav;
            if model.k1[i] <= 0.0 {
                return Err(PlantBuildError::BadTarget(i));
            }
            model.k3[i] = cfg.cubic_ratio * model.k1[i];
            model.c_damp[i] = 2.0 * zeta * omega_n * model.inertia[i];
        }

        // True pressure map: per-joint gain sized so the joint stiffness
        // seen through it matches `stiffness_kpa_per_rad`, with optional
        // per-channel scale error.
        let nominal_omega: f64 = 2.0 * std::f64::consts::PI * 8.0;
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.mismatch_seed);
        for ch in 0..N_CHAMBERS {
            let j = ch / 4;
            let base = joint_inertia[j] * nominal_omega * nominal_omega
                / model.config.stiffness_kpa_per_rad;
            let err = if model.config.k_tau_mismatch > 0.0 {
                rng.random_range(-model.config.k_tau_mismatch..model.config.k_tau_mismatch)
            } else {
                0.0
            };
            model.k_tau_gains[ch] = base * (1.0 + err);
        }
        Ok(model)
    }

    /// Distance from joint `j` to the payload attachment (end of `link`).
    fn payload_arm(&self, j: usize, link: usize) -> f64 {
        self.config.link_lengths[j..=link].iter().sum()
    }

    /// Mismatch-free chamber gain of a joint (N m / kPa), the reference the
    /// monitor uses to express reconstructed torques in controller units.
    pub fn nominal_chamber_gain(&self, joint: usize) -> f64 {
        let nominal_omega = 2.0 * std::f64::consts::PI * 8.0;
        let joint_pos: f64 = self.config.link_lengths[..joint].iter().sum();
        let mut inertia = 0.0;
        for k in joint..N_JOINTS {
            let com: f64 =
                self.config.link_lengths[..k].iter().sum::<f64>() + 0.5 * self.config.link_lengths[k];
            let d = com - joint_pos;
            inertia += self.config.link_masses[k] * d * d
                + self.config.link_masses[k] * self.config.link_lengths[k].powi(2) / 12.0;
        }
        inertia * nominal_omega * nominal_omega / self.config.stiffness_kpa_per_rad
    }

    /// Payload-inclusive diagonal inertia for DOF `i`.
    pub fn dof_inertia(&self, i: usize) -> f64 {
        let mut inertia = self.inertia[i];
        if let Some(pl) = self.payload {
            let j = i / 2;
            if j <= pl.link {
                let r = self.payload_arm(j, pl.link);
                inertia += pl.mass * r * r;
            }
        }
        inertia
    }

    /// Stiffness drift factor at time `t` (clamped so the springs never
    /// soften below half their nominal value).
    pub fn drift_factor(&self, t: f64) -> f64 {
        (1.0 - self.config.stiffness_drift_per_s * t).clamp(0.5, 1.0)
    }

    /// Mass matrix: payload-inclusive diagonal plus a small
    /// configuration-dependent coupling between same-axis DOFs of
    /// neighboring joints. Symmetric positive definite by diagonal
    /// dominance.
    pub fn mass_matrix(&self, q: &Vector6<f64>) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        for i in 0..N_DOF {
            m[(i, i)] = self.dof_inertia(i);
        }
        let eta = self.config.coupling;
        if eta != 0.0 {
            for a in 0..2usize {
                for j in 0..N_JOINTS {
                    for k in (j + 1)..N_JOINTS {
                        let scale = if k == j + 1 { eta } else { eta * 0.5 };
                        let (row, col) = (2 * j + a, 2 * k + a);
                        let (oj, ok) = (2 * j + 1 - a, 2 * k + 1 - a);
                        let b = scale
                            * (m[(row, row)] * m[(col, col)]).sqrt()
                            * q[oj].cos()
                            * q[ok].cos();
                        m[(row, col)] = b;
                        m[(col, row)] = b;
                    }
                }
            }
        }
        m
    }

    /// Partial derivative of the mass matrix with respect to `q[w]`.
    fn mass_matrix_partial(&self, q: &Vector6<f64>, w: usize) -> Matrix6<f64> {
        let mut dm = Matrix6::zeros();
        let eta = self.config.coupling;
        if eta == 0.0 {
            return dm;
        }
        for a in 0..2usize {
            for j in 0..N_JOINTS {
                for k in (j + 1)..N_JOINTS {
                    let scale = if k == j + 1 { eta } else { eta * 0.5 };
                    let (row, col) = (2 * j + a, 2 * k + a);
                    let (oj, ok) = (2 * j + 1 - a, 2 * k + 1 - a);
                    if w != oj && w != ok {
                        continue;
                    }
                    let jj = self.dof_inertia(row);
                    let kk = self.dof_inertia(col);
                    let mut d = scale * (jj * kk).sqrt();
                    d *= if w == oj {
                        -q[oj].sin() * q[ok].cos()
                    } else {
                        q[oj].cos() * -q[ok].sin()
                    };
                    dm[(row, col)] += d;
                    dm[(col, row)] += d;
                }
            }
        }
        dm
    }

    /// Coriolis/centrifugal matrix from the Christoffel symbols of the mass
    /// matrix, so that `M_dot - 2C` is skew-symmetric by construction.
    pub fn coriolis_matrix(&self, q: &Vector6<f64>, q_dot: &Vector6<f64>) -> Matrix6<f64> {
        let dm: Vec<Matrix6<f64>> = (0..N_DOF).map(|w| self.mass_matrix_partial(q, w)).collect();
        let mut c = Matrix6::zeros();
        for i in 0..N_DOF {
            for j in 0..N_DOF {
                let mut acc = 0.0;
                for k in 0..N_DOF {
                    acc += 0.5
                        * (dm[k][(i, j)] + dm[j][(i, k)] - dm[i][(j, k)])
                        * q_dot[k];
                }
                c[(i, j)] = acc;
            }
        }
        c
    }

    /// Point masses hanging from the chain: (mass, chain segment lengths up
    /// to the mass). Link COMs plus the optional payload.
    fn hanging_masses(&self) -> Vec<(f64, [f64; 3], usize)> {
        let mut out = Vec::with_capacity(4);
        for k in 0..N_JOINTS {
            let mut seg = [0.0; 3];
            for s in 0..k {
                seg[s] = self.config.link_lengths[s];
            }
            seg[k] = 0.5 * self.config.link_lengths[k];
            out.push((self.config.link_masses[k], seg, k));
        }
        if let Some(pl) = self.payload {
            let mut seg = [0.0; 3];
            for s in 0..=pl.link {
                seg[s] = self.config.link_lengths[s];
            }
            out.push((pl.mass, seg, pl.link));
        }
        out
    }

    /// Gravity torque vector `g(q) = dU/dq` for the arm hanging along -z at
    /// q = 0, using cumulative bending angles per axis.
    pub fn gravity_torque(&self, q: &Vector6<f64>) -> Vector6<f64> {
        let mut g = Vector6::zeros();
        let grav = self.config.gravity;
        for (mass, seg, last) in self.hanging_masses() {
            // Cumulative angles at each segment.
            let mut cu = 0.0;
            let mut cv = 0.0;
            let mut sins = [[0.0f64; 3]; 2]; // d(-z_segment)/d(u_j or v_j) pieces
            let mut _depth = 0.0;
            for s in 0..=last {
                cu += q[2 * s];
                cv += q[2 * s + 1];
                let l = seg[s];
                _depth += l * cu.cos() * cv.cos();
                sins[0][s] = l * cu.sin() * cv.cos();
                sins[1][s] = l * cu.cos() * cv.sin();
            }
            // dU/du_j = m grav * sum over segments s >= j of l_s sin(U_s) cos(V_s)
            for j in 0..=last {
                let du: f64 = (j..=last).map(|s| sins[0][s]).sum();
                let dv: f64 = (j..=last).map(|s| sins[1][s]).sum();
                g[2 * j] += mass * grav * du;
                g[2 * j + 1] += mass * grav * dv;
            }
        }
        g
    }

    /// Potential energy of the hanging masses relative to q = 0.
    pub fn gravity_potential(&self, q: &Vector6<f64>) -> f64 {
        let mut u = 0.0;
        for (mass, seg, last) in self.hanging_masses() {
            let mut cu = 0.0;
            let mut cv = 0.0;
            let mut depth = 0.0;
            let mut depth_rest = 0.0;
            for s in 0..=last {
                cu += q[2 * s];
                cv += q[2 * s + 1];
                depth += seg[s] * cu.cos() * cv.cos();
                depth_rest += seg[s];
            }
            u += mass * self.config.gravity * (depth_rest - depth);
        }
        u
    }

    /// d(g_i)/d(q_i) at q = 0: the pendulum stiffness folded into the
    /// spring calibration.
    fn gravity_tangent_stiffness(&self, dof: usize) -> f64 {
        let j = dof / 2;
        let mut k = 0.0;
        for (mass, seg, last) in self.hanging_masses() {
            if last < j {
                continue;
            }
            let arm: f64 = (j..=last).map(|s| seg[s]).sum();
            k += mass * self.config.gravity * arm;
        }
        k
    }

    /// Spring potential including cubic term (drift-frozen at time `t`).
    pub fn spring_potential(&self, q: &Vector6<f64>, t: f64) -> f64 {
        let f = self.drift_factor(t);
        (0..N_DOF)
            .map(|i| f * (0.5 * self.k1[i] * q[i] * q[i] + 0.25 * self.k3[i] * q[i].powi(4)))
            .sum()
    }

    /// Disturbance torque `d = k1 q + k3 q^3 + c q_dot + alpha z` per DOF,
    /// with the stiffness terms subject to slow drift.
    pub fn disturbance_torque(
        &self,
        q: &Vector6<f64>,
        q_dot: &Vector6<f64>,
        z: &Vector6<f64>,
        t: f64,
    ) -> Vector6<f64> {
        let f = self.drift_factor(t);
        Vector6::from_fn(|i, _| {
            f * (self.k1[i] * q[i] + self.k3[i] * q[i].powi(3))
                + self.c_damp[i] * q_dot[i]
                + self.bw[i].alpha * z[i]
        })
    }

    /// Bouc-Wen internal state rates for all DOFs.
    pub fn hysteresis_rate(&self, q_dot: &Vector6<f64>, z: &Vector6<f64>) -> Vector6<f64> {
        Vector6::from_fn(|i, _| self.bw[i].rate(q_dot[i], z[i]))
    }

    /// True generalized torque from chamber pressures: block-diagonal
    /// antagonistic map with per-channel gains. Linear in p.
    pub fn joint_torque(&self, p: &Pressures) -> Vector6<f64> {
        let g = &self.k_tau_gains;
        Vector6::from_fn(|i, _| {
            let j = i / 2;
            let base = 4 * j + 2 * (i % 2);
            g[base] * p[base] - g[base + 1] * p[base + 1]
        })
    }

    /// Forward dynamics `q_ddot = M^-1 (tau - C q_dot - g - d)`.
    pub fn rigid_dynamics(
        &self,
        q: &Vector6<f64>,
        q_dot: &Vector6<f64>,
        tau: &Vector6<f64>,
        d: &Vector6<f64>,
    ) -> Result<Vector6<f64>, PlantFault> {
        if q.iter().chain(q_dot.iter()).any(|v| !v.is_finite())
            || tau.iter().chain(d.iter()).any(|v| !v.is_finite())
        {
            return Err(PlantFault::NonFinite { t: f64::NAN });
        }
        let m = self.mass_matrix(q);
        let c = self.coriolis_matrix(q, q_dot);
        let rhs = tau - c * q_dot - self.gravity_torque(q) - d;
        let chol = m
            .cholesky()
            .ok_or(PlantFault::NonFinite { t: f64::NAN })?;
        Ok(chol.solve(&rhs))
    }

    /// Attach (or update) a payload. A zero mass clears it.
    pub fn apply_payload(&mut self, mass: f64, link: usize) -> Result<(), PlantBuildError> {
        if link >= N_JOINTS {
            return Err(PlantBuildError::BadLinkIndex(link));
        }
        if mass < 0.0 || !mass.is_finite() {
            return Err(PlantBuildError::NegativePayload);
        }
        self.payload = if mass == 0.0 {
            None
        } else {
            Some(Payload { mass, link })
        };
        Ok(())
    }

    pub fn remove_payload(&mut self) {
        self.payload = None;
    }
}

/// First-order pressure lag advanced by its exact exponential solution.
pub fn pressure_step(p: &Pressures, p_des: &Pressures, tau_p: f64, dt: f64) -> Pressures {
    let decay = (-dt / tau_p).exp();
    p_des + (p - p_des) * decay
}

/// Full simulated arm state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub q: Vector6<f64>,
    pub q_dot: Vector6<f64>,
    pub p: Pressures,
    pub hyst_z: Vector6<f64>,
    pub t: f64,
}

impl ArmState {
    /// At rest, fully vented.
    pub fn at_rest() -> Self {
        Self {
            q: Vector6::zeros(),
            q_dot: Vector6::zeros(),
            p: Pressures::zeros(),
            hyst_z: Vector6::zeros(),
            t: 0.0,
        }
    }

    pub fn with_pressures(p_kpa: f64) -> Self {
        let mut s = Self::at_rest();
        s.p = Pressures::from_element(p_kpa);
        s
    }
}

#[derive(Clone, Copy)]
struct StateVec {
    q: Vector6<f64>,
    q_dot: Vector6<f64>,
    p: Pressures,
    z: Vector6<f64>,
}

impl StateVec {
    fn axpy(&self, h: f64, d: &StateVec) -> StateVec {
        StateVec {
            q: self.q + h * d.q,
            q_dot: self.q_dot + h * d.q_dot,
            p: self.p + h * d.p,
            z: self.z + h * d.z,
        }
    }
}

/// One fixed RK4 step of the coupled (q, q_dot, p, z) dynamics with the
/// commanded pressures held over the step. Deterministic; faults when the
/// state leaves the mechanical or pressure envelope.
pub fn integrate(
    state: &ArmState,
    p_des: &Pressures,
    model: &PlantModel,
    dt: f64,
) -> Result<ArmState, PlantFault> {
    let deriv = |s: &StateVec, t: f64| -> Result<StateVec, PlantFault> {
        let tau = model.joint_torque(&s.p);
        let d = model.disturbance_torque(&s.q, &s.q_dot, &s.z, t);
        let q_ddot = model.rigid_dynamics(&s.q, &s.q_dot, &tau, &d)?;
        Ok(StateVec {
            q: s.q_dot,
            q_dot: q_ddot,
            p: (p_des - s.p) / model.config.tau_p,
            z: model.hysteresis_rate(&s.q_dot, &s.z),
        })
    };

    let y0 = StateVec {
        q: state.q,
        q_dot: state.q_dot,
        p: state.p,
        z: state.hyst_z,
    };
    let t = state.t;
    let k1 = deriv(&y0, t)?;
    let k2 = deriv(&y0.axpy(0.5 * dt, &k1), t + 0.5 * dt)?;
    let k3 = deriv(&y0.axpy(0.5 * dt, &k2), t + 0.5 * dt)?;
    let k4 = deriv(&y0.axpy(dt, &k3), t + dt)?;

    let combine = |a: &Vector6<f64>, b: &Vector6<f64>, c: &Vector6<f64>, d: &Vector6<f64>| {
        (dt / 6.0) * (a + 2.0 * b + 2.0 * c + d)
    };
    let mut next = ArmState {
        q: state.q + combine(&k1.q, &k2.q, &k3.q, &k4.q),
        q_dot: state.q_dot + combine(&k1.q_dot, &k2.q_dot, &k3.q_dot, &k4.q_dot),
        p: state.p + (dt / 6.0) * (k1.p + 2.0 * k2.p + 2.0 * k3.p + k4.p),
        hyst_z: state.hyst_z + combine(&k1.z, &k2.z, &k3.z, &k4.z),
        t: t + dt,
    };
    // Guard against tiny negative excursions from the lag integration.
    for v in next.p.iter_mut() {
        if *v < 0.0 && *v > -1e-9 {
            *v = 0.0;
        }
    }

    if next
        .q
        .iter()
        .chain(next.q_dot.iter())
        .chain(next.p.iter())
        .chain(next.hyst_z.iter())
        .any(|v| !v.is_finite())
    {
        return Err(PlantFault::NonFinite { t: next.t });
    }
    for (i, &p) in next.p.iter().enumerate() {
        if p > P_FAIL_KPA || p < -1e-6 {
            return Err(PlantFault::OverPressure {
                chamber: i,
                t: next.t,
                p,
            });
        }
    }
    for (i, &qi) in next.q.iter().enumerate() {
        if qi.abs() > Q_FAIL_RAD {
            return Err(PlantFault::RangeExceeded {
                dof: i,
                t: next.t,
                q: qi,
            });
        }
    }
    Ok(next)
}

/// Convenience wrapper matching the disturbance operation signature:
/// returns the torque at the current state and the hysteresis state
/// advanced by one explicit step.
pub fn disturbance(
    q: &Vector6<f64>,
    q_dot: &Vector6<f64>,
    hyst_z: &Vector6<f64>,
    model: &PlantModel,
    t: f64,
    dt: f64,
) -> (Vector6<f64>, Vector6<f64>) {
    let d = model.disturbance_torque(q, q_dot, hyst_z, t);
    let z_next = hyst_z + dt * model.hysteresis_rate(q_dot, hyst_z);
    (d, z_next)
}

/// Total mechanical energy (kinetic + spring + gravity), used by the
/// energy-audit tests.
pub fn mechanical_energy(state: &ArmState, model: &PlantModel) -> f64 {
    let m = model.mass_matrix(&state.q);
    0.5 * (state.q_dot.transpose() * m * state.q_dot)[(0, 0)]
        + model.spring_potential(&state.q, state.t)
        + model.gravity_potential(&state.q)
}
