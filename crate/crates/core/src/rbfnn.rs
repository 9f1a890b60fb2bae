//! Gaussian radial-basis-function network used as the online dynamics
//! approximator.
//!
//! The network is linear in its weights: `f(x) = theta^T * phi(x)` where the
//! feature vector `phi` stacks `P` Gaussian responses and a constant bias
//! channel. Centers are fixed at construction (Latin hypercube over the input
//! box), the shared width is `P / d_max^2` with `d_max` the largest
//! center-to-center distance, and only `theta` adapts online.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Last-resort clamp on weight magnitude. Adaptation should never reach this
/// under sane gains; hitting it is logged as a warning so blow-ups are
/// diagnosable instead of silently saturating to NaN.
pub const THETA_CLAMP: f64 = 1e6;

#[derive(Debug, Error)]
pub enum RbfError {
    #[error("P must be at least 1, got {0}")]
    ZeroCenters(usize),
    #[error("input bounds must be finite with lo < hi in every dimension (dim {0})")]
    BadBounds(usize),
    #[error("d_max is undefined for P < 2 (got P = {0}); supply an explicit width")]
    DmaxUndefined(usize),
    #[error("centers are degenerate (d_max = 0); supply an explicit width")]
    DegenerateCenters,
    #[error("width must be positive and finite, got {0}")]
    BadWidth(f64),
    #[error("non-finite input at dimension {0}")]
    NonFiniteInput(usize),
    #[error("non-finite adaptation signal")]
    NonFiniteSignal,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Generate `p` Latin-hypercube samples inside the box `[lo, hi]`.
///
/// Each dimension is split into `p` equal strata; every stratum receives
/// exactly one sample, placed uniformly at random inside it, and the strata
/// are permuted independently per dimension. Deterministic for a fixed seed.
pub fn init_lhs_centers(
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    p: usize,
    seed: u64,
) -> Result<DMatrix<f64>, RbfError> {
    if p == 0 {
        return Err(RbfError::ZeroCenters(0));
    }
    if lo.len() != hi.len() {
        return Err(RbfError::DimensionMismatch {
            expected: lo.len(),
            got: hi.len(),
        });
    }
    for i in 0..lo.len() {
        if !lo[i].is_finite() || !hi[i].is_finite() || lo[i] >= hi[i] {
            return Err(RbfError::BadBounds(i));
        }
    }

    let n = lo.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = DMatrix::zeros(p, n);
    let mut order: Vec<usize> = (0..p).collect();
    for dim in 0..n {
        // Fisher-Yates permutation of the strata for this dimension.
        for i in (1..p).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let stratum_width = (hi[dim] - lo[dim]) / p as f64;
        for (row, &stratum) in order.iter().enumerate() {
            let jitter: f64 = rng.random_range(0.0..1.0);
            centers[(row, dim)] = lo[dim] + (stratum as f64 + jitter) * stratum_width;
        }
    }
    Ok(centers)
}

/// Largest pairwise Euclidean distance between center rows, by brute force
/// over all pairs. Errors for fewer than two centers, where the RBF width
/// heuristic is undefined.
pub fn compute_dmax(centers: &DMatrix<f64>) -> Result<f64, RbfError> {
    let p = centers.nrows();
    if p < 2 {
        return Err(RbfError::DmaxUndefined(p));
    }
    let mut best = 0.0f64;
    for i in 0..p {
        for j in (i + 1)..p {
            let d2: f64 = (0..centers.ncols())
                .map(|k| {
                    let d = centers[(i, k)] - centers[(j, k)];
                    d * d
                })
                .sum();
            best = best.max(d2);
        }
    }
    Ok(best.sqrt())
}

/// RBF network state: fixed centers and width, adaptive weight matrix.
///
/// `theta` has `P + 1` rows (the last row holds the bias terms) and one
/// column per output coordinate. The seed used for center generation is kept
/// so a saved network can be audited against its configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RbfNetwork {
    pub centers: DMatrix<f64>,
    pub width: f64,
    pub theta: DMatrix<f64>,
    pub input_lo: DVector<f64>,
    pub input_hi: DVector<f64>,
    pub seed: u64,
}

impl RbfNetwork {
    /// Build a network with LHS centers over `[lo, hi]`, width `P / d_max^2`,
    /// and zero-initialized weights and biases.
    pub fn new(
        input_lo: DVector<f64>,
        input_hi: DVector<f64>,
        p: usize,
        n_outputs: usize,
        seed: u64,
    ) -> Result<Self, RbfError> {
        let centers = init_lhs_centers(&input_lo, &input_hi, p, seed)?;
        let dmax = compute_dmax(&centers)?;
        if dmax == 0.0 {
            return Err(RbfError::DegenerateCenters);
        }
        let width = p as f64 / (dmax * dmax);
        Ok(Self {
            centers,
            width,
            theta: DMatrix::zeros(p + 1, n_outputs),
            input_lo,
            input_hi,
            seed,
        })
    }

    /// Like [`RbfNetwork::new`] but with a caller-supplied width, for the
    /// degenerate `P < 2` configuration where `d_max` does not exist.
    pub fn with_width(
        input_lo: DVector<f64>,
        input_hi: DVector<f64>,
        p: usize,
        n_outputs: usize,
        seed: u64,
        width: f64,
    ) -> Result<Self, RbfError> {
        if !width.is_finite() || width <= 0.0 {
            return Err(RbfError::BadWidth(width));
        }
        let centers = init_lhs_centers(&input_lo, &input_hi, p, seed)?;
        Ok(Self {
            centers,
            width,
            theta: DMatrix::zeros(p + 1, n_outputs),
            input_lo,
            input_hi,
            seed,
        })
    }

    pub fn num_centers(&self) -> usize {
        self.centers.nrows()
    }

    pub fn num_inputs(&self) -> usize {
        self.centers.ncols()
    }

    pub fn num_outputs(&self) -> usize {
        self.theta.ncols()
    }

    /// Evaluate the feature vector `[phi_0 .. phi_{P-1}, 1]`.
    ///
    /// Inputs outside the construction box are fine; the Gaussians
    /// extrapolate smoothly. Non-finite input is rejected.
    pub fn eval_basis(&self, x: &DVector<f64>) -> Result<DVector<f64>, RbfError> {
        if x.len() != self.num_inputs() {
            return Err(RbfError::DimensionMismatch {
                expected: self.num_inputs(),
                got: x.len(),
            });
        }
        if let Some(i) = (0..x.len()).find(|&i| !x[i].is_finite()) {
            return Err(RbfError::NonFiniteInput(i));
        }
        let p = self.num_centers();
        let mut phi = DVector::zeros(p + 1);
        for i in 0..p {
            let d2: f64 = (0..x.len())
                .map(|k| {
                    let d = x[k] - self.centers[(i, k)];
                    d * d
                })
                .sum();
            phi[i] = (-self.width * d2).exp();
        }
        phi[p] = 1.0;
        Ok(phi)
    }

    /// Network output `theta^T * phi`.
    pub fn forward(&self, phi: &DVector<f64>) -> Result<DVector<f64>, RbfError> {
        if phi.len() != self.theta.nrows() {
            return Err(RbfError::DimensionMismatch {
                expected: self.theta.nrows(),
                got: phi.len(),
            });
        }
        Ok(self.theta.transpose() * phi)
    }

    /// One explicit-Euler step of the adaptation law
    /// `theta_dot = -Gamma * phi * s^T`:
    ///
    /// `theta <- theta - dt * Gamma * phi * s^T`
    ///
    /// `gamma_diag` is the diagonal of the learning-rate matrix. The network
    /// is left untouched if any input is non-finite. Weights are clamped to
    /// `[-THETA_CLAMP, THETA_CLAMP]` with a logged warning as a blow-up
    /// guard.
    pub fn adapt(
        &mut self,
        phi: &DVector<f64>,
        s: &DVector<f64>,
        gamma_diag: &DVector<f64>,
        dt: f64,
    ) -> Result<(), RbfError> {
        if phi.len() != self.theta.nrows() || gamma_diag.len() != self.theta.nrows() {
            return Err(RbfError::DimensionMismatch {
                expected: self.theta.nrows(),
                got: phi.len(),
            });
        }
        if s.len() != self.theta.ncols() {
            return Err(RbfError::DimensionMismatch {
                expected: self.theta.ncols(),
                got: s.len(),
            });
        }
        if !dt.is_finite() || dt <= 0.0 {
            return Err(RbfError::NonFiniteSignal);
        }
        if phi.iter().any(|v| !v.is_finite())
            || s.iter().any(|v| !v.is_finite())
            || gamma_diag.iter().any(|v| !v.is_finite())
        {
            return Err(RbfError::NonFiniteSignal);
        }

        let mut clamped = false;
        for i in 0..self.theta.nrows() {
            let rate = dt * gamma_diag[i] * phi[i];
            if rate == 0.0 {
                continue;
            }
            for j in 0..self.theta.ncols() {
                let mut v = self.theta[(i, j)] - rate * s[j];
                if v.abs() > THETA_CLAMP {
                    v = v.clamp(-THETA_CLAMP, THETA_CLAMP);
                    clamped = true;
                }
                self.theta[(i, j)] = v;
            }
        }
        if clamped {
            log::warn!("rbfnn: theta clamped to +/-{THETA_CLAMP:e}; adaptation is diverging");
        }
        Ok(())
    }

    /// Serialize to the documented JSON layout.
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    /// Restore a network saved with [`RbfNetwork::to_json`].
    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}
