//! System-identification estimators: logarithmic-decrement damping
//! estimation from free-response traces and loop metrics from
//! pressure-differential/angle hysteresis traces.
//!
//! Both operate on plain `(x, y)` sample slices so they apply equally to
//! simulated traces and imported hardware data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SysIdError {
    #[error("found {found} usable peaks, need at least {need}")]
    TooFewPeaks { found: usize, need: usize },
    #[error("signal is not decaying: peak {last:.6e} exceeds first peak {first:.6e}")]
    GrowingPeaks { first: f64, last: f64 },
    #[error("trace does not close a full cycle")]
    OpenTrajectory,
    #[error("trace too short ({0} samples)")]
    TooShort(usize),
    #[error("malformed trace file: {0}")]
    BadFile(String),
}

/// Peak-detection and smoothing knobs for [`log_decrement`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogDecrementConfig {
    /// Minimum number of successive same-sign peaks required.
    pub min_peaks: usize,
    /// Peaks below this fraction of the first peak are discarded.
    pub prominence: f64,
    /// Zero-phase (centered) moving-average window in samples; 0 disables.
    pub smooth_window: usize,
}

impl Default for LogDecrementConfig {
    fn default() -> Self {
        Self {
            min_peaks: 5,
            prominence: 0.02,
            smooth_window: 0,
        }
    }
}

/// Damping and frequency estimates from a decaying free response.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DampingEstimate {
    pub zeta: f64,
    pub omega_d_hz: f64,
    pub omega_n_hz: f64,
    pub peaks_used: usize,
}

/// Estimate damping ratio and damped/natural frequency from the free
/// response of a second-order system by the logarithmic-decrement method.
///
/// The trace mean is removed, positive local maxima are collected (with
/// parabolic refinement of peak time and amplitude), and
///
/// `delta = (1/k) ln(y_0 / y_k)`,  `zeta = delta / sqrt(4 pi^2 + delta^2)`,
///
/// with the damped frequency from the mean peak spacing and
/// `omega_n = omega_d / sqrt(1 - zeta^2)`.
pub fn log_decrement(
    signal: &[(f64, f64)],
    config: &LogDecrementConfig,
) -> Result<DampingEstimate, SysIdError> {
    if signal.len() < 3 {
        return Err(SysIdError::TooShort(signal.len()));
    }
    let mean = signal.iter().map(|(_, y)| *y).sum::<f64>() / signal.len() as f64;
    let mut y: Vec<f64> = signal.iter().map(|(_, v)| v - mean).collect();
    let t: Vec<f64> = signal.iter().map(|(tt, _)| *tt).collect();

    if config.smooth_window > 1 {
        y = smooth_centered(&y, config.smooth_window);
    }

    // Positive local maxima, refined by a quadratic through the three
    // samples around each peak.
    let mut peaks: Vec<(f64, f64)> = Vec::new();
    for i in 1..y.len() - 1 {
        if y[i] > 0.0 && y[i] > y[i - 1] && y[i] >= y[i + 1] {
            peaks.push(refine_peak(&t, &y, i));
        }
    }
    let Some(&(_, first_amp)) = peaks.first() else {
        return Err(SysIdError::TooFewPeaks {
            found: 0,
            need: config.min_peaks,
        });
    };
    let threshold = config.prominence * first_amp;
    let peaks: Vec<(f64, f64)> = peaks.into_iter().filter(|(_, a)| *a >= threshold).collect();

    if peaks.len() < config.min_peaks {
        return Err(SysIdError::TooFewPeaks {
            found: peaks.len(),
            need: config.min_peaks,
        });
    }

    let k = peaks.len() - 1;
    let (t0, y0) = peaks[0];
    let (tk, yk) = peaks[k];
    if yk > y0 * (1.0 + 1e-6) {
        return Err(SysIdError::GrowingPeaks {
            first: y0,
            last: yk,
        });
    }
    let delta = ((y0 / yk).ln() / k as f64).max(0.0);
    let zeta = delta / (4.0 * std::f64::consts::PI.powi(2) + delta * delta).sqrt();
    let period = (tk - t0) / k as f64;
    let omega_d_hz = 1.0 / period;
    let omega_n_hz = omega_d_hz / (1.0 - zeta * zeta).sqrt();
    Ok(DampingEstimate {
        zeta,
        omega_d_hz,
        omega_n_hz,
        peaks_used: peaks.len(),
    })
}

/// Zero-phase moving average: centered window, ends handled by shrinking.
fn smooth_centered(y: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..y.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(y.len());
            y[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Quadratic (parabolic) refinement of a discrete peak at index `i`.
fn refine_peak(t: &[f64], y: &[f64], i: usize) -> (f64, f64) {
    let (y0, y1, y2) = (y[i - 1], y[i], y[i + 1]);
    let denom = y0 - 2.0 * y1 + y2;
    if denom.abs() < 1e-300 {
        return (t[i], y[i]);
    }
    // Offset of the vertex in units of the local sample spacing.
    let d = 0.5 * (y0 - y2) / denom;
    let dt = 0.5 * (t[i + 1] - t[i - 1]);
    (t[i] + d * dt, y1 - 0.25 * (y0 - y2) * d)
}

/// Per-cycle metrics of a pressure-differential/angle hysteresis trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HysteresisMetrics {
    /// Mean signed shoelace area per cycle in kPa*rad; positive when the
    /// loop is traversed in the dissipative direction.
    pub loop_area: f64,
    /// Mean q-width of the loop where the differential crosses zero, rad.
    pub width_at_zero_dp: f64,
    /// Mean displacement of the loop centroid between consecutive cycles.
    pub drift_per_cycle: f64,
    pub cycles: usize,
}

/// Compute loop metrics from a `(dp, q)` trace covering at least one full
/// cycle. Cycles are delimited by upward crossings of the mid-level of the
/// differential signal, which is periodic by protocol.
pub fn hysteresis_metrics(trace: &[(f64, f64)]) -> Result<HysteresisMetrics, SysIdError> {
    if trace.len() < 8 {
        return Err(SysIdError::TooShort(trace.len()));
    }
    let dp_max = trace.iter().map(|(x, _)| *x).fold(f64::MIN, f64::max);
    let dp_min = trace.iter().map(|(x, _)| *x).fold(f64::MAX, f64::min);
    let mid = 0.5 * (dp_max + dp_min);

    // Upward crossings of the mid level (sample index after the crossing).
    let mut bounds = Vec::new();
    for i in 0..trace.len() - 1 {
        let (a, b) = (trace[i].0, trace[i + 1].0);
        if a <= mid && b > mid {
            bounds.push(i);
        }
    }
    if bounds.len() < 2 {
        return Err(SysIdError::OpenTrajectory);
    }

    let mut areas = Vec::new();
    let mut widths = Vec::new();
    let mut centroids: Vec<(f64, f64)> = Vec::new();
    for w in bounds.windows(2) {
        let cycle = &trace[w[0]..=w[1]];
        areas.push(shoelace(cycle));
        widths.push(width_at_level(cycle, 0.0));
        let n = cycle.len() as f64;
        let cx = cycle.iter().map(|(x, _)| x).sum::<f64>() / n;
        let cy = cycle.iter().map(|(_, y)| y).sum::<f64>() / n;
        centroids.push((cx, cy));
    }

    let cycles = areas.len();
    let drift = if cycles > 1 {
        centroids
            .windows(2)
            .map(|c| ((c[1].0 - c[0].0).powi(2) + (c[1].1 - c[0].1).powi(2)).sqrt())
            .sum::<f64>()
            / (cycles - 1) as f64
    } else {
        0.0
    };

    Ok(HysteresisMetrics {
        loop_area: areas.iter().sum::<f64>() / cycles as f64,
        width_at_zero_dp: widths.iter().sum::<f64>() / cycles as f64,
        drift_per_cycle: drift,
        cycles,
    })
}

/// Signed shoelace area of a (closed) polyline; counterclockwise positive.
fn shoelace(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = pts[i];
        let (x1, y1) = pts[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

/// Spread of interpolated q values where dp crosses `level` within a cycle.
fn width_at_level(cycle: &[(f64, f64)], level: f64) -> f64 {
    let mut qs = Vec::new();
    for i in 0..cycle.len() - 1 {
        let (x0, y0) = cycle[i];
        let (x1, y1) = cycle[i + 1];
        if (x0 - level) * (x1 - level) <= 0.0 && x0 != x1 {
            let f = (level - x0) / (x1 - x0);
            qs.push(y0 + f * (y1 - y0));
        }
    }
    match (
        qs.iter().cloned().fold(f64::MAX, f64::min),
        qs.iter().cloned().fold(f64::MIN, f64::max),
    ) {
        (lo, hi) if qs.len() >= 2 => hi - lo,
        _ => 0.0,
    }
}

/// Read a plain two-column numeric CSV (optionally with a single header
/// line) into `(x, y)` pairs. This is the documented import format for
/// external traces.
pub fn read_two_column_csv(path: &std::path::Path) -> Result<Vec<(f64, f64)>, SysIdError> {
    let text = std::fs::read_to_string(path).map_err(|e| SysIdError::BadFile(e.to_string()))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let (a, b) = (cols.next(), cols.next());
        match (
            a.and_then(|v| v.parse::<f64>().ok()),
            b.and_then(|v| v.parse::<f64>().ok()),
        ) {
            (Some(x), Some(y)) => out.push((x, y)),
            _ if lineno == 0 => continue, // header
            _ => {
                return Err(SysIdError::BadFile(format!(
                    "line {}: expected two numeric columns",
                    lineno + 1
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(SysIdError::BadFile("no numeric rows".into()));
    }
    Ok(out)
}
