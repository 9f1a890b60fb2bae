//! Experiment command generators: random step schedules for the tracking
//! studies and quasi-static pressure-differential ramps for hysteresis
//! identification. Pure functions of their spec and seed.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajError {
    #[error("hold duration must be positive, got {0}")]
    BadHold(f64),
    #[error("empty or invalid amplitude bounds (dim {0})")]
    BadBounds(usize),
    #[error("step count must be at least 1")]
    NoSteps,
    #[error("pressure differential {dp} kPa exceeds the realizable 2*p_nom = {max} kPa")]
    UnrealizableDifferential { dp: f64, max: f64 },
    #[error("ramp period must be positive and quasi-static, got {0} s")]
    BadPeriod(f64),
    #[error("sample rate must be positive")]
    BadRate,
}

/// Specification of a random joint-angle step schedule: a new uniform-random
/// command per DOF every `hold_duration` seconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepSequence {
    pub hold_duration: f64,
    pub amp_lo: DVector<f64>,
    pub amp_hi: DVector<f64>,
    pub count: usize,
    pub seed: u64,
}

impl StepSequence {
    pub fn new(
        hold_duration: f64,
        amp_lo: DVector<f64>,
        amp_hi: DVector<f64>,
        count: usize,
        seed: u64,
    ) -> Self {
        Self {
            hold_duration,
            amp_lo,
            amp_hi,
            count,
            seed,
        }
    }
}

/// Generate the `(t, q_cmd)` schedule for a step sequence. The first command
/// is issued at t = 0 and each command is held for `hold_duration`.
pub fn random_steps(seq: &StepSequence) -> Result<Vec<(f64, DVector<f64>)>, TrajError> {
    if seq.hold_duration <= 0.0 || !seq.hold_duration.is_finite() {
        return Err(TrajError::BadHold(seq.hold_duration));
    }
    if seq.count == 0 {
        return Err(TrajError::NoSteps);
    }
    if seq.amp_lo.len() != seq.amp_hi.len() || seq.amp_lo.is_empty() {
        return Err(TrajError::BadBounds(0));
    }
    for i in 0..seq.amp_lo.len() {
        if !seq.amp_lo[i].is_finite() || !seq.amp_hi[i].is_finite() || seq.amp_lo[i] > seq.amp_hi[i]
        {
            return Err(TrajError::BadBounds(i));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seq.seed);
    let n = seq.amp_lo.len();
    let mut schedule = Vec::with_capacity(seq.count);
    for k in 0..seq.count {
        let q_cmd = DVector::from_iterator(
            n,
            (0..n).map(|i| {
                if seq.amp_lo[i] == seq.amp_hi[i] {
                    seq.amp_lo[i]
                } else {
                    rng.random_range(seq.amp_lo[i]..seq.amp_hi[i])
                }
            }),
        );
        schedule.push((k as f64 * seq.hold_duration, q_cmd));
    }
    Ok(schedule)
}

/// Command in force at time `t` for a step schedule (the last command whose
/// start time is <= t; the first command before its start time).
pub fn command_at(schedule: &[(f64, DVector<f64>)], t: f64) -> &DVector<f64> {
    let mut cmd = &schedule[0].1;
    for (start, q) in schedule {
        if *start <= t {
            cmd = q;
        } else {
            break;
        }
    }
    cmd
}

/// Symmetric triangle wave of pressure differential: `cycles` full loops of
/// 0 -> +dp_max -> 0 -> -dp_max -> 0, sampled at `rate` Hz.
///
/// `p_nom` bounds the realizable differential (chambers sit at
/// `p_nom +/- dp/2`), and `min_period` encodes the quasi-static requirement
/// (>= 10x the plant's dominant oscillation period).
pub fn pressure_ramp(
    dp_max: f64,
    period: f64,
    cycles: usize,
    rate: f64,
    p_nom: f64,
    min_period: f64,
) -> Result<Vec<(f64, f64)>, TrajError> {
    if dp_max > 2.0 * p_nom {
        return Err(TrajError::UnrealizableDifferential {
            dp: dp_max,
            max: 2.0 * p_nom,
        });
    }
    if period <= 0.0 || period < min_period {
        return Err(TrajError::BadPeriod(period));
    }
    if rate <= 0.0 {
        return Err(TrajError::BadRate);
    }
    let mut out = Vec::new();
    if cycles == 0 {
        return Ok(out);
    }
    let total = period * cycles as f64;
    let dt = 1.0 / rate;
    let steps = (total / dt).round() as usize;
    for k in 0..=steps {
        let t = k as f64 * dt;
        let phase = (t / period).fract();
        // Piecewise-linear triangle: peaks at T/4 and 3T/4.
        let dp = if phase < 0.25 {
            4.0 * phase
        } else if phase < 0.75 {
            2.0 - 4.0 * phase
        } else {
            4.0 * phase - 4.0
        } * dp_max;
        out.push((t, dp));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(count: usize, seed: u64) -> StepSequence {
        StepSequence::new(
            10.0,
            DVector::from_element(6, -0.5),
            DVector::from_element(6, 0.5),
            count,
            seed,
        )
    }

    #[test]
    fn single_command_held_forever() {
        let s = random_steps(&seq(1, 3)).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].0, 0.0);
        assert_eq!(command_at(&s, 1e9), &s[0].1);
    }

    #[test]
    fn twelve_steps_span_120_seconds() {
        let s = random_steps(&seq(12, 3)).unwrap();
        assert_eq!(s.len(), 12);
        assert_eq!(s[0].0, 0.0);
        assert_eq!(s[11].0, 110.0);
        // Commands change at each hold boundary.
        assert_ne!(command_at(&s, 9.9), command_at(&s, 10.1));
    }

    #[test]
    fn schedules_are_deterministic_in_seed() {
        let a = random_steps(&seq(12, 77)).unwrap();
        let b = random_steps(&seq(12, 77)).unwrap();
        assert_eq!(a, b);
        let c = random_steps(&seq(12, 78)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn commands_respect_bounds() {
        let s = random_steps(&seq(200, 5)).unwrap();
        for (_, q) in &s {
            for v in q.iter() {
                assert!(*v >= -0.5 && *v <= 0.5);
            }
        }
    }

    #[test]
    fn rejects_degenerate_specs() {
        let mut bad = seq(0, 1);
        assert!(matches!(random_steps(&bad), Err(TrajError::NoSteps)));
        bad = seq(3, 1);
        bad.hold_duration = 0.0;
        assert!(random_steps(&bad).is_err());
        bad = seq(3, 1);
        bad.amp_lo[2] = 1.0; // lo > hi
        assert!(random_steps(&bad).is_err());
    }

    #[test]
    fn ramp_zero_cycles_is_empty() {
        let r = pressure_ramp(100.0, 40.0, 0, 100.0, 150.0, 1.25).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn ramp_extrema_and_zero_crossings() {
        let r = pressure_ramp(100.0, 40.0, 2, 500.0, 150.0, 1.25).unwrap();
        let max = r.iter().map(|(_, v)| *v).fold(f64::MIN, f64::max);
        let min = r.iter().map(|(_, v)| *v).fold(f64::MAX, f64::min);
        assert!((max - 100.0).abs() < 1e-9);
        assert!((min + 100.0).abs() < 1e-9);
        // Two zero-crossing pairs per cycle: count sign changes, tolerating
        // samples that land exactly on zero.
        let mut crossings = 0;
        let mut last_sign = 0i8;
        for (_, v) in &r {
            let sign = if *v > 0.0 {
                1
            } else if *v < 0.0 {
                -1
            } else {
                0
            };
            if sign != 0 {
                if last_sign != 0 && sign != last_sign {
                    crossings += 1;
                }
                last_sign = sign;
            }
        }
        // One rising and one falling crossing per cycle interior.
        assert!(crossings >= 3 && crossings <= 4, "crossings = {crossings}");
    }

    #[test]
    fn ramp_integral_over_full_cycles_vanishes() {
        let r = pressure_ramp(80.0, 20.0, 3, 250.0, 150.0, 1.25).unwrap();
        let dt = 1.0 / 250.0;
        // Trapezoid over the closed schedule.
        let integral: f64 = r.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * dt).sum();
        assert!(integral.abs() < 1e-6, "integral = {integral}");
    }

    #[test]
    fn ramp_rejects_unrealizable_differential() {
        assert!(matches!(
            pressure_ramp(301.0, 40.0, 1, 100.0, 150.0, 1.25),
            Err(TrajError::UnrealizableDifferential { .. })
        ));
        assert!(pressure_ramp(100.0, 0.5, 1, 100.0, 150.0, 1.25).is_err());
    }
}
