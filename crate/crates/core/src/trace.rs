//! Timestamped experiment records and their CSV serialization.
//!
//! The diagnostics stream is one row per control tick with the fixed schema
//!
//! `t, q[0..5], q_des[0..5], s[0..5], tau_des[0..5], p_des[0..11],
//!  p[0..11], sat_flags, step_us`
//!
//! A parallel auxiliary record carries the white-box quantities the
//! stability monitor consumes (true velocities and accelerations, virtual
//! reference signals, network output), plus decimated snapshots of the
//! adaptive weights.

use crate::plant::{PlantFault, Pressures};
use nalgebra::{DMatrix, Vector6};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed trace at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// One diagnostics row at the control rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub q: Vector6<f64>,
    pub q_des: Vector6<f64>,
    pub s: Vector6<f64>,
    pub tau_des: Vector6<f64>,
    pub p_des: Pressures,
    pub p: Pressures,
    pub sat_flags: u16,
    pub step_us: f64,
}

/// White-box companion row used by the offline monitor (lock-step mode).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxRow {
    pub t: f64,
    pub q_dot: Vector6<f64>,
    pub q_ddot: Vector6<f64>,
    pub q_r_dot: Vector6<f64>,
    pub q_r_ddot: Vector6<f64>,
    pub net_out: Vector6<f64>,
}

/// Decimated snapshot of the adaptive weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaSnapshot {
    pub t: f64,
    pub theta: DMatrix<f64>,
}

/// Reproducibility header written next to every run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub trial: usize,
    pub version: String,
    pub lockstep: bool,
}

/// Complete record of one trial.
#[derive(Debug, Clone, Default)]
pub struct ExperimentLog {
    pub rows: Vec<LogRow>,
    pub aux: Vec<AuxRow>,
    pub theta_snaps: Vec<ThetaSnapshot>,
    /// Step-command edges (time of each new hold), for settle windows.
    pub step_times: Vec<f64>,
    pub fault: Option<PlantFault>,
}

impl ExperimentLog {
    pub fn duration(&self) -> f64 {
        self.rows.last().map(|r| r.t).unwrap_or(0.0)
    }

    pub fn mean_step_us(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.step_us).sum::<f64>() / self.rows.len() as f64
    }

    pub const CSV_HEADER: &'static str = "t,q0,q1,q2,q3,q4,q5,qdes0,qdes1,qdes2,qdes3,qdes4,qdes5,s0,s1,s2,s3,s4,s5,tau0,tau1,tau2,tau3,tau4,tau5,pdes0,pdes1,pdes2,pdes3,pdes4,pdes5,pdes6,pdes7,pdes8,pdes9,pdes10,pdes11,p0,p1,p2,p3,p4,p5,p6,p7,p8,p9,p10,p11,sat_flags,step_us";

    /// Write the diagnostics stream in the documented schema.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            write!(w, "{}", r.t)?;
            for v in r.q.iter() {
                write!(w, ",{v}")?;
            }
            for v in r.q_des.iter() {
                write!(w, ",{v}")?;
            }
            for v in r.s.iter() {
                write!(w, ",{v}")?;
            }
            for v in r.tau_des.iter() {
                write!(w, ",{v}")?;
            }
            for v in r.p_des.iter() {
                write!(w, ",{v}")?;
            }
            for v in r.p.iter() {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{},{}", r.sat_flags, r.step_us)?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &std::path::Path) -> Result<(), TraceError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Parse a diagnostics stream written by [`ExperimentLog::write_csv`].
    /// Auxiliary data is not part of the public schema and is not restored.
    pub fn read_csv(text: &str) -> Result<Self, TraceError> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 {
                if line != Self::CSV_HEADER {
                    return Err(TraceError::Malformed {
                        line: 1,
                        reason: "unexpected header".into(),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 51 {
                return Err(TraceError::Malformed {
                    line: lineno + 1,
                    reason: format!("expected 51 columns, got {}", cols.len()),
                });
            }
            let num = |i: usize| -> Result<f64, TraceError> {
                cols[i].parse().map_err(|_| TraceError::Malformed {
                    line: lineno + 1,
                    reason: format!("bad number in column {i}"),
                })
            };
            let vec6 = |base: usize| -> Result<Vector6<f64>, TraceError> {
                let mut v = Vector6::zeros();
                for i in 0..6 {
                    v[i] = num(base + i)?;
                }
                Ok(v)
            };
            let vec12 = |base: usize| -> Result<Pressures, TraceError> {
                let mut v = Pressures::zeros();
                for i in 0..12 {
                    v[i] = num(base + i)?;
                }
                Ok(v)
            };
            rows.push(LogRow {
                t: num(0)?,
                q: vec6(1)?,
                q_des: vec6(7)?,
                s: vec6(13)?,
                tau_des: vec6(19)?,
                p_des: vec12(25)?,
                p: vec12(37)?,
                sat_flags: cols[49].parse().map_err(|_| TraceError::Malformed {
                    line: lineno + 1,
                    reason: "bad sat_flags".into(),
                })?,
                step_us: num(50)?,
            });
        }
        Ok(Self {
            rows,
            ..Default::default()
        })
    }

    pub fn read_csv_file(path: &std::path::Path) -> Result<Self, TraceError> {
        Self::read_csv(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_log(n: usize) -> ExperimentLog {
        let mut log = ExperimentLog::default();
        for k in 0..n {
            let t = k as f64 * 0.002;
            log.rows.push(LogRow {
                t,
                q: Vector6::from_element((t * 3.0).sin() * 0.1),
                q_des: Vector6::from_element(0.1),
                s: Vector6::from_element(-0.25 * (t * 7.0).cos()),
                tau_des: Vector6::from_element(1.5),
                p_des: Pressures::from_element(151.75),
                p: Pressures::from_element(150.0 + t),
                sat_flags: if k % 7 == 0 { 3 } else { 0 },
                step_us: 42.5,
            });
        }
        log
    }

    #[test]
    fn csv_round_trips_bit_exactly() {
        let log = sample_log(50);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,q0,"));
        let back = ExperimentLog::read_csv(&text).unwrap();
        assert_eq!(back.rows.len(), 50);
        for (a, b) in log.rows.iter().zip(back.rows.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn csv_schema_has_51_columns() {
        assert_eq!(ExperimentLog::CSV_HEADER.split(',').count(), 51);
        let log = sample_log(2);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for line in text.lines().skip(1) {
            assert_eq!(line.split(',').count(), 51);
        }
    }

    #[test]
    fn rejects_malformed_streams() {
        assert!(ExperimentLog::read_csv("nonsense\n1,2,3").is_err());
        let log = sample_log(3);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("1,2,3\n");
        assert!(ExperimentLog::read_csv(&text).is_err());
    }
}
