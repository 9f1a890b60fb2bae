//! Adaptive joint control for pneumatically actuated soft arms, with a
//! behavioral plant simulator and the experiment harness used to exercise
//! the controller: random step tracking, payload-drop disturbance
//! rejection, and free-response / hysteresis system identification.

pub mod config;
pub mod controller;
pub mod experiment;
pub mod monitor;
pub mod plant;
pub mod rbfnn;
pub mod sysid;
pub mod trace;
pub mod trajgen;
