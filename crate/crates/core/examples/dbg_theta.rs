use softarm_core::config::SimConfig;
use softarm_core::experiment::{run_step_experiment, RunOptions};

fn main() {
    let mut cfg = SimConfig::default();
    cfg.plant = cfg.plant.with_mismatch_and_drift(0);
    let opts = RunOptions { seed: 7, trials: 1, out_dir: None, lockstep: true, seed_stride: 1 };
    let out = run_step_experiment(&cfg, &opts).unwrap();
    let log = &out.trials[0].log;
    println!("fault: {:?}", log.fault);
    for snap in log.theta_snaps.iter().step_by(40) {
        println!("t={:6.1}  |theta|F={:8.3}", snap.t, snap.theta.norm());
    }
    let last = log.theta_snaps.last().unwrap();
    let at = |tq: f64| log.theta_snaps.iter().min_by(|a,b| ((a.t-tq).abs()).partial_cmp(&(b.t-tq).abs()).unwrap()).unwrap();
    for w in [5.0, 10.0, 20.0] {
        let prev = at(last.t - w);
        println!("window {w}: |theta|({:.1})={:.2} vs final({:.1})={:.2}  change {:.1}%",
            prev.t, prev.theta.norm(), last.t, last.theta.norm(),
            100.0*(last.theta.norm()-prev.theta.norm()).abs()/last.theta.norm());
    }
    // steady-state stats
    let ss = softarm_core::experiment::steady_state_mean_abs_s(log, 3.0);
    println!("steady mean|s| = {ss:.4}");
    for c in &out.checks { if !c.passed { println!("FAILED CHECK: {} — {}", c.name, c.detail); } }
    println!("mean step_us = {:.1}", log.mean_step_us());
    println!("wall = {:.1} s", out.trials[0].wall_s);
}
