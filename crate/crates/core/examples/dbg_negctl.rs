use softarm_core::config::SimConfig;
use softarm_core::experiment::{run_step_experiment, RunOptions};
use softarm_core::monitor::{check_ultimate_bound, vdot_sign_audit, BoundParams, MonitorConfig};
use nalgebra::DVector;
use softarm_core::plant::{PlantConfig, PlantModel};

fn main() {
    let mut cfg = SimConfig::default();
    cfg.plant = cfg.plant.with_mismatch_and_drift(1);
    let opts = RunOptions { seed: 1, trials: 1, out_dir: None, lockstep: true, seed_stride: 1 };
    let nominal = run_step_experiment(&cfg, &opts).unwrap();
    let rep = &nominal.trials[0].report;
    println!("NOMINAL: e_hat={:.3} r_bound={:.3} s_steady_max={:.3} violations={} vdot={:?}",
        rep.e_hat, rep.r_bound, rep.s_steady_max, rep.violations,
        rep.vdot.as_ref().map(|v| (v.fraction, v.qualifying_samples, v.vacuous)));

    // Negative control: K_D -> 0.01 I, same everything else.
    let mut neg_cfg = cfg.clone();
    neg_cfg.controller.kd = 0.01;
    let neg = run_step_experiment(&neg_cfg, &opts).unwrap();
    let neg_log = &neg.trials[0].log;
    println!("NEG: fault={:?}", neg_log.fault);

    // Audit the negative run against the NOMINAL certified envelope.
    let params = BoundParams {
        e_hat: rep.e_hat,
        lambda_min_kd: cfg.controller.kd,
        lambda_max_k: cfg.controller.k_ff,
        sup_q_d: None,
        settle_time: 3.0,
    };
    let neg_rep = check_ultimate_bound(neg_log, &params);
    println!("NEG vs nominal envelope: r={:.3} violations={} s_steady_max={:.3}",
        neg_rep.r_bound, neg_rep.violations, neg_rep.s_steady_max);
    let model = PlantModel::build(neg_cfg.plant.clone()).unwrap();
    let gamma = DVector::from_element(11, 15.0);
    let audit = vdot_sign_audit(neg_log, &model, &gamma, neg_rep.r_bound, &MonitorConfig::default()).unwrap();
    println!("NEG vdot: fraction={:.3} qualifying={} vacuous={}", audit.fraction, audit.qualifying_samples, audit.vacuous);
}
