use softarm_core::config::SimConfig;
use softarm_core::experiment::{run_step_experiment, steady_state_mean_abs_s, RunOptions};

fn main() {
    for p in [10usize, 50] {
        let mut acc = 0.0;
        for trial_chunk in 0..1 {
            let mut cfg = SimConfig::default();
            cfg.plant = cfg.plant.with_mismatch_and_drift(1);
            cfg.controller.p = p;
            let opts = RunOptions { seed: 1 + trial_chunk, trials: 3, out_dir: None, lockstep: true, seed_stride: 1 };
            let out = run_step_experiment(&cfg, &opts).unwrap();
            for t in &out.trials {
                let ss = steady_state_mean_abs_s(&t.log, 5.0);
                println!("P={p} trial{}: steady={ss:.4} fault={:?}", t.trial, t.log.fault);
                acc += ss;
            }
        }
        println!("P={p}: mean over trials = {:.4}", acc / 3.0);
    }
}
