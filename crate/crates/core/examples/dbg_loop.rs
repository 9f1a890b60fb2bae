use nalgebra::Vector6;
use rand::{Rng, SeedableRng};
use softarm_core::controller::*;
use softarm_core::plant::*;
use softarm_core::trajgen::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kd: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2.5);
    let secs: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(120.0);
    let mismatch: bool = args.get(3).map(|s| s == "mm").unwrap_or(true);

    let pc = if mismatch {
        PlantConfig::default().with_mismatch_and_drift(42)
    } else {
        PlantConfig::default()
    };
    let model = PlantModel::build(pc).unwrap();
    let mut cc = ControllerConfig::default();
    cc.kd = kd;
    let mut ctl = AdaptiveController::new(&cc, Vector6::zeros()).unwrap();

    let seq = StepSequence::new(
        10.0,
        nalgebra::DVector::from_element(6, -0.5),
        nalgebra::DVector::from_element(6, 0.5),
        (secs / 10.0).ceil() as usize,
        7,
    );
    let schedule = random_steps(&seq).unwrap();

    let mut state = ArmState::at_rest(); // fill from 0 kPa
    let dt_c = 1.0 / 500.0;
    let dt_p = dt_c / 10.0;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let noise = 0.005;

    let steps = (secs / dt_c) as usize;
    let mut max_s_in_window = vec![0.0f64; (secs / 10.0).ceil() as usize];
    let mut last2s: Vec<f64> = Vec::new();
    for k in 0..steps {
        let t = k as f64 * dt_c;
        let q_cmd = command_at(&schedule, t).clone();
        let qm = state.q;
        let qdm = Vector6::from_fn(|i, _| state.q_dot[i] + noise * rng.random_range(-1.0..1.0));
        let (p_des, diag) = ctl.step(&qm, &qdm, &Vector6::from_fn(|i,_| q_cmd[i]), dt_c);
        for _ in 0..10 {
            match integrate(&state, &p_des, &model, dt_p) {
                Ok(s) => state = s,
                Err(e) => {
                    println!("FAULT at t={t:.2}: {e}");
                    return;
                }
            }
        }
        let w = (t / 10.0) as usize;
        if w < max_s_in_window.len() {
            let sn = diag.s.amax();
            if t - 10.0 * w as f64 > 5.0 {
                max_s_in_window[w] = max_s_in_window[w].max(sn);
            }
            if t > secs - 2.0 { last2s.push(sn); }
        }
        if k % 25000 == 0 {
            println!(
                "t={t:6.1} |s|max={:8.4} |q~|={:7.4} |theta|F={:9.2} sat={:04x} q={:6.3} {:6.3} {:6.3} {:6.3} {:6.3} {:6.3}",
                diag.s.amax(),
                (state.q - diag.setpoint.q_des).amax(),
                ctl.net.theta.norm(),
                diag.sat_mask,
                state.q[0], state.q[1], state.q[2], state.q[3], state.q[4], state.q[5]
            );
        }
    }
    println!("\nper-hold max |s|_inf after 5 s settle:");
    for (w, v) in max_s_in_window.iter().enumerate() {
        println!("  hold {w:2}: {v:.4}");
    }
    let mean_last: f64 = last2s.iter().sum::<f64>() / last2s.len() as f64;
    println!("mean |s|_inf last 2 s: {mean_last:.4}");
    println!("theta_F = {:.2}", ctl.net.theta.norm());
}
