use nalgebra::Vector6;
use rand::{Rng, SeedableRng};
use softarm_core::controller::*;
use softarm_core::plant::*;
use softarm_core::trajgen::*;

fn main() {
    let model = PlantModel::build(PlantConfig::default().with_mismatch_and_drift(42)).unwrap();
    let cc = ControllerConfig::default();
    let mut ctl = AdaptiveController::new(&cc, Vector6::zeros()).unwrap();
    let seq = StepSequence::new(10.0, nalgebra::DVector::from_element(6, -0.5),
        nalgebra::DVector::from_element(6, 0.5), 12, 7);
    let schedule = random_steps(&seq).unwrap();
    let mut state = ArmState::at_rest();
    let dt_c = 1.0 / 500.0;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let mut out = String::new();
    for k in 0..(90.0_f64 / dt_c) as usize {
        let t = k as f64 * dt_c;
        let q_cmd = command_at(&schedule, t).clone();
        let qdm = Vector6::from_fn(|i, _| state.q_dot[i] + 0.005 * rng.random_range(-1.0..1.0));
        let (p_des, diag) = ctl.step(&state.q.clone(), &qdm, &Vector6::from_fn(|i,_| q_cmd[i]), dt_c);
        for _ in 0..10 { state = integrate(&state, &p_des, &model, dt_c / 10.0).unwrap(); }
        if t >= 75.0 && t < 80.0 {
            out.push_str(&format!("{t:.4},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                diag.s[0],diag.s[1],diag.s[2],diag.s[3],diag.s[4],diag.s[5],
                state.q[0]-diag.setpoint.q_des[0],state.q[1]-diag.setpoint.q_des[1],
                state.q[2]-diag.setpoint.q_des[2],state.q[3]-diag.setpoint.q_des[3],
                state.q[4]-diag.setpoint.q_des[4],state.q[5]-diag.setpoint.q_des[5]));
        }
    }
    std::fs::write("/tmp/trace.csv", out).unwrap();
}
