use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use telesync_core::control::{
    advance_virtual_arm, compute_accel, robust_cap, smooth_command, step_real_arm, ControllerGains, RealArmConfig,
    RealArmModel, SmootherState,
};
use telesync_core::kinematics::JointState;

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|v| v * v).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn cap_never_exceeds_radius(u in prop::collection::vec(-1e3f64..1e3, 1..8), theta in 1e-3f64..10.0) {
        prop_assert!(norm(&robust_cap(&u, theta)) <= theta);
    }

    #[test]
    fn accel_is_affine_inside_cap_and_bounded_outside(
        q in prop::collection::vec(-1.0f64..1.0, 3),
        dq in prop::collection::vec(-2.0f64..2.0, 3),
        qdot in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let g = ControllerGains { kp: 50.0, kd: 10.0, theta_cap: 0.5 };
        let s = JointState { q: q.clone(), qdot: qdot.clone(), qddot: vec![0.0; 3] };
        let target: Vec<f64> = q.iter().zip(&dq).map(|(a, b)| a + b).collect();
        let acc = compute_accel(&s, &target, &g).unwrap();
        let err: Vec<f64> = target.iter().zip(&q).map(|(t, q)| t - q).collect();
        if norm(&err) < g.theta_cap {
            for i in 0..3 {
                prop_assert!((acc[i] - (g.kp * err[i] - g.kd * qdot[i])).abs() < 1e-9);
            }
        }
        prop_assert!(norm(&acc) <= g.kp * g.theta_cap + g.kd * norm(&qdot) + 1e-9);
    }

    #[test]
    fn smoothing_stays_between_last_and_raw(
        steps in prop::collection::vec((prop::collection::vec(-0.05f64..0.05, 2), 1u64..5), 1..40),
    ) {
        let mut s = SmootherState::new(30, 0.1, 0).unwrap();
        let mut raw = vec![0.0, 0.0];
        let mut now = 0;
        smooth_command(&mut s, &raw, now);
        for (delta, dt) in steps {
            now += dt;
            for (r, d) in raw.iter_mut().zip(&delta) {
                *r += d;
            }
            let last = s.last_command.clone().unwrap();
            let out = smooth_command(&mut s, &raw, now);
            if s.t_elapsed(now) < s.t_duration {
                for i in 0..2 {
                    let (lo, hi) = if last[i] < raw[i] { (last[i], raw[i]) } else { (raw[i], last[i]) };
                    prop_assert!(out[i] >= lo - 1e-15 && out[i] <= hi + 1e-15);
                }
            }
        }
    }
}

#[test]
fn critically_damped_loop_converges_monotonically() {
    let g = ControllerGains {
        kp: 100.0,
        kd: 20.0,
        theta_cap: 10.0,
    };
    let mut s = JointState::at_rest(vec![0.0, 0.0]);
    let target = [0.3, -0.2];
    let mut prev = f64::INFINITY;
    for _ in 0..2000 {
        s = advance_virtual_arm(&s, &target, &g, 1e-3, 10, &[]).unwrap();
        let e = norm(&[target[0] - s.q[0], target[1] - s.q[1]]);
        assert!(e <= prev + 1e-15);
        prev = e;
    }
    assert!(prev < 1e-6);
}

#[test]
fn real_arm_respects_limits_while_settling() {
    let cfg = RealArmConfig {
        vmax: 1.5,
        amax: 8.0,
        control_period_ms: 2,
    };
    let dt = 0.002;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut arm = RealArmModel::new(vec![0.0; 3], &cfg, vec![(-3.0, 3.0); 3]);
    for _ in 0..20 {
        let target: Vec<f64> = (0..3).map(|_| rng.random_range(-2.5..2.5)).collect();
        for _ in 0..5000 {
            let v0 = arm.state.qdot.clone();
            step_real_arm(&mut arm, &target, dt);
            for i in 0..3 {
                assert!(arm.state.qdot[i].abs() <= cfg.vmax * (1.0 + 1e-12));
                assert!((arm.state.qdot[i] - v0[i]).abs() <= cfg.amax * dt * (1.0 + 1e-9));
            }
        }
        for i in 0..3 {
            assert!((arm.state.q[i] - target[i]).abs() < 1e-6);
        }
    }
}
