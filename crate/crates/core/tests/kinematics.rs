use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use telesync_core::kinematics::{pose_to_rotation, IkParams, SerialChain};

/// Central differences of FK: position columns directly, angular columns from
/// the skew part of `dR · Rᵀ`.
fn fd_jacobian(chain: &SerialChain, q: &[f64], h: f64) -> Vec<[f64; 6]> {
    let mut cols = Vec::new();
    let r0 = pose_to_rotation(&chain.forward_kinematics(q).unwrap());
    for i in 0..q.len() {
        let mut qp = q.to_vec();
        let mut qm = q.to_vec();
        qp[i] += h;
        qm[i] -= h;
        let pp = chain.forward_kinematics(&qp).unwrap();
        let pm = chain.forward_kinematics(&qm).unwrap();
        let dr = (pose_to_rotation(&pp) - pose_to_rotation(&pm)) / (2.0 * h);
        let w = dr * r0.transpose();
        cols.push([
            (pp.position[0] - pm.position[0]) / (2.0 * h),
            (pp.position[1] - pm.position[1]) / (2.0 * h),
            (pp.position[2] - pm.position[2]) / (2.0 * h),
            0.5 * (w[(2, 1)] - w[(1, 2)]),
            0.5 * (w[(0, 2)] - w[(2, 0)]),
            0.5 * (w[(1, 0)] - w[(0, 1)]),
        ]);
    }
    cols
}

fn max_jacobian_fd_gap(chain: &SerialChain, rng: &mut ChaCha8Rng, n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let q: Vec<f64> = (0..chain.dof()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let jac = chain.jacobian(&q).unwrap();
        for (c, col) in fd_jacobian(chain, &q, 1e-6).iter().enumerate() {
            for r in 0..6 {
                worst = worst.max((jac[(r, c)] - col[r]).abs());
            }
        }
    }
    worst
}

#[test]
fn jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    assert!(max_jacobian_fd_gap(&SerialChain::ur3e(), &mut rng, 100) < 1e-6);
    assert!(max_jacobian_fd_gap(&SerialChain::planar(&[0.3, 0.2]), &mut rng, 100) < 1e-6);
}

#[test]
fn ur3e_ik_round_trip_from_nearby_seeds() {
    let chain = SerialChain::ur3e();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let params = IkParams::default();
    let mut worst: f64 = 0.0;
    let mut tried = 0;
    while tried < 100 {
        let q_true: Vec<f64> = chain.home().iter().map(|h| h + rng.random_range(-0.8..0.8)).collect();
        // targets at a kinematic singularity converge too slowly under fixed damping
        if chain.jacobian(&q_true).unwrap().singular_values().min() < 1e-2 {
            continue;
        }
        tried += 1;
        let target = chain.forward_kinematics(&q_true).unwrap();
        let seed: Vec<f64> = q_true.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        let res = chain.ik_dls(&target, &seed, &params).unwrap();
        let got = chain.forward_kinematics(&res.q).unwrap();
        worst = worst.max(got.position_distance(&target));
    }
    assert!(worst < 1e-4, "worst position error {worst}");
}

#[test]
fn ik_steps_respect_cap_near_singularity() {
    // stretched planar arm is singular; damping keeps every iterate finite
    let chain = SerialChain::planar(&[0.3, 0.2]);
    let target = chain.forward_kinematics(&[0.5, 0.0]).unwrap();
    let params = IkParams {
        max_iters: 1,
        ..IkParams::default()
    };
    let seed = [0.0, 0.0];
    let res = chain.ik_dls(&target, &seed, &params).unwrap();
    let step: f64 = res
        .q
        .iter()
        .zip(seed)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    assert!(step <= params.step_cap + 1e-12);
    assert!(res.q.iter().all(|v| v.is_finite()));
}
