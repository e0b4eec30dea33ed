//! Serial-chain kinematics on standard Denavit–Hartenberg parameters.
//!
//! All joints are revolute. Forward kinematics composes
//! `Rz(θ + offset) · Tz(d) · Tx(a) · Rx(α)` per joint; the Jacobian is the
//! geometric one (linear rows over angular rows) and inverse kinematics is a
//! damped least-squares iteration with a step-norm cap.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Isometry3, Matrix3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::model::{quat_conj, quat_distance, quat_mul, sign_align, Pose, Quat};

#[derive(Debug, thiserror::Error)]
pub enum KinematicsError {
    #[error("chain has no joints")]
    EmptyChain,
    #[error("joint {0}: limit_low must be below limit_high")]
    BadLimits(usize),
    #[error("expected {expected} joint values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in kinematics")]
    Numeric,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhJoint {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    #[serde(default)]
    pub theta_offset: f64,
    pub limit_low: f64,
    pub limit_high: f64,
}

impl DhJoint {
    fn transform(&self, q: f64) -> Isometry3<f64> {
        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), q + self.theta_offset);
        let rx = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.alpha);
        // Rz·Tz(d)·Tx(a)·Rx: the translation (a, 0, d) is expressed in the
        // rotated-about-z frame
        let t = rz * Vector3::new(self.a, 0.0, self.d);
        Isometry3::from_parts(Translation3::from(t), rz * rx)
    }
}

/// Joint positions (rad), velocities (rad/s) and accelerations (rad/s²).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub qddot: Vec<f64>,
}

impl JointState {
    /// At rest at `q`.
    pub fn at_rest(q: Vec<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            qdot: vec![0.0; n],
            qddot: vec![0.0; n],
        }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q
            .iter()
            .chain(&self.qdot)
            .chain(&self.qddot)
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerialChain {
    #[serde(default)]
    pub name: String,
    pub joints: Vec<DhJoint>,
    /// Optional nominal configuration used to seed IK and place the arm.
    #[serde(default)]
    pub home: Option<Vec<f64>>,
}

const UR3E_JSON: &str = include_str!("../assets/ur3e.json");

impl SerialChain {
    pub fn new(joints: Vec<DhJoint>) -> Result<Self, KinematicsError> {
        let chain = Self {
            name: String::new(),
            joints,
            home: None,
        };
        chain.validate()?;
        Ok(chain)
    }

    /// The shipped 6-joint UR3e-class table.
    pub fn ur3e() -> Self {
        serde_json::from_str(UR3E_JSON).expect("bundled chain description is valid")
    }

    /// Planar chain with the given link lengths, all joints about z.
    pub fn planar(links: &[f64]) -> Self {
        Self::new(
            links
                .iter()
                .map(|&a| DhJoint {
                    a,
                    alpha: 0.0,
                    d: 0.0,
                    theta_offset: 0.0,
                    limit_low: -std::f64::consts::PI,
                    limit_high: std::f64::consts::PI,
                })
                .collect(),
        )
        .expect("planar chain is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, KinematicsError> {
        let chain: SerialChain = serde_json::from_str(text)?;
        chain.validate()?;
        Ok(chain)
    }

    pub fn load(path: &Path) -> Result<Self, KinematicsError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        if self.joints.is_empty() {
            return Err(KinematicsError::EmptyChain);
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.limit_low < j.limit_high) {
                return Err(KinematicsError::BadLimits(i));
            }
        }
        if let Some(h) = &self.home {
            self.check_dim(h)?;
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn home(&self) -> Vec<f64> {
        self.home.clone().unwrap_or_else(|| vec![0.0; self.dof()])
    }

    /// Sum of |a| and |d| over all joints; an upper bound on reach.
    pub fn reach(&self) -> f64 {
        self.joints.iter().map(|j| j.a.abs() + j.d.abs()).sum()
    }

    pub fn limits(&self) -> Vec<(f64, f64)> {
        self.joints.iter().map(|j| (j.limit_low, j.limit_high)).collect()
    }

    pub fn clamp(&self, q: &mut [f64]) -> bool {
        let mut clamped = false;
        for (v, j) in q.iter_mut().zip(&self.joints) {
            let c = v.clamp(j.limit_low, j.limit_high);
            if c != *v {
                clamped = true;
                *v = c;
            }
        }
        clamped
    }

    fn check_dim(&self, q: &[f64]) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::Dimension {
                expected: self.dof(),
                got: q.len(),
            });
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(KinematicsError::Numeric);
        }
        Ok(())
    }

    /// Frames of joints 0..=I; frame 0 is the base, frame I the end effector.
    fn frames(&self, q: &[f64]) -> Vec<Isometry3<f64>> {
        let mut out = Vec::with_capacity(self.dof() + 1);
        let mut t = Isometry3::identity();
        out.push(t);
        for (joint, &qi) in self.joints.iter().zip(q) {
            t *= joint.transform(qi);
            out.push(t);
        }
        out
    }

    pub fn end_effector(&self, q: &[f64]) -> Result<Isometry3<f64>, KinematicsError> {
        self.check_dim(q)?;
        let mut t = Isometry3::identity();
        for (joint, &qi) in self.joints.iter().zip(q) {
            t *= joint.transform(qi);
        }
        Ok(t)
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Pose, KinematicsError> {
        Ok(iso_to_pose(&self.end_effector(q)?))
    }

    /// Geometric Jacobian, rows `[vx vy vz wx wy wz]`.
    pub fn jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>, KinematicsError> {
        self.check_dim(q)?;
        Ok(self.jacobian_unchecked(q))
    }

    fn jacobian_unchecked(&self, q: &[f64]) -> DMatrix<f64> {
        let frames = self.frames(q);
        let end = frames[self.dof()].translation.vector;
        let mut jac = DMatrix::zeros(6, self.dof());
        for i in 0..self.dof() {
            let z = frames[i].rotation * Vector3::z();
            let o = frames[i].translation.vector;
            let lin = z.cross(&(end - o));
            for r in 0..3 {
                jac[(r, i)] = lin[r];
                jac[(r + 3, i)] = z[r];
            }
        }
        jac
    }

    pub fn ik_dls(&self, target: &Pose, seed: &[f64], params: &IkParams) -> Result<IkResult, KinematicsError> {
        self.check_dim(seed)?;
        let n = self.dof();
        let mut q = seed.to_vec();
        self.clamp(&mut q);
        let lambda2 = params.lambda * params.lambda;
        let target_pos = Vector3::from(target.position);

        let mut best: Option<IkResult> = None;
        for iter in 0..=params.max_iters {
            let frames = self.frames(&q);
            let ee = &frames[n];
            let pose = iso_to_pose(ee);
            let pos_err = target_pos - ee.translation.vector;
            let q_err = orientation_error(&target.orientation, &pose.orientation);
            let pos_norm = pos_err.norm();
            let quat_dist = quat_distance(&target.orientation, &pose.orientation);
            if !pos_norm.is_finite() || !quat_dist.is_finite() {
                return Err(KinematicsError::Numeric);
            }
            let converged = pos_norm <= params.tol_position && quat_dist <= params.tol_orientation;
            let score = pos_norm + quat_dist;
            if best
                .as_ref()
                .is_none_or(|b| score < b.position_error + b.orientation_error)
                || converged
            {
                best = Some(IkResult {
                    q: q.clone(),
                    converged,
                    iterations: iter,
                    position_error: pos_norm,
                    orientation_error: quat_dist,
                });
            }
            if converged || iter == params.max_iters {
                break;
            }

            let jac = self.jacobian_unchecked(&q);
            let err = DVector::from_vec(vec![pos_err.x, pos_err.y, pos_err.z, q_err.x, q_err.y, q_err.z]);
            let damped = &jac * jac.transpose() + DMatrix::identity(6, 6) * lambda2;
            let y = damped.cholesky().ok_or(KinematicsError::Numeric)?.solve(&err);
            let mut dq = jac.transpose() * y;
            let step = dq.norm();
            if !step.is_finite() {
                return Err(KinematicsError::Numeric);
            }
            if step > params.step_cap {
                dq *= params.step_cap / step;
            }
            for (qi, d) in q.iter_mut().zip(dq.iter()) {
                *qi += d;
            }
            self.clamp(&mut q);
        }
        Ok(best.expect("at least one iterate"))
    }
}

/// Rotation-vector style error `2·vec(q_target ⊗ q_current⁻¹)`, sign-aligned.
fn orientation_error(target: &Quat, current: &Quat) -> Vector3<f64> {
    let aligned = sign_align(current, target);
    let e = quat_mul(&aligned, &quat_conj(current));
    let s = if e[3] < 0.0 { -2.0 } else { 2.0 };
    Vector3::new(s * e[0], s * e[1], s * e[2])
}

pub fn iso_to_pose(iso: &Isometry3<f64>) -> Pose {
    let t = iso.translation.vector;
    let q = iso.rotation.quaternion();
    let mut orientation = [q.i, q.j, q.k, q.w];
    if orientation[3] < 0.0 {
        orientation.iter_mut().for_each(|c| *c = -*c);
    }
    Pose {
        position: [t.x, t.y, t.z],
        orientation,
    }
}

pub fn pose_to_rotation(p: &Pose) -> Matrix3<f64> {
    let [x, y, z, w] = p.orientation;
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
        .to_rotation_matrix()
        .into_inner()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkParams {
    pub lambda: f64,
    pub step_cap: f64,
    pub max_iters: usize,
    pub tol_position: f64,
    pub tol_orientation: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            step_cap: 0.2,
            max_iters: 50,
            tol_position: 1e-4,
            tol_orientation: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkResult {
    pub q: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub position_error: f64,
    pub orientation_error: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::FRAC_PI_2;

    /// Independent DH chain product on plain 4x4 arrays.
    fn oracle_fk(chain: &SerialChain, q: &[f64]) -> [[f64; 4]; 4] {
        let mut t = [[0.0; 4]; 4];
        for (i, row) in t.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for (j, &qi) in chain.joints.iter().zip(q) {
            let (st, ct) = (qi + j.theta_offset).sin_cos();
            let (sa, ca) = j.alpha.sin_cos();
            let a = [
                [ct, -st * ca, st * sa, j.a * ct],
                [st, ct * ca, -ct * sa, j.a * st],
                [0.0, sa, ca, j.d],
                [0.0, 0.0, 0.0, 1.0],
            ];
            let mut r = [[0.0; 4]; 4];
            for i in 0..4 {
                for k in 0..4 {
                    r[i][k] = (0..4).map(|m| t[i][m] * a[m][k]).sum();
                }
            }
            t = r;
        }
        t
    }

    fn random_q(chain: &SerialChain, rng: &mut impl Rng) -> Vec<f64> {
        chain.joints.iter().map(|_| rng.random_range(-2.5..2.5)).collect()
    }

    #[test]
    fn planar_stretched_and_rotated() {
        let chain = SerialChain::planar(&[0.3, 0.2]);
        let p = chain.forward_kinematics(&[0.0, 0.0]).unwrap();
        assert!((p.position[0] - 0.5).abs() < 1e-12 && p.position[1].abs() < 1e-12);
        let p = chain.forward_kinematics(&[FRAC_PI_2, 0.0]).unwrap();
        assert!(p.position[0].abs() < 1e-12 && (p.position[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn six_joint_fk_matches_matrix_oracle() {
        let chain = SerialChain::ur3e();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let q = random_q(&chain, &mut rng);
            let t = oracle_fk(&chain, &q);
            let pose = chain.forward_kinematics(&q).unwrap();
            for r in 0..3 {
                assert!((pose.position[r] - t[r][3]).abs() < 1e-9);
            }
            let rot = pose_to_rotation(&pose);
            for r in 0..3 {
                for c in 0..3 {
                    assert!((rot[(r, c)] - t[r][c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn planar_jacobian_at_zero() {
        let chain = SerialChain::planar(&[0.3, 0.2]);
        let j = chain.jacobian(&[0.0, 0.0]).unwrap();
        assert!(j[(0, 0)].abs() < 1e-12);
        assert!((j[(1, 0)] - 0.5).abs() < 1e-12);
        assert!((j[(1, 1)] - 0.2).abs() < 1e-12);
        assert!((j[(5, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_length_chain_has_zero_linear_rows() {
        let chain = SerialChain::planar(&[0.0, 0.0, 0.0]);
        let j = chain.jacobian(&[0.3, -0.2, 1.0]).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(j[(r, c)], 0.0);
            }
        }
    }

    #[test]
    fn ik_fixed_point_takes_zero_iterations() {
        let chain = SerialChain::ur3e();
        let seed = chain.home();
        let target = chain.forward_kinematics(&seed).unwrap();
        let res = chain.ik_dls(&target, &seed, &IkParams::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 0);
        assert_eq!(res.q, seed);
    }

    #[test]
    fn planar_ik_round_trip() {
        let chain = SerialChain::planar(&[0.3, 0.2]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let q_true = vec![rng.random_range(-2.0..2.0), rng.random_range(0.3..2.5)];
            let target = chain.forward_kinematics(&q_true).unwrap();
            let seed = vec![q_true[0] + 0.4, q_true[1] - 0.3];
            let res = chain.ik_dls(&target, &seed, &IkParams::default()).unwrap();
            let got = chain.forward_kinematics(&res.q).unwrap();
            assert!(got.position_distance(&target) < 1e-4, "{res:?}");
        }
    }

    #[test]
    fn unreachable_target_reports_non_convergence() {
        let chain = SerialChain::planar(&[0.3, 0.2]);
        let target = Pose::from_position([1.0, 0.0, 0.0]);
        let res = chain.ik_dls(&target, &[0.1, 0.1], &IkParams::default()).unwrap();
        assert!(!res.converged);
        assert!(res.q.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        let chain = SerialChain::planar(&[0.3, 0.2]);
        assert!(matches!(
            chain.forward_kinematics(&[0.0]),
            Err(KinematicsError::Dimension { .. })
        ));
        assert!(matches!(
            chain.forward_kinematics(&[0.0, f64::NAN]),
            Err(KinematicsError::Numeric)
        ));
    }

    #[test]
    fn chain_file_validation() {
        assert!(SerialChain::from_json(r#"{"joints": []}"#).is_err());
        let bad = r#"{"joints": [{"a": 1, "alpha": 0, "d": 0, "limit_low": 1, "limit_high": -1}]}"#;
        assert!(matches!(
            SerialChain::from_json(bad),
            Err(KinematicsError::BadLimits(0))
        ));
        let chain = SerialChain::ur3e();
        assert_eq!(chain.dof(), 6);
        let text = serde_json::to_string(&chain).unwrap();
        assert_eq!(SerialChain::from_json(&text).unwrap(), chain);
    }
}
