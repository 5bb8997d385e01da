//! n-link planar revolute arm: M(q) q̈ + C(q, q̇) q̇ + D q̇ + g(q) + d = τ.
//!
//! Joint angles are relative; the absolute angle of link i is the sum of the
//! first i + 1 joint angles, measured from the +x axis. Gravity acts along −y.
//! The Coriolis matrix is assembled from Christoffel symbols of M so that
//! Ṁ − 2C is skew-symmetric.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent float math is unavailable without std
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, Mat};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmParams {
    pub link_lengths: Vec<f64>,
    pub link_masses: Vec<f64>,
    /// Distance of each link's center of mass from its parent joint.
    pub link_com_offsets: Vec<f64>,
    /// Rotational inertia of each link about its center of mass.
    pub link_inertias: Vec<f64>,
    /// Diagonal of the viscous damping matrix D.
    pub damping: Vec<f64>,
    /// Gravitational field strength along −y (m/s²).
    pub gravity: f64,
    /// Per-joint `[q_min, q_max]`.
    pub joint_limits: Vec<[f64; 2]>,
    /// Per-joint |τ| bound.
    pub torque_limits: Vec<f64>,
}

impl ArmParams {
    /// Uniform slender links with the center of mass at mid-length.
    pub fn uniform_links(lengths: &[f64], masses: &[f64]) -> Self {
        let n = lengths.len();
        Self {
            link_lengths: lengths.to_vec(),
            link_masses: masses.to_vec(),
            link_com_offsets: lengths.iter().map(|l| 0.5 * l).collect(),
            link_inertias: lengths.iter().zip(masses).map(|(l, m)| m * l * l / 12.0).collect(),
            damping: vec![0.1; n],
            gravity: 9.81,
            joint_limits: vec![[-core::f64::consts::PI, core::f64::consts::PI]; n],
            torque_limits: vec![50.0; n],
        }
    }

    /// Default desk-scale follower/leader arm.
    pub fn two_link() -> Self {
        let mut p = Self::uniform_links(&[0.6, 0.5], &[2.0, 1.5]);
        p.joint_limits = vec![[-3.0, 3.0], [-2.9, 2.9]];
        p.torque_limits = vec![50.0, 25.0];
        p
    }

    pub fn three_link() -> Self {
        let mut p = Self::uniform_links(&[0.45, 0.4, 0.25], &[2.0, 1.5, 0.8]);
        p.joint_limits = vec![[-3.0, 3.0], [-2.9, 2.9], [-2.9, 2.9]];
        p.torque_limits = vec![50.0, 25.0, 10.0];
        p
    }

    pub fn n_links(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Inner radius of the reachable annulus.
    pub fn inner_reach(&self) -> f64 {
        let longest = self.link_lengths.iter().cloned().fold(0.0, f64::max);
        (2.0 * longest - self.reach()).max(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_links();
        if n == 0 {
            return Err(Error::InvalidParam("arm needs at least one link".into()));
        }
        for (name, len) in [
            ("link_masses", self.link_masses.len()),
            ("link_com_offsets", self.link_com_offsets.len()),
            ("link_inertias", self.link_inertias.len()),
            ("damping", self.damping.len()),
            ("joint_limits", self.joint_limits.len()),
            ("torque_limits", self.torque_limits.len()),
        ] {
            if len != n {
                return Err(Error::InvalidParam(alloc::format!("{name} has {len} entries for {n} links")));
            }
        }
        let positive = |v: &[f64]| v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !positive(&self.link_lengths) || !positive(&self.link_masses) || !positive(&self.link_inertias) {
            return Err(Error::InvalidParam("lengths, masses and inertias must be strictly positive".into()));
        }
        if !positive(&self.link_com_offsets) || !positive(&self.torque_limits) {
            return Err(Error::InvalidParam("COM offsets and torque limits must be strictly positive".into()));
        }
        if self.damping.iter().any(|d| *d < 0.0) {
            return Err(Error::InvalidParam("damping must be nonnegative".into()));
        }
        if self.joint_limits.iter().any(|[lo, hi]| !(lo < hi)) {
            return Err(Error::InvalidParam("joint limits need q_min < q_max".into()));
        }
        Ok(())
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.n_links() {
            return Err(Error::Dimension { expected: self.n_links(), got: v.len() });
        }
        Ok(())
    }

    pub fn clamp_torque(&self, tau: &[f64]) -> Vec<f64> {
        tau.iter().zip(&self.torque_limits).map(|(t, lim)| t.clamp(-lim, *lim)).collect()
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.iter().zip(&self.joint_limits).all(|(q, [lo, hi])| *q >= *lo && *q <= *hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub t: f64,
}

impl JointState {
    pub fn new(q: Vec<f64>, qdot: Vec<f64>, t: f64) -> Self {
        debug_assert_eq!(q.len(), qdot.len());
        Self { q, qdot, t }
    }

    pub fn at_rest(q: Vec<f64>, t: f64) -> Self {
        let n = q.len();
        Self { q, qdot: vec![0.0; n], t }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.qdot).all(|x| x.is_finite()) && self.t.is_finite()
    }

    /// `[q, qdot]` concatenated.
    pub fn stacked(&self) -> Vec<f64> {
        let mut s = self.q.clone();
        s.extend_from_slice(&self.qdot);
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    #[default]
    None,
    ConstantBias,
    Sinusoidal,
}

/// External disturbance d(q, q̇, t) added on the left-hand side of the dynamics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub kind: DisturbanceKind,
    /// Per-joint amplitude (N·m). An empty vector means zero on every joint.
    #[serde(default)]
    pub magnitude: Vec<f64>,
    /// rad/s, sinusoidal only.
    #[serde(default)]
    pub frequency: f64,
}

impl DisturbanceSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn sinusoidal(n: usize, amplitude: f64, frequency: f64) -> Self {
        Self { kind: DisturbanceKind::Sinusoidal, magnitude: vec![amplitude; n], frequency }
    }

    pub fn constant(magnitude: Vec<f64>) -> Self {
        Self { kind: DisturbanceKind::ConstantBias, magnitude, frequency: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.magnitude.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::InvalidParam("disturbance magnitude must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn torque(&self, n: usize, t: f64) -> Vec<f64> {
        let amp = |i: usize| self.magnitude.get(i).copied().unwrap_or(0.0);
        match self.kind {
            DisturbanceKind::None => vec![0.0; n],
            DisturbanceKind::ConstantBias => (0..n).map(amp).collect(),
            DisturbanceKind::Sinusoidal => {
                let s = (self.frequency * t).sin();
                (0..n).map(|i| amp(i) * s).collect()
            }
        }
    }
}

fn absolute_angles(q: &[f64]) -> Vec<f64> {
    q.iter()
        .scan(0.0, |acc, qi| {
            *acc += qi;
            Some(*acc)
        })
        .collect()
}

/// Lever arm of link k as seen from the COM of link i (k ≤ i).
fn lever(params: &ArmParams, k: usize, i: usize) -> f64 {
    if k < i {
        params.link_lengths[k]
    } else {
        params.link_com_offsets[i]
    }
}

/// Linear-velocity Jacobian of link i's center of mass (2 × n).
fn com_jacobian(params: &ArmParams, theta: &[f64], i: usize) -> Mat {
    let n = params.n_links();
    let mut j = Mat::zeros(2, n);
    for col in 0..=i {
        for k in col..=i {
            let a = lever(params, k, i);
            j[(0, col)] -= a * theta[k].sin();
            j[(1, col)] += a * theta[k].cos();
        }
    }
    j
}

/// ∂J_i/∂q_m for the COM Jacobian of link i.
fn com_jacobian_partial(params: &ArmParams, theta: &[f64], i: usize, m: usize) -> Mat {
    let n = params.n_links();
    let mut dj = Mat::zeros(2, n);
    if m > i {
        return dj;
    }
    for col in 0..=i {
        for k in col.max(m)..=i {
            let a = lever(params, k, i);
            dj[(0, col)] -= a * theta[k].cos();
            dj[(1, col)] -= a * theta[k].sin();
        }
    }
    dj
}

/// Joint-space inertia matrix M(q).
pub fn mass_matrix(params: &ArmParams, q: &[f64]) -> Result<Mat> {
    params.check_dim(q)?;
    let n = params.n_links();
    let theta = absolute_angles(q);
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        let jv = com_jacobian(params, &theta, i);
        m.add_assign_scaled(&jv.transpose().mul(&jv), params.link_masses[i]);
        // angular Jacobian of link i is ones on joints 0..=i
        for r in 0..=i {
            for c in 0..=i {
                m[(r, c)] += params.link_inertias[i];
            }
        }
    }
    Ok(m)
}

/// ∂M/∂q_k for every k.
pub fn mass_matrix_partials(params: &ArmParams, q: &[f64]) -> Result<Vec<Mat>> {
    params.check_dim(q)?;
    let n = params.n_links();
    let theta = absolute_angles(q);
    let jacobians: Vec<Mat> = (0..n).map(|i| com_jacobian(params, &theta, i)).collect();
    Ok((0..n)
        .map(|k| {
            let mut dm = Mat::zeros(n, n);
            for (i, jv) in jacobians.iter().enumerate() {
                let dj = com_jacobian_partial(params, &theta, i, k);
                let a = dj.transpose().mul(jv);
                dm.add_assign_scaled(&a, params.link_masses[i]);
                dm.add_assign_scaled(&a.transpose(), params.link_masses[i]);
            }
            dm
        })
        .collect())
}

/// Coriolis/centrifugal matrix from Christoffel symbols of the first kind.
pub fn coriolis_matrix(params: &ArmParams, q: &[f64], qdot: &[f64]) -> Result<Mat> {
    params.check_dim(qdot)?;
    let n = params.n_links();
    let dm = mass_matrix_partials(params, q)?;
    let mut c = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += 0.5 * (dm[k][(i, j)] + dm[j][(i, k)] - dm[i][(j, k)]) * qdot[k];
            }
            c[(i, j)] = s;
        }
    }
    Ok(c)
}

/// Potential energy, zero when every COM lies on y = 0.
pub fn potential_energy(params: &ArmParams, q: &[f64]) -> f64 {
    let theta = absolute_angles(q);
    let mut e = 0.0;
    let mut y = 0.0;
    for i in 0..params.n_links() {
        let yc = y + params.link_com_offsets[i] * theta[i].sin();
        e += params.link_masses[i] * params.gravity * yc;
        y += params.link_lengths[i] * theta[i].sin();
    }
    e
}

pub fn kinetic_energy(params: &ArmParams, state: &JointState) -> Result<f64> {
    let m = mass_matrix(params, &state.q)?;
    Ok(0.5 * linalg::dot(&state.qdot, &m.mul_vec(&state.qdot)))
}

/// Gravity torques g(q) = ∂P/∂q.
pub fn gravity_torque(params: &ArmParams, q: &[f64]) -> Result<Vec<f64>> {
    params.check_dim(q)?;
    let n = params.n_links();
    let theta = absolute_angles(q);
    let mut g = vec![0.0; n];
    for i in 0..n {
        let jv = com_jacobian(params, &theta, i);
        for (j, gj) in g.iter_mut().enumerate() {
            *gj += params.link_masses[i] * params.gravity * jv[(1, j)];
        }
    }
    Ok(g)
}

/// C(q, q̇) q̇ + D q̇ + g(q).
pub fn bias_forces(params: &ArmParams, state: &JointState) -> Result<Vec<f64>> {
    let c = coriolis_matrix(params, &state.q, &state.qdot)?;
    let mut b = c.mul_vec(&state.qdot);
    let g = gravity_torque(params, &state.q)?;
    for i in 0..b.len() {
        b[i] += params.damping[i] * state.qdot[i] + g[i];
    }
    Ok(b)
}

/// Joint accelerations for the applied torque. The torque is clamped to the
/// arm's limits before use.
pub fn forward_dynamics(
    params: &ArmParams,
    state: &JointState,
    tau: &[f64],
    disturbance: &DisturbanceSpec,
) -> Result<Vec<f64>> {
    params.check_dim(tau)?;
    let n = params.n_links();
    let m = mass_matrix(params, &state.q)?;
    let bias = bias_forces(params, state)?;
    let d = disturbance.torque(n, state.t);
    let tau = params.clamp_torque(tau);
    let rhs: Vec<f64> = (0..n).map(|i| tau[i] - bias[i] - d[i]).collect();
    let l = linalg::cholesky(&m).expect("mass matrix must be positive definite");
    Ok(linalg::cholesky_solve(&l, &rhs))
}

/// One semi-implicit Euler step with hard joint-limit clamping.
pub fn step(
    params: &ArmParams,
    state: &JointState,
    tau: &[f64],
    disturbance: &DisturbanceSpec,
    dt: f64,
) -> Result<JointState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParam("dt must be positive".into()));
    }
    let qdd = forward_dynamics(params, state, tau, disturbance)?;
    let mut next = state.clone();
    for i in 0..params.n_links() {
        next.qdot[i] += qdd[i] * dt;
        next.q[i] += next.qdot[i] * dt;
        let [lo, hi] = params.joint_limits[i];
        if next.q[i] > hi {
            next.q[i] = hi;
            next.qdot[i] = 0.0;
        } else if next.q[i] < lo {
            next.q[i] = lo;
            next.qdot[i] = 0.0;
        }
    }
    next.t = state.t + dt;
    if !next.is_finite() {
        return Err(Error::Diverged { t: next.t, q: next.q, qdot: next.qdot });
    }
    Ok(next)
}

pub fn forward_kinematics(params: &ArmParams, q: &[f64]) -> [f64; 2] {
    let theta = absolute_angles(q);
    let mut p = [0.0; 2];
    for (l, th) in params.link_lengths.iter().zip(&theta) {
        p[0] += l * th.cos();
        p[1] += l * th.sin();
    }
    p
}

/// End-effector Jacobian (2 × n).
pub fn jacobian(params: &ArmParams, q: &[f64]) -> Mat {
    let n = params.n_links();
    let theta = absolute_angles(q);
    let mut j = Mat::zeros(2, n);
    for col in 0..n {
        for k in col..n {
            j[(0, col)] -= params.link_lengths[k] * theta[k].sin();
            j[(1, col)] += params.link_lengths[k] * theta[k].cos();
        }
    }
    j
}

/// J̇(q, q̇) q̇ for the end effector.
pub fn jacobian_dot_qdot(params: &ArmParams, q: &[f64], qdot: &[f64]) -> [f64; 2] {
    let theta = absolute_angles(q);
    let omega = absolute_angles(qdot);
    let mut a = [0.0; 2];
    for k in 0..params.n_links() {
        let w2 = omega[k] * omega[k];
        a[0] -= params.link_lengths[k] * w2 * theta[k].cos();
        a[1] -= params.link_lengths[k] * w2 * theta[k].sin();
    }
    a
}

/// Damped pseudo-inverse solve `Jᵀ (J Jᵀ + λ² I)⁻¹ v` for a 2-vector task.
pub fn damped_pinv_apply(j: &Mat, v: [f64; 2], lambda: f64) -> Vec<f64> {
    let jt = j.transpose();
    let mut jjt = j.mul(&jt);
    jjt[(0, 0)] += lambda * lambda;
    jjt[(1, 1)] += lambda * lambda;
    let y = linalg::solve_spd(&jjt, &v).unwrap_or_else(|| vec![0.0, 0.0]);
    jt.mul_vec(&y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IkSolution {
    pub q: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    /// The target was outside the reachable annulus and was projected onto it.
    pub projected: bool,
}

pub const IK_TOLERANCE: f64 = 1e-6;
const IK_MAX_ITERS: usize = 500;

/// Damped least-squares IK started from `q_seed`; the returned branch is the
/// one the iteration reaches from the seed.
pub fn inverse_kinematics(params: &ArmParams, target: [f64; 2], q_seed: &[f64]) -> Result<IkSolution> {
    params.check_dim(q_seed)?;
    let (target, projected) = project_to_annulus(params, target);
    let mut q = q_seed.to_vec();
    let mut lambda = 1e-3;
    let residual_of = |q: &[f64]| {
        let p = forward_kinematics(params, q);
        [target[0] - p[0], target[1] - p[1]]
    };
    let mut err = residual_of(&q);
    let mut res = linalg::norm(&err);
    for it in 0..IK_MAX_ITERS {
        if res < IK_TOLERANCE {
            return Ok(IkSolution { q, residual: res, iterations: it, projected });
        }
        let j = jacobian(params, &q);
        let dq = damped_pinv_apply(&j, err, lambda);
        let trial: Vec<f64> = q.iter().zip(&dq).map(|(a, b)| a + b).collect();
        let trial_err = residual_of(&trial);
        let trial_res = linalg::norm(&trial_err);
        if trial_res < res {
            q = trial;
            err = trial_err;
            res = trial_res;
            lambda = (lambda * 0.5).max(1e-9);
        } else {
            lambda = (lambda * 4.0).min(1.0);
        }
    }
    if res < IK_TOLERANCE {
        Ok(IkSolution { q, residual: res, iterations: IK_MAX_ITERS, projected })
    } else {
        Err(Error::IkNotConverged { residual: res })
    }
}

/// Projects a target radially onto the reachable annulus.
pub fn project_to_annulus(params: &ArmParams, target: [f64; 2]) -> ([f64; 2], bool) {
    let r = linalg::norm(&target);
    let (outer, inner) = (params.reach(), params.inner_reach());
    if r > outer {
        let s = outer / r;
        ([target[0] * s, target[1] * s], true)
    } else if r < inner {
        if r == 0.0 {
            ([inner, 0.0], true)
        } else {
            let s = inner / r;
            ([target[0] * s, target[1] * s], true)
        }
    } else {
        (target, false)
    }
}
