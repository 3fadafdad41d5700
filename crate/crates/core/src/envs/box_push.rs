//! Quasi-static planar box pushing with an uncertain center of friction.
//!
//! A unit square is pushed by a point finger on one of its four edges
//! (the discrete action). The support friction is summarized by an
//! ellipsoidal limit surface around the center of friction (CF): the box
//! twist is proportional to the limit-surface normal at the applied
//! contact force. Pushing inside the friction cone sticks (the contact
//! point tracks the finger); outside it the force sits on the cone edge
//! and the finger slides along the edge.
//!
//! State: `(x_c, y_c, w, x_cf, y_cf, mu_c, dist_c)` where the CF is in
//! body coordinates relative to the center, `mu_c` is the contact friction
//! coefficient and `dist_c` scales the limit-surface torque capacity.
//! Only the pose `(x_c, y_c, w)` is observed, with noise.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector2};

use crate::belief::BeliefProblem;
use crate::hybrid::pseudo_huber;
use crate::problem::{ControlBounds, ControlProblem, HybridProblem};

/// State vector indices.
pub const IX: usize = 0;
pub const IY: usize = 1;
pub const IW: usize = 2;
pub const ICFX: usize = 3;
pub const ICFY: usize = 4;
pub const IMU: usize = 5;
pub const IDIST: usize = 6;
pub const STATE_DIM: usize = 7;

#[derive(Debug, Clone)]
pub struct BoxParams {
    pub dt: f64,
    /// Half of the box edge length.
    pub half_extent: f64,
    /// Limit-surface torque/force ratio is `torque_ratio * dist_c`.
    pub torque_ratio: f64,
    pub obstacle: (f64, f64),
    pub initial_center: (f64, f64),
    pub initial_rotation: f64,
    pub process_sd_pos: f64,
    pub process_sd_rot: f64,
    pub obs_sd_pos: f64,
    pub obs_sd_rot: f64,
    /// Numerical floor on the friction parameters when they are used.
    pub friction_floor: f64,
    pub huber_kappa: f64,
    pub running_pos_kappa: f64,
    pub alpha_limit: f64,
    pub speed_min: f64,
    pub speed_max: f64,
}

impl Default for BoxParams {
    fn default() -> Self {
        Self {
            dt: 0.02,
            half_extent: 0.5,
            torque_ratio: 0.38,
            obstacle: (1.0, 1.0),
            initial_center: (2.0, 2.0),
            initial_rotation: 0.0,
            process_sd_pos: 0.01,
            process_sd_rot: 0.01,
            obs_sd_pos: 0.0001,
            obs_sd_rot: 0.033,
            friction_floor: 0.05,
            huber_kappa: 0.01,
            running_pos_kappa: 0.1,
            alpha_limit: 0.35 * PI,
            speed_min: 0.01,
            speed_max: 3.0,
        }
    }
}

fn rot(angle: f64) -> nalgebra::Matrix2<f64> {
    let (s, c) = angle.sin_cos();
    nalgebra::Matrix2::new(c, -s, s, c)
}

/// Contact point, inward normal and tangent (direction of increasing `u`)
/// in body coordinates for edge `e` at coordinate `u` in `[0, 1]`. Edges
/// are indexed counter-clockwise starting from the bottom edge, and the
/// perimeter coordinate is continuous across corners.
pub fn contact_frame(e: usize, u: f64, half: f64) -> (Vector2<f64>, Vector2<f64>, Vector2<f64>) {
    let span = 2.0 * half;
    match e % 4 {
        0 => (
            Vector2::new(-half + span * u, -half),
            Vector2::new(0.0, 1.0),
            Vector2::new(1.0, 0.0),
        ),
        1 => (
            Vector2::new(half, -half + span * u),
            Vector2::new(-1.0, 0.0),
            Vector2::new(0.0, 1.0),
        ),
        2 => (
            Vector2::new(half - span * u, half),
            Vector2::new(0.0, -1.0),
            Vector2::new(-1.0, 0.0),
        ),
        _ => (
            Vector2::new(-half, half - span * u),
            Vector2::new(1.0, 0.0),
            Vector2::new(0.0, -1.0),
        ),
    }
}

/// Split a perimeter coordinate `q` (mod 4) into `(edge, u)`.
pub fn perimeter_split(q: f64) -> (usize, f64) {
    let qm = q.rem_euclid(4.0);
    let e = (qm.floor() as usize) % 4;
    (e, qm - qm.floor())
}

/// Inverse of [`perimeter_split`].
pub fn perimeter_join(e: usize, u: f64) -> f64 {
    e as f64 + u
}

/// Detailed result of a single quasi-static push.
#[derive(Debug, Clone)]
pub struct PushOutcome {
    pub next_state: DVector<f64>,
    /// Contact coordinate after in-step sliding, clamped to the edge.
    pub contact_after: f64,
    pub slipped: bool,
    pub rotation_delta: f64,
    /// CF speed (body frame); bounded by the finger speed.
    pub cf_speed: f64,
    /// Direction of the contact force in body coordinates (unnormalized).
    pub force_body: Vector2<f64>,
    /// Torque of that force about the CF.
    pub torque: f64,
}

impl BoxParams {
    fn limit_ratio(&self, dist_c: f64) -> f64 {
        self.torque_ratio * dist_c.max(self.friction_floor)
    }

    /// One quasi-static push step on edge `e` at contact coordinate `u_e`
    /// with push angle `alpha` (to the inward edge normal) and finger
    /// speed `speed`.
    pub fn push(
        &self,
        state: &DVector<f64>,
        e: usize,
        u_e: f64,
        alpha: f64,
        speed: f64,
    ) -> PushOutcome {
        let half = self.half_extent;
        let mu = state[IMU].max(self.friction_floor);
        let c = self.limit_ratio(state[IDIST]);
        let c2 = c * c;

        let (p_b, n_b, t_b) = contact_frame(e, u_e, half);
        let cf_b = Vector2::new(state[ICFX], state[ICFY]);
        let r = p_b - cf_b;
        let r_perp = Vector2::new(-r.y, r.x);
        let d_b = rot(alpha) * n_b;
        let cone = mu.atan();

        // Degenerate sliding: no force the cone admits can move the box,
        // so the finger skims the full tangential motion across the face.
        let skim = |force: Vector2<f64>| {
            let slip = t_b.dot(&(d_b * speed));
            PushOutcome {
                next_state: state.clone(),
                contact_after: (u_e + slip * self.dt / (2.0 * half)).clamp(0.0, 1.0),
                slipped: true,
                rotation_delta: 0.0,
                cf_speed: 0.0,
                force_body: force,
                torque: 0.0,
            }
        };

        let (g, omega, du, slipped) = if alpha.abs() <= cone {
            // Sticking: the contact point tracks the finger. Solve
            // (I + r_perp r_perp' / c^2) g = speed * d_b.
            let m11 = 1.0 + r.y * r.y / c2;
            let m12 = -r.x * r.y / c2;
            let m22 = 1.0 + r.x * r.x / c2;
            let det = m11 * m22 - m12 * m12;
            let rhs = d_b * speed;
            let g = Vector2::new(
                (m22 * rhs.x - m12 * rhs.y) / det,
                (-m12 * rhs.x + m11 * rhs.y) / det,
            );
            let omega = (r.x * g.y - r.y * g.x) / c2;
            (g, omega, 0.0, false)
        } else {
            // Sliding: the force sits on the cone edge on the side of the
            // push; the finger's normal velocity sets the twist magnitude.
            let d_f = rot(alpha.signum() * cone) * n_b;
            let m_f = r.x * d_f.y - r.y * d_f.x;
            let v_dir = d_f + r_perp * (m_f / c2);
            let denom = n_b.dot(&v_dir);
            if denom <= 1e-9 {
                return skim(d_f);
            }
            let kappa = speed * n_b.dot(&d_b) / denom;
            if kappa <= 0.0 {
                return skim(d_f);
            }
            let g = d_f * kappa;
            let omega = kappa * m_f / c2;
            let v_contact = g + r_perp * omega;
            let slip = t_b.dot(&(d_b * speed - v_contact));
            (g, omega, slip * self.dt / (2.0 * half), true)
        };

        // Rigid motion: rotate about the CF while the CF translates.
        let dw = omega * self.dt;
        let r_w = rot(state[IW]);
        let center = Vector2::new(state[IX], state[IY]);
        let cf_w = center + r_w * cf_b;
        let cf_w_new = cf_w + r_w * g * self.dt;
        let center_new = cf_w_new + rot(dw) * (center - cf_w);

        let mut next = state.clone();
        next[IX] = center_new.x;
        next[IY] = center_new.y;
        next[IW] = state[IW] + dw;
        PushOutcome {
            next_state: next,
            contact_after: (u_e + du).clamp(0.0, 1.0),
            slipped,
            rotation_delta: dw,
            cf_speed: g.norm(),
            force_body: g,
            torque: r.x * g.y - r.y * g.x,
        }
    }

    /// Execution-time push: the commanded contact point and angle are
    /// expressed in the believed pose; they are re-projected onto the true
    /// box. A projection falling off the commanded edge misses the box,
    /// which then does not move.
    pub fn execute(
        &self,
        true_state: &DVector<f64>,
        belief_mean: &DVector<f64>,
        e: usize,
        u_e: f64,
        alpha: f64,
        speed: f64,
    ) -> DVector<f64> {
        let half = self.half_extent;
        let (p_b, _, _) = contact_frame(e, u_e, half);
        let believed_rot = rot(belief_mean[IW]);
        let finger_w = Vector2::new(belief_mean[IX], belief_mean[IY]) + believed_rot * p_b;

        let q_b = rot(-true_state[IW])
            * (finger_w - Vector2::new(true_state[IX], true_state[IY]));
        let span = 2.0 * half;
        let u_true = match e % 4 {
            0 => (q_b.x + half) / span,
            1 => (q_b.y + half) / span,
            2 => (half - q_b.x) / span,
            _ => (half - q_b.y) / span,
        };
        if !(0.0..=1.0).contains(&u_true) {
            return true_state.clone();
        }
        let alpha_eff = alpha + (belief_mean[IW] - true_state[IW]);
        self.push(true_state, e, u_true, alpha_eff, speed).next_state
    }

    pub fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[IX], x[IY], x[IW]])
    }

    pub fn obs_noise(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(vec![
            self.obs_sd_pos * self.obs_sd_pos,
            self.obs_sd_pos * self.obs_sd_pos,
            self.obs_sd_rot * self.obs_sd_rot,
        ]))
    }

    pub fn process_noise(&self) -> DMatrix<f64> {
        let mut d = DVector::zeros(STATE_DIM);
        d[IX] = self.process_sd_pos * self.process_sd_pos;
        d[IY] = self.process_sd_pos * self.process_sd_pos;
        d[IW] = self.process_sd_rot * self.process_sd_rot;
        DMatrix::from_diagonal(&d)
    }

    /// Stage cost: distance shaping, control effort, a soft obstacle term
    /// and the rotation-variance-scaled corner penalty that keeps the
    /// contact away from edge ends when the pose is uncertain.
    pub fn running_cost(&self, x: &DVector<f64>, u_e: f64, alpha: f64, speed: f64, cov: &DMatrix<f64>) -> f64 {
        let sigma_w2 = cov[(IW, IW)];
        let dist = 0.01
            * (pseudo_huber(x[IX], self.running_pos_kappa).0
                + pseudo_huber(x[IY], self.running_pos_kappa).0);
        let effort = 1e-6 * (alpha * alpha + speed * speed);
        let dx = self.obstacle.0 - x[IX];
        let dy = self.obstacle.1 - x[IY];
        let obstacle = -0.1 * log_normal_cdf(dx * dx + dy * dy - 0.5 * 2.0f64.sqrt());
        let reach = (3.0 * sigma_w2).min(0.5 * PI).cos();
        let corner = 0.1 * (10.0 * (u_e - reach)).exp() + 0.1 * (10.0 * (1.0 - reach - u_e)).exp();
        dist + effort + obstacle + corner
    }

    /// Terminal cost: pose error plus the sum of all state variances.
    pub fn final_cost(&self, x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let k = self.huber_kappa;
        20.0 * (pseudo_huber(x[IX], k).0 + pseudo_huber(x[IY], k).0)
            + 2.0 * pseudo_huber(x[IW], k).0
            + cov.diagonal().sum()
    }

    /// Corner-penalty value alone (used by evaluation checks).
    pub fn corner_term(&self, u_e: f64, sigma_w2: f64) -> f64 {
        let reach = (3.0 * sigma_w2).min(0.5 * PI).cos();
        0.1 * (10.0 * (u_e - reach)).exp() + 0.1 * (10.0 * (1.0 - reach - u_e)).exp()
    }

    pub fn make_state(
        &self,
        cf_box_coords: (f64, f64),
        mu_c: f64,
        dist_c: f64,
    ) -> DVector<f64> {
        DVector::from_vec(vec![
            self.initial_center.0,
            self.initial_center.1,
            self.initial_rotation,
            (cf_box_coords.0 - 0.5) * 2.0 * self.half_extent,
            (cf_box_coords.1 - 0.5) * 2.0 * self.half_extent,
            mu_c,
            dist_c,
        ])
    }

    fn continuous_bounds(&self) -> ControlBounds {
        ControlBounds {
            lower: DVector::from_vec(vec![0.0, -self.alpha_limit, self.speed_min]),
            upper: DVector::from_vec(vec![1.0, self.alpha_limit, self.speed_max]),
        }
    }
}

/// Log of the standard normal CDF, stable for large negative arguments.
pub fn log_normal_cdf(z: f64) -> f64 {
    if z > -8.0 {
        (0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)).ln()
    } else {
        let z2 = z * z;
        -0.5 * z2 - (-z).ln() - 0.5 * (2.0 * PI).ln() + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2)).ln()
    }
}

/// Hybrid problem: the discrete action picks the edge to push.
#[derive(Debug, Clone, Default)]
pub struct BoxProblem {
    pub params: BoxParams,
}

impl HybridProblem for BoxProblem {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }
    fn continuous_dim(&self) -> usize {
        3
    }
    fn num_actions(&self) -> usize {
        4
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, action: usize) -> DVector<f64> {
        self.params.push(x, action, u[0], u[1], u[2]).next_state
    }
    fn process_noise(&self, _: &DVector<f64>, _: &DVector<f64>, _: usize) -> DMatrix<f64> {
        self.params.process_noise()
    }
    fn obs_dim(&self) -> usize {
        3
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        self.params.observe(x)
    }
    fn obs_noise(&self, _: &DVector<f64>) -> DMatrix<f64> {
        self.params.obs_noise()
    }
    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>, _: usize, cov: &DMatrix<f64>) -> f64 {
        self.params.running_cost(x, u[0], u[1], u[2], cov)
    }
    fn final_cost(&self, x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        self.params.final_cost(x, cov)
    }
    fn continuous_bounds(&self) -> ControlBounds {
        self.params.continuous_bounds()
    }
}

/// Continuous-only view: edge and contact point are folded into one
/// perimeter coordinate `q` in `[0, 4]`, as used by the purely continuous
/// baseline. Corners are where the parameterization (and the dynamics)
/// are discontinuous.
#[derive(Debug, Clone, Default)]
pub struct BoxContinuous {
    pub params: BoxParams,
}

impl BoxContinuous {
    fn control_bounds(&self) -> ControlBounds {
        ControlBounds {
            lower: DVector::from_vec(vec![0.0, -self.params.alpha_limit, self.params.speed_min]),
            upper: DVector::from_vec(vec![4.0, self.params.alpha_limit, self.params.speed_max]),
        }
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (e, ue) = perimeter_split(u[0]);
        self.params.push(x, e, ue, u[1], u[2]).next_state
    }

    fn stage(&self, x: &DVector<f64>, u: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let (_, ue) = perimeter_split(u[0]);
        self.params.running_cost(x, ue, u[1], u[2], cov)
    }
}

impl ControlProblem for BoxContinuous {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }
    fn control_dim(&self) -> usize {
        3
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.step(x, u)
    }
    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.stage(x, u, &DMatrix::zeros(STATE_DIM, STATE_DIM))
    }
    fn final_cost(&self, x: &DVector<f64>) -> f64 {
        self.params.final_cost(x, &DMatrix::zeros(STATE_DIM, STATE_DIM))
    }
    fn bounds(&self) -> ControlBounds {
        self.control_bounds()
    }
}

impl BeliefProblem for BoxContinuous {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }
    fn control_dim(&self) -> usize {
        3
    }
    fn mean_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.step(x, u)
    }
    fn process_noise(&self, _: &DVector<f64>, _: &DVector<f64>) -> DMatrix<f64> {
        self.params.process_noise()
    }
    fn obs_dim(&self) -> usize {
        3
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        self.params.observe(x)
    }
    fn obs_noise(&self, _: &DVector<f64>) -> DMatrix<f64> {
        self.params.obs_noise()
    }
    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        self.stage(x, u, cov)
    }
    fn final_cost(&self, x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        self.params.final_cost(x, cov)
    }
    fn bounds(&self) -> ControlBounds {
        self.control_bounds()
    }
}
