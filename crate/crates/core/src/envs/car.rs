//! Gear-switching nonholonomic car.
//!
//! Kinematic bicycle integrated with an Euler step. The discrete action
//! selects braking, 1st or 2nd gear: 2nd gear halves the commanded
//! acceleration, braking negates it, and soft velocity limits replace the
//! commanded acceleration with engine braking (`-0.1`) when the gear's top
//! speed is exceeded. High speed therefore requires shifting up, and
//! stopping requires the brake, which is what makes the discrete schedule
//! nontrivial.

use nalgebra::{DMatrix, DVector};

use crate::hybrid::pseudo_huber;
use crate::problem::{ControlBounds, ControlProblem, HybridProblem};

pub const ACTION_BRAKE: usize = 0;
pub const ACTION_GEAR1: usize = 1;
pub const ACTION_GEAR2: usize = 2;

#[derive(Debug, Clone)]
pub struct CarParams {
    pub dt: f64,
    pub wheelbase: f64,
    pub initial_state: [f64; 4],
    /// Weight on `w_wheel^2 + acc^2` per step.
    pub control_weight: f64,
    pub final_pos_weight: f64,
    pub final_heading_weight: f64,
    pub final_vel_weight: f64,
    pub huber_kappa: f64,
    /// 1st gear soft velocity limit.
    pub gear1_limit: f64,
    /// 2nd gear / brake soft velocity limit.
    pub high_limit: f64,
    /// Acceleration applied above the soft limit.
    pub engine_brake: f64,
}

impl Default for CarParams {
    fn default() -> Self {
        Self {
            dt: 0.03,
            wheelbase: 2.0,
            initial_state: [-18.0, -8.0, 0.0, 0.0],
            control_weight: 1e-3,
            final_pos_weight: 20.0,
            final_heading_weight: 2.0,
            final_vel_weight: 1.0,
            huber_kappa: 0.01,
            gear1_limit: 1.0,
            high_limit: 4.0,
            engine_brake: -0.1,
        }
    }
}

impl CarParams {
    pub fn initial_state_vector(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.initial_state)
    }

    /// Effective acceleration after gear scaling and soft limits.
    pub fn effective_acceleration(&self, v: f64, acc: f64, action: usize) -> f64 {
        let over_limit = match action {
            ACTION_GEAR1 => v > self.gear1_limit,
            _ => v > self.high_limit,
        };
        if over_limit {
            return self.engine_brake;
        }
        match action {
            ACTION_BRAKE => -acc,
            ACTION_GEAR1 => acc,
            ACTION_GEAR2 => 0.5 * acc,
            _ => unreachable!("car has three actions"),
        }
    }

    /// One Euler step of the kinematic bicycle.
    pub fn step(&self, state: &DVector<f64>, wheel: f64, acc: f64, action: usize) -> DVector<f64> {
        let (x, y, w, v) = (state[0], state[1], state[2], state[3]);
        let eff = self.effective_acceleration(v, acc, action);
        DVector::from_vec(vec![
            x + self.dt * v * w.cos(),
            y + self.dt * v * w.sin(),
            w + self.dt * v * wheel.tan() / self.wheelbase,
            v + self.dt * eff,
        ])
    }

    fn final_cost(&self, x: &DVector<f64>) -> f64 {
        let k = self.huber_kappa;
        self.final_pos_weight * (pseudo_huber(x[0], k).0 + pseudo_huber(x[1], k).0)
            + self.final_heading_weight * pseudo_huber(x[2], k).0
            + self.final_vel_weight * pseudo_huber(x[3], k).0
    }
}

/// Hybrid car problem: continuous `(w_wheel, acc)` plus the gear choice.
#[derive(Debug, Clone, Default)]
pub struct CarProblem {
    pub params: CarParams,
}

impl HybridProblem for CarProblem {
    fn state_dim(&self) -> usize {
        4
    }
    fn continuous_dim(&self) -> usize {
        2
    }
    fn num_actions(&self) -> usize {
        3
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, action: usize) -> DVector<f64> {
        self.params.step(x, u[0], u[1], action)
    }
    fn process_noise(&self, _: &DVector<f64>, _: &DVector<f64>, _: usize) -> DMatrix<f64> {
        DMatrix::zeros(4, 4)
    }
    fn obs_dim(&self) -> usize {
        4
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn obs_noise(&self, _: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(4, 4) * 1e-8
    }
    fn running_cost(&self, _: &DVector<f64>, u: &DVector<f64>, _: usize, _: &DMatrix<f64>) -> f64 {
        self.params.control_weight * (u[0] * u[0] + u[1] * u[1])
    }
    fn final_cost(&self, x: &DVector<f64>, _: &DMatrix<f64>) -> f64 {
        self.params.final_cost(x)
    }
    fn continuous_bounds(&self) -> ControlBounds {
        ControlBounds {
            lower: DVector::from_vec(vec![-0.5, 0.0]),
            upper: DVector::from_vec(vec![0.5, 0.5]),
        }
    }
}

/// Continuous-only view for the baseline: the gear becomes a third control
/// coordinate in `[0, 2]` that is rounded to the nearest action inside the
/// dynamics. The rounding plateaus give the optimizer no gradient through
/// the gear coordinate, mirroring how discontinuous the underlying choice
/// is; the coordinate carries no control cost.
#[derive(Debug, Clone, Default)]
pub struct CarContinuous {
    pub params: CarParams,
}

impl CarContinuous {
    pub fn gear_of(&self, coord: f64) -> usize {
        (coord.round().max(0.0) as usize).min(2)
    }
}

impl ControlProblem for CarContinuous {
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        3
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.params.step(x, u[0], u[1], self.gear_of(u[2]))
    }
    fn running_cost(&self, _: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.params.control_weight * (u[0] * u[0] + u[1] * u[1])
    }
    fn final_cost(&self, x: &DVector<f64>) -> f64 {
        self.params.final_cost(x)
    }
    fn bounds(&self) -> ControlBounds {
        ControlBounds {
            lower: DVector::from_vec(vec![-0.5, 0.0, 0.0]),
            upper: DVector::from_vec(vec![0.5, 0.5, 2.0]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn soft_limit_overrides_second_gear() {
        let p = CarParams::default();
        // v = 4.5 in 2nd gear: engine braking regardless of the command.
        assert_eq!(p.effective_acceleration(4.5, 0.0, ACTION_GEAR2), -0.1);
        assert_eq!(p.effective_acceleration(4.5, 0.5, ACTION_GEAR2), -0.1);
        assert_eq!(p.effective_acceleration(4.5, 0.3, ACTION_BRAKE), -0.1);
        // 1st gear hits its limit much earlier.
        assert_eq!(p.effective_acceleration(1.2, 0.5, ACTION_GEAR1), -0.1);
    }

    #[test]
    fn second_gear_halves_acceleration() {
        let p = CarParams::default();
        assert_abs_diff_eq!(p.effective_acceleration(0.0, 0.4, ACTION_GEAR2), 0.2);
        assert_abs_diff_eq!(p.effective_acceleration(0.0, 0.4, ACTION_GEAR1), 0.4);
        assert_abs_diff_eq!(p.effective_acceleration(0.0, 0.4, ACTION_BRAKE), -0.4);
    }

    #[test]
    fn zero_velocity_keeps_pose() {
        let p = CarParams::default();
        let s = DVector::from_vec(vec![1.0, 2.0, 0.7, 0.0]);
        for action in [ACTION_BRAKE, ACTION_GEAR1, ACTION_GEAR2] {
            let next = p.step(&s, 0.3, 0.0, action);
            assert_abs_diff_eq!(next[0], 1.0);
            assert_abs_diff_eq!(next[1], 2.0);
            assert_abs_diff_eq!(next[2], 0.7);
        }
    }

    #[test]
    fn dynamics_stay_finite_at_bounds() {
        let p = CarParams::default();
        let mut s = p.initial_state_vector();
        for t in 0..500 {
            let action = t % 3;
            s = p.step(&s, 0.5, 0.5, action);
            assert!(s.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn gear_rounding_covers_all_actions() {
        let c = CarContinuous::default();
        assert_eq!(c.gear_of(0.0), 0);
        assert_eq!(c.gear_of(0.4), 0);
        assert_eq!(c.gear_of(0.6), 1);
        assert_eq!(c.gear_of(1.49), 1);
        assert_eq!(c.gear_of(1.51), 2);
        assert_eq!(c.gear_of(2.0), 2);
    }

    #[test]
    fn final_cost_is_zero_at_goal() {
        let car = CarProblem::default();
        let zero_cov = DMatrix::zeros(4, 4);
        assert_eq!(
            HybridProblem::final_cost(&car, &DVector::zeros(4), &zero_cov),
            0.0
        );
    }
}
