//! Flat key-value configuration with command-line overrides.
//!
//! Every environment constant is a key (`car.dt`, `box.torque_ratio`, ...)
//! so experiments can vary them without recompiling; unknown keys are
//! rejected to catch typos.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::envs::{BoxParams, CarParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvironmentId {
    Car,
    Box,
    BoxPomdp,
    BoxUnknown,
    BoxAllUnknown,
}

impl EnvironmentId {
    pub const ALL: [EnvironmentId; 5] = [
        EnvironmentId::Car,
        EnvironmentId::Box,
        EnvironmentId::BoxPomdp,
        EnvironmentId::BoxUnknown,
        EnvironmentId::BoxAllUnknown,
    ];

    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            EnvironmentId::BoxPomdp | EnvironmentId::BoxUnknown | EnvironmentId::BoxAllUnknown
        )
    }

    pub fn is_box(self) -> bool {
        !matches!(self, EnvironmentId::Car)
    }

    /// Default number of friction-center samples for this environment.
    pub fn default_cf_count(self) -> usize {
        match self {
            EnvironmentId::Car => 1,
            EnvironmentId::Box => 52,
            _ => 12,
        }
    }

    /// Cost-decrease threshold used both for the annealing trigger and the
    /// final stopping tolerance.
    pub fn decrease_threshold(self) -> f64 {
        match self {
            EnvironmentId::Car => 1e-4,
            _ => 0.01,
        }
    }
}

impl fmt::Display for EnvironmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EnvironmentId::Car => "car",
            EnvironmentId::Box => "box",
            EnvironmentId::BoxPomdp => "box-pomdp",
            EnvironmentId::BoxUnknown => "box-unknown",
            EnvironmentId::BoxAllUnknown => "box-all-unknown",
        };
        f.write_str(s)
    }
}

impl FromStr for EnvironmentId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "car" => Ok(EnvironmentId::Car),
            "box" => Ok(EnvironmentId::Box),
            "box-pomdp" => Ok(EnvironmentId::BoxPomdp),
            "box-unknown" => Ok(EnvironmentId::BoxUnknown),
            "box-all-unknown" => Ok(EnvironmentId::BoxAllUnknown),
            other => Err(Error::Config(format!("unknown environment '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodId {
    Ilqg,
    Greedy,
    Interpolate,
    Mixture,
}

impl MethodId {
    pub const ALL: [MethodId; 4] = [
        MethodId::Ilqg,
        MethodId::Greedy,
        MethodId::Interpolate,
        MethodId::Mixture,
    ];
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MethodId::Ilqg => "ilqg",
            MethodId::Greedy => "greedy",
            MethodId::Interpolate => "interpolate",
            MethodId::Mixture => "mixture",
        };
        f.write_str(s)
    }
}

impl FromStr for MethodId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ilqg" => Ok(MethodId::Ilqg),
            "greedy" => Ok(MethodId::Greedy),
            "interpolate" => Ok(MethodId::Interpolate),
            "mixture" => Ok(MethodId::Mixture),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Raw key-value settings (file plus `--set` overrides).
#[derive(Debug, Clone, Default)]
pub struct Settings {
    map: BTreeMap<String, f64>,
}

const KNOWN_KEYS: &[&str] = &[
    "car.dt",
    "car.wheelbase",
    "car.initial_x",
    "car.initial_y",
    "car.initial_w",
    "car.initial_v",
    "car.control_weight",
    "car.final_pos_weight",
    "car.final_heading_weight",
    "car.final_vel_weight",
    "car.huber_kappa",
    "car.gear1_limit",
    "car.high_limit",
    "car.engine_brake",
    "box.dt",
    "box.half_extent",
    "box.torque_ratio",
    "box.obstacle_x",
    "box.obstacle_y",
    "box.initial_x",
    "box.initial_y",
    "box.initial_rotation",
    "box.process_sd_pos",
    "box.process_sd_rot",
    "box.obs_sd_pos",
    "box.obs_sd_rot",
    "box.friction_floor",
    "box.huber_kappa",
    "box.running_pos_kappa",
    "box.alpha_limit",
    "box.speed_min",
    "box.speed_max",
    "box.init_sd_pos",
    "box.init_sd_rot",
    "box.init_sd_cf",
    "box.init_sd_friction",
    "box.friction_mean",
    "cst.first",
    "cst.max",
    "solver.tol_decrease",
    "solver.reg_init",
];

impl Settings {
    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut s = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            s.set_line(line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        }
        Ok(s)
    }

    /// Accepts `key = value` (or `key=value`).
    pub fn set_line(&mut self, line: &str) -> Result<()> {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim();
        let value = value.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown configuration key '{key}'")));
        }
        let parsed: f64 = value
            .parse()
            .map_err(|_| Error::Config(format!("value for '{key}' is not a number: '{value}'")))?;
        self.map.insert(key.to_string(), parsed);
        Ok(())
    }

    pub fn get(&self, key: &str, default: f64) -> f64 {
        self.map.get(key).copied().unwrap_or(default)
    }

    pub fn car_params(&self) -> CarParams {
        let d = CarParams::default();
        CarParams {
            dt: self.get("car.dt", d.dt),
            wheelbase: self.get("car.wheelbase", d.wheelbase),
            initial_state: [
                self.get("car.initial_x", d.initial_state[0]),
                self.get("car.initial_y", d.initial_state[1]),
                self.get("car.initial_w", d.initial_state[2]),
                self.get("car.initial_v", d.initial_state[3]),
            ],
            control_weight: self.get("car.control_weight", d.control_weight),
            final_pos_weight: self.get("car.final_pos_weight", d.final_pos_weight),
            final_heading_weight: self.get("car.final_heading_weight", d.final_heading_weight),
            final_vel_weight: self.get("car.final_vel_weight", d.final_vel_weight),
            huber_kappa: self.get("car.huber_kappa", d.huber_kappa),
            gear1_limit: self.get("car.gear1_limit", d.gear1_limit),
            high_limit: self.get("car.high_limit", d.high_limit),
            engine_brake: self.get("car.engine_brake", d.engine_brake),
        }
    }

    pub fn box_params(&self) -> BoxParams {
        let d = BoxParams::default();
        BoxParams {
            dt: self.get("box.dt", d.dt),
            half_extent: self.get("box.half_extent", d.half_extent),
            torque_ratio: self.get("box.torque_ratio", d.torque_ratio),
            obstacle: (
                self.get("box.obstacle_x", d.obstacle.0),
                self.get("box.obstacle_y", d.obstacle.1),
            ),
            initial_center: (
                self.get("box.initial_x", d.initial_center.0),
                self.get("box.initial_y", d.initial_center.1),
            ),
            initial_rotation: self.get("box.initial_rotation", d.initial_rotation),
            process_sd_pos: self.get("box.process_sd_pos", d.process_sd_pos),
            process_sd_rot: self.get("box.process_sd_rot", d.process_sd_rot),
            obs_sd_pos: self.get("box.obs_sd_pos", d.obs_sd_pos),
            obs_sd_rot: self.get("box.obs_sd_rot", d.obs_sd_rot),
            friction_floor: self.get("box.friction_floor", d.friction_floor),
            huber_kappa: self.get("box.huber_kappa", d.huber_kappa),
            running_pos_kappa: self.get("box.running_pos_kappa", d.running_pos_kappa),
            alpha_limit: self.get("box.alpha_limit", d.alpha_limit),
            speed_min: self.get("box.speed_min", d.speed_min),
            speed_max: self.get("box.speed_max", d.speed_max),
        }
    }

    pub fn init_sd_pos(&self) -> f64 {
        self.get("box.init_sd_pos", 0.01)
    }
    pub fn init_sd_rot(&self) -> f64 {
        self.get("box.init_sd_rot", 0.1)
    }
    pub fn init_sd_cf(&self) -> f64 {
        self.get("box.init_sd_cf", 0.2)
    }
    pub fn init_sd_friction(&self) -> f64 {
        self.get("box.init_sd_friction", 0.2)
    }
    pub fn friction_mean(&self) -> f64 {
        self.get("box.friction_mean", 1.0)
    }
}

/// Fully resolved experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub environment: EnvironmentId,
    pub methods: Vec<MethodId>,
    pub horizon: usize,
    pub max_iterations: usize,
    pub cf_count: usize,
    pub samples_per_cf: usize,
    pub master_seed: u64,
    pub settings: Settings,
}

impl ExperimentConfig {
    pub fn new(environment: EnvironmentId, methods: Vec<MethodId>) -> Result<Self> {
        if methods.is_empty() {
            return Err(Error::InvalidArgument("empty method list".into()));
        }
        Ok(Self {
            environment,
            methods,
            horizon: 500,
            max_iterations: 400,
            cf_count: environment.default_cf_count(),
            samples_per_cf: 20,
            master_seed: 0,
            settings: Settings::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("empty method list".into()));
        }
        if self.horizon == 0 || self.max_iterations == 0 || self.cf_count == 0 {
            return Err(Error::InvalidArgument(
                "horizon, iterations and cf count must be positive".into(),
            ));
        }
        if self.environment.is_stochastic() && self.samples_per_cf == 0 {
            return Err(Error::InvalidArgument(
                "samples per CF must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn decrease_threshold(&self) -> f64 {
        self.settings
            .get("solver.tol_decrease", self.environment.decrease_threshold())
    }

    pub fn cst_first(&self) -> f64 {
        self.settings.get("cst.first", 0.01)
    }

    pub fn cst_max(&self) -> f64 {
        self.settings.get("cst.max", 1.28)
    }
}

/// Stable FNV-1a based seed derivation: independent streams per run.
pub fn derive_seed(master: u64, tags: &[&str], indices: &[u64]) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    eat(&master.to_le_bytes());
    for t in tags {
        eat(t.as_bytes());
        eat(&[0xff]);
    }
    for &i in indices {
        eat(&i.to_le_bytes());
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut s = Settings::default();
        s.set_line("car.dt = 0.15").unwrap();
        assert_eq!(s.car_params().dt, 0.15);
        assert_eq!(s.car_params().wheelbase, 2.0);
        assert!(s.set_line("car.dx = 1").is_err());
        assert!(s.set_line("car.dt 0.2").is_err());
        assert!(s.set_line("car.dt = fast").is_err());
    }

    #[test]
    fn ids_round_trip() {
        for e in EnvironmentId::ALL {
            assert_eq!(e.to_string().parse::<EnvironmentId>().unwrap(), e);
        }
        for m in MethodId::ALL {
            assert_eq!(m.to_string().parse::<MethodId>().unwrap(), m);
        }
        assert!("warp".parse::<EnvironmentId>().is_err());
    }

    #[test]
    fn empty_method_list_is_rejected() {
        assert!(ExperimentConfig::new(EnvironmentId::Car, vec![]).is_err());
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        let a = derive_seed(7, &["box", "mixture"], &[3]);
        let b = derive_seed(7, &["box", "mixture"], &[3]);
        let c = derive_seed(7, &["box", "mixture"], &[4]);
        let d = derive_seed(8, &["box", "mixture"], &[3]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
