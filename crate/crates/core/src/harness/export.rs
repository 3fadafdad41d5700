//! Plot-ready CSV exports.
//!
//! A trajectory file has one row per timestep plus a final state row with
//! empty control cells: `t`, the state components, the belief covariance
//! diagonal (belief runs only), the continuous controls, the action
//! probabilities, the chosen action, and the stage cost (final cost on the
//! last row). Floats are written in shortest round-trip form so a parsed
//! file reproduces the record bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryExport {
    pub state_names: Vec<String>,
    /// Empty for fully observed runs.
    pub cov_names: Vec<String>,
    pub control_names: Vec<String>,
    pub prob_names: Vec<String>,
    /// `T + 1` rows.
    pub states: Vec<Vec<f64>>,
    pub cov_diagonals: Vec<Vec<f64>>,
    /// `T` rows each.
    pub controls: Vec<Vec<f64>>,
    pub probabilities: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub stage_costs: Vec<f64>,
    pub final_cost: f64,
}

impl TrajectoryExport {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend(self.state_names.iter().cloned());
        cols.extend(self.cov_names.iter().cloned());
        cols.extend(self.control_names.iter().cloned());
        cols.extend(self.prob_names.iter().cloned());
        cols.push("action".into());
        cols.push("cost".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header());
        out.push('\n');
        let horizon = self.horizon();
        for t in 0..=horizon {
            let mut row: Vec<String> = vec![t.to_string()];
            for v in &self.states[t] {
                row.push(format!("{v}"));
            }
            if !self.cov_names.is_empty() {
                for v in &self.cov_diagonals[t] {
                    row.push(format!("{v}"));
                }
            }
            if t < horizon {
                for v in &self.controls[t] {
                    row.push(format!("{v}"));
                }
                for v in &self.probabilities[t] {
                    row.push(format!("{v}"));
                }
                row.push(self.actions[t].to_string());
                row.push(format!("{}", self.stage_costs[t]));
            } else {
                // Final state row: control cells stay empty.
                let blanks = self.control_names.len() + self.prob_names.len() + 1;
                row.extend(std::iter::repeat_n(String::new(), blanks));
                row.push(format!("{}", self.final_cost));
            }
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parse a file produced by [`TrajectoryExport::write`]. Column roles
    /// are recovered from the supplied layout (names must match).
    pub fn parse(
        text: &str,
        n_states: usize,
        n_cov: usize,
        n_controls: usize,
        n_probs: usize,
    ) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty trajectory file".into()))?;
        let names: Vec<&str> = header.split(',').collect();
        let expected = 1 + n_states + n_cov + n_controls + n_probs + 2;
        if names.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} columns, found {}",
                names.len()
            )));
        }
        let mut take = 1;
        let grab = |take: &mut usize, n: usize| {
            let out: Vec<String> = names[*take..*take + n].iter().map(|s| s.to_string()).collect();
            *take += n;
            out
        };
        let state_names = grab(&mut take, n_states);
        let cov_names = grab(&mut take, n_cov);
        let control_names = grab(&mut take, n_controls);
        let prob_names = grab(&mut take, n_probs);

        let mut states = Vec::new();
        let mut cov_diagonals = Vec::new();
        let mut controls = Vec::new();
        let mut probabilities = Vec::new();
        let mut actions = Vec::new();
        let mut stage_costs = Vec::new();
        let mut final_cost = 0.0;

        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad float '{s}'")))
        };

        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != expected {
                return Err(Error::InvalidArgument("ragged trajectory row".into()));
            }
            let mut i = 1;
            let mut state = Vec::with_capacity(n_states);
            for _ in 0..n_states {
                state.push(parse_f(cells[i])?);
                i += 1;
            }
            states.push(state);
            let mut cov = Vec::with_capacity(n_cov);
            for _ in 0..n_cov {
                cov.push(parse_f(cells[i])?);
                i += 1;
            }
            cov_diagonals.push(cov);
            let is_final = cells[i].is_empty();
            if is_final {
                final_cost = parse_f(cells[expected - 1])?;
            } else {
                let mut u = Vec::with_capacity(n_controls);
                for _ in 0..n_controls {
                    u.push(parse_f(cells[i])?);
                    i += 1;
                }
                controls.push(u);
                let mut p = Vec::with_capacity(n_probs);
                for _ in 0..n_probs {
                    p.push(parse_f(cells[i])?);
                    i += 1;
                }
                probabilities.push(p);
                actions.push(cells[i].parse().map_err(|_| {
                    Error::InvalidArgument(format!("bad action '{}'", cells[i]))
                })?);
                stage_costs.push(parse_f(cells[i + 1])?);
            }
        }

        Ok(Self {
            state_names,
            cov_names,
            control_names,
            prob_names,
            states,
            cov_diagonals,
            controls,
            probabilities,
            actions,
            stage_costs,
            final_cost,
        })
    }
}

/// Iteration log CSV: `iteration,total_cost,alpha,regularization,c_st`.
pub fn iteration_log_csv(log: &[crate::ddp::IterationRecord]) -> String {
    let mut out = String::from("iteration,total_cost,alpha,regularization,c_st\n");
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration, r.total_cost, r.alpha, r.regularization, r.cst
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrajectoryExport {
        TrajectoryExport {
            state_names: vec!["x".into(), "v".into()],
            cov_names: vec![],
            control_names: vec!["u".into()],
            prob_names: vec!["p0".into(), "p1".into()],
            states: vec![
                vec![0.1, -0.25],
                vec![0.30000000000000004, 1.0 / 3.0],
                vec![f64::MIN_POSITIVE, 2e300],
            ],
            cov_diagonals: vec![vec![], vec![], vec![]],
            controls: vec![vec![0.5], vec![-1.5e-7]],
            probabilities: vec![vec![0.9, 0.1], vec![0.25, 0.75]],
            actions: vec![0, 1],
            stage_costs: vec![1.25, 0.007],
            final_cost: 3.5,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let e = sample();
        let text = e.to_csv();
        let parsed = TrajectoryExport::parse(&text, 2, 0, 1, 2).unwrap();
        assert_eq!(parsed, e);
    }

    #[test]
    fn row_count_is_horizon_plus_one() {
        let e = sample();
        let text = e.to_csv();
        // header + T + 1 data rows
        assert_eq!(text.lines().count(), 1 + e.horizon() + 1);
        // Final row has empty control cells.
        let last = text.lines().last().unwrap();
        assert!(last.contains(",,"));
    }

    #[test]
    fn header_layout() {
        let e = sample();
        assert_eq!(e.header(), "t,x,v,u,p0,p1,action,cost");
    }
}
