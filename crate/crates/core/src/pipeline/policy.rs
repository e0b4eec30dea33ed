use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Scenario};
use crate::model::Tick;

/// What the horizon agent sees at a decision point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    /// Latest operator pose, position min-max normalized to `[-1, 1]`.
    pub pose: [f64; 7],
    pub aol: Tick,
    pub tick: Tick,
    /// The raw position lay outside the workspace and was clamped.
    pub clamped: bool,
}

/// Prediction horizons, in ticks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvAction {
    pub h_r: Tick,
    pub h_c: Tick,
}

impl EnvAction {
    pub fn new(h_r: Tick, h_c: Tick) -> Self {
        Self { h_r, h_c }
    }

    pub fn same(h: Tick) -> Self {
        Self { h_r: h, h_c: h }
    }
}

/// Chooses the horizons for the next decision interval.
pub trait HorizonPolicy: Send {
    fn decide(&mut self, state: &EnvState) -> EnvAction;

    fn label(&self) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl HorizonPolicy for ZeroPolicy {
    fn decide(&mut self, _: &EnvState) -> EnvAction {
        EnvAction::default()
    }

    fn label(&self) -> String {
        "zero".into()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedPolicy(pub EnvAction);

impl HorizonPolicy for FixedPolicy {
    fn decide(&mut self, _: &EnvState) -> EnvAction {
        self.0
    }

    fn label(&self) -> String {
        let EnvAction { h_r, h_c } = self.0;
        if h_r == h_c {
            format!("fixed:{h_r}")
        } else {
            format!("fixed:{h_r},{h_c}")
        }
    }
}

/// Sets each horizon to the expected latency of its path, measured from
/// the sampling tick.
#[derive(Debug, Clone, Copy)]
pub struct OraclePolicy(pub EnvAction);

impl OraclePolicy {
    pub fn for_scenario(s: &Scenario) -> Self {
        let b = &s.stages;
        let q = b.t_q as f64;
        let h_r = (q + b.expected_render_ms()).round() as Tick;
        let h_c = (q + b.expected_control_ms()).round() as Tick;
        Self(EnvAction {
            h_r: h_r.min(s.horizons.h_r_max),
            h_c: h_c.min(s.horizons.h_c_max),
        })
    }
}

impl HorizonPolicy for OraclePolicy {
    fn decide(&mut self, _: &EnvState) -> EnvAction {
        self.0
    }

    fn label(&self) -> String {
        "oracle".into()
    }
}

/// Textual policy selector: `zero`, `fixed:H`, `fixed:HR,HC`, `oracle`, or
/// a checkpoint path (optionally prefixed `checkpoint:`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum PolicySpec {
    Zero,
    Fixed(EnvAction),
    Oracle,
    Checkpoint(PathBuf),
}

impl FromStr for PolicySpec {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PipelineError::Validation(format!("unrecognized policy `{s}`"));
        match s {
            "zero" | "zero-horizon" => return Ok(PolicySpec::Zero),
            "oracle" => return Ok(PolicySpec::Oracle),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("fixed:") {
            let parts: Vec<&str> = rest.split(',').collect();
            let parse = |p: &str| p.trim().parse::<Tick>().map_err(|_| bad());
            return match parts.as_slice() {
                [h] => Ok(PolicySpec::Fixed(EnvAction::same(parse(h)?))),
                [r, c] => Ok(PolicySpec::Fixed(EnvAction::new(parse(r)?, parse(c)?))),
                _ => Err(bad()),
            };
        }
        let path = s.strip_prefix("checkpoint:").unwrap_or(s);
        if path.is_empty() {
            return Err(bad());
        }
        Ok(PolicySpec::Checkpoint(PathBuf::from(path)))
    }
}

impl std::fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolicySpec::Zero => write!(f, "zero"),
            PolicySpec::Oracle => write!(f, "oracle"),
            PolicySpec::Fixed(a) if a.h_r == a.h_c => write!(f, "fixed:{}", a.h_r),
            PolicySpec::Fixed(a) => write!(f, "fixed:{},{}", a.h_r, a.h_c),
            PolicySpec::Checkpoint(p) => write!(f, "checkpoint:{}", p.display()),
        }
    }
}

impl From<PolicySpec> for String {
    fn from(p: PolicySpec) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for PolicySpec {
    type Error = PipelineError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_specs() {
        assert_eq!("zero".parse::<PolicySpec>().unwrap(), PolicySpec::Zero);
        assert_eq!(
            "fixed:75".parse::<PolicySpec>().unwrap(),
            PolicySpec::Fixed(EnvAction::same(75))
        );
        assert_eq!(
            "fixed:60,80".parse::<PolicySpec>().unwrap(),
            PolicySpec::Fixed(EnvAction::new(60, 80))
        );
        assert_eq!(
            "runs/a.ckpt".parse::<PolicySpec>().unwrap(),
            PolicySpec::Checkpoint("runs/a.ckpt".into())
        );
        assert!("fixed:x".parse::<PolicySpec>().is_err());
        for s in ["zero", "oracle", "fixed:5", "fixed:1,2", "checkpoint:p.ckpt"] {
            assert_eq!(s.parse::<PolicySpec>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn oracle_matches_expected_totals() {
        let mut s = Scenario::default();
        s.stages = super::super::StageBudget::shared_constant(60);
        let p = OraclePolicy::for_scenario(&s);
        assert_eq!(p.0, EnvAction::same(60));
    }
}
