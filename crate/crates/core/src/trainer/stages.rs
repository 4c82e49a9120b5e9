//! Progressive training plan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub leffa_enabled: bool,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

fn default_lr() -> f64 {
    1e-3
}

/// Ordered stages; parameters carry over from one to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
    /// Permit the flow loss before the final stage.
    pub allow_early_leffa: bool,
}

impl StagePlan {
    pub fn new(stages: Vec<Stage>, allow_early_leffa: bool) -> Result<Self> {
        let plan = Self { stages, allow_early_leffa };
        let v = plan.violations();
        if v.is_empty() {
            Ok(plan)
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.stages.is_empty() {
            v.push("empty stage plan".to_string());
            return v;
        }
        let last = self.stages.len() - 1;
        for (i, s) in self.stages.iter().enumerate() {
            if s.height == 0 || s.width == 0 || s.height % 4 != 0 || s.width % 4 != 0 {
                v.push(format!("stages[{i}]: resolution {}×{} must be a positive multiple of 4", s.height, s.width));
            }
            if s.batch_size == 0 {
                v.push(format!("stages[{i}].batch_size must be > 0"));
            }
            if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                v.push(format!("stages[{i}].learning_rate must be > 0, got {}", s.learning_rate));
            }
            if s.leffa_enabled && i != last && !self.allow_early_leffa {
                v.push(format!("stages[{i}]: leffa_enabled is only allowed in the final stage"));
            }
            if i > 0 {
                let p = &self.stages[i - 1];
                if s.height < p.height || s.width < p.width {
                    v.push(format!(
                        "stages[{i}]: resolution {}×{} decreases from {}×{}",
                        s.height, s.width, p.height, p.width
                    ));
                }
            }
        }
        v
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(h: usize, w: usize, leffa: bool) -> Stage {
        Stage { height: h, width: w, steps: 10, batch_size: 2, leffa_enabled: leffa, learning_rate: 1e-3 }
    }

    #[test]
    fn accepts_progressive_plan() {
        let p = StagePlan::new(vec![stage(32, 32, false), stage(64, 48, true)], false).unwrap();
        assert_eq!(p.total_steps(), 20);
    }

    #[test]
    fn reports_every_violation() {
        let mut bad = stage(30, 32, true);
        bad.batch_size = 0;
        let p = StagePlan { stages: vec![bad, stage(16, 16, false)], allow_early_leffa: false };
        let v = p.violations();
        assert_eq!(v.len(), 4, "{v:?}");
        assert_eq!(StagePlan { stages: vec![], allow_early_leffa: false }.violations(), vec!["empty stage plan"]);
    }

    #[test]
    fn early_leffa_can_be_allowed() {
        assert!(StagePlan::new(vec![stage(32, 32, true), stage(32, 32, false)], true).is_ok());
        assert!(StagePlan::new(vec![stage(32, 32, true), stage(32, 32, false)], false).is_err());
    }
}
