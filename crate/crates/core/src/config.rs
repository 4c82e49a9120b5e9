//! JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention_flow::LeffaConfig;
use crate::error::{Error, Result};
use crate::model::{DualBranchModel, ModelConfig};
use crate::synthdata::{Dataset, TaskKind, TaskParams};
use crate::trainer::{
    evaluate, probe_set, train, EvalConfig, EvalReport, Stage, StagePlan, TrainConfig, TrainOutcome, TrainSetup,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub task_kind: TaskKind,
    /// `[H, W]` resolutions written by `gen-data`.
    pub sizes: Vec<[usize; 2]>,
    pub count: usize,
    pub seed: u64,
    pub grid_n: usize,
    pub period: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { task_kind: TaskKind::PatchPermutation, sizes: vec![[32, 32], [64, 48]], count: 64, seed: 0, grid_n: 4, period: 4 }
    }
}

impl DataConfig {
    pub fn task(&self) -> TaskParams {
        TaskParams { kind: self.task_kind, grid_n: self.grid_n, period: self.period }
    }

    pub fn generate(&self, h: usize, w: usize) -> Result<Dataset> {
        Dataset::generate(&self.task(), self.seed, self.count, h, w)
    }

    fn size_violation(&self, what: &str, h: usize, w: usize) -> Option<String> {
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Some(format!("{what}: {h}×{w} must be a positive multiple of 4"));
        }
        if self.task_kind == TaskKind::PatchPermutation && self.grid_n > 0 && (h % self.grid_n != 0 || w % self.grid_n != 0) {
            return Some(format!("{what}: {h}×{w} is not divisible by data.grid_n = {}", self.grid_n));
        }
        if self.task_kind == TaskKind::TryonFill && (h < 8 || w < 8) {
            return Some(format!("{what}: tryon_fill needs at least 8×8"));
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub leffa: LeffaConfig,
    pub stages: Vec<Stage>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: String,
    /// Parameter initialization and batch sampling.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stage = |h, w, steps, batch_size, leffa_enabled| Stage {
            height: h,
            width: w,
            steps,
            batch_size,
            leffa_enabled,
            learning_rate: 1e-3,
        };
        let mut leffa = LeffaConfig::default();
        leffa.register_count = ModelConfig::default().registers;
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            leffa,
            stages: vec![stage(32, 32, 1000, 4, false), stage(64, 48, 500, 2, true)],
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: "runs/leffa".into(),
            seed: 0,
        }
    }
}

/// Everything a finished training run produces.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub model: DualBranchModel,
    pub outcome: TrainOutcome,
    /// Held-out probe evaluation at the final stage resolution.
    pub report: Option<EvalReport>,
}

impl RunConfig {
    /// Parses JSON; unknown keys and type errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Copies values that live in one section but are used by another.
    pub fn resolved(mut self) -> Self {
        self.leffa.register_count = self.model.registers;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn plan(&self) -> StagePlan {
        StagePlan { stages: self.stages.clone(), allow_early_leffa: self.train.allow_early_leffa }
    }

    /// Every problem in the configuration, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let d = &self.data;
        if d.count == 0 {
            v.push("data.count must be > 0".into());
        }
        if d.sizes.is_empty() {
            v.push("data.sizes must list at least one [H, W]".into());
        }
        if d.task_kind == TaskKind::PatchPermutation && d.grid_n == 0 {
            v.push("data.grid_n must be > 0".into());
        }
        if d.task_kind == TaskKind::Stripes && d.period < 2 {
            v.push(format!("data.period must be >= 2, got {}", d.period));
        }
        for (i, s) in d.sizes.iter().enumerate() {
            v.extend(d.size_violation(&format!("data.sizes[{i}]"), s[0], s[1]));
        }
        for (i, s) in self.stages.iter().enumerate() {
            v.extend(d.size_violation(&format!("stages[{i}]"), s.height, s.width));
        }
        v.extend(self.model.violations());
        v.extend(self.leffa.violations());
        v.extend(self.plan().violations().into_iter().filter(|m| !m.contains("multiple of 4")));
        v.extend(self.train.optimizer.violations());
        let e = &self.eval;
        if e.probe_count == 0 {
            v.push("eval.probe_count must be > 0".into());
        }
        if e.probe_t >= crate::diffusion::DiffusionSchedule::default().steps() {
            v.push(format!("eval.probe_t must be < 1000, got {}", e.probe_t));
        }
        let (a0, a1) = (d.seed as u128, d.seed as u128 + d.count as u128);
        let (b0, b1) = (e.probe_seed as u128, e.probe_seed as u128 + e.probe_count as u128);
        if a0 < b1 && b0 < a1 {
            v.push(format!(
                "eval.probe_seed range [{b0}, {b1}) overlaps the training seeds [{a0}, {a1})"
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn build_model(&self) -> Result<DualBranchModel> {
        DualBranchModel::new(self.model.clone(), self.data.task_kind.aux_channels(), &self.resolved_leffa())
    }

    fn resolved_leffa(&self) -> LeffaConfig {
        LeffaConfig { register_count: self.model.registers, ..self.leffa.clone() }
    }

    /// Initializes, trains on `data` and evaluates on the probe set.
    pub fn run(&self, data: &Dataset) -> Result<RunResult> {
        self.validate()?;
        let model = self.build_model()?;
        let leffa = self.resolved_leffa();
        let plan = self.plan();
        let setup = TrainSetup { model: &model, leffa: &leffa, plan: &plan, train: &self.train, eval: &self.eval, seed: self.seed };
        let outcome = train(&setup, model.init_params(self.seed), data)?;
        let report = if outcome.halted.is_none() {
            let last = plan.stages.last().expect("validated");
            let probe = probe_set(data, &self.eval, last.height, last.width)?;
            Some(evaluate(&model, &outcome.params, &leffa, &probe, &self.eval)?)
        } else {
            None
        };
        Ok(RunResult { model, outcome, report })
    }
}
