//! Training loop: diffusion loss plus the gated flow loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate, probe_set, EvalConfig};
use super::optim::{adamw_step, AdamState, AdamWConfig};
use super::stages::StagePlan;
use crate::attention_flow::{timestep_in_scope, LeffaConfig};
use crate::diffusion::{add_noise, combined_loss_on, diffusion_loss_on, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::model::{DualBranchModel, ParamStore};
use crate::synthdata::{Dataset, SyntheticSample};
use crate::tensor::{Tape, Tensor, Var};
use crate::warp::leffa_objective_on;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Metrics row (with probe evaluation) every this many steps; 0 logs
    /// only the last step.
    pub log_every: usize,
    /// Evaluate the probe set at each metrics row.
    pub probe_during_training: bool,
    pub allow_early_leffa: bool,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { log_every: 100, probe_during_training: true, allow_early_leffa: false, optimizer: AdamWConfig::default() }
    }
}

/// Losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss_diffusion: f64,
    /// Mean flow loss over batch items where it applied.
    pub loss_leffa: Option<f64>,
    pub loss_total: f64,
}

/// One line of `metrics.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss_diffusion: f64,
    pub loss_leffa: Option<f64>,
    pub mean_epe: Option<f64>,
    pub warp_psnr: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss_diffusion,loss_leffa,mean_epe,warp_psnr";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{},{},{}",
            self.step,
            self.loss_diffusion,
            opt(self.loss_leffa),
            opt(self.mean_epe),
            opt(self.warp_psnr)
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones if training halted.
    pub params: ParamStore,
    pub steps: Vec<StepRecord>,
    pub metrics: Vec<MetricsRow>,
    /// Diagnostic when a non-finite loss or gradient stopped the run.
    pub halted: Option<String>,
}

/// Everything fixed for the duration of a run.
#[derive(Clone, Debug)]
pub struct TrainSetup<'a> {
    pub model: &'a DualBranchModel,
    pub leffa: &'a LeffaConfig,
    pub plan: &'a StagePlan,
    pub train: &'a TrainConfig,
    pub eval: &'a EvalConfig,
    pub seed: u64,
}

struct BatchItem<'a> {
    sample: &'a SyntheticSample,
    t: usize,
    noise: Tensor<f32>,
}

struct StepResult {
    grads: Vec<Option<Tensor<f32>>>,
    loss_diffusion: f64,
    loss_leffa: Option<f64>,
    loss_total: f64,
}

fn compute_step(
    model: &DualBranchModel,
    params: &ParamStore,
    leffa: &LeffaConfig,
    schedule: &DiffusionSchedule,
    batch: &[BatchItem<'_>],
    leffa_enabled: bool,
) -> Result<StepResult> {
    let mut tape = Tape::<f32>::new();
    let pv = model.bind(&mut tape, params);
    let mut total: Option<Var> = None;
    let mut l_diff = 0.0;
    let mut l_leffa = Vec::new();
    let inv_b = 1.0 / batch.len() as f32;
    for item in batch {
        let s = item.sample;
        let z_t = add_noise(&s.target, item.t, &item.noise, schedule)?;
        let z = tape.constant(z_t);
        let aux = tape.constant(s.aux.channels.clone());
        let r = tape.constant(s.reference.clone());
        let out = model.forward(&mut tape, &pv, z, aux, r, item.t)?;
        let ld = diffusion_loss_on(&mut tape, out.predicted_noise, &item.noise)?;
        l_diff += tape.value(ld).item()? as f64;
        let mut term = None;
        if leffa_enabled && leffa.lambda_leffa > 0.0 && timestep_in_scope(item.t, leffa.theta_timestep) {
            let layers: Vec<_> = out.selected_layers().map(|l| l.to_leffa_input()).collect();
            if let Some(lt) = leffa_objective_on(&mut tape, &layers, &s.reference, &s.target, &s.mask, leffa)? {
                l_leffa.push(tape.value(lt.loss).item()? as f64);
                term = Some(lt.loss);
            }
        }
        let l = combined_loss_on(&mut tape, ld, term, leffa.lambda_leffa)?;
        let l = tape.scale(l, inv_b);
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let loss_total = tape.value(total).item()? as f64;
    if !loss_total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {loss_total}")));
    }
    let mut g = tape.backward(total)?;
    let grads = params
        .entries()
        .iter()
        .zip(pv.vars())
        .map(|(e, &v)| model.is_trainable(&e.name).then(|| g.take(v)))
        .collect();
    Ok(StepResult {
        grads,
        loss_diffusion: l_diff / batch.len() as f64,
        loss_leffa: (!l_leffa.is_empty()).then(|| l_leffa.iter().sum::<f64>() / l_leffa.len() as f64),
        loss_total,
    })
}

/// Trains `params` through every stage of the plan. Samples are re-rendered
/// at each stage's resolution. A non-finite loss or gradient stops the run
/// and returns the last finite parameters with `halted` set.
pub fn train(setup: &TrainSetup<'_>, params: ParamStore, data: &Dataset) -> Result<TrainOutcome> {
    let TrainSetup { model, leffa, plan, train: cfg, eval, seed } = *setup;
    let v = plan.violations();
    if !v.is_empty() {
        return Err(Error::Config(v.join("; ")));
    }
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    model.check_params(&params)?;
    let schedule = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // stream 0 belongs to parameter initialization
    rng.set_stream(1);
    let mut params = params;
    let mut state = {
        let refs: Vec<&Tensor<f32>> = params.entries().iter().map(|e| &e.tensor).collect();
        AdamState::new(&refs)
    };
    let mut steps = Vec::with_capacity(plan.total_steps());
    let mut metrics = Vec::new();
    let mut global = 0usize;
    let total_steps = plan.total_steps();
    let mut window: Vec<StepRecord> = Vec::new();

    for stage in &plan.stages {
        let stage_data = data.at_resolution(stage.height, stage.width)?;
        let probe = if cfg.probe_during_training { Some(probe_set(data, eval, stage.height, stage.width)?) } else { None };
        let shape = vec![3, stage.height, stage.width];
        for _ in 0..stage.steps {
            let batch: Vec<BatchItem> = (0..stage.batch_size)
                .map(|_| {
                    let idx = rng.gen_range(0..stage_data.len());
                    let t = schedule.sample_t(&mut rng);
                    let noise = Tensor::randn(shape.clone(), 1.0, &mut rng);
                    BatchItem { sample: &stage_data.samples[idx], t, noise }
                })
                .collect();
            let result = match compute_step(model, &params, leffa, &schedule, &batch, stage.leffa_enabled) {
                Ok(r) => r,
                Err(Error::Numerical(msg)) => {
                    return Ok(TrainOutcome { params, steps, metrics, halted: Some(format!("step {global}: {msg}")) })
                }
                Err(e) => return Err(e),
            };
            {
                let mut refs: Vec<&mut Tensor<f32>> = params.entries_mut().iter_mut().map(|e| &mut e.tensor).collect();
                if let Err(e) = adamw_step(&mut refs, &result.grads, &mut state, stage.learning_rate, &cfg.optimizer) {
                    return match e {
                        Error::Numerical(msg) => {
                            Ok(TrainOutcome { params, steps, metrics, halted: Some(format!("step {global}: {msg}")) })
                        }
                        e => Err(e),
                    };
                }
            }
            let rec = StepRecord {
                step: global,
                loss_diffusion: result.loss_diffusion,
                loss_leffa: result.loss_leffa,
                loss_total: result.loss_total,
            };
            steps.push(rec);
            window.push(rec);
            global += 1;
            let log_now = global == total_steps || (cfg.log_every > 0 && global % cfg.log_every == 0);
            if log_now {
                let report = match &probe {
                    Some(p) => Some(evaluate(model, &params, leffa, p, eval)?),
                    None => None,
                };
                let lf: Vec<f64> = window.iter().filter_map(|r| r.loss_leffa).collect();
                metrics.push(MetricsRow {
                    step: global,
                    loss_diffusion: window.iter().map(|r| r.loss_diffusion).sum::<f64>() / window.len() as f64,
                    loss_leffa: (!lf.is_empty()).then(|| lf.iter().sum::<f64>() / lf.len() as f64),
                    mean_epe: report.as_ref().map(|r| r.mean_epe),
                    warp_psnr: report.as_ref().map(|r| r.warp_psnr),
                });
                window.clear();
            }
        }
    }
    Ok(TrainOutcome { params, steps, metrics, halted: None })
}
