//! Optimization, progressive training, evaluation and ablation sweeps.

mod ablation;
mod evaluate;
mod optim;
mod stages;
mod train;

pub use ablation::{run_ablation, AblationAxis, AblationCell, AblationTable, AxisValue, ABLATION_HEADER};
pub use evaluate::{
    evaluate, evaluate_flows, flow_metrics, predict_flows, probe_noise, probe_set, psnr_from_mse, uniform_attention_epe, EvalConfig,
    EvalReport, FlowMetrics, LayerFlows, LayerReport, PSNR_CAP,
};
pub use optim::{adamw_step, AdamState, AdamWConfig};
pub use stages::{Stage, StagePlan};
pub use train::{metrics_csv, train, MetricsRow, StepRecord, TrainConfig, TrainOutcome, TrainSetup, METRICS_HEADER};
