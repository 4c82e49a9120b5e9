//! Flow end-point error and warp PSNR of attention-derived flows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention_flow::{attention_to_flow, average_heads, coordinate_map, FlowField, LeffaConfig};
use crate::diffusion::{add_noise, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::model::{DualBranchModel, ParamStore};
use crate::par;
use crate::synthdata::{Dataset, SyntheticSample};
use crate::tensor::{Tape, Tensor};
use crate::warp::{grid_sample, upsample_flow};

/// PSNR reported for a perfect warp.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe_t: usize,
    pub probe_count: usize,
    /// First seed of the held-out probe set.
    pub probe_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { probe_t: 100, probe_count: 32, probe_seed: 1 << 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_index: usize,
    pub height: usize,
    pub width: usize,
    pub selected: bool,
    pub mean_epe: f64,
    pub warp_psnr: f64,
    /// Masked mean squared warp error.
    pub leffa_value: f64,
    pub reference_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over samples and flow-supervised layers (all layers when none is).
    pub mean_epe: f64,
    pub warp_psnr: f64,
    pub leffa_value: f64,
    /// EPE of the centroid flow that uniform attention produces.
    pub uniform_epe: f64,
    pub samples: usize,
    pub per_layer: Vec<LayerReport>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowMetrics {
    pub epe: f64,
    pub psnr: f64,
    pub sq_error: f64,
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn masked_pixels(sample: &SyntheticSample) -> Vec<usize> {
    sample.mask.data().iter().enumerate().filter(|(_, &m)| m > 0.5).map(|(p, _)| p).collect()
}

/// Metrics of a full-resolution `flow` against the sample's ground truth,
/// restricted to the mask.
pub fn flow_metrics(sample: &SyntheticSample, flow: &FlowField<f32>) -> Result<FlowMetrics> {
    let (h, w) = (sample.height(), sample.width());
    if (flow.height(), flow.width()) != (h, w) {
        return crate::error::dim_err("flow_metrics", flow.flow.shape(), &[h, w, 2]);
    }
    let pix = masked_pixels(sample);
    if pix.is_empty() {
        return Err(Error::Evaluation("sample mask is empty".into()));
    }
    let (f, g) = (flow.flow.data(), sample.gt_flow.flow.data());
    let epe = pix
        .iter()
        .map(|&p| {
            let dr = (f[2 * p] - g[2 * p]) as f64;
            let dc = (f[2 * p + 1] - g[2 * p + 1]) as f64;
            (dr * dr + dc * dc).sqrt()
        })
        .sum::<f64>()
        / pix.len() as f64;
    let warped = grid_sample(&sample.reference, flow)?;
    let plane = h * w;
    let mut se = 0.0;
    for c in 0..3 {
        for &p in &pix {
            let d = (warped.data()[c * plane + p] - sample.target.data()[c * plane + p]) as f64;
            se += d * d;
        }
    }
    let mse = se / (3 * pix.len()) as f64;
    Ok(FlowMetrics { epe, psnr: psnr_from_mse(mse), sq_error: mse })
}

/// EPE of the flow produced by uniform attention, i.e. the key-grid centroid
/// (the origin on any align-corners grid).
pub fn uniform_attention_epe(sample: &SyntheticSample) -> f64 {
    let pix = masked_pixels(sample);
    let g = sample.gt_flow.flow.data();
    pix.iter()
        .map(|&p| ((g[2 * p] as f64).powi(2) + (g[2 * p + 1] as f64).powi(2)).sqrt())
        .sum::<f64>()
        / pix.len().max(1) as f64
}

/// Flows read from one layer, upsampled to the image size.
#[derive(Clone, Debug)]
pub struct LayerFlows {
    pub layer_index: usize,
    pub height: usize,
    pub width: usize,
    pub selected: bool,
    /// One head-averaged flow, or one flow per head.
    pub flows: Vec<FlowField<f32>>,
    /// Low-resolution flows as read from attention.
    pub raw: Vec<FlowField<f32>>,
    pub reference_mass: f64,
}

/// Fixed per-sample noise used when probing a model at a given timestep.
pub fn probe_noise(sample: &SyntheticSample) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample.seed ^ 0x5eed_f10e_u64);
    Tensor::randn(sample.target.shape().to_vec(), 1.0, &mut rng)
}

/// Runs the model on `sample` at timestep `t` and reads a flow from every
/// attention layer.
pub fn predict_flows(
    model: &DualBranchModel,
    params: &ParamStore,
    leffa: &LeffaConfig,
    sample: &SyntheticSample,
    t: usize,
) -> Result<Vec<LayerFlows>> {
    let schedule = DiffusionSchedule::default();
    let z_t = add_noise(&sample.target, t, &probe_noise(sample), &schedule)?;
    let mut tape = Tape::<f32>::new();
    let pv = model.bind(&mut tape, params);
    let z = tape.constant(z_t);
    let aux = tape.constant(sample.aux.channels.clone());
    let r = tape.constant(sample.reference.clone());
    let out = model.forward(&mut tape, &pv, z, aux, r, t)?;
    let (big_h, big_w) = (sample.height(), sample.width());
    out.layers
        .iter()
        .map(|layer| {
            let map = layer.attention_map(&tape);
            let coords = coordinate_map::<f32>(layer.height, layer.width);
            let raw: Vec<FlowField<f32>> = if leffa.average_heads {
                vec![attention_to_flow(&average_heads(&map), &coords, map.registers)?]
            } else {
                let n = layer.height * layer.width;
                let cols = map.weights.dim(2);
                (0..map.heads())
                    .map(|h| {
                        let head = Tensor::new(vec![n, cols], map.weights.data()[h * n * cols..(h + 1) * n * cols].to_vec())?;
                        attention_to_flow(&head, &coords, map.registers)
                    })
                    .collect::<Result<_>>()?
            };
            let flows = raw.iter().map(|f| upsample_flow(f, big_h, big_w)).collect::<Result<_>>()?;
            Ok(LayerFlows {
                layer_index: layer.layer_index,
                height: layer.height,
                width: layer.width,
                selected: layer.selected,
                flows,
                raw,
                reference_mass: layer.reference_mass,
            })
        })
        .collect()
}

/// Aggregates per-sample layer flows into a report. `flows[s]` belongs to
/// `samples[s]`; multiple flows in a layer (per-head mode) are averaged.
pub fn evaluate_flows(samples: &[SyntheticSample], flows: &[Vec<LayerFlows>]) -> Result<EvalReport> {
    if samples.is_empty() || samples.len() != flows.len() {
        return Err(Error::Evaluation(format!("{} samples but {} flow sets", samples.len(), flows.len())));
    }
    let n_layers = flows[0].len();
    let mut acc = vec![(0.0f64, 0.0f64, 0.0f64, 0.0f64); n_layers];
    for (sample, layers) in samples.iter().zip(flows) {
        if layers.len() != n_layers {
            return Err(Error::Evaluation("inconsistent layer count across samples".into()));
        }
        for (a, layer) in acc.iter_mut().zip(layers) {
            let k = layer.flows.len().max(1) as f64;
            for f in &layer.flows {
                let m = flow_metrics(sample, f)?;
                a.0 += m.epe / k;
                a.1 += m.psnr / k;
                a.2 += m.sq_error / k;
            }
            a.3 += layer.reference_mass;
        }
    }
    let ns = samples.len() as f64;
    let per_layer: Vec<LayerReport> = acc
        .iter()
        .zip(&flows[0])
        .map(|(a, l)| LayerReport {
            layer_index: l.layer_index,
            height: l.height,
            width: l.width,
            selected: l.selected,
            mean_epe: a.0 / ns,
            warp_psnr: a.1 / ns,
            leffa_value: a.2 / ns,
            reference_mass: a.3 / ns,
        })
        .collect();
    let used: Vec<&LayerReport> = if per_layer.iter().any(|l| l.selected) {
        per_layer.iter().filter(|l| l.selected).collect()
    } else {
        per_layer.iter().collect()
    };
    let k = used.len().max(1) as f64;
    Ok(EvalReport {
        mean_epe: used.iter().map(|l| l.mean_epe).sum::<f64>() / k,
        warp_psnr: used.iter().map(|l| l.warp_psnr).sum::<f64>() / k,
        leffa_value: used.iter().map(|l| l.leffa_value).sum::<f64>() / k,
        uniform_epe: samples.iter().map(uniform_attention_epe).sum::<f64>() / ns,
        samples: samples.len(),
        per_layer,
    })
}

/// Evaluates `params` on every sample of `data` at `cfg.probe_t`.
pub fn evaluate(
    model: &DualBranchModel,
    params: &ParamStore,
    leffa: &LeffaConfig,
    data: &Dataset,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    model.check_params(params)?;
    if data.is_empty() {
        return Err(Error::Evaluation("evaluation dataset is empty".into()));
    }
    let flows = par::map(data.samples.iter().collect(), |s: &SyntheticSample| {
        predict_flows(model, params, leffa, s, cfg.probe_t)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    evaluate_flows(&data.samples, &flows)
}

/// Held-out probe set for `task` at `h × w`.
pub fn probe_set(data: &Dataset, cfg: &EvalConfig, h: usize, w: usize) -> Result<Dataset> {
    let task = data.samples.first().map(|s| s.task).ok_or_else(|| Error::Evaluation("empty dataset".into()))?;
    Dataset::generate(&task, cfg.probe_seed, cfg.probe_count, h, w)
}
