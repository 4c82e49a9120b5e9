//! Images for inspecting a trained model: attention heatmaps for one query
//! pixel, flow color maps and warped references.

use crate::attention_flow::{average_heads, FlowField, LeffaConfig};
use crate::diffusion::{add_noise, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::model::{DualBranchModel, ParamStore};
use crate::synthdata::SyntheticSample;
use crate::tensor::{Tape, Tensor};
use crate::trainer::{predict_flows, probe_noise};
use crate::warp::grid_sample;

/// `R = (col + 1) / 2`, `G = (row + 1) / 2`, `B = 0.5` per pixel, as `[3×H×W]`.
pub fn flow_color(flow: &FlowField<f32>) -> Tensor<f32> {
    let (h, w) = (flow.height(), flow.width());
    let plane = h * w;
    let f = flow.flow.data();
    let mut out = vec![0.5f32; 3 * plane];
    for p in 0..plane {
        out[p] = ((f[2 * p + 1] + 1.0) / 2.0).clamp(0.0, 1.0);
        out[plane + p] = ((f[2 * p] + 1.0) / 2.0).clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, h, w], out).expect("3 planes")
}

/// Spatial attention of query row `query` in `map[n_q × (n_k + r)]` laid out
/// on the `h × w` key grid and scaled so the largest weight is 1.
pub fn attention_heatmap(map: &Tensor<f32>, query: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let n_k = h * w;
    if map.rank() != 2 || map.dim(1) < n_k || query >= map.dim(0) {
        return Err(Error::Parameter(format!(
            "query {query} and {h}×{w} grid do not fit attention map {:?}",
            map.shape()
        )));
    }
    let cols = map.dim(1);
    let row = &map.data()[query * cols..query * cols + n_k];
    let peak = row.iter().copied().fold(0.0f32, f32::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    Tensor::new(vec![1, h, w], row.iter().map(|v| v * scale).collect())
}

/// Renderings for one attention layer.
#[derive(Clone, Debug)]
pub struct LayerViews {
    pub layer_index: usize,
    /// `[1×h×w]` over the layer's reference grid.
    pub heatmap: Tensor<f32>,
    /// `[3×H×W]`, see [`flow_color`].
    pub flow_color: Tensor<f32>,
    /// Reference warped through the head-averaged, upsampled flow.
    pub warped: Tensor<f32>,
}

/// Views of every flow-supervised layer (all layers when none is) for the
/// image pixel `(row, col)` of `sample`, with the model run at timestep `t`.
pub fn layer_views(
    model: &DualBranchModel,
    params: &ParamStore,
    leffa: &LeffaConfig,
    sample: &SyntheticSample,
    t: usize,
    (row, col): (usize, usize),
) -> Result<Vec<LayerViews>> {
    let (big_h, big_w) = (sample.height(), sample.width());
    if row >= big_h || col >= big_w {
        return Err(Error::Parameter(format!("query pixel ({row}, {col}) is outside the {big_h}×{big_w} image")));
    }
    model.check_params(params)?;
    let averaged = LeffaConfig { average_heads: true, ..leffa.clone() };
    let flows = predict_flows(model, params, &averaged, sample, t)?;

    let noise = probe_noise(sample);
    let z_t = add_noise(&sample.target, t, &noise, &DiffusionSchedule::default())?;
    let mut tape = Tape::<f32>::new();
    let pv = model.bind(&mut tape, params);
    let z = tape.constant(z_t);
    let aux = tape.constant(sample.aux.channels.clone());
    let r = tape.constant(sample.reference.clone());
    let out = model.forward(&mut tape, &pv, z, aux, r, t)?;

    let any_selected = out.layers.iter().any(|l| l.selected);
    let mut views = Vec::new();
    for (layer, lf) in out.layers.iter().zip(&flows) {
        if any_selected && !layer.selected {
            continue;
        }
        let (h, w) = (layer.height, layer.width);
        let query = (row * h / big_h) * w + col * w / big_w;
        let avg = average_heads(&layer.attention_map(&tape));
        let flow = &lf.flows[0];
        views.push(LayerViews {
            layer_index: layer.layer_index,
            heatmap: attention_heatmap(&avg, query, h, w)?,
            flow_color: flow_color(flow),
            warped: grid_sample(&sample.reference, flow)?,
        });
    }
    Ok(views)
}
