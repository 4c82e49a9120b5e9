//! Flow upsampling, grid sampling of the reference image and the masked L2
//! flow loss.

use crate::attention_flow::{
    attention_to_flow_on, average_heads_on, coordinate_map, FlowField, LeffaConfig, LossReduction,
};
use crate::error::{dim_err, shape_err, Error, Result};
use crate::tensor::kernels;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Warp of the reference image through one layer's flow.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult<T: Scalar = f32> {
    pub warped: Tensor<T>,
    pub per_layer_loss: f64,
    pub layer_index: usize,
}

/// `[h×w×2]` flow to `[H×W×2]` by align-corners bilinear interpolation of each
/// channel. `flow` may also be given flat as `[h·w × 2]`.
pub fn upsample_flow_on<T: Scalar>(
    tape: &mut Tape<T>,
    flow: Var,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Result<Var> {
    let flat = tape.reshape(flow, vec![h * w, 2])?;
    if (h, w) == (out_h, out_w) {
        return tape.reshape(flat, vec![h, w, 2]);
    }
    let planar = tape.transpose(flat)?;
    let planar = tape.reshape(planar, vec![2, h, w])?;
    let up = tape.resize(planar, out_h, out_w)?;
    let up = tape.reshape(up, vec![2, out_h * out_w])?;
    let up = tape.transpose(up)?;
    tape.reshape(up, vec![out_h, out_w, 2])
}

pub fn upsample_flow<T: Scalar>(flow: &FlowField<T>, out_h: usize, out_w: usize) -> Result<FlowField<T>> {
    let (h, w) = (flow.height(), flow.width());
    if out_h < h || out_w < w {
        return Err(Error::Parameter(format!(
            "upsample_flow target {out_h}×{out_w} is smaller than the {h}×{w} flow"
        )));
    }
    let mut tape = Tape::new();
    let f = tape.constant(flow.flow.clone());
    let up = upsample_flow_on(&mut tape, f, (h, w), (out_h, out_w))?;
    FlowField::new(tape.value(up).clone())
}

/// Bilinear backward warp of `image[c×H×W]` through `flow[H×W×2]`.
pub fn grid_sample<T: Scalar>(image: &Tensor<T>, flow: &FlowField<T>) -> Result<Tensor<T>> {
    kernels::grid_sample(image, &flow.flow)
}

/// Repeats a `[1×H×W]` mask over `channels`.
pub fn broadcast_mask<T: Scalar>(mask: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    if mask.rank() != 3 || mask.dim(0) != 1 {
        return shape_err("mask", mask.shape(), "[1, H, W]");
    }
    let mut data = Vec::with_capacity(mask.len() * channels);
    for _ in 0..channels {
        data.extend_from_slice(mask.data());
    }
    Tensor::new(vec![channels, mask.dim(1), mask.dim(2)], data)
}

/// `reduce(mask ⊙ (target − warped)²)` on the tape. `target` and `mask` are
/// constants; `mask` is `[1×H×W]`.
pub fn masked_sq_error_on<T: Scalar>(
    tape: &mut Tape<T>,
    warped: Var,
    target: &Tensor<T>,
    mask: &Tensor<T>,
    reduction: LossReduction,
) -> Result<Var> {
    if tape.shape(warped) != target.shape() {
        return dim_err("leffa_loss", tape.shape(warped), target.shape());
    }
    let channels = target.dim(0);
    let m3 = broadcast_mask(mask, channels)?;
    if m3.shape() != target.shape() {
        return dim_err("leffa_loss mask", mask.shape(), target.shape());
    }
    let count = mask.sum().to_f64();
    let t = tape.constant(target.clone());
    let m = tape.constant(m3);
    let diff = tape.sub(t, warped)?;
    let masked = tape.mul(diff, m)?;
    let sq = tape.square(masked);
    let s = tape.sum(sq);
    Ok(match reduction {
        LossReduction::Sum => s,
        LossReduction::Mean => tape.scale(s, T::lit(1.0 / (channels as f64 * count).max(1.0))),
    })
}

/// Sum over layers of the masked squared error between each warp and the
/// target. An empty list gives zero.
pub fn leffa_loss<T: Scalar>(
    warps: &[Tensor<T>],
    target: &Tensor<T>,
    mask: &Tensor<T>,
    reduction: LossReduction,
) -> Result<f64> {
    let mut total = 0.0;
    for w in warps {
        let mut tape = Tape::new();
        let wv = tape.constant(w.clone());
        let l = masked_sq_error_on(&mut tape, wv, target, mask, reduction)?;
        total += tape.value(l).item()?.to_f64();
    }
    Ok(total)
}

/// Flow-loss inputs from one attention layer: per-head cross-attention maps
/// `[n × (n + r)]` over an `h × w` reference grid.
#[derive(Clone, Debug)]
pub struct LayerAttentionVars {
    pub layer_index: usize,
    pub height: usize,
    pub width: usize,
    pub heads: Vec<Var>,
}

/// Output of [`leffa_objective_on`].
#[derive(Clone, Debug)]
pub struct LeffaTerm {
    pub loss: Var,
    /// `(layer index, loss value)` per participating layer.
    pub per_layer: Vec<(usize, f64)>,
    /// Warped reference per layer (head-averaged flow, or the first head's
    /// warp when heads are supervised separately).
    pub warps: Vec<Var>,
}

/// Builds the full attention → flow → warp → masked loss chain for `layers`.
/// Returns `None` when `layers` is empty.
pub fn leffa_objective_on<T: Scalar>(
    tape: &mut Tape<T>,
    layers: &[LayerAttentionVars],
    reference: &Tensor<T>,
    target: &Tensor<T>,
    mask: &Tensor<T>,
    cfg: &LeffaConfig,
) -> Result<Option<LeffaTerm>> {
    if layers.is_empty() {
        return Ok(None);
    }
    if reference.shape() != target.shape() {
        return dim_err("leffa_objective", reference.shape(), target.shape());
    }
    let (big_h, big_w) = (target.dim(1), target.dim(2));
    let mut total: Option<Var> = None;
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut warps = Vec::with_capacity(layers.len());
    for layer in layers {
        let (h, w) = (layer.height, layer.width);
        let coords = coordinate_map::<T>(h, w);
        let flows: Vec<Var> = if cfg.average_heads {
            let avg = average_heads_on(tape, &layer.heads)?;
            vec![attention_to_flow_on(tape, avg, &coords)?]
        } else {
            layer
                .heads
                .iter()
                .map(|&a| attention_to_flow_on(tape, a, &coords))
                .collect::<Result<_>>()?
        };
        let (ref_img, tgt, msk, out) = if cfg.upsample_flow {
            (reference.clone(), target.clone(), mask.clone(), (big_h, big_w))
        } else {
            let m = kernels::bilinear_resize(mask, h, w)?.map(|v| if v >= T::lit(0.5) { T::one() } else { T::zero() });
            (
                kernels::bilinear_resize(reference, h, w)?,
                kernels::bilinear_resize(target, h, w)?,
                m,
                (h, w),
            )
        };
        let ref_var = tape.constant(ref_img);
        let mut layer_loss: Option<Var> = None;
        for (k, &flow) in flows.iter().enumerate() {
            let grid = upsample_flow_on(tape, flow, (h, w), out)?;
            let warped = tape.grid_sample(ref_var, grid)?;
            if k == 0 {
                warps.push(warped);
            }
            let l = masked_sq_error_on(tape, warped, &tgt, &msk, cfg.loss_reduction)?;
            layer_loss = Some(match layer_loss {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let mut l = layer_loss.expect("at least one head");
        if flows.len() > 1 {
            l = tape.scale(l, T::one() / T::lit(flows.len() as f64));
        }
        per_layer.push((layer.layer_index, tape.value(l).item()?.to_f64()));
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(Some(LeffaTerm { loss: total.expect("non-empty"), per_layer, warps }))
}
