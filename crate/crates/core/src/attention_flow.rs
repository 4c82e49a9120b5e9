//! Temperature-scaled attention with register tokens, head averaging,
//! normalized coordinate maps and attention-to-flow conversion, plus the
//! layer and timestep selection rules that decide where the flow loss applies.
//!
//! Each operation exists twice: a tape-recording form (`*_on`) used inside the
//! model and the loss, and a plain form over tensors that runs the same
//! recording on a throwaway tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, shape_err, Error, Result};
use crate::tensor::kernels::normalized_coord;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Guard added to the spatial attention mass before renormalizing.
pub const FLOW_EPS: f64 = 1e-8;

/// Row-stochastic attention weights `[heads × n_q × (n_k + r)]`; the `r`
/// register columns follow the `n_k` spatial key columns.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub spatial_keys: usize,
    pub registers: usize,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn new(weights: Tensor<T>, spatial_keys: usize, registers: usize) -> Result<Self> {
        if weights.rank() != 3 || weights.dim(2) != spatial_keys + registers {
            return shape_err(
                "attention_map",
                weights.shape(),
                format!("[heads, n_q, {}]", spatial_keys + registers),
            );
        }
        Ok(Self { weights, spatial_keys, registers })
    }

    pub fn heads(&self) -> usize {
        self.weights.dim(0)
    }

    pub fn queries(&self) -> usize {
        self.weights.dim(1)
    }

    /// Largest deviation of any row sum from one.
    pub fn row_sum_error(&self) -> f64 {
        let n = self.weights.dim(2);
        self.weights
            .data()
            .chunks(n)
            .map(|r| (r.iter().copied().sum::<T>().to_f64() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// `[h × w × 2]` normalized (row, col) coordinates of every grid location.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateMap<T: Scalar = f32> {
    pub coords: Tensor<T>,
}

impl<T: Scalar> CoordinateMap<T> {
    pub fn height(&self) -> usize {
        self.coords.dim(0)
    }

    pub fn width(&self) -> usize {
        self.coords.dim(1)
    }

    /// The coordinates as an `[h·w × 2]` matrix.
    pub fn flat(&self) -> Tensor<T> {
        let n = self.height() * self.width();
        self.coords.clone().reshape(vec![n, 2]).expect("h·w·2 elements")
    }
}

/// Per-location normalized sampling coordinates `[h × w × 2]`, same channel
/// order as [`CoordinateMap`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T: Scalar = f32> {
    pub flow: Tensor<T>,
}

impl<T: Scalar> FlowField<T> {
    pub fn new(flow: Tensor<T>) -> Result<Self> {
        if flow.rank() != 3 || flow.dim(2) != 2 {
            return shape_err("flow_field", flow.shape(), "[h, w, 2]");
        }
        Ok(Self { flow })
    }

    pub fn height(&self) -> usize {
        self.flow.dim(0)
    }

    pub fn width(&self) -> usize {
        self.flow.dim(1)
    }

    pub fn in_unit_box(&self) -> bool {
        self.flow.data().iter().all(|v| v.abs() <= T::one())
    }
}

/// Learnable key/value tokens appended after the spatial keys.
#[derive(Clone, Debug, PartialEq)]
pub struct RegisterTokens<T: Scalar = f32> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
}

impl<T: Scalar> RegisterTokens<T> {
    /// No registers; the mechanism is disabled.
    pub fn none(dim: usize) -> Self {
        Self { keys: Tensor::zeros(vec![0, dim]), values: Tensor::zeros(vec![0, dim]) }
    }

    /// `count` tokens drawn from N(0, 0.02²).
    pub fn init(count: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            keys: Tensor::randn(vec![count, dim], 0.02, rng),
            values: Tensor::randn(vec![count, dim], 0.02, rng),
        }
    }

    pub fn count(&self) -> usize {
        self.keys.dim(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    GarmentMask,
    AllOnes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Mean over masked pixels and channels.
    Mean,
    /// Plain sum of masked squared differences.
    Sum,
}

/// Flow-loss hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeffaConfig {
    pub lambda_leffa: f64,
    pub temperature: f64,
    pub theta_resolution: f64,
    pub theta_timestep: usize,
    /// Filled from the model section of a run configuration.
    #[serde(skip)]
    pub register_count: usize,
    pub average_heads: bool,
    pub upsample_flow: bool,
    pub mask_mode: MaskMode,
    pub loss_reduction: LossReduction,
}

impl Default for LeffaConfig {
    fn default() -> Self {
        Self {
            lambda_leffa: 1e-3,
            temperature: 2.0,
            theta_resolution: 1.0 / 32.0,
            theta_timestep: 500,
            register_count: 4,
            average_heads: true,
            upsample_flow: true,
            mask_mode: MaskMode::GarmentMask,
            loss_reduction: LossReduction::Mean,
        }
    }
}

impl LeffaConfig {
    /// All violated constraints, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            v.push(format!("leffa.temperature must be > 0, got {}", self.temperature));
        }
        if !(self.lambda_leffa >= 0.0) || !self.lambda_leffa.is_finite() {
            v.push(format!("leffa.lambda_leffa must be >= 0, got {}", self.lambda_leffa));
        }
        if !(self.theta_resolution > 0.0 && self.theta_resolution <= 1.0) {
            v.push(format!("leffa.theta_resolution must be in (0, 1], got {}", self.theta_resolution));
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
}

// ----------------------------------------------------------- tape forms

/// Attention weights of one head: `softmax(q·[k; reg]ᵀ / √d, τ)`.
/// `q[n_q×d]`, `k[n_k×d]`, `register_keys[r×d]`.
pub fn attention_on<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    register_keys: Option<Var>,
    temperature: T,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    if tape.shape(k)[1] != d {
        return dim_err("attention", tape.shape(q), tape.shape(k));
    }
    let keys = match register_keys {
        Some(r) if tape.shape(r)[0] > 0 => {
            if tape.shape(r)[1] != d {
                return dim_err("attention registers", tape.shape(q), tape.shape(r));
            }
            tape.concat0(&[k, r])?
        }
        _ => k,
    };
    let logits = tape.matmul_bt(q, keys)?;
    let scaled = tape.scale(logits, T::one() / T::lit(d as f64).sqrt());
    tape.softmax(scaled, temperature)
}

/// Arithmetic mean of per-head maps with identical shapes.
pub fn average_heads_on<T: Scalar>(tape: &mut Tape<T>, heads: &[Var]) -> Result<Var> {
    let mut acc = heads[0];
    for &h in &heads[1..] {
        acc = tape.add(acc, h)?;
    }
    Ok(if heads.len() == 1 { acc } else { tape.scale(acc, T::one() / T::lit(heads.len() as f64)) })
}

/// Flow `[n_q × 2]` from a head-averaged map `[n_q × (n_k + r)]`: the spatial
/// block renormalized by `(row mass + ε)` times the flattened coordinates,
/// clamped to `[-1, 1]`.
pub fn attention_to_flow_on<T: Scalar>(tape: &mut Tape<T>, avg: Var, coords: &CoordinateMap<T>) -> Result<Var> {
    let n_k = coords.height() * coords.width();
    let cols = tape.shape(avg)[1];
    if cols < n_k {
        return dim_err("attention_to_flow", tape.shape(avg), coords.coords.shape());
    }
    // without registers rows are already stochastic
    let normalized = if cols == n_k {
        avg
    } else {
        let spatial = tape.slice_cols(avg, 0, n_k)?;
        tape.row_normalize(spatial, T::lit(FLOW_EPS))?
    };
    let c = tape.constant(coords.flat());
    let flow = tape.matmul(normalized, c)?;
    // rounding can push a convex combination an ulp past the unit box
    Ok(tape.clamp(flow, -T::one(), T::one()))
}

// ---------------------------------------------------------- plain forms

/// Multi-head attention map for `q[heads×n_q×d]` against `k[heads×n_k×d]` with
/// register keys shared across heads.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    registers: &RegisterTokens<T>,
    temperature: T,
) -> Result<AttentionMap<T>> {
    if q.rank() != 3 || k.rank() != 3 || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2) {
        return dim_err("attention", q.shape(), k.shape());
    }
    let (heads, n_q, d) = (q.dim(0), q.dim(1), q.dim(2));
    let n_k = k.dim(1);
    let r = registers.count();
    if r > 0 && registers.keys.dim(1) != d {
        return dim_err("attention registers", q.shape(), registers.keys.shape());
    }
    let mut weights = Vec::with_capacity(heads * n_q * (n_k + r));
    for h in 0..heads {
        let mut tape = Tape::new();
        let qh = tape.constant(Tensor::new(vec![n_q, d], q.data()[h * n_q * d..(h + 1) * n_q * d].to_vec())?);
        let kh = tape.constant(Tensor::new(vec![n_k, d], k.data()[h * n_k * d..(h + 1) * n_k * d].to_vec())?);
        let rk = (r > 0).then(|| tape.constant(registers.keys.clone()));
        let a = attention_on(&mut tape, qh, kh, rk, temperature)?;
        weights.extend_from_slice(tape.value(a).data());
    }
    AttentionMap::new(Tensor::new(vec![heads, n_q, n_k + r], weights)?, n_k, r)
}

/// Mean over the head axis: `[n_q × (n_k + r)]`.
pub fn average_heads<T: Scalar>(a: &AttentionMap<T>) -> Tensor<T> {
    let (heads, n_q, cols) = (a.heads(), a.queries(), a.weights.dim(2));
    let mut tape = Tape::new();
    let vars: Vec<Var> = (0..heads)
        .map(|h| {
            let block = a.weights.data()[h * n_q * cols..(h + 1) * n_q * cols].to_vec();
            tape.constant(Tensor::new(vec![n_q, cols], block).expect("block shape"))
        })
        .collect();
    let avg = average_heads_on(&mut tape, &vars).expect("equal shapes");
    tape.value(avg).clone()
}

/// Normalized coordinates of an `h × w` grid; a single-sample axis is `0`.
pub fn coordinate_map<T: Scalar>(h: usize, w: usize) -> CoordinateMap<T> {
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        let row = normalized_coord::<T>(i, h);
        for j in 0..w {
            data.push(row);
            data.push(normalized_coord(j, w));
        }
    }
    CoordinateMap { coords: Tensor::new(vec![h, w, 2], data).expect("h·w·2 elements") }
}

/// Flow field from a head-averaged attention map. `registers` is the number of
/// trailing register columns, which carry no coordinates.
pub fn attention_to_flow<T: Scalar>(avg: &Tensor<T>, coords: &CoordinateMap<T>, registers: usize) -> Result<FlowField<T>> {
    let n_k = coords.height() * coords.width();
    if avg.rank() != 2 || avg.dim(1) != n_k + registers {
        return dim_err("attention_to_flow", avg.shape(), &[n_k + registers]);
    }
    let mut tape = Tape::new();
    let a = tape.constant(avg.clone());
    let f = attention_to_flow_on(&mut tape, a, coords)?;
    let n_q = avg.dim(0);
    // queries share the key grid when n_q == n_k; otherwise keep a single row
    let (h, w) = if n_q == n_k { (coords.height(), coords.width()) } else { (1, n_q) };
    FlowField::new(tape.value(f).clone().reshape(vec![h, w, 2])?)
}

/// Indices of layers whose height ratio `h / image_height` is at least
/// `theta_resolution`.
pub fn select_layers(layer_heights: &[usize], image_height: usize, theta_resolution: f64) -> Vec<usize> {
    layer_heights
        .iter()
        .enumerate()
        .filter(|(_, &h)| h as f64 / image_height as f64 >= theta_resolution)
        .map(|(i, _)| i)
        .collect()
}

/// Whether the flow loss applies at diffusion step `t`.
pub fn timestep_in_scope(t: usize, theta_timestep: usize) -> bool {
    t < theta_timestep
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t3(shape: [usize; 3], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn single_token_attention_is_one() {
        let q = t3([1, 1, 4], vec![0.3, -1.0, 2.0, 0.1]);
        let a = attention(&q, &q, &RegisterTokens::none(4), 1.0).unwrap();
        assert_eq!(a.weights.data(), &[1.0]);
    }

    #[test]
    fn attention_with_temperature_hand_case() {
        // d = 1: logits are q·k directly
        let q = t3([1, 1, 1], vec![1.0]);
        let k = t3([1, 2, 1], vec![0.0, 4f64.ln()]);
        let a = attention(&q, &k, &RegisterTokens::none(1), 2.0).unwrap();
        assert!((a.weights.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((a.weights.data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn suppressed_registers_leave_spatial_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::<f64>::randn(vec![1, 1, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(vec![1, 3, 4], 1.0, &mut rng);
        let base = attention(&q, &k, &RegisterTokens::none(4), 1.0).unwrap();
        let qn: Vec<f64> = q.data().to_vec();
        let far: Vec<f64> = qn.iter().chain(&qn).map(|v| -100.0 * v).collect();
        let regs = RegisterTokens { keys: Tensor::new(vec![2, 4], far).unwrap(), values: Tensor::zeros(vec![2, 4]) };
        let with = attention(&q, &k, &regs, 1.0).unwrap();
        for j in 0..3 {
            assert!((with.weights.data()[j] - base.weights.data()[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn average_heads_cases() {
        let a = AttentionMap::new(t3([2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]), 2, 0).unwrap();
        assert_eq!(average_heads(&a).data(), &[0.5, 0.5]);
        let one = AttentionMap::new(t3([1, 2, 2], vec![0.2, 0.8, 0.6, 0.4]), 2, 0).unwrap();
        assert_eq!(average_heads(&one).data(), one.weights.data());
    }

    #[test]
    fn coordinate_map_cases() {
        let c = coordinate_map::<f64>(2, 2);
        assert_eq!(c.coords.data(), &[-1., -1., -1., 1., 1., -1., 1., 1.]);
        let c = coordinate_map::<f64>(3, 3);
        assert_eq!(&c.coords.data()[8..10], &[0.0, 0.0]);
        let c = coordinate_map::<f64>(1, 4);
        let rows: Vec<f64> = c.coords.data().chunks(2).map(|p| p[0]).collect();
        let cols: Vec<f64> = c.coords.data().chunks(2).map(|p| p[1]).collect();
        assert_eq!(rows, vec![0.0; 4]);
        let expect = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
        for (a, b) in cols.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_flow_picks_coordinate() {
        let coords = coordinate_map::<f64>(3, 4);
        let mut avg = Tensor::<f64>::zeros(vec![12, 12]);
        let j = 7;
        for i in 0..12 {
            avg.set(&[i, j], 1.0);
        }
        let f = attention_to_flow(&avg, &coords, 0).unwrap();
        for p in f.flow.data().chunks(2) {
            assert_eq!(p, &coords.coords.data()[2 * j..2 * j + 2]);
        }
    }

    #[test]
    fn uniform_attention_gives_zero_flow() {
        let coords = coordinate_map::<f64>(4, 4);
        let avg = Tensor::<f64>::full(vec![16, 16], 1.0 / 16.0);
        let f = attention_to_flow(&avg, &coords, 0).unwrap();
        assert!(f.flow.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn register_mass_is_renormalized_away() {
        let coords = coordinate_map::<f64>(2, 2);
        let mut avg = Tensor::<f64>::zeros(vec![4, 5]);
        for i in 0..4 {
            avg.set(&[i, 2], 0.5);
            avg.set(&[i, 4], 0.5);
        }
        let f = attention_to_flow(&avg, &coords, 1).unwrap();
        for p in f.flow.data().chunks(2) {
            assert!((p[0] - 1.0).abs() < 1e-7 && (p[1] + 1.0).abs() < 1e-7, "{p:?}");
        }
    }

    #[test]
    fn layer_selection_is_inclusive() {
        let h = 1024;
        let heights = [h / 8, h / 16, h / 32, h / 64];
        assert_eq!(select_layers(&heights, h, 1.0 / 32.0), vec![0, 1, 2]);
        assert_eq!(select_layers(&heights, h, 1.0 / 64.0), vec![0, 1, 2, 3]);
        assert_eq!(select_layers(&[h, h / 2], h, 1.0), vec![0]);
    }

    #[test]
    fn timestep_gate_is_strict() {
        assert!(timestep_in_scope(300, 500));
        assert!(!timestep_in_scope(500, 500));
        assert!((0..1000).all(|t| !timestep_in_scope(t, 0)));
    }

    #[test]
    fn config_validation_lists_everything() {
        let cfg = LeffaConfig { temperature: 0.0, lambda_leffa: -1.0, theta_resolution: 2.0, ..Default::default() };
        assert_eq!(cfg.violations().len(), 3);
        assert!(LeffaConfig::default().validate().is_ok());
    }
}
