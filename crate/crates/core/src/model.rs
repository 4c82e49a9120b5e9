//! Toy dual-branch denoiser.
//!
//! The generative branch sees `[z_t; aux]`, the reference branch sees the clean
//! reference image. At each of the two internal resolutions (H/2 and H/4) the
//! generative branch runs self-attention over the token sequence
//! `[F_gen; F_ref; registers]` with queries from `F_gen` only, i.e. the
//! generative half of the concatenated attention is kept.
//!
//! ```text
//! gen:  conv_in ─ pool ─ +t ─ conv ─ attn(F_ref⁰) ─ conv ─┬─ pool ─ +t ─ conv ─ attn(F_ref¹) ─ conv
//!          │                                             │                                    │
//!          └──────────── up ─ conv_out ◄── + ◄── up ─ conv ◄─ + ◄────────────── up ◄──────────┘
//! ref:  conv_in ─ pool ─ conv = F_ref⁰ ─ pool ─ conv = F_ref¹
//! ```

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention_flow::{select_layers, AttentionMap, LeffaConfig, FLOW_EPS};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{NamedTensor, Scalar, Tape, Tensor, Var};
use crate::warp::LayerAttentionVars;

/// Number of attention resolutions; level `l` runs at `H / 2^(l+1)`.
pub const LEVELS: usize = 2;
/// Image channels of `z_t`, the reference and the predicted noise.
/// Variance guard of the per-token normalization ahead of attention.
pub const TOKEN_NORM_EPS: f64 = 1e-5;

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    /// Register tokens per flow-supervised attention layer.
    pub registers: usize,
    pub freeze_reference: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { width: 64, heads: 4, registers: 4, freeze_reference: false }
    }
}

impl ModelConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.width == 0 {
            v.push("model.width must be > 0".to_string());
        }
        if self.heads == 0 || self.width % self.heads.max(1) != 0 {
            v.push(format!("model.heads ({}) must divide model.width ({})", self.heads, self.width));
        }
        v
    }
}

/// Extra generative-branch input channels `[k×H×W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxConditioning {
    pub channels: Tensor<f32>,
}

impl AuxConditioning {
    /// `[gray, |∂x|, |∂y|]` of an RGB image, clipped to `[0, 1]`.
    pub fn structure_map(image: &Tensor<f32>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return shape_err("structure_map", s, "[3, H, W]");
        }
        let (h, w) = (s[1], s[2]);
        let plane = h * w;
        let d = image.data();
        let gray: Vec<f32> = (0..plane).map(|p| (d[p] + d[plane + p] + d[2 * plane + p]) / 3.0).collect();
        let mut out = vec![0.0f32; 3 * plane];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                out[p] = gray[p].clamp(0.0, 1.0);
                if j + 1 < w {
                    out[plane + p] = (gray[p + 1] - gray[p]).abs().min(1.0);
                }
                if i + 1 < h {
                    out[2 * plane + p] = (gray[p + w] - gray[p]).abs().min(1.0);
                }
            }
        }
        Ok(Self { channels: Tensor::new(vec![3, h, w], out)? })
    }

    /// Target with the masked region zeroed, followed by the mask.
    pub fn masked_source(target: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Self> {
        let s = target.shape();
        if s.len() != 3 || s[0] != 3 || mask.shape() != [1, s[1], s[2]] {
            return crate::error::dim_err("masked_source", s, mask.shape());
        }
        let plane = s[1] * s[2];
        let m = mask.data();
        let mut out = Vec::with_capacity(4 * plane);
        for c in 0..3 {
            out.extend(target.data()[c * plane..(c + 1) * plane].iter().zip(m).map(|(&v, &mv)| if mv > 0.5 { 0.0 } else { v }));
        }
        out.extend_from_slice(m);
        Ok(Self { channels: Tensor::new(vec![4, s[1], s[2]], out)? })
    }

    pub fn count(&self) -> usize {
        self.channels.dim(0)
    }
}

/// Ordered named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn new(entries: Vec<NamedTensor>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.entries
    }

    pub fn into_entries(self) -> Vec<NamedTensor> {
        self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor::new(e.name.clone(), Tensor::zeros(e.tensor.shape().to_vec())))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }
}

/// Parameters bound to tape variables for one forward/backward pass.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    /// Variables in the store's order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn maybe(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }
}

/// Attention outputs of one level.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub layer_index: usize,
    pub height: usize,
    pub width: usize,
    pub selected: bool,
    pub temperature: f64,
    /// Per-head attention over `[F_gen; F_ref; registers]`, `[n × (2n + r)]`.
    pub full_heads: Vec<Var>,
    /// Per-head reference-key slice renormalized to rows of one, `[n × (n + r)]`.
    pub cross_heads: Vec<Var>,
    /// Reference feature map `[C × h × w]`.
    pub reference_features: Var,
    pub registers: usize,
    /// Mean attention mass that generative queries place on reference keys
    /// and registers before renormalization.
    pub reference_mass: f64,
}

impl LayerOutput {
    pub fn to_leffa_input(&self) -> LayerAttentionVars {
        LayerAttentionVars {
            layer_index: self.layer_index,
            height: self.height,
            width: self.width,
            heads: self.cross_heads.clone(),
        }
    }

    /// Materialized cross-attention map `[heads × n × (n + r)]`.
    pub fn attention_map<T: Scalar>(&self, tape: &Tape<T>) -> AttentionMap<T> {
        stack_heads(tape, &self.cross_heads, self.height * self.width, self.registers)
    }

    pub fn full_attention_map<T: Scalar>(&self, tape: &Tape<T>) -> AttentionMap<T> {
        let n = self.height * self.width;
        stack_heads(tape, &self.full_heads, 2 * n, self.registers)
    }
}

fn stack_heads<T: Scalar>(tape: &Tape<T>, heads: &[Var], spatial: usize, registers: usize) -> AttentionMap<T> {
    let s = tape.shape(heads[0]).to_vec();
    let mut data = Vec::with_capacity(heads.len() * s[0] * s[1]);
    for &h in heads {
        data.extend_from_slice(tape.value(h).data());
    }
    AttentionMap::new(Tensor::new(vec![heads.len(), s[0], s[1]], data).expect("stacked"), spatial, registers)
        .expect("consistent head shapes")
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub predicted_noise: Var,
    pub layers: Vec<LayerOutput>,
}

impl ForwardOutput {
    pub fn selected_layers(&self) -> impl Iterator<Item = &LayerOutput> {
        self.layers.iter().filter(|l| l.selected)
    }
}

/// Architecture plus the flow-loss settings that shape it (selected layers
/// get the configured temperature and register tokens).
#[derive(Clone, Debug, PartialEq)]
pub struct DualBranchModel {
    pub config: ModelConfig,
    pub aux_channels: usize,
    pub temperature: f64,
    pub theta_resolution: f64,
}

impl DualBranchModel {
    pub fn new(config: ModelConfig, aux_channels: usize, leffa: &LeffaConfig) -> Result<Self> {
        let v = config.violations();
        if !v.is_empty() {
            return Err(Error::Config(v.join("; ")));
        }
        leffa.validate()?;
        Ok(Self { config, aux_channels, temperature: leffa.temperature, theta_resolution: leffa.theta_resolution })
    }

    /// Attention-grid size of every level for an `h × w` input.
    pub fn layer_dims(h: usize, w: usize) -> Vec<(usize, usize)> {
        (0..LEVELS).map(|l| (h >> (l + 1), w >> (l + 1))).collect()
    }

    /// Whether level `l` is flow-supervised. Level heights are fixed fractions
    /// of the input, so the answer does not depend on resolution.
    pub fn is_selected(&self, level: usize) -> bool {
        let h = 1usize << LEVELS;
        let heights: Vec<usize> = Self::layer_dims(h, h).iter().map(|d| d.0).collect();
        select_layers(&heights, h, self.theta_resolution).contains(&level)
    }

    fn registers_at(&self, level: usize) -> usize {
        if self.is_selected(level) {
            self.config.registers
        } else {
            0
        }
    }

    /// Parameter names and shapes in a fixed order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.config.width;
        let conv = |name: &str, cin: usize, cout: usize| {
            vec![(format!("{name}.w"), vec![cout, cin, 3, 3]), (format!("{name}.b"), vec![cout])]
        };
        let mut s = Vec::new();
        s.extend(conv("gen.in", IMAGE_CHANNELS + self.aux_channels, c));
        s.push(("gen.time.w".into(), vec![c, c]));
        s.push(("gen.time.b".into(), vec![1, c]));
        for l in 0..LEVELS {
            s.extend(conv(&format!("gen.b{l}.conv1"), c, c));
            for p in ["wq", "wk", "wv", "wo"] {
                s.push((format!("gen.b{l}.attn.{p}"), vec![c, c]));
            }
            s.extend(conv(&format!("gen.b{l}.conv2"), c, c));
        }
        s.extend(conv("gen.up", c, c));
        s.extend(conv("gen.out", c, IMAGE_CHANNELS));
        s.extend(conv("ref.in", IMAGE_CHANNELS, c));
        for l in 0..LEVELS {
            s.extend(conv(&format!("ref.b{l}"), c, c));
        }
        for l in 0..LEVELS {
            let r = self.registers_at(l);
            if r > 0 {
                s.push((format!("reg.b{l}.k"), vec![r, c]));
                s.push((format!("reg.b{l}.v"), vec![r, c]));
            }
        }
        s
    }

    /// Seeded initialization: fan-in scaled normals for weights, zero biases,
    /// a damped output layer and N(0, 0.02²) registers.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = self
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.starts_with("reg.") {
                    Tensor::randn(shape, 0.02, &mut rng)
                } else if name.ends_with(".b") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = if shape.len() == 4 { shape[1] * 9 } else { shape[0] };
                    let gain = if name == "gen.out.w" { 0.1 } else { 1.0 };
                    Tensor::randn(shape, gain / (fan_in as f64).sqrt(), &mut rng)
                };
                NamedTensor::new(name, t)
            })
            .collect();
        ParamStore::new(entries)
    }

    /// Checks that `store` has exactly this model's parameter names and shapes.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let specs = self.param_specs();
        let mut problems = Vec::new();
        for (name, shape) in &specs {
            match store.get(name) {
                None => problems.push(format!("missing {name}")),
                Some(t) if t.shape() != shape.as_slice() => {
                    problems.push(format!("{name}: shape {:?}, model expects {shape:?}", t.shape()))
                }
                _ => {}
            }
        }
        for e in store.entries() {
            if !specs.iter().any(|(n, _)| n == &e.name) {
                problems.push(format!("unexpected {}", e.name));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("checkpoint does not match model: {}", problems.join(", "))))
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.config.freeze_reference && name.starts_with("ref."))
    }

    /// Records every parameter on `tape`; frozen ones as constants.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore) -> ParamVars {
        let mut vars = Vec::with_capacity(store.len());
        let mut index = HashMap::with_capacity(store.len());
        for (i, e) in store.entries().iter().enumerate() {
            let t = e.tensor.cast::<T>();
            vars.push(if self.is_trainable(&e.name) { tape.leaf(t) } else { tape.constant(t) });
            index.insert(e.name.clone(), i);
        }
        ParamVars { vars, index }
    }

    /// One denoising pass. `z_t` and `reference` are `[3×H×W]`, `aux` is
    /// `[k×H×W]`; H and W must be multiples of 4.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        z_t: Var,
        aux: Var,
        reference: Var,
        t: usize,
    ) -> Result<ForwardOutput> {
        let zs = tape.shape(z_t).to_vec();
        if zs.len() != 3 || zs[0] != IMAGE_CHANNELS || zs[1] % (1 << LEVELS) != 0 || zs[2] % (1 << LEVELS) != 0 {
            return shape_err("forward", &zs, "[3, H, W] with H, W multiples of 4");
        }
        let (h, w) = (zs[1], zs[2]);
        if tape.shape(reference) != zs.as_slice() {
            return Err(Error::Config(format!(
                "reference {:?} does not match generative input {:?}",
                tape.shape(reference),
                zs
            )));
        }
        let auxs = tape.shape(aux).to_vec();
        if auxs != [self.aux_channels, h, w] {
            return Err(Error::Config(format!(
                "aux conditioning {auxs:?} does not match [{}, {h}, {w}]",
                self.aux_channels
            )));
        }

        // reference branch: clean image, no timestep
        let r0 = self.conv(tape, p, "ref.in", reference)?;
        let r0 = tape.silu(r0);
        let mut ref_feats = Vec::with_capacity(LEVELS);
        let mut cur = r0;
        for l in 0..LEVELS {
            let pooled = tape.avg_pool2(cur)?;
            let f = self.conv(tape, p, &format!("ref.b{l}"), pooled)?;
            cur = tape.silu(f);
            ref_feats.push(cur);
        }

        let temb = self.time_embedding(tape, p, t)?;

        let input = tape.concat0(&[z_t, aux])?;
        let x0 = self.conv(tape, p, "gen.in", input)?;
        let x0 = tape.silu(x0);
        let mut skips = vec![x0];
        let mut layers = Vec::with_capacity(LEVELS);
        let mut cur = x0;
        for (l, &f_ref) in ref_feats.iter().enumerate() {
            let pooled = tape.avg_pool2(cur)?;
            let hb = tape.channel_bias(pooled, temb)?;
            let hb = self.conv(tape, p, &format!("gen.b{l}.conv1"), hb)?;
            let hb = tape.silu(hb);
            let (attn_out, layer) = self.attention_block(tape, p, l, hb, f_ref)?;
            let hb = tape.add(hb, attn_out)?;
            let hb = self.conv(tape, p, &format!("gen.b{l}.conv2"), hb)?;
            cur = tape.silu(hb);
            skips.push(cur);
            layers.push(layer);
        }

        // decoder
        let (h1, w1) = (h / 2, w / 2);
        let up = tape.resize(cur, h1, w1)?;
        let up = tape.add(up, skips[1])?;
        let up = self.conv(tape, p, "gen.up", up)?;
        let up = tape.silu(up);
        let up = tape.resize(up, h, w)?;
        let up = tape.add(up, skips[0])?;
        let predicted_noise = self.conv(tape, p, "gen.out", up)?;
        Ok(ForwardOutput { predicted_noise, layers })
    }

    fn conv<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
        tape.conv2d(x, p.get(&format!("{name}.w")), p.get(&format!("{name}.b")))
    }

    /// `silu(sinusoidal(t) · W + b)` as a per-channel bias `[C]`.
    fn time_embedding<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamVars, t: usize) -> Result<Var> {
        let c = self.config.width;
        let emb = tape.constant(sinusoidal_embedding(t, c));
        let e = tape.matmul(emb, p.get("gen.time.w"))?;
        let e = tape.add(e, p.get("gen.time.b"))?;
        let e = tape.silu(e);
        tape.reshape(e, vec![c])
    }

    fn attention_block<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        level: usize,
        x: Var,
        f_ref: Var,
    ) -> Result<(Var, LayerOutput)> {
        let s = tape.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        if tape.shape(f_ref) != s.as_slice() {
            return Err(Error::Config(format!(
                "layer {level}: generative features {s:?} and reference features {:?} differ",
                tape.shape(f_ref)
            )));
        }
        let n = h * w;
        let selected = self.is_selected(level);
        let temperature = if selected { self.temperature } else { 1.0 };
        let regs = (p.maybe(&format!("reg.b{level}.k")), p.maybe(&format!("reg.b{level}.v")));
        let weights = AttentionWeights {
            wq: p.get(&format!("gen.b{level}.attn.wq")),
            wk: p.get(&format!("gen.b{level}.attn.wk")),
            wv: p.get(&format!("gen.b{level}.attn.wv")),
            wo: p.get(&format!("gen.b{level}.attn.wo")),
            register_keys: regs.0,
            register_values: regs.1,
        };
        let gen_tokens = to_tokens(tape, x, c, n)?;
        let gen_tokens = tape.row_standardize(gen_tokens, T::lit(TOKEN_NORM_EPS))?;
        let ref_tokens = to_tokens(tape, f_ref, c, n)?;
        let ref_tokens = tape.row_standardize(ref_tokens, T::lit(TOKEN_NORM_EPS))?;
        let out = concat_attention_on(tape, &weights, gen_tokens, Some(ref_tokens), self.config.heads, T::lit(temperature))?;
        let y = tape.transpose(out.output)?;
        let y = tape.reshape(y, vec![c, h, w])?;

        let r = tape.shape(out.heads[0])[1] - 2 * n;
        let mut cross_heads = Vec::with_capacity(out.heads.len());
        let mut mass = 0.0;
        for &a in &out.heads {
            let slice = tape.slice_cols(a, n, 2 * n + r)?;
            let sv = tape.value(slice);
            mass += sv.sum().to_f64() / n as f64;
            cross_heads.push(tape.row_normalize(slice, T::lit(FLOW_EPS))?);
        }
        let layer = LayerOutput {
            layer_index: level,
            height: h,
            width: w,
            selected,
            temperature,
            full_heads: out.heads,
            cross_heads,
            reference_features: f_ref,
            registers: r,
            reference_mass: mass / self.config.heads as f64,
        };
        Ok((y, layer))
    }
}

/// `[C×h×w]` feature map to `[n×C]` tokens.
fn to_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var, c: usize, n: usize) -> Result<Var> {
    let flat = tape.reshape(x, vec![c, n])?;
    tape.transpose(flat)
}

/// Projection weights of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub register_keys: Option<Var>,
    pub register_values: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ConcatAttention {
    /// `[n × C]` output for the generative tokens.
    pub output: Var,
    /// Per-head weights `[n × (keys)]`.
    pub heads: Vec<Var>,
}

/// Self-attention over `[gen; ref; registers]` keeping only the generative
/// half: queries come from `gen[n×C]`, keys and values from every token.
/// With `reference = None` this is plain self-attention of `gen`.
pub fn concat_attention_on<T: Scalar>(
    tape: &mut Tape<T>,
    w: &AttentionWeights,
    gen: Var,
    reference: Option<Var>,
    heads: usize,
    temperature: T,
) -> Result<ConcatAttention> {
    let c = tape.shape(gen)[1];
    let d = c / heads;
    let tokens = match reference {
        Some(r) => tape.concat0(&[gen, r])?,
        None => gen,
    };
    let q = tape.matmul(gen, w.wq)?;
    let mut k = tape.matmul(tokens, w.wk)?;
    let mut v = tape.matmul(tokens, w.wv)?;
    if let (Some(rk), Some(rv)) = (w.register_keys, w.register_values) {
        k = tape.concat0(&[k, rk])?;
        v = tape.concat0(&[v, rv])?;
    }
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for hd in 0..heads {
        let (lo, hi) = (hd * d, (hd + 1) * d);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, lo, hi)?, tape.slice_cols(k, lo, hi)?, tape.slice_cols(v, lo, hi)?)
        };
        let a = crate::attention_flow::attention_on(tape, qh, kh, None, temperature)?;
        outs.push(tape.matmul(a, vh)?);
        maps.push(a);
    }
    let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let output = tape.matmul(o, w.wo)?;
    Ok(ConcatAttention { output, heads: maps })
}

/// Transformer-style sinusoidal timestep embedding `[1 × dim]`.
pub fn sinusoidal_embedding<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(vec![1, dim], |i| {
        if i >= 2 * half {
            return T::zero();
        }
        let k = i % half.max(1);
        let freq = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let a = t as f64 * freq;
        T::lit(if i < half { a.sin() } else { a.cos() })
    })
}

/// Restricts a full concatenated map `[heads × n × (2n + r)]` to reference
/// keys and registers and renormalizes rows. Also returns the mean mass that
/// rows placed there before renormalizing.
pub fn extract_cross_attention<T: Scalar>(full: &AttentionMap<T>) -> Result<(AttentionMap<T>, f64)> {
    let (heads, n_q, cols) = (full.heads(), full.queries(), full.weights.dim(2));
    let r = full.registers;
    let spatial = full.spatial_keys;
    if spatial % 2 != 0 || spatial / 2 != n_q {
        return shape_err("extract_cross_attention", full.weights.shape(), "[heads, n, 2n + r]");
    }
    let n = n_q;
    let mut data = Vec::with_capacity(heads * n * (n + r));
    let mut mass = 0.0;
    for row in full.weights.data().chunks(cols) {
        let slice = &row[n..];
        let s: T = slice.iter().copied().sum();
        mass += s.to_f64();
        let denom = s + T::lit(FLOW_EPS);
        data.extend(slice.iter().map(|&v| v / denom));
    }
    let map = AttentionMap::new(Tensor::new(vec![heads, n, n + r], data)?, n, r)?;
    Ok((map, mass / (heads * n) as f64))
}
