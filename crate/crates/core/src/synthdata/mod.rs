//! Procedural correspondence tasks with exact ground-truth flow.
//!
//! Every generator renders the reference first, builds the ground-truth flow,
//! and produces the in-mask target with [`crate::warp::grid_sample`], so the
//! sample invariant holds by construction.

mod dataset;
mod pnm;

pub use dataset::{read_dataset, write_dataset, Dataset, ManifestEntry, MANIFEST_FILE};
pub use pnm::{decode_pnm, encode_pnm, read_pgm, read_ppm, write_pgm, write_ppm};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention_flow::FlowField;
use crate::error::{Error, Result};
use crate::model::AuxConditioning;
use crate::tensor::{bilinear_resize, kernels::normalized_coord, Tensor};
use crate::warp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PatchPermutation,
    Shift,
    Stripes,
    TryonFill,
}

impl TaskKind {
    pub fn aux_channels(self) -> usize {
        match self {
            TaskKind::TryonFill => 4,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PatchPermutation => "patch_permutation",
            TaskKind::Shift => "shift",
            TaskKind::Stripes => "stripes",
            TaskKind::TryonFill => "tryon_fill",
        }
    }
}

/// Everything needed to regenerate a sample at any resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskParams {
    pub kind: TaskKind,
    pub grid_n: usize,
    pub period: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self { kind: TaskKind::PatchPermutation, grid_n: 4, period: 4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub reference: Tensor<f32>,
    pub target: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub aux: AuxConditioning,
    pub gt_flow: FlowField<f32>,
    pub task: TaskParams,
    pub seed: u64,
}

impl SyntheticSample {
    pub fn height(&self) -> usize {
        self.target.dim(1)
    }

    pub fn width(&self) -> usize {
        self.target.dim(2)
    }

    /// Largest `|grid_sample(reference, gt_flow) − target|` inside the mask.
    pub fn invariant_error(&self) -> Result<f32> {
        let warped = warp::grid_sample(&self.reference, &self.gt_flow)?;
        let plane = self.height() * self.width();
        let m = self.mask.data();
        let mut worst = 0.0f32;
        for c in 0..3 {
            for p in 0..plane {
                if m[p] > 0.5 {
                    worst = worst.max((warped.data()[c * plane + p] - self.target.data()[c * plane + p]).abs());
                }
            }
        }
        Ok(worst)
    }
}

/// Renders one sample of `task`.
pub fn generate(task: &TaskParams, seed: u64, h: usize, w: usize) -> Result<SyntheticSample> {
    match task.kind {
        TaskKind::PatchPermutation => gen_patch_permutation(seed, task.grid_n, h, w),
        TaskKind::Shift => gen_shift(seed, h, w),
        TaskKind::Stripes => gen_stripes(seed, task.period, h, w),
        TaskKind::TryonFill => gen_tryon_fill(seed, h, w),
    }
}

// ---------------------------------------------------------------- helpers

/// Rounds to the nearest 8-bit level so PPM storage is lossless.
fn q8(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn texture_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(0);
    r
}

fn layout_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1);
    r
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn image_from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Tensor<f32> {
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..h {
        for j in 0..w {
            let px = f(i, j);
            for c in 0..3 {
                data[c * plane + i * w + j] = px[c];
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("sized")
}

/// Flow that samples pixel `src(i, j)` (or the identity where `None`).
fn flow_from_fn(h: usize, w: usize, mut src: impl FnMut(usize, usize) -> Option<(f64, f64)>) -> Result<FlowField<f32>> {
    let to_norm = |p: f64, n: usize| if n <= 1 { 0.0 } else { -1.0 + 2.0 * p / (n - 1) as f64 };
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            match src(i, j) {
                Some((si, sj)) => {
                    data.push(to_norm(si, h) as f32);
                    data.push(to_norm(sj, w) as f32);
                }
                None => {
                    data.push(normalized_coord::<f32>(i, h));
                    data.push(normalized_coord::<f32>(j, w));
                }
            }
        }
    }
    FlowField::new(Tensor::new(vec![h, w, 2], data)?)
}

/// Warped reference inside the mask, `fill(i, j)` outside.
fn compose_target(
    reference: &Tensor<f32>,
    flow: &FlowField<f32>,
    mask: &Tensor<f32>,
    mut fill: impl FnMut(usize, usize) -> [f32; 3],
) -> Result<Tensor<f32>> {
    let mut target = warp::grid_sample(reference, flow)?;
    let (h, w) = (mask.dim(1), mask.dim(2));
    let plane = h * w;
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            if mask.data()[p] <= 0.5 {
                let px = fill(i, j);
                for c in 0..3 {
                    target.data_mut()[c * plane + p] = px[c];
                }
            }
        }
    }
    Ok(target)
}

/// Smooth random colour field plus per-pixel grain, quantized.
fn random_texture(rng: &mut ChaCha8Rng, h: usize, w: usize, grain: f64) -> Result<Tensor<f32>> {
    let coarse = Tensor::<f32>::rand_uniform(vec![3, 4, 4], 0.15, 0.85, rng);
    let smooth = bilinear_resize(&coarse, h, w)?;
    let noise = Tensor::<f32>::rand_uniform(vec![3, h, w], -grain, grain, rng);
    smooth.zip_map(&noise, "texture", |a, b| q8(a + b))
}

fn check_min_size(op: &str, h: usize, w: usize, min: usize) -> Result<()> {
    if h < min || w < min {
        return Err(Error::Parameter(format!("{op}: image must be at least {min}×{min}, got {h}×{w}")));
    }
    Ok(())
}

// ---------------------------------------------------------- patch permutation

/// Reference of `grid_n²` textured patches with distinct hues; the target
/// is a seeded permutation of them.
pub fn gen_patch_permutation(seed: u64, grid_n: usize, h: usize, w: usize) -> Result<SyntheticSample> {
    check_patch_grid(grid_n, h, w)?;
    let mut perm: Vec<usize> = (0..grid_n * grid_n).collect();
    perm.shuffle(&mut layout_rng(seed));
    patch_permutation_from(seed, grid_n, h, w, &perm)
}

fn check_patch_grid(grid_n: usize, h: usize, w: usize) -> Result<()> {
    if grid_n == 0 || h == 0 || w == 0 || h % grid_n != 0 || w % grid_n != 0 {
        return Err(Error::Parameter(format!("image {h}×{w} is not divisible into a {grid_n}×{grid_n} grid")));
    }
    Ok(())
}

/// Patch task with an explicit permutation: target cell `k` shows source
/// cell `perm[k]` (cells in row-major order).
pub fn patch_permutation_from(seed: u64, grid_n: usize, h: usize, w: usize, perm: &[usize]) -> Result<SyntheticSample> {
    check_patch_grid(grid_n, h, w)?;
    let cells = grid_n * grid_n;
    let mut seen = vec![false; cells];
    if perm.len() != cells || !perm.iter().all(|&p| p < cells && !std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Parameter(format!("perm must be a permutation of 0..{cells}")));
    }
    let (ph, pw) = (h / grid_n, w / grid_n);
    let mut rng = texture_rng(seed);
    let mut hues: Vec<f32> = (0..cells).map(|k| k as f32 / cells as f32).collect();
    hues.shuffle(&mut rng);
    let styles: Vec<([f32; 3], usize, f32)> = hues
        .iter()
        .map(|&hue| {
            let base = hsv(hue, rng.gen_range(0.5..0.9), rng.gen_range(0.55..0.85));
            (base, rng.gen_range(0..4usize), rng.gen_range(0.06..0.14))
        })
        .collect();
    let grain: Vec<f32> = (0..3 * h * w).map(|_| rng.gen_range(-0.08f32..0.08)).collect();
    let plane = h * w;
    let reference = image_from_fn(h, w, |i, j| {
        let (base, pattern, amp) = styles[(i / ph) * grid_n + j / pw];
        let (di, dj) = (i % ph, j % pw);
        let on = match pattern {
            0 => (di + dj) % 2 == 0,
            1 => di % 2 == 0,
            2 => dj % 2 == 0,
            _ => (di / 2 + dj / 2) % 2 == 0,
        };
        let s = if on { amp } else { -amp };
        let p = i * w + j;
        [q8(base[0] + s + grain[p]), q8(base[1] + s + grain[plane + p]), q8(base[2] + s + grain[2 * plane + p])]
    });
    let gt_flow = flow_from_fn(h, w, |i, j| {
        let src = perm[(i / ph) * grid_n + j / pw];
        Some((((src / grid_n) * ph + i % ph) as f64, ((src % grid_n) * pw + j % pw) as f64))
    })?;
    let mask = Tensor::ones(vec![1, h, w]);
    let target = compose_target(&reference, &gt_flow, &mask, |_, _| [0.0; 3])?;
    let aux = AuxConditioning::structure_map(&target)?;
    Ok(SyntheticSample {
        reference,
        target,
        mask,
        aux,
        gt_flow,
        task: TaskParams { kind: TaskKind::PatchPermutation, grid_n, period: 0 },
        seed,
    })
}

// ---------------------------------------------------------- stripes / shift

/// Vertical coloured stripes; the target is the pattern shifted by a seeded
/// whole number of columns.
pub fn gen_stripes(seed: u64, period: usize, h: usize, w: usize) -> Result<SyntheticSample> {
    check_min_size("gen_stripes", h, w, 2)?;
    let max = (w / 4) as isize;
    let shift = layout_rng(seed).gen_range(-max..=max);
    stripes_with_shift(seed, period, h, w, shift)
}

/// Stripes task with an explicit shift: target column `j` shows reference
/// column `j + shift`.
pub fn stripes_with_shift(seed: u64, period: usize, h: usize, w: usize, shift: isize) -> Result<SyntheticSample> {
    if period < 2 {
        return Err(Error::Parameter(format!("stripe period must be >= 2, got {period}")));
    }
    check_min_size("stripes", h, w, 2)?;
    let mut rng = texture_rng(seed);
    let offset = rng.gen_range(0.0f32..1.0);
    let palette: Vec<[f32; 3]> = (0..3)
        .map(|k| {
            let c = hsv(offset + k as f32 / 3.0, rng.gen_range(0.5..0.9), rng.gen_range(0.6..0.9));
            [q8(c[0]), q8(c[1]), q8(c[2])]
        })
        .collect();
    let half = (period / 2) as isize;
    let color = |j: isize| palette[(j.div_euclid(half)).rem_euclid(3) as usize];
    let reference = image_from_fn(h, w, |_, j| color(j as isize));
    let inside = |j: usize| {
        let s = j as isize + shift;
        (0..w as isize).contains(&s).then_some(s)
    };
    let mask = Tensor::from_fn(vec![1, h, w], |p| if inside(p % w).is_some() { 1.0 } else { 0.0 });
    let gt_flow = flow_from_fn(h, w, |i, j| inside(j).map(|s| (i as f64, s as f64)))?;
    let target = compose_target(&reference, &gt_flow, &mask, |_, j| color(j as isize + shift))?;
    let aux = AuxConditioning::structure_map(&target)?;
    Ok(SyntheticSample {
        reference,
        target,
        mask,
        aux,
        gt_flow,
        task: TaskParams { kind: TaskKind::Stripes, grid_n: 0, period },
        seed,
    })
}

/// Random texture translated by a seeded whole-pixel offset in both axes.
pub fn gen_shift(seed: u64, h: usize, w: usize) -> Result<SyntheticSample> {
    check_min_size("gen_shift", h, w, 2)?;
    let mut rng = layout_rng(seed);
    let (mh, mw) = ((h / 4) as isize, (w / 4) as isize);
    let dy = rng.gen_range(-mh..=mh);
    let dx = rng.gen_range(-mw..=mw);
    shift_with_offset(seed, h, w, (dy, dx))
}

/// Shift task with an explicit `(rows, cols)` offset: target pixel `(i, j)`
/// shows reference pixel `(i + dy, j + dx)`; uncovered pixels are masked out.
pub fn shift_with_offset(seed: u64, h: usize, w: usize, (dy, dx): (isize, isize)) -> Result<SyntheticSample> {
    check_min_size("shift", h, w, 2)?;
    let reference = random_texture(&mut texture_rng(seed), h, w, 0.1)?;
    let src = |i: usize, j: usize| {
        let (si, sj) = (i as isize + dy, j as isize + dx);
        ((0..h as isize).contains(&si) && (0..w as isize).contains(&sj)).then_some((si as f64, sj as f64))
    };
    let mask = Tensor::from_fn(vec![1, h, w], |p| if src(p / w, p % w).is_some() { 1.0 } else { 0.0 });
    let gt_flow = flow_from_fn(h, w, src)?;
    let target = compose_target(&reference, &gt_flow, &mask, |_, _| [q8(0.5); 3])?;
    let aux = AuxConditioning::structure_map(&target)?;
    Ok(SyntheticSample {
        reference,
        target,
        mask,
        aux,
        gt_flow,
        task: TaskParams { kind: TaskKind::Shift, grid_n: 0, period: 0 },
        seed,
    })
}

// ---------------------------------------------------------- try-on fill

/// Garment rectangles in the reference and the target, `(top, left, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub reference: (usize, usize, usize, usize),
    pub target: (usize, usize, usize, usize),
}

/// A textured garment on a neutral reference, re-placed (moved and scaled)
/// onto a textured background in the target.
pub fn gen_tryon_fill(seed: u64, h: usize, w: usize) -> Result<SyntheticSample> {
    check_min_size("gen_tryon_fill", h, w, 6)?;
    let mut rng = layout_rng(seed);
    let th = rng.gen_range(h / 3..=h / 2).max(2);
    let tw = rng.gen_range(w / 3..=w / 2).max(2);
    let scale = rng.gen_range(0.75..1.25);
    let rh = ((th as f64 * scale).round() as usize).clamp(2, h);
    let rw = ((tw as f64 * scale).round() as usize).clamp(2, w);
    let placement = Placement {
        reference: (rng.gen_range(0..=h - rh), rng.gen_range(0..=w - rw), rh, rw),
        target: (rng.gen_range(0..=h - th), rng.gen_range(0..=w - tw), th, tw),
    };
    tryon_with_placement(seed, h, w, placement)
}

pub fn tryon_with_placement(seed: u64, h: usize, w: usize, placement: Placement) -> Result<SyntheticSample> {
    let (ry, rx, rh, rw) = placement.reference;
    let (ty, tx, th, tw) = placement.target;
    if rh < 2 || rw < 2 || th < 2 || tw < 2 || ry + rh > h || rx + rw > w || ty + th > h || tx + tw > w {
        return Err(Error::Parameter(format!("placement {placement:?} does not fit a {h}×{w} image")));
    }
    let mut rng = texture_rng(seed);
    let background = random_texture(&mut rng, h, w, 0.05)?;
    let hue = rng.gen_range(0.0f32..1.0);
    let (a, b) = (hsv(hue, 0.8, 0.85), hsv(hue + 0.5, 0.6, 0.5));
    let band = rng.gen_range(2..4usize);
    let grain: Vec<f32> = (0..3 * rh * rw).map(|_| rng.gen_range(-0.06f32..0.06)).collect();
    let reference = image_from_fn(h, w, |i, j| {
        if (ry..ry + rh).contains(&i) && (rx..rx + rw).contains(&j) {
            let (u, v) = (i - ry, j - rx);
            let base = if ((u + v) / band) % 2 == 0 { a } else { b };
            let p = u * rw + v;
            let g = [grain[p], grain[rh * rw + p], grain[2 * rh * rw + p]];
            [q8(base[0] + g[0]), q8(base[1] + g[1]), q8(base[2] + g[2])]
        } else {
            [q8(0.5); 3]
        }
    });
    let in_target = |i: usize, j: usize| (ty..ty + th).contains(&i) && (tx..tx + tw).contains(&j);
    let mask = Tensor::from_fn(vec![1, h, w], |p| if in_target(p / w, p % w) { 1.0 } else { 0.0 });
    let sy = (rh - 1) as f64 / (th - 1) as f64;
    let sx = (rw - 1) as f64 / (tw - 1) as f64;
    let gt_flow = flow_from_fn(h, w, |i, j| {
        in_target(i, j).then(|| (ry as f64 + (i - ty) as f64 * sy, rx as f64 + (j - tx) as f64 * sx))
    })?;
    let plane = h * w;
    let bg = background.data();
    let target = compose_target(&reference, &gt_flow, &mask, |i, j| {
        let p = i * w + j;
        [bg[p], bg[plane + p], bg[2 * plane + p]]
    })?;
    let aux = AuxConditioning::masked_source(&target, &mask)?;
    Ok(SyntheticSample {
        reference,
        target,
        mask,
        aux,
        gt_flow,
        task: TaskParams { kind: TaskKind::TryonFill, grid_n: 0, period: 0 },
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention_flow::coordinate_map;
    use proptest::prelude::*;

    fn all_kinds() -> Vec<TaskParams> {
        [TaskKind::PatchPermutation, TaskKind::Shift, TaskKind::Stripes, TaskKind::TryonFill]
            .into_iter()
            .map(|kind| TaskParams { kind, ..Default::default() })
            .collect()
    }

    #[test]
    fn identity_permutation_gives_coordinate_map() {
        let s = patch_permutation_from(3, 4, 16, 16, &(0..16).collect::<Vec<_>>()).unwrap();
        assert_eq!(s.gt_flow.flow, coordinate_map::<f32>(16, 16).coords);
        assert_eq!(s.target, s.reference);
    }

    #[test]
    fn swapping_two_patches_moves_by_half_the_span() {
        let (h, w) = (16, 16);
        let s = patch_permutation_from(1, 2, h, w, &[1, 0, 2, 3]).unwrap();
        let expect = h as f32 / (h - 1) as f32;
        let (dr, dc) = (s.gt_flow.flow.get(&[0, 0, 0]) - normalized_coord::<f32>(0, h), s.gt_flow.flow.get(&[0, 0, 1]));
        assert_eq!(dr, 0.0);
        assert!((dc - (-1.0 + expect)).abs() < 1e-6);
        let off = s.gt_flow.flow.get(&[0, 9, 1]) - normalized_coord::<f32>(9, w);
        assert!((off + expect).abs() < 1e-6, "{off}");
        assert_eq!(s.gt_flow.flow.get(&[12, 12, 1]), normalized_coord::<f32>(12, w));
    }

    #[test]
    fn patch_rejects_indivisible_and_bad_perm() {
        assert!(matches!(gen_patch_permutation(0, 3, 16, 16), Err(Error::Parameter(_))));
        assert!(patch_permutation_from(0, 2, 8, 8, &[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn patch_colors_are_distinct() {
        let s = gen_patch_permutation(5, 4, 32, 32).unwrap();
        let mean = |a: usize, b: usize| -> [f32; 3] {
            let mut m = [0.0; 3];
            for c in 0..3 {
                for i in 0..8 {
                    for j in 0..8 {
                        m[c] += s.reference.get(&[c, a * 8 + i, b * 8 + j]) / 64.0;
                    }
                }
            }
            m
        };
        let means: Vec<[f32; 3]> = (0..16).map(|k| mean(k / 4, k % 4)).collect();
        for x in 0..16 {
            for y in x + 1..16 {
                let d: f32 = (0..3).map(|c| (means[x][c] - means[y][c]).abs()).sum();
                assert!(d > 0.01, "patches {x} and {y} look alike");
            }
        }
    }

    #[test]
    fn stripes_shift_cases() {
        let s = stripes_with_shift(2, 4, 8, 9, 0).unwrap();
        assert_eq!(s.gt_flow.flow, coordinate_map::<f32>(8, 9).coords);
        let s = stripes_with_shift(2, 4, 8, 9, 2).unwrap();
        for j in 0..7 {
            let off = s.gt_flow.flow.get(&[3, j, 1]) - normalized_coord::<f32>(j, 9);
            assert!((off - 2.0 * 2.0 / 8.0).abs() < 1e-6);
        }
        assert_eq!(s.mask.get(&[0, 0, 7]), 0.0);
        assert_eq!(s.mask.get(&[0, 0, 6]), 1.0);
        assert!(stripes_with_shift(2, 1, 8, 8, 0).is_err());
    }

    #[test]
    fn tryon_cases() {
        let p = Placement { reference: (2, 3, 5, 6), target: (2, 3, 5, 6) };
        let s = tryon_with_placement(4, 12, 12, p).unwrap();
        let coords = coordinate_map::<f32>(12, 12);
        assert_eq!(s.gt_flow.flow, coords.coords);
        let p = Placement { reference: (1, 1, 4, 4), target: (6, 5, 4, 4) };
        let s = tryon_with_placement(4, 12, 12, p).unwrap();
        for i in 6..10 {
            for j in 5..9 {
                let dr = s.gt_flow.flow.get(&[i, j, 0]) - coords.coords.get(&[i, j, 0]);
                let dc = s.gt_flow.flow.get(&[i, j, 1]) - coords.coords.get(&[i, j, 1]);
                assert!((dr + 10.0 / 11.0).abs() < 1e-6 && (dc + 8.0 / 11.0).abs() < 1e-6);
            }
        }
        // aux: zero inside the garment, target elsewhere, then the mask
        let plane = 144;
        for p in 0..plane {
            let m = s.mask.data()[p];
            assert_eq!(s.aux.channels.data()[3 * plane + p], m);
            for c in 0..3 {
                let a = s.aux.channels.data()[c * plane + p];
                assert_eq!(a, if m > 0.5 { 0.0 } else { s.target.data()[c * plane + p] });
            }
        }
    }

    #[test]
    fn invariant_holds_for_every_kind() {
        for task in all_kinds() {
            for seed in 0..10 {
                let s = generate(&task, seed, 32, 32).unwrap();
                assert_eq!(s.invariant_error().unwrap(), 0.0, "{task:?} seed {seed}");
                assert!(s.gt_flow.in_unit_box());
                assert_eq!(s.aux.count(), task.kind.aux_channels());
                assert!(s.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn generation_is_deterministic(seed in any::<u64>(), kind in 0usize..4, hw in prop::sample::select(vec![(16usize, 16usize), (32, 24), (24, 32)])) {
            let task = all_kinds()[kind];
            let a = generate(&task, seed, hw.0, hw.1).unwrap();
            let b = generate(&task, seed, hw.0, hw.1).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.invariant_error().unwrap(), 0.0);
            prop_assert!(a.gt_flow.in_unit_box());
        }
    }
}
