//! Dataset directories: PPM/PGM images, LFT1 flow files and a JSON-lines manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate, read_pgm, read_ppm, write_pgm, write_ppm, SyntheticSample, TaskKind, TaskParams};
use crate::attention_flow::FlowField;
use crate::error::{Error, Result};
use crate::model::AuxConditioning;
use crate::par;
use crate::tensor::{read_checkpoint, write_checkpoint, NamedTensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const FLOW_TENSOR: &str = "gt_flow";

/// One manifest line. Paths are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: usize,
    pub task_kind: TaskKind,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub grid_n: usize,
    pub period: usize,
    pub reference: String,
    pub target: String,
    pub mask: String,
    pub flow: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    /// Generates `count` samples with seeds `seed, seed + 1, …`.
    pub fn generate(task: &TaskParams, seed: u64, count: usize, h: usize, w: usize) -> Result<Self> {
        let seeds: Vec<u64> = (0..count as u64).map(|i| seed.wrapping_add(i)).collect();
        let samples = par::map(seeds, |s| generate(task, s, h, w)).into_iter().collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(H, W)` of the first sample.
    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.height(), s.width()))
    }

    /// Same samples re-rendered at `h × w` from their task and seed.
    pub fn at_resolution(&self, h: usize, w: usize) -> Result<Self> {
        if self.samples.iter().all(|s| (s.height(), s.width()) == (h, w)) {
            return Ok(self.clone());
        }
        let samples = par::map(self.samples.iter().collect(), |s: &SyntheticSample| generate(&s.task, s.seed, h, w)).into_iter().collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn aux_channels(&self) -> Option<usize> {
        self.samples.first().map(|s| s.aux.count())
    }
}

fn stem(i: usize) -> String {
    format!("{i:05}")
}

/// Writes every sample plus the manifest into `dir` (created if missing).
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    for (index, s) in dataset.samples.iter().enumerate() {
        let st = stem(index);
        let entry = ManifestEntry {
            index,
            task_kind: s.task.kind,
            seed: s.seed,
            height: s.height(),
            width: s.width(),
            grid_n: s.task.grid_n,
            period: s.task.period,
            reference: format!("{st}_reference.ppm"),
            target: format!("{st}_target.ppm"),
            mask: format!("{st}_mask.pgm"),
            flow: format!("{st}_flow.lft"),
        };
        write_ppm(&s.reference, dir.join(&entry.reference))?;
        write_ppm(&s.target, dir.join(&entry.target))?;
        write_pgm(&s.mask, dir.join(&entry.mask))?;
        write_checkpoint(dir.join(&entry.flow), &[NamedTensor::new(FLOW_TENSOR, s.gt_flow.flow.clone())])?;
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.push(b'\n');
    }
    fs::File::create(dir.join(MANIFEST_FILE))?.write_all(&manifest)?;
    Ok(())
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

/// Loads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let mut samples = Vec::new();
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e: ManifestEntry = serde_json::from_str(line)
            .map_err(|err| Error::Format(format!("{MANIFEST_FILE} line {}: {err}", line_no + 1)))?;
        let reference = read_ppm(resolve(dir, &e.reference))?;
        let target = read_ppm(resolve(dir, &e.target))?;
        let mask = read_pgm(resolve(dir, &e.mask))?;
        let flow = read_checkpoint(resolve(dir, &e.flow))?
            .into_iter()
            .find(|t| t.name == FLOW_TENSOR)
            .ok_or_else(|| Error::Format(format!("{} has no {FLOW_TENSOR} tensor", e.flow)))?
            .tensor;
        let expect = [e.height, e.width];
        if reference.shape()[1..] != expect || target.shape()[1..] != expect || mask.shape()[1..] != expect {
            return Err(Error::Format(format!("sample {}: image sizes disagree with the manifest", e.index)));
        }
        let aux = match e.task_kind {
            TaskKind::TryonFill => AuxConditioning::masked_source(&target, &mask)?,
            _ => AuxConditioning::structure_map(&target)?,
        };
        samples.push(SyntheticSample {
            reference,
            target,
            mask,
            aux,
            gt_flow: FlowField::new(flow)?,
            task: TaskParams { kind: e.task_kind, grid_n: e.grid_n, period: e.period },
            seed: e.seed,
        });
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        v.sort();
        v
    }

    #[test]
    fn patch_dataset_round_trips_exactly() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(&TaskParams::default(), 7, 3, 16, 16).unwrap();
        write_dataset(tmp.path(), &ds).unwrap();
        let back = read_dataset(tmp.path()).unwrap();
        assert_eq!(back, ds);
        let manifest = fs::read_to_string(tmp.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.lines().count(), 3);
    }

    #[test]
    fn tryon_dataset_round_trips_within_quantization() {
        let tmp = tempfile::tempdir().unwrap();
        let task = TaskParams { kind: TaskKind::TryonFill, ..Default::default() };
        let ds = Dataset::generate(&task, 1, 2, 16, 16).unwrap();
        write_dataset(tmp.path(), &ds).unwrap();
        let back = read_dataset(tmp.path()).unwrap();
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert_eq!(a.reference, b.reference);
            assert_eq!(a.gt_flow, b.gt_flow);
            assert!(a.target.max_abs_diff(&b.target).unwrap() <= 0.5 / 255.0 + 1e-7);
        }
    }

    #[test]
    fn same_seed_writes_identical_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let task = TaskParams { kind: TaskKind::Stripes, ..Default::default() };
        write_dataset(a.path(), &Dataset::generate(&task, 3, 2, 8, 8).unwrap()).unwrap();
        write_dataset(b.path(), &Dataset::generate(&task, 3, 2, 8, 8).unwrap()).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }

    #[test]
    fn rerendering_keeps_task_and_seed() {
        let ds = Dataset::generate(&TaskParams::default(), 0, 2, 16, 16).unwrap();
        let big = ds.at_resolution(32, 24).unwrap();
        assert_eq!(big.resolution(), Some((32, 24)));
        assert_eq!(big.samples[1].seed, 1);
    }

    #[test]
    fn bad_manifest_is_a_format_error() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join(MANIFEST_FILE), "{\"index\": 0}\n").unwrap();
        assert!(matches!(read_dataset(tmp.path()), Err(Error::Format(_))));
    }
}
