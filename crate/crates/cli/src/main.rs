use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use leffa_core::config::RunConfig;
use leffa_core::gradient_suite::{self, DEFAULT_CASES};
use leffa_core::model::ParamStore;
use leffa_core::synthdata::{read_dataset, write_dataset, write_pgm, write_ppm, Dataset, MANIFEST_FILE};
use leffa_core::tensor::{read_checkpoint, write_checkpoint};
use leffa_core::trainer::{evaluate, metrics_csv, probe_set, run_ablation, AblationAxis, EvalReport};
use leffa_core::visualize::layer_views;
use leffa_core::{Error, Result};

const CONFIG_FILE: &str = "config.json";
const CHECKPOINT_FILE: &str = "checkpoint.lft";
const METRICS_FILE: &str = "metrics.csv";
const EVAL_FILE: &str = "eval.json";
const THREADS_VAR: &str = "LEFFA_THREADS";

#[derive(Parser)]
#[command(name = "leffa", version, about = "Flow-supervised attention on a toy dual-branch diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset for every size in `data.sizes`.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train through the stage plan and evaluate on the probe set.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory, or a `gen-data` output holding one per size.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the evaluation report of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the probe set at the final stage resolution.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `config.json` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the 64-bit finite-difference suite over every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_CASES)]
        cases: usize,
    },
    /// Write attention heatmaps, flow colors and warped references per layer.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index of the sample in the dataset.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Query pixel as `row,col`; the image center by default.
        #[arg(long)]
        query: Option<String>,
        /// Diffusion timestep; `eval.probe_t` by default.
        #[arg(long)]
        timestep: Option<usize>,
    },
    /// Train one run per value and seed along a single axis.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma separated, e.g. `0,1e-3` or `on,off`.
        #[arg(long)]
        values: String,
        /// Comma separated seeds.
        #[arg(long, default_value = "0")]
        seeds: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Json(_) => 2,
        Error::Numerical(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_VAR} must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::GenData { config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            gen_data(&cfg, &out)
        }
        Command::Train { config, data, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o.to_string_lossy().into_owned();
            }
            train(&cfg, data.as_deref())
        }
        Command::Eval { checkpoint, data, config } => {
            let (cfg, params) = load_run(&checkpoint, config.as_deref())?;
            let report = eval(&cfg, &params, data.as_deref())?;
            emit(&format!("{}\n", serde_json::to_string_pretty(&report)?));
            Ok(0)
        }
        Command::Gradcheck { seed, cases } => {
            let checks = gradient_suite::run_suite(seed, cases)?;
            emit(&gradient_suite::format_table(&checks));
            Ok(if checks.iter().all(|c| c.passed()) { 0 } else { 3 })
        }
        Command::Visualize { checkpoint, sample, out, data, config, query, timestep } => {
            let (cfg, params) = load_run(&checkpoint, config.as_deref())?;
            visualize(&cfg, &params, data.as_deref(), sample, &out, query.as_deref(), timestep)
        }
        Command::Ablate { config, data, out, axis, values, seeds } => {
            let cfg = load_config(config.as_deref())?;
            ablate(&cfg, data.as_deref(), &out, &axis, &values, &seeds)
        }
    }
}

fn size_dir(out: &Path, h: usize, w: usize) -> PathBuf {
    out.join(format!("{h}x{w}"))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<u8> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    for &[h, w] in &cfg.data.sizes {
        let ds = cfg.data.generate(h, w)?;
        write_dataset(size_dir(out, h, w), &ds)?;
    }
    fs::write(out.join(CONFIG_FILE), cfg.to_json())?;
    Ok(0)
}

/// A dataset directory, or the `gen-data` output containing one per size.
/// For the latter the first-stage resolution is preferred.
fn load_data(cfg: &RunConfig, path: Option<&Path>) -> Result<Dataset> {
    let Some(path) = path else {
        let first = cfg.stages.first().ok_or_else(|| Error::Config("empty stage plan".into()))?;
        return cfg.data.generate(first.height, first.width);
    };
    if path.join(MANIFEST_FILE).is_file() {
        return read_dataset(path);
    }
    let preferred = cfg.stages.first().map(|s| size_dir(path, s.height, s.width));
    if let Some(p) = preferred.filter(|p| p.join(MANIFEST_FILE).is_file()) {
        return read_dataset(p);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::Parameter(format!("cannot read data directory {}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    match dirs.first() {
        Some(d) => read_dataset(d),
        None => Err(Error::Parameter(format!("{} holds no {MANIFEST_FILE}", path.display()))),
    }
}

fn save_params(path: &Path, params: &ParamStore) -> Result<()> {
    write_checkpoint(path, params.entries())
}

fn train(cfg: &RunConfig, data: Option<&Path>) -> Result<u8> {
    cfg.validate()?;
    let dataset = load_data(cfg, data)?;
    let out = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json())?;
    let result = cfg.run(&dataset)?;
    fs::write(out.join(METRICS_FILE), metrics_csv(&result.outcome.metrics))?;
    save_params(&out.join(CHECKPOINT_FILE), &result.outcome.params)?;
    if let Some(msg) = &result.outcome.halted {
        eprintln!("error: training halted at {msg}; last finite parameters saved to {}", out.join(CHECKPOINT_FILE).display());
        return Ok(3);
    }
    if let Some(report) = &result.report {
        fs::write(out.join(EVAL_FILE), serde_json::to_string_pretty(report)?)?;
        eprintln!("mean_epe {:.4} uniform_epe {:.4} warp_psnr {:.2}", report.mean_epe, report.uniform_epe, report.warp_psnr);
    }
    Ok(0)
}

fn load_run(checkpoint: &Path, config: Option<&Path>) -> Result<(RunConfig, ParamStore)> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    let cfg = RunConfig::load(&cfg_path)?;
    let params = ParamStore::new(read_checkpoint(checkpoint)?);
    cfg.build_model()?.check_params(&params)?;
    Ok((cfg, params))
}

fn eval_data(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(p) => load_data(cfg, Some(p)),
        None => {
            let last = cfg.stages.last().ok_or_else(|| Error::Config("empty stage plan".into()))?;
            let train = cfg.data.generate(last.height, last.width)?;
            probe_set(&train, &cfg.eval, last.height, last.width)
        }
    }
}

fn eval(cfg: &RunConfig, params: &ParamStore, data: Option<&Path>) -> Result<EvalReport> {
    let model = cfg.build_model()?;
    let dataset = eval_data(cfg, data)?;
    evaluate(&model, params, &cfg.leffa, &dataset, &cfg.eval)
}

fn parse_query(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Parameter(format!("--query expects row,col, got {s:?}"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

fn visualize(
    cfg: &RunConfig,
    params: &ParamStore,
    data: Option<&Path>,
    index: usize,
    out: &Path,
    query: Option<&str>,
    timestep: Option<usize>,
) -> Result<u8> {
    let dataset = eval_data(cfg, data)?;
    let sample = dataset
        .samples
        .get(index)
        .ok_or_else(|| Error::Parameter(format!("--sample {index} is out of range for {} samples", dataset.len())))?;
    let pixel = match query {
        Some(q) => parse_query(q)?,
        None => (sample.height() / 2, sample.width() / 2),
    };
    let model = cfg.build_model()?;
    let views = layer_views(&model, params, &cfg.leffa, sample, timestep.unwrap_or(cfg.eval.probe_t), pixel)?;
    fs::create_dir_all(out)?;
    write_ppm(&sample.reference, out.join("reference.ppm"))?;
    write_ppm(&sample.target, out.join("target.ppm"))?;
    for v in &views {
        let l = v.layer_index;
        write_pgm(&v.heatmap, out.join(format!("layer{l}_attention.pgm")))?;
        write_ppm(&v.flow_color, out.join(format!("layer{l}_flow.ppm")))?;
        write_ppm(&v.warped, out.join(format!("layer{l}_warped.ppm")))?;
    }
    eprintln!("wrote {} layer(s) to {}", views.len(), out.display());
    Ok(0)
}

fn ablate(cfg: &RunConfig, data: Option<&Path>, out: &Path, axis: &str, values: &str, seeds: &str) -> Result<u8> {
    cfg.validate()?;
    let axis: AblationAxis = axis.parse()?;
    let values = values.split(',').map(|v| axis.parse_value(v)).collect::<Result<Vec<_>>>()?;
    let seeds = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| Error::Parameter(format!("bad seed {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let dataset = load_data(cfg, data)?;
    let table = run_ablation(cfg, &dataset, axis, &values, &seeds)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json())?;
    fs::write(out.join("ablation.csv"), table.to_csv())?;
    emit(&table.to_csv());
    Ok(0)
}
