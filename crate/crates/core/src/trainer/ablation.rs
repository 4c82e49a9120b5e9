//! One-axis ablation sweeps over seeds.

use std::fmt;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::par;
use crate::synthdata::Dataset;

use super::evaluate::EvalReport;

pub const ABLATION_HEADER: &str = "axis,value,seed,mean_epe,warp_psnr";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Lambda,
    ThetaResolution,
    ThetaTimestep,
    Tau,
    AverageHeads,
    UpsampleFlow,
    FreezeReference,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 7] = [
        AblationAxis::Lambda,
        AblationAxis::ThetaResolution,
        AblationAxis::ThetaTimestep,
        AblationAxis::Tau,
        AblationAxis::AverageHeads,
        AblationAxis::UpsampleFlow,
        AblationAxis::FreezeReference,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Lambda => "lambda",
            AblationAxis::ThetaResolution => "theta_resolution",
            AblationAxis::ThetaTimestep => "theta_timestep",
            AblationAxis::Tau => "tau",
            AblationAxis::AverageHeads => "average_heads",
            AblationAxis::UpsampleFlow => "upsample_flow",
            AblationAxis::FreezeReference => "freeze_reference",
        }
    }

    fn is_flag(self) -> bool {
        matches!(self, AblationAxis::AverageHeads | AblationAxis::UpsampleFlow | AblationAxis::FreezeReference)
    }

    pub fn parse_value(self, s: &str) -> Result<AxisValue> {
        let s = s.trim();
        if self.is_flag() {
            match s {
                "on" | "true" | "1" => Ok(AxisValue::Flag(true)),
                "off" | "false" | "0" => Ok(AxisValue::Flag(false)),
                _ => Err(Error::Parameter(format!("{}: expected on/off, got {s:?}", self.name()))),
            }
        } else {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(AxisValue::Number)
                .ok_or_else(|| Error::Parameter(format!("{}: expected a number, got {s:?}", self.name())))
        }
    }

    /// Sets this axis to `value` in `cfg`.
    pub fn apply(self, cfg: &mut RunConfig, value: AxisValue) -> Result<()> {
        let mismatch = || Error::Parameter(format!("value {value} does not fit axis {}", self.name()));
        match (self, value) {
            (AblationAxis::Lambda, AxisValue::Number(v)) => cfg.leffa.lambda_leffa = v,
            (AblationAxis::ThetaResolution, AxisValue::Number(v)) => cfg.leffa.theta_resolution = v,
            (AblationAxis::ThetaTimestep, AxisValue::Number(v)) => {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(mismatch());
                }
                cfg.leffa.theta_timestep = v as usize
            }
            (AblationAxis::Tau, AxisValue::Number(v)) => cfg.leffa.temperature = v,
            (AblationAxis::AverageHeads, AxisValue::Flag(b)) => cfg.leffa.average_heads = b,
            (AblationAxis::UpsampleFlow, AxisValue::Flag(b)) => cfg.leffa.upsample_flow = b,
            (AblationAxis::FreezeReference, AxisValue::Flag(b)) => cfg.model.freeze_reference = b,
            _ => return Err(mismatch()),
        }
        Ok(())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
                Error::Parameter(format!("unknown ablation axis {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AxisValue {
    Number(f64),
    Flag(bool),
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Number(v) => write!(f, "{v}"),
            AxisValue::Flag(true) => write!(f, "on"),
            AxisValue::Flag(false) => write!(f, "off"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub value: AxisValue,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub cells: Vec<AblationCell>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

impl AblationTable {
    /// Values in first-seen order.
    pub fn values(&self) -> Vec<AxisValue> {
        let mut out: Vec<AxisValue> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.value) {
                out.push(c.value);
            }
        }
        out
    }

    /// `(mean, sd)` of EPE and PSNR over the successful seeds of `value`.
    pub fn summary(&self, value: AxisValue) -> Option<((f64, f64), (f64, f64))> {
        let reports: Vec<&EvalReport> =
            self.cells.iter().filter(|c| c.value == value).filter_map(|c| c.report.as_ref()).collect();
        if reports.is_empty() {
            return None;
        }
        let epe: Vec<f64> = reports.iter().map(|r| r.mean_epe).collect();
        let psnr: Vec<f64> = reports.iter().map(|r| r.warp_psnr).collect();
        Some((mean_sd(&epe), mean_sd(&psnr)))
    }

    /// Per-seed rows, then `mean` and `sd` rows per value. Failed cells have
    /// empty metrics.
    pub fn to_csv(&self) -> String {
        let axis = self.axis.name();
        let mut s = format!("{ABLATION_HEADER}\n");
        for c in &self.cells {
            match &c.report {
                Some(r) => s.push_str(&format!("{axis},{},{},{:.6},{:.4}\n", c.value, c.seed, r.mean_epe, r.warp_psnr)),
                None => s.push_str(&format!("{axis},{},{},,\n", c.value, c.seed)),
            }
        }
        for v in self.values() {
            if let Some(((em, es), (pm, ps))) = self.summary(v) {
                s.push_str(&format!("{axis},{v},mean,{em:.6},{pm:.4}\n"));
                s.push_str(&format!("{axis},{v},sd,{es:.6},{ps:.4}\n"));
            }
        }
        s
    }
}

/// Trains and evaluates one run per `(value, seed)`. A failing cell records
/// its error and the sweep continues.
pub fn run_ablation(
    base: &RunConfig,
    data: &Dataset,
    axis: AblationAxis,
    values: &[AxisValue],
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Parameter("run_ablation needs at least one seed".into()));
    }
    if values.is_empty() {
        return Err(Error::Parameter("run_ablation needs at least one value".into()));
    }
    let mut jobs = Vec::with_capacity(values.len() * seeds.len());
    for &value in values {
        let mut cfg = base.clone();
        axis.apply(&mut cfg, value)?;
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            jobs.push((value, seed, c));
        }
    }
    let cells = par::map(jobs, |(value, seed, cfg)| match cfg.run(data) {
        Ok(r) => match (r.report, r.outcome.halted) {
            (Some(report), _) => AblationCell { value, seed, report: Some(report), error: None },
            (None, halted) => AblationCell { value, seed, report: None, error: halted.or(Some("no report".into())) },
        },
        Err(e) => AblationCell { value, seed, report: None, error: Some(e.to_string()) },
    });
    Ok(AblationTable { axis, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        assert_eq!("tau".parse::<AblationAxis>().unwrap(), AblationAxis::Tau);
        assert!("nope".parse::<AblationAxis>().is_err());
        assert_eq!(AblationAxis::AverageHeads.parse_value("off").unwrap(), AxisValue::Flag(false));
        assert!(AblationAxis::Lambda.parse_value("on").is_err());
    }

    #[test]
    fn apply_sets_fields() {
        let mut c = RunConfig::default();
        AblationAxis::FreezeReference.apply(&mut c, AxisValue::Flag(true)).unwrap();
        AblationAxis::ThetaTimestep.apply(&mut c, AxisValue::Number(250.0)).unwrap();
        assert!(c.model.freeze_reference);
        assert_eq!(c.leffa.theta_timestep, 250);
        assert!(AblationAxis::Tau.apply(&mut c, AxisValue::Flag(true)).is_err());
    }

    #[test]
    fn csv_has_summary_rows() {
        let report = |e| EvalReport {
            mean_epe: e,
            warp_psnr: 20.0,
            leffa_value: 0.0,
            uniform_epe: 1.0,
            samples: 1,
            per_layer: vec![],
        };
        let t = AblationTable {
            axis: AblationAxis::Lambda,
            cells: vec![
                AblationCell { value: AxisValue::Number(0.0), seed: 0, report: Some(report(0.2)), error: None },
                AblationCell { value: AxisValue::Number(0.0), seed: 1, report: Some(report(0.4)), error: None },
                AblationCell { value: AxisValue::Number(1.0), seed: 0, report: None, error: Some("x".into()) },
            ],
        };
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], ABLATION_HEADER);
        assert_eq!(lines[3], "lambda,1,0,,");
        assert!(lines.contains(&"lambda,0,mean,0.300000,20.0000"));
        assert_eq!(lines.len(), 6);
    }
}
