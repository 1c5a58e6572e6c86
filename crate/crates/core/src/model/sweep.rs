//! Scaling sweeps: one model per grid point on a shared split, then a
//! power-law fit of held-out AUC against the axis.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{train, LongerModel, ModelConfig};
use crate::analysis::{fit_power_law, forward_mul_adds, FitResult};
use crate::error::{Error, Result};
use crate::inputs::Sample;

/// Fewest grid points the fitter accepts.
pub const MIN_FIT_POINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Raw sequence length `L`.
    SeqLen,
    /// Self-causal layer count `N`.
    Depth,
    /// Per-item width `d` (model width `K·d`).
    Width,
    /// Sequence length, reported against analytic forward FLOPs.
    Flops,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "seq_len" => Ok(SweepAxis::SeqLen),
            "depth" => Ok(SweepAxis::Depth),
            "width" => Ok(SweepAxis::Width),
            "flops" => Ok(SweepAxis::Flops),
            _ => Err(Error::Config(format!(
                "unknown sweep axis '{}' (seq_len, depth, width, flops)",
                s
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::SeqLen => "seq_len",
            SweepAxis::Depth => "depth",
            SweepAxis::Width => "width",
            SweepAxis::Flops => "flops",
        }
    }
}

/// `base` with the axis set to `value`. Length changes keep the query
/// count at the same fraction of the merged length.
pub fn axis_config(base: &ModelConfig, axis: SweepAxis, value: usize) -> ModelConfig {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::SeqLen | SweepAxis::Flops => {
            cfg.seq_len = value;
            let frac = base.queries as f64 / base.merged_len() as f64;
            cfg.queries = ((frac * cfg.merged_len() as f64).round() as usize).clamp(1, cfg.merged_len().max(1));
        }
        SweepAxis::Depth => cfg.self_layers = value,
        SweepAxis::Width => cfg.item_dim = value,
    }
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: usize,
    /// Abscissa used by the fit.
    pub x: f64,
    pub params: usize,
    pub forward_flops: u64,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    pub fit: Option<FitResult>,
    /// Why no fit was produced.
    pub fit_note: Option<String>,
}

pub const SWEEP_CSV_HEADER: &str = "axis,value,x,params,forward_flops,auc,logloss,seconds,error";

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{}", v));
        let mut s = format!("{}\n", SWEEP_CSV_HEADER);
        for p in &self.points {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{:.3},{}",
                self.axis.name(),
                p.value,
                p.x,
                p.params,
                p.forward_flops,
                opt(p.auc),
                opt(p.logloss),
                p.seconds,
                p.error.as_deref().unwrap_or("").replace(',', ";")
            )
            .unwrap();
        }
        s
    }

    /// Held-out AUC per grid point, in grid order.
    pub fn aucs(&self) -> Vec<Option<f64>> {
        self.points.iter().map(|p| p.auc).collect()
    }
}

fn run_point(
    train_set: &[Sample],
    held_out: &[Sample],
    cfg: &ModelConfig,
) -> Result<(usize, u64, Option<f64>, Option<f64>)> {
    let mut model = LongerModel::new(cfg.clone())?;
    let report = train(&mut model, train_set, held_out, &cfg.train)?;
    let last = report.last().ok_or_else(|| Error::Config("zero training epochs".into()))?;
    Ok((model.param_count(), 2 * forward_mul_adds(cfg), last.auc, last.logloss))
}

/// Trains one model per value with the base seeds. A failing point is
/// recorded and the sweep continues; the fit runs when at least
/// [`MIN_FIT_POINTS`] points have an AUC.
pub fn run_sweep(
    train_set: &[Sample],
    held_out: &[Sample],
    base: &ModelConfig,
    axis: SweepAxis,
    values: &[usize],
) -> SweepReport {
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let cfg = axis_config(base, axis, value);
        let t = Instant::now();
        let outcome = run_point(train_set, held_out, &cfg);
        let seconds = t.elapsed().as_secs_f64();
        let flops = 2 * forward_mul_adds(&cfg);
        let x = if axis == SweepAxis::Flops { flops as f64 } else { value as f64 };
        points.push(match outcome {
            Ok((params, forward_flops, auc, logloss)) => SweepPoint {
                value,
                x,
                params,
                forward_flops,
                auc,
                logloss,
                seconds,
                error: None,
            },
            Err(e) => SweepPoint {
                value,
                x,
                params: 0,
                forward_flops: flops,
                auc: None,
                logloss: None,
                seconds,
                error: Some(e.to_string()),
            },
        });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().filter_map(|p| p.auc.map(|a| (p.x, a))).unzip();
    let (fit, fit_note) = if xs.len() < MIN_FIT_POINTS {
        (
            None,
            Some(format!("{} usable points, need {}", xs.len(), MIN_FIT_POINTS)),
        )
    } else {
        match fit_power_law(&xs, &ys) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    SweepReport {
        axis,
        points,
        fit,
        fit_note,
    }
}
