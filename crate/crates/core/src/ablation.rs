//! Multi-seed experiment grids: the loss ablation and the K sweep.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{compute_iou, evaluate_segmentation, IouReport, ResultRow};
use crate::trainer::{train, TrainState};

/// A named set of `--set`-style overrides applied on top of a base config.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub overrides: Vec<String>,
}

impl AblationRow {
    pub fn new(name: impl Into<String>, overrides: &[&str]) -> Self {
        Self {
            name: name.into(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Published full-scale mIoU for the loss-ablation rows, in row order.
pub const TABLE1_REFERENCE: [f64; 5] = [36.6, 48.8, 49.1, 50.8, 51.5];

/// Loss-ablation rows: source only, then adding one term at a time.
pub fn table1_rows() -> Vec<AblationRow> {
    vec![
        AblationRow::new("source only", &["losses=seg"]),
        AblationRow::new("+cadv", &["losses=seg,cadv"]),
        AblationRow::new("+cadv+co", &["losses=seg,cadv,co"]),
        AblationRow::new("+cadv+co+orth", &["losses=seg,cadv,co,orth"]),
        AblationRow::new("full", &["losses=seg,cadv,co,orth,cl"]),
    ]
}

/// Parses `KEY=v1,v2,...` into one row per value.
pub fn parse_grid(spec: &str) -> Result<Vec<AblationRow>> {
    let spec = spec.trim();
    if spec.is_empty() {
        return Ok(Vec::new());
    }
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid {spec:?} is not KEY=v1,v2,...")))?;
    let key = key.trim();
    if key == "losses" {
        return Err(Error::Config("use the table1 preset for loss grids".into()));
    }
    values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| Ok(AblationRow::new(format!("{key}={v}"), &[&format!("{key}={v}")])))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Target-domain validation IoU, or the error that aborted the run.
    pub result: std::result::Result<IouReport, String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: ResultRow,
    pub seeds: Vec<SeedOutcome>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

/// Per-class and mIoU medians over the successful seeds.
pub fn summarize(name: &str, seeds: &[SeedOutcome]) -> ResultRow {
    let ok: Vec<&IouReport> = seeds.iter().filter_map(|s| s.result.as_ref().ok()).collect();
    let failed: Vec<String> = seeds
        .iter()
        .filter_map(|s| s.result.as_ref().err().map(|e| format!("seed {} failed: {e}", s.seed)))
        .collect();
    let classes = ok.first().map_or(0, |r| r.per_class.len());
    let per_class = (0..classes)
        .map(|u| median(&mut ok.iter().filter_map(|r| r.per_class[u]).collect::<Vec<_>>()))
        .collect();
    ResultRow {
        name: name.to_string(),
        per_class,
        miou: median(&mut ok.iter().map(|r| r.miou).collect::<Vec<_>>()),
        note: failed.join("; "),
    }
}

/// Trains one model with `cfg` and scores it on the target validation split.
pub fn train_and_evaluate(cfg: &RunConfig, data: &Dataset) -> Result<IouReport> {
    let mut state = TrainState::new(&cfg.model, &cfg.train)?;
    train(&mut state, data, &cfg.train, |_, _| Ok(()))?;
    compute_iou(&evaluate_segmentation(&state.seg, &data.target_val)?)
}

/// Runs every row for every seed. Failed runs are kept as failure markers
/// instead of aborting the table; `progress` sees each finished run.
pub fn run_ablation(
    base: &RunConfig,
    data: &Dataset,
    rows: &[AblationRow],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow, &SeedOutcome),
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut outcomes = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let result = row_config(base, row, seed)
                .and_then(|cfg| train_and_evaluate(&cfg, data))
                .map_err(|e| e.to_string());
            let outcome = SeedOutcome { seed, result };
            progress(row, &outcome);
            outcomes.push(outcome);
        }
        out.push(AblationResult {
            row: summarize(&row.name, &outcomes),
            seeds: outcomes,
        });
    }
    Ok(out)
}

/// The base config with the row's overrides and the given seed applied.
pub fn row_config(base: &RunConfig, row: &AblationRow, seed: u64) -> Result<RunConfig> {
    let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    for o in &row.overrides {
        crate::config::apply_override(&mut table, o)?;
    }
    crate::config::apply_override(&mut table, &format!("train.seed={seed}"))?;
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
