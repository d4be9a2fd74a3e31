//! On-disk formats: versioned JSON schemas for market and run configuration,
//! and the CSV writers for trajectories and aggregates.
//!
//! Unknown keys in config files are hard errors, and all floating-point CSV
//! output carries 17 significant digits so files round-trip exactly.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{ConvergenceReport, SimulationEvent, Trajectory};
use crate::error::{Error, Result};
use crate::experiments::{AggregateRow, ExperimentTrajectory, PreferenceFormat, RankingStrategy};
use crate::market::MarketConfig;

pub const MARKET_SCHEMA: &str = "tomarket.market/1";
pub const RUN_SCHEMA: &str = "tomarket.run/1";

/// 17 significant digits: enough for exact f64 round trips.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

/// Market parameterization as stored on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketFile {
    pub schema: String,
    pub weights: Vec<f64>,
    pub visibility: Vec<Vec<f64>>,
    pub quality: Vec<Vec<f64>>,
    pub feedback: Vec<f64>,
}

impl MarketFile {
    pub fn from_config(cfg: &MarketConfig) -> Self {
        Self {
            schema: MARKET_SCHEMA.into(),
            weights: cfg.weights().to_vec(),
            visibility: cfg.visibility().to_vec(),
            quality: cfg.quality().to_vec(),
            feedback: cfg.feedback().to_vec(),
        }
    }

    pub fn into_config(self) -> Result<MarketConfig> {
        if self.schema != MARKET_SCHEMA {
            return Err(Error::InvalidConfig(format!(
                "unsupported market schema {:?}, expected {MARKET_SCHEMA:?}",
                self.schema
            )));
        }
        MarketConfig::new(self.weights, self.visibility, self.quality, self.feedback)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(Error::from)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Equilibrium,
    Deterministic,
    Stochastic,
    Experiment,
    Verify,
}

/// Inline market or a path to a market file (relative paths resolve against
/// the run file's directory).
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum MarketSource {
    Path(String),
    Inline(MarketFile),
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatName {
    Dense,
    Triplet,
}

impl From<FormatName> for PreferenceFormat {
    fn from(f: FormatName) -> Self {
        match f {
            FormatName::Dense => PreferenceFormat::DenseCsv,
            FormatName::Triplet => PreferenceFormat::TripletCsv,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum StrategyName {
    Random,
    Popularity,
    Quality,
}

impl From<StrategyName> for RankingStrategy {
    fn from(s: StrategyName) -> Self {
        match s {
            StrategyName::Random => RankingStrategy::Random,
            StrategyName::Popularity => RankingStrategy::Popularity,
            StrategyName::Quality => RankingStrategy::Quality,
        }
    }
}

/// Experiment-mode section of a run file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub preferences: PathBuf,
    pub format: FormatName,
    pub mask: Option<PathBuf>,
    pub normalize: Option<bool>,
    /// Precomputed `user,group` assignment; mutually exclusive with
    /// `num_groups`.
    pub groups: Option<PathBuf>,
    pub num_groups: Option<usize>,
    pub cluster_seed: Option<u64>,
    pub strategies: Option<Vec<StrategyName>>,
    /// Position-bias weights, one per line; reciprocal-rank defaults apply
    /// when absent.
    pub iota: Option<PathBuf>,
    pub iota_cutoff: Option<usize>,
    /// Feedback exponent of the trial logit (required: it is a modeling
    /// choice, not an estimate).
    pub feedback: f64,
    pub unseen_only: Option<bool>,
    pub window: Option<u64>,
}

/// Verify-mode section of a run file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub random_markets: Option<usize>,
    pub seed: Option<u64>,
}

/// Top-level run configuration.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub schema: String,
    pub mode: Mode,
    pub market: Option<MarketSource>,
    pub seeds: Option<Vec<u64>>,
    /// Steps for deterministic runs, purchases for stochastic runs, arrivals
    /// for experiments.
    pub steps: Option<u64>,
    pub record_every: Option<u64>,
    pub tol: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub damping: Option<f64>,
    pub max_iter: Option<u64>,
    pub record_events: Option<bool>,
    pub experiment: Option<ExperimentSection>,
    pub verify: Option<VerifySection>,
}

impl RunFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let run: RunFile = serde_json::from_str(&text)?;
        if run.schema != RUN_SCHEMA {
            return Err(Error::InvalidConfig(format!(
                "unsupported run schema {:?}, expected {RUN_SCHEMA:?}",
                run.schema
            )));
        }
        Ok(run)
    }

    /// Resolve the market, loading a referenced file relative to `base_dir`.
    pub fn resolve_market(&self, base_dir: &Path) -> Result<MarketConfig> {
        let source = self.market.as_ref().ok_or_else(|| {
            Error::InvalidConfig("run file is missing the `market` field".into())
        })?;
        match source {
            MarketSource::Inline(file) => file.clone().into_config(),
            MarketSource::Path(rel) => {
                let path = base_dir.join(rel);
                MarketFile::load(&path)?.into_config()
            }
        }
    }
}

/// Columns: `t, phi_1..phi_I, efficiency, entropy, objective, residual`.
/// The objective cell is empty when the market has no tracked objective (or
/// the state sits outside its feasible set).
pub fn write_trajectory_csv<W: Write>(mut w: W, trajectory: &Trajectory) -> Result<()> {
    let items = trajectory
        .records
        .first()
        .map(|r| r.shares.len())
        .unwrap_or(0);
    let mut header = String::from("t");
    for j in 1..=items {
        header.push_str(&format!(",phi_{j}"));
    }
    header.push_str(",efficiency,entropy,objective,residual");
    writeln!(w, "{header}")?;
    for record in &trajectory.records {
        let mut line = record.time.to_string();
        for &phi in &record.shares {
            line.push(',');
            line.push_str(&fmt_float(phi));
        }
        line.push_str(&format!(
            ",{},{},{},{}",
            fmt_float(record.efficiency),
            fmt_float(record.entropy),
            fmt_opt(record.objective),
            fmt_float(record.residual),
        ));
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Columns: `t, type, item, purchased` (item empty when nothing was tried).
pub fn write_events_csv<W: Write>(mut w: W, events: &[SimulationEvent]) -> Result<()> {
    writeln!(w, "t,type,item,purchased")?;
    for e in events {
        let item = e.tried_item.map(|j| j.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", e.step, e.user_type, item, u8::from(e.purchased))?;
    }
    Ok(())
}

/// Per-seed stochastic aggregate against a solved equilibrium:
/// distance/gap/efficiency/entropy quartile bands per recorded time.
pub fn write_convergence_csv<W: Write>(mut w: W, report: &ConvergenceReport) -> Result<()> {
    writeln!(
        w,
        "t,dist_p25,dist_p50,dist_p75,gap_p25,gap_p50,gap_p75,eff_p25,eff_p50,eff_p75,ent_p25,ent_p50,ent_p75"
    )?;
    for row in &report.rows {
        let gap = row.objective_gap;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.time,
            fmt_float(row.distance_l1[0]),
            fmt_float(row.distance_l1[1]),
            fmt_float(row.distance_l1[2]),
            fmt_opt(gap.map(|g| g[0])),
            fmt_opt(gap.map(|g| g[1])),
            fmt_opt(gap.map(|g| g[2])),
            fmt_float(row.efficiency[0]),
            fmt_float(row.efficiency[1]),
            fmt_float(row.efficiency[2]),
            fmt_float(row.entropy[0]),
            fmt_float(row.entropy[1]),
            fmt_float(row.entropy[2]),
        )?;
    }
    Ok(())
}

/// Columns: `t, cum_efficiency, windowed_efficiency, entropy`.
pub fn write_experiment_csv<W: Write>(mut w: W, run: &ExperimentTrajectory) -> Result<()> {
    writeln!(w, "t,cum_efficiency,windowed_efficiency,entropy")?;
    for r in &run.records {
        writeln!(
            w,
            "{},{},{},{}",
            r.time,
            fmt_float(r.cumulative_efficiency),
            fmt_float(r.windowed_efficiency),
            fmt_float(r.entropy),
        )?;
    }
    Ok(())
}

/// Columns: `t, strategy, eff_p25, eff_p50, eff_p75, ent_p25, ent_p50,
/// ent_p75` for every strategy in the sweep.
pub fn write_aggregate_csv<W: Write>(mut w: W, rows: &[AggregateRow]) -> Result<()> {
    writeln!(w, "t,strategy,eff_p25,eff_p50,eff_p75,ent_p25,ent_p50,ent_p75")?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            row.time,
            row.strategy.name(),
            fmt_float(row.efficiency[0]),
            fmt_float(row.efficiency[1]),
            fmt_float(row.efficiency[2]),
            fmt_float(row.entropy[0]),
            fmt_float(row.entropy[1]),
            fmt_float(row.entropy[2]),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn market_file_round_trips() {
        let cfg = MarketConfig::homogeneous(vec![1.0, 0.5], vec![0.8, 0.2], 0.5).unwrap();
        let file = MarketFile::from_config(&cfg);
        let json = serde_json::to_string(&file).unwrap();
        let parsed: MarketFile = serde_json::from_str(&json).unwrap();
        let back = parsed.into_config().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{
            "schema": "tomarket.market/1",
            "weights": [1.0],
            "visibility": [[1.0]],
            "quality": [[0.5]],
            "feedback": [0.5],
            "qualiity": [[0.5]]
        }"#;
        let err = serde_json::from_str::<MarketFile>(json).unwrap_err();
        assert!(err.to_string().contains("qualiity"));
    }

    #[test]
    fn missing_fields_name_the_key() {
        let json = r#"{
            "schema": "tomarket.market/1",
            "weights": [1.0],
            "visibility": [[1.0]],
            "quality": [[0.5]]
        }"#;
        let err = serde_json::from_str::<MarketFile>(json).unwrap_err();
        assert!(err.to_string().contains("feedback"));
    }

    #[test]
    fn run_file_parses_inline_and_path_markets() {
        let inline = r#"{
            "schema": "tomarket.run/1",
            "mode": "equilibrium",
            "market": {
                "schema": "tomarket.market/1",
                "weights": [1.0],
                "visibility": [[1.0, 1.0]],
                "quality": [[0.8, 0.2]],
                "feedback": [0.5]
            }
        }"#;
        let run: RunFile = serde_json::from_str(inline).unwrap();
        assert_eq!(run.mode, Mode::Equilibrium);
        assert!(matches!(run.market, Some(MarketSource::Inline(_))));

        let by_path = r#"{
            "schema": "tomarket.run/1",
            "mode": "stochastic",
            "market": "market.json",
            "seeds": [1, 2],
            "steps": 1000
        }"#;
        let run: RunFile = serde_json::from_str(by_path).unwrap();
        assert!(matches!(run.market, Some(MarketSource::Path(_))));
        assert_eq!(run.seeds, Some(vec![1, 2]));
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, 16.0 / 17.0, 1e-300, 123456.789] {
            let s = fmt_float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }

    #[test]
    fn trajectory_csv_shape() {
        let cfg = MarketConfig::homogeneous(vec![1.0, 1.0], vec![0.8, 0.2], 0.5).unwrap();
        let trajectory = crate::dynamics::run_deterministic(
            &cfg,
            &crate::dynamics::SpendingMatrix::uniform(&cfg),
            10,
            5,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &trajectory).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,phi_1,phi_2,efficiency,entropy,objective,residual"
        );
        assert_eq!(lines.count(), trajectory.records.len());
        let _ = std::io::sink().write(b"");
    }
}
