//! Config-driven sweeps with CSV output.
//!
//! A config file holds one or more `[[experiment]]` tables. Each experiment
//! fixes a model, a dataset and a training setup, and sweeps exactly one of
//! `epsilon`, `sigma` or `local_period`. Every sweep point is trained once per
//! repetition (seeds `seed, seed + 1, …`) and produces two tables:
//!
//! * `<name>_rounds.csv`: `sweep_value,seed,round,train_loss,grad_norm_sq,test_accuracy,epsilon_realized`
//! * `<name>_summary.csv`: the same metrics averaged over seeds per round,
//!   plus how many seeds contributed and how many diverged at that round.
//!
//! Relative paths in a config file are resolved against the file's directory.
//!
//! ```toml
//! output_dir = "results"
//!
//! [dataset]
//! source = "adult"
//! path = "../data/adult.csv"
//!
//! [[experiment]]
//! name = "logistic_tradeoff"
//! model = "logistic"
//!
//! [experiment.train]
//! local_period = 2
//! batch_size = 1220
//! stepsize = 4.0
//! clip_norm = 1.0
//!
//! [experiment.sweep]
//! axis = "epsilon"
//! values = [1, 2, 4, 8, 10]
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataSource, DatasetSpec, EncodedDataset};
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::orchestrator::{run_training, Mode, Noise, TrainConfig};

/// Column order of the per-round table.
pub const ROUND_COLUMNS: [&str; 7] =
    ["sweep_value", "seed", "round", "train_loss", "grad_norm_sq", "test_accuracy", "epsilon_realized"];

/// Column order of the seed-averaged table.
pub const SUMMARY_COLUMNS: [&str; 8] = [
    "sweep_value",
    "round",
    "seeds",
    "train_loss",
    "grad_norm_sq",
    "test_accuracy",
    "epsilon_realized",
    "diverged",
];

pub const DEFAULT_REPETITIONS: usize = 5;
pub const DEFAULT_DEVICES_PER_ROUND: usize = 10;
pub const DEFAULT_DELTA: f64 = 1e-4;

/// The quantity an experiment varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epsilon,
    Sigma,
    LocalPeriod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Sweep {
    /// `base` with the sweep value applied.
    pub fn apply(&self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut c = base.clone();
        match self.axis {
            SweepAxis::Epsilon => c.noise = Noise::Epsilon(value),
            SweepAxis::Sigma => c.noise = Noise::Sigma(value),
            SweepAxis::LocalPeriod => {
                if !(value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64) {
                    return Err(Error::Config(format!("local period sweep values must be positive integers, got {value}")));
                }
                c.local_period = value as usize;
            }
        }
        c.validate().map_err(|e| Error::Config(format!("sweep value {value}: {e}")))?;
        Ok(c)
    }
}

/// One fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    pub model: ModelKind,
    /// Training setup; the swept field is overwritten per sweep point and
    /// `seed` is the seed of the first repetition.
    pub train: TrainConfig,
    pub sweep: Sweep,
    pub repetitions: usize,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn rounds_path(&self) -> PathBuf {
        self.output_dir.join(format!("{}_rounds.csv", self.name))
    }

    pub fn summary_path(&self) -> PathBuf {
        self.output_dir.join(format!("{}_summary.csv", self.name))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config(format!("{}: repetitions must be at least 1", self.name)));
        }
        if self.sweep.values.is_empty() {
            return Err(Error::Config(format!("{}: sweep needs at least one value", self.name)));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("experiment name {:?} is not a valid file stem", self.name)));
        }
        for &v in &self.sweep.values {
            self.sweep.apply(&self.train, v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    output_dir: Option<PathBuf>,
    dataset: Option<DatasetSpec>,
    #[serde(default)]
    experiment: Vec<RawExperiment>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    name: String,
    #[serde(default = "default_model")]
    model: String,
    hidden: Option<usize>,
    repetitions: Option<usize>,
    dataset: Option<DatasetSpec>,
    train: RawTrain,
    sweep: Sweep,
}

fn default_model() -> String {
    "logistic".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    mode: Option<Mode>,
    rounds: Option<usize>,
    local_period: Option<usize>,
    devices_per_round: Option<usize>,
    stepsize: f64,
    batch_size: usize,
    clip_norm: Option<f64>,
    sigma: Option<f64>,
    epsilon: Option<f64>,
    delta: Option<f64>,
    seed: Option<u64>,
    frac_bits: Option<u32>,
    track_train_metrics: Option<bool>,
}

/// Parses a config file and resolves its relative paths.
pub fn load_config(path: impl AsRef<Path>) -> Result<Vec<ExperimentConfig>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

/// Parses config text, resolving relative paths against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<Vec<ExperimentConfig>> {
    let raw: RawFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    if raw.experiment.is_empty() {
        return Err(Error::Config("config defines no [[experiment]]".into()));
    }
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
    let output_dir = resolve(raw.output_dir.as_deref().unwrap_or(Path::new("results")));
    let mut names = std::collections::BTreeSet::new();
    raw.experiment
        .into_iter()
        .map(|e| {
            if !names.insert(e.name.clone()) {
                return Err(Error::Config(format!("duplicate experiment name {:?}", e.name)));
            }
            let mut dataset = e
                .dataset
                .or_else(|| raw.dataset.clone())
                .ok_or_else(|| Error::Config(format!("{}: no dataset given", e.name)))?;
            if let DataSource::Adult { path } = &mut dataset.source {
                *path = resolve(path);
            }
            let model = match (e.model.as_str(), e.hidden) {
                ("logistic", None) => ModelKind::Logistic,
                ("logistic", Some(_)) => {
                    return Err(Error::Config(format!("{}: logistic regression has no hidden width", e.name)))
                }
                ("mlp", h) => ModelKind::Mlp { hidden: h.unwrap_or(ModelKind::DEFAULT_HIDDEN) },
                (other, _) => return Err(Error::Config(format!("{}: unknown model {other:?}", e.name))),
            };
            let train = resolve_train(&e.name, model, e.train, e.sweep.axis)?;
            let cfg = ExperimentConfig {
                name: e.name,
                dataset,
                model,
                train,
                sweep: e.sweep,
                repetitions: e.repetitions.unwrap_or(DEFAULT_REPETITIONS),
                output_dir: output_dir.clone(),
            };
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

/// Fills in the defaults that depend on the model: logistic regression runs
/// 20 rounds of 10 local steps, the network 50 rounds of 5.
fn resolve_train(name: &str, model: ModelKind, t: RawTrain, axis: SweepAxis) -> Result<TrainConfig> {
    let (rounds, local_period) = match model {
        ModelKind::Logistic => (20, 10),
        ModelKind::Mlp { .. } => (50, 5),
    };
    let mode = t.mode.unwrap_or(Mode::PrivateSecure);
    let noise = match (t.sigma, t.epsilon, axis) {
        (Some(_), Some(_), _) => return Err(Error::Config(format!("{name}: give sigma or epsilon, not both"))),
        (_, _, SweepAxis::Epsilon) => Noise::Epsilon(t.epsilon.unwrap_or(1.0)),
        (_, _, SweepAxis::Sigma) => Noise::Sigma(t.sigma.unwrap_or(0.0)),
        (Some(s), None, _) => Noise::Sigma(s),
        (None, Some(e), _) => Noise::Epsilon(e),
        (None, None, _) if mode == Mode::FedAvg => Noise::Sigma(0.0),
        (None, None, _) => return Err(Error::Config(format!("{name}: private modes need sigma or epsilon"))),
    };
    let local_period = match mode {
        Mode::DpSgd => t.local_period.unwrap_or(1),
        _ => t.local_period.unwrap_or(local_period),
    };
    Ok(TrainConfig {
        mode,
        rounds: t.rounds.unwrap_or(rounds),
        local_period,
        devices_per_round: t.devices_per_round.unwrap_or(DEFAULT_DEVICES_PER_ROUND),
        stepsize: t.stepsize,
        batch_size: t.batch_size,
        clip_norm: t.clip_norm.unwrap_or(1.0),
        noise,
        delta: t.delta.unwrap_or(DEFAULT_DELTA),
        seed: t.seed.unwrap_or(0),
        frac_bits: t.frac_bits.unwrap_or(crate::secagg::FixedPointCodec::DEFAULT_FRAC_BITS),
        track_train_metrics: t.track_train_metrics.unwrap_or(true),
    })
}

/// One line of the per-round table.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub sweep_value: f64,
    pub seed: u64,
    pub round: usize,
    pub train_loss: f64,
    pub grad_norm_sq: f64,
    pub test_accuracy: f64,
    pub epsilon_realized: f64,
}

/// One line of the seed-averaged table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub sweep_value: f64,
    pub round: usize,
    /// Seeds that completed this round.
    pub seeds: usize,
    pub train_loss: f64,
    pub grad_norm_sq: f64,
    pub test_accuracy: f64,
    pub epsilon_realized: f64,
    /// Seeds whose run diverged in this round.
    pub diverged: usize,
}

/// A diverged repetition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub sweep_value: f64,
    pub seed: u64,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub rows: Vec<RoundRow>,
    pub summary: Vec<SummaryRow>,
    pub divergences: Vec<Divergence>,
    /// Noise std used per (sweep value, seed).
    pub sigmas: Vec<(f64, u64, f64)>,
}

/// Runs every sweep point and repetition on an already loaded dataset.
pub fn run_experiment_on(cfg: &ExperimentConfig, dataset: &EncodedDataset) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut report = ExperimentReport::default();
    for &value in &cfg.sweep.values {
        let point = cfg.sweep.apply(&cfg.train, value)?;
        let mut runs = Vec::with_capacity(cfg.repetitions);
        for rep in 0..cfg.repetitions as u64 {
            let seed = point.seed.wrapping_add(rep);
            let train = TrainConfig { seed, ..point.clone() };
            log::info!("{}: {:?} = {value}, seed {seed}", cfg.name, cfg.sweep.axis);
            let out = run_training(&train, cfg.model, dataset)?;
            report.sigmas.push((value, seed, out.sigma));
            if let Some(round) = out.diverged_at {
                report.divergences.push(Divergence { sweep_value: value, seed, round });
            }
            report.rows.extend(out.records.iter().map(|r| RoundRow {
                sweep_value: value,
                seed,
                round: r.round,
                train_loss: r.train_loss,
                grad_norm_sq: r.grad_norm_sq,
                test_accuracy: r.test_accuracy,
                epsilon_realized: r.epsilon,
            }));
            runs.push(out);
        }
        let last = runs.iter().map(|r| r.records.len() + usize::from(r.diverged_at.is_some())).max().unwrap_or(0);
        for round in 1..=last {
            let recs: Vec<_> = runs.iter().filter_map(|r| r.records.get(round - 1)).collect();
            let mean = |f: &dyn Fn(&crate::orchestrator::RoundRecord) -> f64| {
                if recs.is_empty() {
                    f64::NAN
                } else {
                    recs.iter().map(|r| f(r)).sum::<f64>() / recs.len() as f64
                }
            };
            report.summary.push(SummaryRow {
                sweep_value: value,
                round,
                seeds: recs.len(),
                train_loss: mean(&|r| r.train_loss),
                grad_norm_sq: mean(&|r| r.grad_norm_sq),
                test_accuracy: mean(&|r| r.test_accuracy),
                epsilon_realized: mean(&|r| r.epsilon),
                diverged: runs.iter().filter(|r| r.diverged_at == Some(round)).count(),
            });
        }
    }
    Ok(report)
}

/// Loads the dataset and runs the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let dataset = cfg.dataset.load()?;
    run_experiment_on(cfg, &dataset)
}

/// Shortest round-trip decimal, empty for `NaN`.
fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn write_rounds<W: Write>(rows: &[RoundRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROUND_COLUMNS)?;
    for r in rows {
        w.write_record([
            num(r.sweep_value),
            r.seed.to_string(),
            r.round.to_string(),
            num(r.train_loss),
            num(r.grad_norm_sq),
            num(r.test_accuracy),
            num(r.epsilon_realized),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_COLUMNS)?;
    for r in rows {
        w.write_record([
            num(r.sweep_value),
            r.round.to_string(),
            r.seeds.to_string(),
            num(r.train_loss),
            num(r.grad_norm_sq),
            num(r.test_accuracy),
            num(r.epsilon_realized),
            r.diverged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes both tables into the experiment's output directory.
pub fn write_report(cfg: &ExperimentConfig, report: &ExperimentReport) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_rounds(&report.rows, std::fs::File::create(cfg.rounds_path())?)?;
    write_summary(&report.summary, std::fs::File::create(cfg.summary_path())?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;

    const CONFIG: &str = r#"
output_dir = "out"

[dataset]
source = "synthetic"
features = 3
separability = 4.0
devices = 4
per_device = 40

[[experiment]]
name = "toy"
repetitions = 2

[experiment.train]
rounds = 3
local_period = 4
devices_per_round = 2
stepsize = 0.2
batch_size = 8

[experiment.sweep]
axis = "epsilon"
values = [1.0, 4.0]
"#;

    fn toy_config() -> ExperimentConfig {
        parse_config(CONFIG, Path::new("/base")).unwrap().remove(0)
    }

    #[test]
    fn defaults_follow_model_family() {
        let cfg = toy_config();
        assert_eq!(cfg.output_dir, Path::new("/base/out"));
        assert_eq!(cfg.train.mode, Mode::PrivateSecure);
        assert_eq!(cfg.train.delta, 1e-4);
        assert_eq!(cfg.train.devices_per_round, 2);
        assert_eq!(cfg.model, ModelKind::Logistic);

        let mlp = CONFIG.replace("repetitions = 2", "model = \"mlp\"").replace("rounds = 3\nlocal_period = 4\n", "");
        let cfg = parse_config(&mlp, Path::new(".")).unwrap().remove(0);
        assert_eq!((cfg.train.rounds, cfg.train.local_period, cfg.repetitions), (50, 5, 5));
        assert_eq!(cfg.model, ModelKind::Mlp { hidden: 64 });
    }

    #[test]
    fn config_errors_are_reported() {
        for bad in [
            CONFIG.replace("axis = \"epsilon\"", "axis = \"stepsize\""),
            CONFIG.replace("repetitions = 2", "repetitions = 0"),
            CONFIG.replace("stepsize = 0.2", ""),
            CONFIG.replace("values = [1.0, 4.0]", "values = []"),
            CONFIG.replace("rounds = 3", "rounds = 3\nbogus = 1"),
            CONFIG.replace("[experiment.sweep]\naxis = \"epsilon\"", "[experiment.sweep]\naxis = \"local_period\"")
                .replace("[1.0, 4.0]", "[1.5]"),
            "output_dir = \"x\"".to_string(),
        ] {
            assert!(matches!(parse_config(&bad, Path::new(".")), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn summary_is_the_seed_mean() {
        let cfg = toy_config();
        let ds = synthetic(4, 40, 3, 4.0, 0).unwrap();
        let report = run_experiment_on(&cfg, &ds).unwrap();
        assert_eq!(report.rows.len(), 2 * 2 * 3);
        assert_eq!(report.summary.len(), 2 * 3);
        for s in &report.summary {
            let rows: Vec<_> =
                report.rows.iter().filter(|r| r.sweep_value == s.sweep_value && r.round == s.round).collect();
            assert_eq!(rows.len(), 2);
            assert_eq!(s.test_accuracy, (rows[0].test_accuracy + rows[1].test_accuracy) / 2.0);
            assert_eq!(s.train_loss, (rows[0].train_loss + rows[1].train_loss) / 2.0);
        }
        let final_eps: Vec<f64> = report.summary.iter().filter(|s| s.round == 3).map(|s| s.epsilon_realized).collect();
        assert!((final_eps[0] - 1.0).abs() < 1e-9 && (final_eps[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn zero_rounds_writes_headers_only() {
        let mut cfg = toy_config();
        cfg.repetitions = 1;
        cfg.train.rounds = 0;
        let ds = synthetic(4, 40, 3, 4.0, 0).unwrap();
        let report = run_experiment_on(&cfg, &ds).unwrap();
        let mut rounds = Vec::new();
        let mut summary = Vec::new();
        write_rounds(&report.rows, &mut rounds).unwrap();
        write_summary(&report.summary, &mut summary).unwrap();
        assert_eq!(String::from_utf8(rounds).unwrap().trim_end(), ROUND_COLUMNS.join(","));
        assert_eq!(String::from_utf8(summary).unwrap().trim_end(), SUMMARY_COLUMNS.join(","));
    }

    #[test]
    fn divergence_is_recorded() {
        let mut cfg = toy_config();
        cfg.train.mode = Mode::FedAvg;
        cfg.train.noise = Noise::Sigma(0.0);
        cfg.model = ModelKind::Mlp { hidden: 4 };
        cfg.train.stepsize = 1e308;
        cfg.sweep = Sweep { axis: SweepAxis::Sigma, values: vec![0.0] };
        let ds = synthetic(4, 40, 3, 4.0, 0).unwrap();
        let report = run_experiment_on(&cfg, &ds).unwrap();
        assert_eq!(report.divergences.len(), 2);
        let total: usize = report.summary.iter().map(|s| s.diverged).sum();
        assert_eq!(total, 2);
    }
}
